"""Command-line entry point: ingest -> preprocess -> train -> predict ->
fuse -> evaluate -> report, plus ``all`` for the whole chain.

Every stage is idempotent: completed work is detected (config hashes,
checkpoint checksums, child-table digests) and skipped, so re-running a
finished stage writes nothing but log lines. Exit codes: 0 ok, 2 config
error, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import fusion
from .catalog import load_manifest, verify_dataset
from .config import PipelineConfig, load_config
from .errors import (EXIT_MISSING_PREREQUISITE, EXIT_OK, EXIT_RUNTIME,
                     MissingArtifactError, PipelineError)
from .evaluation import (comparison_report, evaluate_table, exemplar_lists,
                         render_comparison, render_summary, roc_plot_svg)
from .prediction import predict_dataset, predict_run_payloads, run_predict_payload
from .preprocess import TensorCache, materialize_cache
from .tables import PredictionStore
from .training import (TrainConfig, load_checkpoint, load_registry_entry,
                       run_matrix)

log = logging.getLogger(__name__)


def _write_if_changed(path: Path, text: str) -> bool:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    if path.is_file() and path.read_bytes() == data:
        return False
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return True


def _node_report_path(cfg: PipelineConfig, node_id: str) -> Path:
    return cfg.paths.reports_dir / "nodes" / f"{node_id}.json"


# --- stages -----------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    if args.dry_run:
        print(f"would ingest {cfg.paths.manifest} and write "
              f"{cfg.paths.reports_dir / 'validation.json'}")
        return EXIT_OK
    manifest = load_manifest(cfg.paths.manifest)
    counts = manifest.class_counts
    print(f"manifest: {len(manifest)} records; train {counts['train']}, "
          f"test {counts['test']}")
    report = verify_dataset(manifest)
    _write_if_changed(cfg.paths.reports_dir / "validation.json",
                      json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if not report.ok:
        raise PipelineError(
            f"dataset validation failed: {len(report.unreadable)} unreadable, "
            f"{len(report.wrong_channels)} wrong channels, "
            f"{len(report.size_mismatch)} size mismatches "
            f"(see {cfg.paths.reports_dir / 'validation.json'})")
    print("validation: ok")
    return EXIT_OK


def cmd_preprocess(cfg: PipelineConfig, args) -> int:
    if args.dry_run:
        for res in cfg.matrix.resolutions:
            print(f"would materialize cache at {cfg.paths.cache_root / str(res)} "
                  f"(config hash {cfg.preprocess_config(res).config_hash()})")
        return EXIT_OK
    manifest = load_manifest(cfg.paths.manifest)
    for res in cfg.matrix.resolutions:
        result = materialize_cache(manifest, cfg.preprocess_config(res),
                                   cfg.paths.cache_root)
        print(f"cache {res}px: wrote {result.written}, skipped {result.skipped}")
    return EXIT_OK


def _check_caches(cfg: PipelineConfig, manifest, splits) -> None:
    for res in cfg.matrix.resolutions:
        cache = TensorCache(cfg.paths.cache_root, res)
        chash = cfg.preprocess_config(res).config_hash()
        ids = [rec.image_id for split in splits for rec in manifest.split_records(split)]
        missing = cache.missing_ids(ids, chash)
        if missing:
            raise MissingArtifactError(
                f"cache at {res} px missing {len(missing)} entries; "
                f"run the preprocess stage first")


def cmd_train(cfg: PipelineConfig, args) -> int:
    plan = cfg.plan()
    if args.dry_run:
        print(f"plan: {len(plan)} cells")
        for c in plan:
            print(f"  {c.run_id}: epochs={c.epochs} batch={c.batch_size} "
                  f"seed={c.seed} -> {cfg.paths.runs_dir / c.run_id}")
        return EXIT_OK
    manifest = load_manifest(cfg.paths.manifest)
    _check_caches(cfg, manifest, splits=("train",))
    results = run_matrix(
        plan, manifest, cfg.paths.cache_root, cfg.paths.runs_dir,
        workers=args.workers,
        weight_store_root=cfg.paths.weight_store,
        resume=True)
    failed = []
    for res in results:
        if res.resumed:
            print(f"run {res.run_id}: resumed (completed)")
        elif res.completed:
            final = f"{res.epoch_losses[-1]:.4f}" if res.epoch_losses else "n/a"
            print(f"run {res.run_id}: completed, final loss {final}")
        else:
            failed.append(res.run_id)
            print(f"run {res.run_id}: FAILED ({res.failure})")
    if failed:
        raise PipelineError(f"{len(failed)} run(s) failed: {', '.join(failed)}")
    return EXIT_OK


def _prediction_meta_path(store: PredictionStore, source_id: str) -> Path:
    return store.path_for(source_id).with_suffix(".meta.json")


def _registry_checkpoint_sha(cfg: PipelineConfig, config: TrainConfig) -> str:
    entry = load_registry_entry(cfg.paths.runs_dir, config.run_id)
    if entry is None or not entry.get("completed"):
        raise MissingArtifactError(
            f"{config.run_id}: not trained; run the train stage first")
    sha = entry.get("checkpoint_sha256")
    if not sha:
        raise MissingArtifactError(f"{config.run_id}: registry has no checkpoint")
    return sha


def cmd_predict(cfg: PipelineConfig, args) -> int:
    plan = cfg.plan()
    store = PredictionStore(cfg.paths.preds_dir)
    if args.dry_run:
        for c in plan:
            print(f"would predict {c.run_id} -> {store.path_for(c.run_id)}")
        return EXIT_OK
    manifest = load_manifest(cfg.paths.manifest)
    _check_caches(cfg, manifest, splits=("test",))

    pending: list[TrainConfig] = []
    for c in plan:
        sha = _registry_checkpoint_sha(cfg, c)
        meta_path = _prediction_meta_path(store, c.run_id)
        if store.exists(c.run_id) and meta_path.is_file():
            try:
                meta = json.loads(meta_path.read_text())
            except json.JSONDecodeError:
                meta = {}
            if meta.get("checkpoint_sha256") == sha:
                print(f"predictions {c.run_id}: skipped (up to date)")
                continue
        pending.append(c)

    if args.workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        payloads = predict_run_payloads(pending, cfg.paths.runs_dir,
                                        cfg.paths.manifest, cfg.paths.cache_root,
                                        cfg.paths.preds_dir)
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for run_id, nrows in pool.map(run_predict_payload, payloads):
                print(f"predictions {run_id}: {nrows} rows")
    else:
        for c in pending:
            model = load_checkpoint(c, cfg.paths.runs_dir)
            table = predict_dataset(model, manifest, c.resolution,
                                    cfg.paths.cache_root, source_id=c.run_id,
                                    store=store)
            print(f"predictions {c.run_id}: {len(table)} rows")

    for c in pending:
        sha = _registry_checkpoint_sha(cfg, c)
        _write_if_changed(_prediction_meta_path(store, c.run_id),
                          json.dumps({"checkpoint_sha256": sha}, sort_keys=True) + "\n")
    return EXIT_OK


def _children_digest(store: PredictionStore, children) -> str:
    digest = hashlib.sha256()
    for child in children:
        digest.update(store.path_for(child).read_bytes())
    return digest.hexdigest()


def _fuse_node(node: fusion.FusionNode, store: PredictionStore, cfg: PipelineConfig) -> bool:
    """Execute one fusion node unless its output already matches its inputs.
    Returns True when the node was recomputed."""
    missing = store.missing(node.children)
    if missing:
        raise MissingArtifactError(
            f"{node.node_id}: missing child tables ({', '.join(missing[:6])}); "
            f"run the predict/fuse stages first")
    digest = _children_digest(store, node.children)
    meta_path = _prediction_meta_path(store, node.node_id)
    if store.exists(node.node_id) and meta_path.is_file():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            meta = {}
        if meta.get("children_sha256") == digest:
            return False
    axes = cfg.matrix
    if node.level == "L1":
        arch, res = node.node_id.split("/")[1], int(node.node_id.split("/")[2])
        fusion.fuse_level1(arch, res, store, optimizers=axes.optimizers,
                           repeats=axes.repeats)
    elif node.level == "L2":
        arch = node.node_id.split("/")[1]
        ensemble = tuple(r for r in axes.resolutions if r in fusion.ENSEMBLE_RESOLUTIONS)
        fusion.fuse_level2(arch, store, resolutions=ensemble)
    elif node.level == "L3":
        fusion.fuse_level3(store, architectures=axes.architectures)
    else:
        res = int(node.node_id.split("/")[1])
        fusion.fuse_single_resolution(res, store, architectures=axes.architectures)
    _write_if_changed(meta_path,
                      json.dumps({"children_sha256": digest}, sort_keys=True) + "\n")
    return True


def _plan_tree(cfg: PipelineConfig) -> list[fusion.FusionNode]:
    axes = cfg.matrix
    return fusion.fusion_tree(axes.architectures, axes.resolutions,
                              axes.optimizers, axes.repeats)


def cmd_fuse(cfg: PipelineConfig, args) -> int:
    tree = _plan_tree(cfg)
    level = getattr(args, "level", "all")
    wanted = {"1": ("L1",), "2": ("L1", "L2"), "3": ("L1", "L2", "L3"),
              "single": ("L1", "single_res"),
              "all": ("L1", "L2", "L3", "single_res")}[level]
    nodes = [n for n in tree if n.level in wanted]
    store = PredictionStore(cfg.paths.preds_dir)
    if args.dry_run:
        for n in nodes:
            print(f"would fuse {n.node_id} <- {len(n.children)} children "
                  f"-> {store.path_for(n.node_id)}")
        return EXIT_OK
    for n in nodes:
        recomputed = _fuse_node(n, store, cfg)
        print(f"fused {n.node_id}: {'recomputed' if recomputed else 'skipped (up to date)'}")
    _write_if_changed(cfg.paths.preds_dir / "fusion_manifest.json",
                      json.dumps({"nodes": [
                          {"node_id": n.node_id, "level": n.level,
                           "children": list(n.children)} for n in tree
                      ]}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    tree = _plan_tree(cfg)
    store = PredictionStore(cfg.paths.preds_dir)
    if args.dry_run:
        for n in tree:
            print(f"would evaluate {n.node_id} -> {_node_report_path(cfg, n.node_id)}")
        return EXIT_OK
    manifest = load_manifest(cfg.paths.manifest)
    missing = store.missing([n.node_id for n in tree])
    if missing:
        raise MissingArtifactError(
            f"missing fused tables ({', '.join(missing[:6])}); run the fuse stage first")
    reports = []
    for n in tree:
        report = evaluate_table(store.load(n.node_id), manifest)
        reports.append(report)
        _write_if_changed(_node_report_path(cfg, n.node_id),
                          json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = render_summary(reports)
    _write_if_changed(cfg.paths.reports_dir / "summary.txt", summary)
    print(summary, end="")
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, args) -> int:
    node_id = cfg.report_node
    store = PredictionStore(cfg.paths.preds_dir)
    reports_dir = cfg.paths.reports_dir
    comparison_path = reports_dir / "comparison.txt"
    roc_path = reports_dir / "roc_final.svg"
    exemplars_path = reports_dir / "exemplars.json"
    if args.dry_run:
        print(f"would report on {node_id} -> {comparison_path}, {roc_path}, "
              f"{exemplars_path}")
        return EXIT_OK
    if not store.exists(node_id):
        raise MissingArtifactError(
            f"no fused table for {node_id}; run the fuse stage first")
    manifest = load_manifest(cfg.paths.manifest)
    table = store.load(node_id)
    report = evaluate_table(table, manifest)
    comparison = render_comparison(comparison_report(report))
    _write_if_changed(comparison_path, comparison)
    _write_if_changed(roc_path, roc_plot_svg(report))
    exemplars = exemplar_lists(table, manifest)
    _write_if_changed(exemplars_path, json.dumps(
        {task: {"correct": ex.correct, "incorrect": ex.incorrect}
         for task, ex in sorted(exemplars.items())},
        indent=2, sort_keys=True) + "\n")
    _write_if_changed(reports_dir / "final_report.json",
                      json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(comparison, end="")
    print(f"wrote {comparison_path}, {roc_path}, {exemplars_path}")
    return EXIT_OK


def cmd_all(cfg: PipelineConfig, args) -> int:
    for stage in (cmd_ingest, cmd_preprocess, cmd_train, cmd_predict,
                  cmd_fuse, cmd_evaluate, cmd_report):
        code = stage(cfg, args)
        if code != EXIT_OK:
            return code
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionfuse",
        description="multi-resolution ensemble pipeline for skin-lesion classification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline TOML config")
        p.add_argument("--plan", default=None,
                       help="TOML file whose [matrix] section overrides the config's")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel worker processes for train/predict")
        p.add_argument("--dry-run", action="store_true",
                       help="print the plan without touching disk")
        p.add_argument("--resume", action="store_true", default=True,
                       help="resume completed work from registries (default)")
        if name == "fuse":
            p.add_argument("--level", choices=("1", "2", "3", "single", "all"),
                           default="all")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.plan)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as err:
        print(f"error[missing-prerequisite] {args.command}: {err}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except PipelineError as err:
        print(f"error[{err.code}] {args.command}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error[io] {args.command}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
