"""Fine-tuning recipe for a single run and the full experiment matrix.

A run is one (architecture, resolution, optimiser, repeat) cell: 15 epochs of
cross-entropy fine-tuning over the dihedral-8 augmented training set, with the
head learning rate 10x the backbone rate and both dropped 10x after epochs 5
and 10. The matrix runner executes cells independently, records each one in a
JSON registry next to its checkpoint, and resumes completed cells on re-runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dihedral
from .catalog import LABEL_INDEX, DatasetManifest
from .errors import ConfigError, MissingArtifactError, PipelineError
from .models import BackboneSpec, WeightStore, build_model, trainable_parameter_report
from .preprocess import SUPPORTED_RESOLUTIONS, TensorCache

log = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("sgdm", "rmsprop", "adam")

DEFAULT_BASE_LR = {"sgdm": 0.001, "rmsprop": 0.0001, "adam": 0.0001}

#: runs at these resolutions feed the final three-level ensemble
ENSEMBLE_MIN_RESOLUTION = 128


def default_batch_size(resolution: int) -> int:
    # Sized for an 8 GB device: 32 up to 224 px, 16 at 448/768 px.
    return 32 if resolution <= 224 else 16


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    base_lr: float | None = None
    momentum: float = 0.9
    head_lr_multiplier: float = 10.0

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimiser {self.kind!r}, expected one of {OPTIMIZER_KINDS}")
        if self.base_lr is None:
            object.__setattr__(self, "base_lr", DEFAULT_BASE_LR[kind])
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneSpec
    resolution: int
    optimizer: OptimizerSpec
    repeat_index: int
    epochs: int = 15
    lr_drop_epochs: tuple[int, ...] = (5, 10)
    lr_drop_factor: float = 10.0
    batch_size: int | None = None
    head_init_std: float = 1.0
    freeze_blocks: int | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(
                f"resolution {self.resolution} not in supported set {SUPPORTED_RESOLUTIONS}")
        if self.repeat_index not in (1, 2, 3):
            raise ConfigError(f"repeat_index must be 1, 2 or 3, got {self.repeat_index}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        drops = tuple(sorted(set(int(e) for e in self.lr_drop_epochs)))
        object.__setattr__(self, "lr_drop_epochs", drops)
        if any(not 1 <= e <= self.epochs for e in drops):
            raise ConfigError(
                f"lr_drop_epochs {drops} must lie within [1, {self.epochs}]")
        if self.lr_drop_factor <= 0:
            raise ConfigError(f"lr_drop_factor must be positive, got {self.lr_drop_factor}")
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", default_batch_size(self.resolution))
        if not 16 <= self.batch_size <= 64:
            raise ConfigError(f"batch_size must lie in [16, 64], got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    @property
    def run_id(self) -> str:
        return (f"{self.backbone.architecture}_r{self.resolution}"
                f"_{self.optimizer.kind}_rep{self.repeat_index}")

    def to_dict(self) -> dict:
        return {
            "backbone": {"architecture": self.backbone.architecture,
                         "pretrained": self.backbone.pretrained},
            "resolution": self.resolution,
            "optimizer": {"kind": self.optimizer.kind,
                          "base_lr": self.optimizer.base_lr,
                          "momentum": self.optimizer.momentum,
                          "head_lr_multiplier": self.optimizer.head_lr_multiplier},
            "repeat_index": self.repeat_index,
            "epochs": self.epochs,
            "lr_drop_epochs": list(self.lr_drop_epochs),
            "lr_drop_factor": self.lr_drop_factor,
            "batch_size": self.batch_size,
            "head_init_std": self.head_init_std,
            "freeze_blocks": self.freeze_blocks,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(
            backbone=BackboneSpec(**data["backbone"]),
            resolution=data["resolution"],
            optimizer=OptimizerSpec(**data["optimizer"]),
            repeat_index=data["repeat_index"],
            epochs=data["epochs"],
            lr_drop_epochs=tuple(data["lr_drop_epochs"]),
            lr_drop_factor=data["lr_drop_factor"],
            batch_size=data["batch_size"],
            head_init_std=data["head_init_std"],
            freeze_blocks=data["freeze_blocks"],
            weight_decay=data["weight_decay"],
            seed=data["seed"],
        )

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    run_id: str
    checkpoint_path: Path | None
    epoch_losses: list[float]
    completed: bool
    seed: int
    failure: str | None = None
    resumed: bool = False


def lr_at_epoch(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """(backbone_lr, head_lr) for a 1-based epoch. Each configured drop takes
    effect at the start of the following epoch, so the default schedule gives
    three 5-epoch plateaus; the head rate is always 10x the backbone rate."""
    if not isinstance(epoch, int) or isinstance(epoch, bool):
        raise ValueError(f"epoch must be an integer, got {epoch!r}")
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {config.epochs}]")
    drops = sum(1 for d in config.lr_drop_epochs if epoch > d)
    backbone_lr = config.optimizer.base_lr / (config.lr_drop_factor ** drops)
    return backbone_lr, backbone_lr * config.optimizer.head_lr_multiplier


def derive_seed(base_seed: int, run_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{run_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def build_plan(architectures, resolutions, optimizers, repeats: int, *,
               epochs: int = 15, lr_drop_epochs=(5, 10), lr_drop_factor: float = 10.0,
               batch_size: int | None = None, head_init_std: float = 1.0,
               freeze_blocks: int | None = None, weight_decay: float = 0.0,
               base_lrs: dict | None = None, pretrained: bool = False,
               base_seed: int = 1234) -> list[TrainConfig]:
    """Cartesian product of the matrix axes, one TrainConfig per cell, with a
    distinct recorded seed per cell."""
    if not 1 <= repeats <= 3:
        raise ConfigError(f"repeats must lie in [1, 3], got {repeats}")
    plan = []
    for arch in architectures:
        for resolution in resolutions:
            for kind in optimizers:
                base_lr = (base_lrs or {}).get(kind)
                for rep in range(1, repeats + 1):
                    cfg = TrainConfig(
                        backbone=BackboneSpec(arch, pretrained=pretrained),
                        resolution=resolution,
                        optimizer=OptimizerSpec(kind, base_lr=base_lr),
                        repeat_index=rep,
                        epochs=epochs,
                        lr_drop_epochs=tuple(lr_drop_epochs),
                        lr_drop_factor=lr_drop_factor,
                        batch_size=batch_size,
                        head_init_std=head_init_std,
                        freeze_blocks=freeze_blocks,
                        weight_decay=weight_decay,
                    )
                    plan.append(_with_seed(cfg, derive_seed(base_seed, cfg.run_id)))
    return plan


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    data = config.to_dict()
    data["seed"] = seed
    return TrainConfig.from_dict(data)


def ensemble_configs(plan) -> list[TrainConfig]:
    """The subset of cells whose predictions feed the final ensemble
    (64 px runs are trained and reported but excluded from fusion)."""
    return [c for c in plan if c.resolution >= ENSEMBLE_MIN_RESOLUTION]


def _make_optimizer(spec: OptimizerSpec, param_groups, weight_decay: float):
    if spec.kind == "sgdm":
        return torch.optim.SGD(param_groups, momentum=spec.momentum,
                               weight_decay=weight_decay)
    if spec.kind == "rmsprop":
        return torch.optim.RMSprop(param_groups, weight_decay=weight_decay)
    return torch.optim.Adam(param_groups, weight_decay=weight_decay)


def run_dir(runs_dir: str | Path, run_id: str) -> Path:
    return Path(runs_dir) / run_id


def _checkpoint_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_registry(runs_dir: Path, config: TrainConfig, result: RunResult) -> None:
    entry_dir = run_dir(runs_dir, config.run_id)
    entry_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "run_id": config.run_id,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": result.seed,
        "epoch_losses": result.epoch_losses,
        "completed": result.completed,
        "failure": result.failure,
        "checkpoint": result.checkpoint_path.name if result.checkpoint_path else None,
        "checkpoint_sha256": (_checkpoint_sha256(result.checkpoint_path)
                              if result.checkpoint_path else None),
    }
    tmp = entry_dir / "run.json.tmp"
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    tmp.replace(entry_dir / "run.json")


def load_registry_entry(runs_dir: str | Path, run_id: str) -> dict | None:
    path = run_dir(runs_dir, run_id) / "run.json"
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def _result_from_registry(runs_dir: Path, entry: dict) -> RunResult:
    ckpt = entry.get("checkpoint")
    return RunResult(
        run_id=entry["run_id"],
        checkpoint_path=run_dir(runs_dir, entry["run_id"]) / ckpt if ckpt else None,
        epoch_losses=list(entry.get("epoch_losses", [])),
        completed=bool(entry.get("completed")),
        seed=int(entry.get("seed", 0)),
        failure=entry.get("failure"),
        resumed=True,
    )


def _train_examples(manifest: DatasetManifest) -> list[tuple[str, int]]:
    return sorted((rec.image_id, LABEL_INDEX[rec.label])
                  for rec in manifest.split_records("train"))


def train_run(config: TrainConfig, manifest: DatasetManifest,
              cache_root: str | Path, runs_dir: str | Path, *,
              weight_store: WeightStore | None = None) -> RunResult:
    """Train one matrix cell and persist checkpoint + registry entry.

    Raises MissingArtifactError when the tensor cache for this resolution is
    incomplete. Numeric divergence (non-finite loss) does not raise: the run
    is marked failed so a surrounding matrix can continue.
    """
    if not manifest.split_records("train"):
        raise MissingArtifactError("training split is empty")
    return _train_from_examples(config, _train_examples(manifest),
                                cache_root, runs_dir, weight_store)


def _train_from_examples(config: TrainConfig, examples: list[tuple[str, int]],
                         cache_root: str | Path, runs_dir: str | Path,
                         weight_store: WeightStore | None) -> RunResult:
    cache = TensorCache(cache_root, config.resolution)
    missing = cache.missing_ids([image_id for image_id, _ in examples])
    if missing:
        preview = ", ".join(missing[:3])
        raise MissingArtifactError(
            f"{config.run_id}: preprocessed cache at {config.resolution} px is missing "
            f"{len(missing)} entries (e.g. {preview}); run the preprocess stage first")

    torch.manual_seed(config.seed)
    model = build_model(config.backbone, head_init_std=config.head_init_std,
                        freeze_blocks=config.freeze_blocks, weight_store=weight_store)
    partition = trainable_parameter_report(model)
    named = dict(model.named_parameters())
    base_lr = config.optimizer.base_lr
    groups = [
        {"params": [named[n] for n in partition.backbone_trainable], "lr": base_lr},
        {"params": [named[n] for n in partition.head],
         "lr": base_lr * config.optimizer.head_lr_multiplier},
    ]
    optimizer = _make_optimizer(config.optimizer, groups, config.weight_decay)
    loss_fn = nn.CrossEntropyLoss()

    # The augmented training set: every (image, dihedral element) pair once
    # per epoch, freshly shuffled. Augmentation happens on the fly.
    pairs = [(image_id, label, k)
             for image_id, label in examples for k in range(len(dihedral.ELEMENTS))]
    rng = np.random.default_rng(config.seed)

    epoch_losses: list[float] = []
    failure: str | None = None
    for epoch in range(1, config.epochs + 1):
        backbone_lr, head_lr = lr_at_epoch(config, epoch)
        optimizer.param_groups[0]["lr"] = backbone_lr
        optimizer.param_groups[1]["lr"] = head_lr
        model.train()
        order = rng.permutation(len(pairs))
        batch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            x = np.stack([dihedral.apply(dihedral.ELEMENTS[k], cache.read(image_id))
                          for image_id, _, k in batch])
            y = torch.tensor([label for _, label, _ in batch], dtype=torch.long)
            logits = model(torch.from_numpy(x))
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                failure = f"non-finite loss in epoch {epoch}"
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        if failure is not None:
            break
        epoch_losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        log.info("%s epoch %d/%d: loss %.4f lr %.2g/%.2g", config.run_id, epoch,
                 config.epochs, epoch_losses[-1], backbone_lr, head_lr)

    completed = failure is None
    checkpoint_path: Path | None = None
    if completed:
        entry_dir = run_dir(runs_dir, config.run_id)
        entry_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = entry_dir / "checkpoint.pt"
        tmp = entry_dir / "checkpoint.pt.tmp"
        torch.save(model.state_dict(), tmp)
        tmp.replace(checkpoint_path)
        checkpoint_path.with_suffix(".pt.sha256").write_text(
            _checkpoint_sha256(checkpoint_path) + "\n")

    result = RunResult(run_id=config.run_id, checkpoint_path=checkpoint_path,
                       epoch_losses=epoch_losses, completed=completed,
                       seed=config.seed, failure=failure)
    _write_registry(Path(runs_dir), config, result)
    return result


def load_checkpoint(config: TrainConfig, runs_dir: str | Path,
                    weight_store: WeightStore | None = None):
    """Rebuild the model for a completed run from its checkpoint."""
    entry = load_registry_entry(runs_dir, config.run_id)
    if entry is None or not entry.get("completed") or not entry.get("checkpoint"):
        raise MissingArtifactError(
            f"{config.run_id}: no completed run in registry at {runs_dir}")
    path = run_dir(runs_dir, config.run_id) / entry["checkpoint"]
    if not path.is_file():
        raise MissingArtifactError(f"{config.run_id}: checkpoint missing at {path}")
    model = build_model(config.backbone, head_init_std=config.head_init_std,
                        freeze_blocks=config.freeze_blocks, weight_store=None)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model


class _CellLock:
    """Per-cell lock file preventing two matrix invocations from training the
    same cell concurrently."""

    def __init__(self, runs_dir: Path, run_id: str):
        entry_dir = run_dir(runs_dir, run_id)
        entry_dir.mkdir(parents=True, exist_ok=True)
        self.path = entry_dir / ".lock"
        self.acquired = False

    def acquire(self) -> bool:
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.acquired = True
        return True

    def release(self) -> None:
        if self.acquired:
            try:
                self.path.unlink()
            except OSError:
                pass
            self.acquired = False


def _execute_cell(config: TrainConfig, examples, cache_root, runs_dir,
                  store_root, allow_download: bool) -> RunResult:
    lock = _CellLock(Path(runs_dir), config.run_id)
    if not lock.acquire():
        return RunResult(run_id=config.run_id, checkpoint_path=None, epoch_losses=[],
                         completed=False, seed=config.seed,
                         failure=f"cell locked by another worker ({lock.path})")
    try:
        store = None
        if config.backbone.pretrained:
            store = WeightStore(store_root, allow_download=allow_download)
        return _train_from_examples(config, examples, cache_root, runs_dir, store)
    except PipelineError as err:
        return RunResult(run_id=config.run_id, checkpoint_path=None, epoch_losses=[],
                         completed=False, seed=config.seed, failure=str(err))
    finally:
        lock.release()


def _pool_worker(payload) -> RunResult:
    config_dict, examples, cache_root, runs_dir, store_root, allow_download = payload
    torch.set_num_threads(1)
    return _execute_cell(TrainConfig.from_dict(config_dict), examples, cache_root,
                         runs_dir, store_root, allow_download)


def run_matrix(plan: list[TrainConfig], manifest: DatasetManifest,
               cache_root: str | Path, runs_dir: str | Path, *,
               workers: int = 1, weight_store_root: str | Path | None = None,
               allow_download: bool = False, resume: bool = True) -> list[RunResult]:
    """Execute (or resume) every cell of the plan; never aborts wholesale.

    Completed registry entries with a matching config hash are returned as
    resumed results; everything else is (re)trained. Individual cell failures
    are recorded in their RunResult and the matrix moves on.
    """
    seen: set[str] = set()
    for config in plan:
        if config.run_id in seen:
            raise ConfigError(f"duplicate run_id in plan: {config.run_id}")
        seen.add(config.run_id)

    examples = _train_examples(manifest)
    runs_dir = Path(runs_dir)
    results: dict[str, RunResult] = {}
    pending: list[TrainConfig] = []
    for config in plan:
        entry = load_registry_entry(runs_dir, config.run_id) if resume else None
        if entry and entry.get("completed") and entry.get("config_hash") == config.config_hash():
            results[config.run_id] = _result_from_registry(runs_dir, entry)
        else:
            pending.append(config)

    if workers <= 1:
        for config in pending:
            results[config.run_id] = _execute_cell(
                config, examples, cache_root, runs_dir, weight_store_root, allow_download)
    else:
        payloads = [(c.to_dict(), examples, str(cache_root), str(runs_dir),
                     str(weight_store_root) if weight_store_root else None,
                     allow_download) for c in pending]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_pool_worker, payloads):
                results[result.run_id] = result

    return [results[c.run_id] for c in plan]
