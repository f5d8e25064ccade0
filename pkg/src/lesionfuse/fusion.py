"""Three-level ensemble fusion of prediction tables, plus single-resolution
cross-network fusion. Every level is the unweighted arithmetic mean of its
children's probability vectors.

Level 1 averages the (optimiser x repeat) runs of one network at one
resolution; level 2 averages a network's level-1 nodes across resolutions
(64 px is always excluded); level 3 averages the level-2 nodes across
networks. On the full-scale plan the final node therefore aggregates
3 x 4 x 9 = 108 runs. Children are summed in sorted source-id order with
compensated summation so fused bytes are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FusionError, MissingArtifactError
from .models import ARCHITECTURES
from .tables import PredictionStore, PredictionTable

#: resolutions admitted to level-2 fusion (the paper-scale ensemble set)
ENSEMBLE_RESOLUTIONS = (128, 224, 448, 768)

DEFAULT_OPTIMIZERS = ("sgdm", "rmsprop", "adam")
DEFAULT_REPEATS = 3

LEVEL3_ID = "L3/final"

LEVELS = ("L1", "L2", "L3", "single_res")


def run_source_id(architecture: str, resolution: int, optimizer: str, repeat: int) -> str:
    return f"{architecture}_r{resolution}_{optimizer}_rep{repeat}"


def level1_id(architecture: str, resolution: int) -> str:
    return f"L1/{architecture}/{resolution}"


def level2_id(architecture: str) -> str:
    return f"L2/{architecture}"


def single_resolution_id(resolution: int) -> str:
    return f"single_res/{resolution}"


@dataclass(frozen=True)
class FusionNode:
    node_id: str
    level: str
    children: tuple[str, ...]

    def __post_init__(self):
        if self.level not in LEVELS:
            raise FusionError(f"unknown fusion level {self.level!r}")
        if not self.children:
            raise FusionError(f"fusion node {self.node_id} has no children")


def average_tables(tables, result_id: str = "mean") -> PredictionTable:
    """Per-image, per-class arithmetic mean over tables covering the same
    image set. Summation runs in sorted source-id order, compensated, so the
    result is independent of input ordering down to the last bit."""
    tables = list(tables)
    if not tables:
        raise ValueError("average_tables needs at least one table")
    tables.sort(key=lambda t: t.source_id)
    reference = set(tables[0].rows)
    for table in tables[1:]:
        ids = set(table.rows)
        if ids != reference:
            missing = sorted(reference - ids)[:5]
            extra = sorted(ids - reference)[:5]
            raise FusionError(
                f"image sets differ between {tables[0].source_id} and {table.source_id}: "
                f"missing {missing}, extra {extra}")
    n = len(tables)
    rows = {}
    for image_id in sorted(reference):
        vectors = [t.rows[image_id] for t in tables]
        rows[image_id] = np.array([
            math.fsum(vec[c] for vec in vectors) / n for c in range(3)])
    return PredictionTable(source_id=result_id, rows=rows)


def _load_children(store: PredictionStore, child_ids, node_id: str) -> list[PredictionTable]:
    missing = store.missing(child_ids)
    if missing:
        raise MissingArtifactError(
            f"{node_id}: missing {len(missing)} child tables: {', '.join(missing)}")
    return [store.load(cid) for cid in child_ids]


def fuse_level1(architecture: str, resolution: int, store: PredictionStore, *,
                optimizers=DEFAULT_OPTIMIZERS,
                repeats: int = DEFAULT_REPEATS) -> tuple[PredictionTable, FusionNode]:
    """Average the per-run tables of one network at one resolution (9 on the
    full-scale plan: 3 optimisers x 3 repeats)."""
    children = tuple(run_source_id(architecture, resolution, opt, rep)
                     for opt in optimizers for rep in range(1, repeats + 1))
    node = FusionNode(node_id=level1_id(architecture, resolution),
                      level="L1", children=children)
    tables = _load_children(store, children, node.node_id)
    fused = average_tables(tables, result_id=node.node_id)
    store.save(fused)
    return fused, node


def fuse_level2(architecture: str, store: PredictionStore, *,
                resolutions=ENSEMBLE_RESOLUTIONS) -> tuple[PredictionTable, FusionNode]:
    """Average one network's level-1 nodes across resolutions. 64 px runs are
    never admitted, whatever the caller asks for."""
    resolutions = tuple(sorted(set(resolutions)))
    if 64 in resolutions:
        raise FusionError("level-2 fusion excludes the 64 px resolution")
    if not resolutions:
        raise FusionError("level-2 fusion needs at least one resolution")
    if any(r not in ENSEMBLE_RESOLUTIONS for r in resolutions):
        raise FusionError(
            f"level-2 resolutions must be a subset of {ENSEMBLE_RESOLUTIONS}, got {resolutions}")
    children = tuple(level1_id(architecture, r) for r in resolutions)
    node = FusionNode(node_id=level2_id(architecture), level="L2", children=children)
    tables = _load_children(store, children, node.node_id)
    fused = average_tables(tables, result_id=node.node_id)
    store.save(fused)
    return fused, node


def fuse_level3(store: PredictionStore, *,
                architectures=ARCHITECTURES) -> tuple[PredictionTable, FusionNode]:
    """Average the level-2 nodes across networks into the final table."""
    children = tuple(level2_id(a) for a in architectures)
    node = FusionNode(node_id=LEVEL3_ID, level="L3", children=children)
    tables = _load_children(store, children, node.node_id)
    fused = average_tables(tables, result_id=node.node_id)
    store.save(fused)
    return fused, node


def fuse_single_resolution(resolution: int, store: PredictionStore, *,
                           architectures=ARCHITECTURES) -> tuple[PredictionTable, FusionNode]:
    """Average all networks' level-1 nodes at one resolution (64 px allowed
    here; only level 2 excludes it)."""
    children = tuple(level1_id(a, resolution) for a in architectures)
    node = FusionNode(node_id=single_resolution_id(resolution),
                      level="single_res", children=children)
    tables = _load_children(store, children, node.node_id)
    fused = average_tables(tables, result_id=node.node_id)
    store.save(fused)
    return fused, node


def fusion_tree(architectures, resolutions, optimizers, repeats: int) -> list[FusionNode]:
    """The full node tree implied by a plan's matrix axes: L1 per
    (architecture, resolution), L2 per architecture over the plan's ensemble
    resolutions, the final L3 node, and one single-resolution node per
    resolution."""
    architectures = tuple(architectures)
    resolutions = tuple(sorted(set(resolutions)))
    ensemble = tuple(r for r in resolutions if r in ENSEMBLE_RESOLUTIONS)
    if not ensemble:
        raise FusionError(
            f"no ensemble-eligible resolutions in plan {resolutions}; "
            f"need at least one of {ENSEMBLE_RESOLUTIONS}")
    nodes = []
    for arch in architectures:
        for resolution in resolutions:
            children = tuple(run_source_id(arch, resolution, opt, rep)
                             for opt in optimizers for rep in range(1, repeats + 1))
            nodes.append(FusionNode(level1_id(arch, resolution), "L1", children))
    for arch in architectures:
        nodes.append(FusionNode(level2_id(arch), "L2",
                                tuple(level1_id(arch, r) for r in ensemble)))
    nodes.append(FusionNode(LEVEL3_ID, "L3",
                            tuple(level2_id(a) for a in architectures)))
    for resolution in resolutions:
        nodes.append(FusionNode(single_resolution_id(resolution), "single_res",
                                tuple(level1_id(a, resolution) for a in architectures)))
    return nodes


def leaf_run_count(node_id: str, nodes: list[FusionNode]) -> int:
    """Number of training runs a node transitively aggregates (108 for the
    final node of the full-scale plan)."""
    by_id = {n.node_id: n for n in nodes}

    def count(source_id: str) -> int:
        node = by_id.get(source_id)
        if node is None:
            return 1  # a run leaf
        return sum(count(child) for child in node.children)

    if node_id not in by_id:
        raise FusionError(f"unknown fusion node {node_id!r}")
    return count(node_id)


def write_fusion_manifest(nodes: list[FusionNode], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "nodes": [
            {"node_id": n.node_id, "level": n.level, "children": list(n.children)}
            for n in nodes
        ]
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
