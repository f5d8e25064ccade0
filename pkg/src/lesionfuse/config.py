"""Pipeline configuration: a TOML file with sections matching the pipeline
stages, resolved relative to its own location so experiment directories are
relocatable. The matrix axes may live in the main config or in a separate
plan file passed with ``--plan``.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .models import ARCHITECTURES
from .preprocess import IMAGENET_MEAN_RGB, SUPPORTED_RESOLUTIONS, PreprocessConfig
from .training import OPTIMIZER_KINDS, TrainConfig, build_plan

CACHE_ROOT_ENV = "LESIONFUSE_CACHE_ROOT"


@dataclass
class PipelinePaths:
    manifest: Path
    cache_root: Path
    weight_store: Path | None
    runs_dir: Path
    preds_dir: Path
    reports_dir: Path


@dataclass
class MatrixAxes:
    architectures: tuple[str, ...]
    resolutions: tuple[int, ...]
    optimizers: tuple[str, ...]
    repeats: int

    def __post_init__(self):
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise ConfigError(f"matrix.architectures: unsupported {arch!r}")
        for res in self.resolutions:
            if res not in SUPPORTED_RESOLUTIONS:
                raise ConfigError(f"matrix.resolutions: unsupported {res}")
        for opt in self.optimizers:
            if opt not in OPTIMIZER_KINDS:
                raise ConfigError(f"matrix.optimizers: unsupported {opt!r}")
        if not (self.architectures and self.resolutions and self.optimizers):
            raise ConfigError("matrix axes must all be nonempty")
        if not 1 <= self.repeats <= 3:
            raise ConfigError(f"matrix.repeats must lie in [1, 3], got {self.repeats}")


@dataclass
class TrainingSection:
    epochs: int = 15
    lr_drop_epochs: tuple[int, ...] = (5, 10)
    lr_drop_factor: float = 10.0
    batch_size: int | None = None
    head_init_std: float = 1.0
    freeze_blocks: int | None = None
    weight_decay: float = 0.0
    pretrained: bool = False
    base_seed: int = 1234
    base_lrs: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    paths: PipelinePaths
    matrix: MatrixAxes
    preprocess: dict
    training: TrainingSection
    report_node: str = "L3/final"

    def preprocess_config(self, resolution: int) -> PreprocessConfig:
        return PreprocessConfig(
            target_resolution=resolution,
            mean_rgb=tuple(self.preprocess.get("mean_rgb", IMAGENET_MEAN_RGB)),
            apply_color_constancy=self.preprocess.get("apply_color_constancy", True),
            mean_after_resize=self.preprocess.get("mean_after_resize", False),
        )

    def plan(self) -> list[TrainConfig]:
        t = self.training
        return build_plan(
            self.matrix.architectures, self.matrix.resolutions,
            self.matrix.optimizers, self.matrix.repeats,
            epochs=t.epochs, lr_drop_epochs=t.lr_drop_epochs,
            lr_drop_factor=t.lr_drop_factor, batch_size=t.batch_size,
            head_init_std=t.head_init_std, freeze_blocks=t.freeze_blocks,
            weight_decay=t.weight_decay, base_lrs=t.base_lrs or None,
            pretrained=t.pretrained, base_seed=t.base_seed)


def _as_path(base: Path, value: str) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    return Path(os.path.normpath(p))


def _parse_matrix(data: dict) -> MatrixAxes:
    try:
        return MatrixAxes(
            architectures=tuple(data["architectures"]),
            resolutions=tuple(int(r) for r in data["resolutions"]),
            optimizers=tuple(str(o).lower() for o in data["optimizers"]),
            repeats=int(data["repeats"]),
        )
    except KeyError as err:
        raise ConfigError(f"matrix section missing key {err.args[0]!r}") from None


def load_config(path: str | Path, plan_path: str | Path | None = None) -> PipelineConfig:
    """Parse and validate the pipeline TOML. A plan file, when given,
    replaces the [matrix] section. The cache root can be overridden with the
    LESIONFUSE_CACHE_ROOT environment variable."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: invalid TOML: {err}") from None
    base = path.parent.resolve()

    paths_data = data.get("paths", {})
    required = ("manifest", "cache_root", "runs_dir", "preds_dir", "reports_dir")
    missing = [k for k in required if k not in paths_data]
    if missing:
        raise ConfigError(f"{path}: [paths] missing keys: {', '.join(missing)}")
    cache_root = os.environ.get(CACHE_ROOT_ENV) or paths_data["cache_root"]
    paths = PipelinePaths(
        manifest=_as_path(base, paths_data["manifest"]),
        cache_root=_as_path(base, cache_root),
        weight_store=(_as_path(base, paths_data["weight_store"])
                      if "weight_store" in paths_data else None),
        runs_dir=_as_path(base, paths_data["runs_dir"]),
        preds_dir=_as_path(base, paths_data["preds_dir"]),
        reports_dir=_as_path(base, paths_data["reports_dir"]),
    )

    if plan_path is not None:
        plan_path = Path(plan_path)
        if not plan_path.is_file():
            raise ConfigError(f"plan file not found: {plan_path}")
        try:
            with open(plan_path, "rb") as fh:
                plan_data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{plan_path}: invalid TOML: {err}") from None
        matrix_data = plan_data.get("matrix", plan_data)
    else:
        if "matrix" not in data:
            raise ConfigError(f"{path}: missing [matrix] section (or pass --plan)")
        matrix_data = data["matrix"]
    matrix = _parse_matrix(matrix_data)

    training_data = data.get("training", {})
    known = set(TrainingSection.__dataclass_fields__)
    unknown = set(training_data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown [training] keys: {', '.join(sorted(unknown))}")
    if "lr_drop_epochs" in training_data:
        training_data["lr_drop_epochs"] = tuple(training_data["lr_drop_epochs"])
    training = TrainingSection(**training_data)

    evaluation = data.get("evaluation", {})
    return PipelineConfig(
        paths=paths,
        matrix=matrix,
        preprocess=data.get("preprocess", {}),
        training=training,
        report_node=evaluation.get("report_node", "L3/final"),
    )
