"""Fine-tunable classifiers built from pretrained CNN trunks.

Each backbone keeps its convolutional trunk, loses its original classifier,
and gains global average pooling plus a fresh two-layer head (hidden 64,
output 3). Early blocks are frozen, including their batch-norm statistics,
so one set of hyperparameters transfers across input resolutions: the
pooling collapses whatever spatial grid the trunk produces.

Pretrained weights come from a local weight store directory
(``<store>/<architecture>.weights`` plus a SHA-256 sidecar) with an optional
torchvision download fallback; offline runs use randomly initialized trunks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torchvision
from torch import nn

from .errors import ConfigError, WeightStoreError
from .preprocess import SUPPORTED_RESOLUTIONS

ARCHITECTURES = ("resnet18", "resnet50", "densenet121")

HEAD_HIDDEN = 64
NUM_CLASSES = 3

#: default number of leading blocks to freeze (residual blocks for ResNets,
#: dense blocks for DenseNet); the ResNet-50 boundary sits one block into the
#: final stage, the nearest block boundary to the intended cut
DEFAULT_FREEZE_BLOCKS = {"resnet18": 4, "resnet50": 14, "densenet121": 3}

_FEATURE_DIMS = {"resnet18": 512, "resnet50": 2048, "densenet121": 1024}

_NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)


@dataclass(frozen=True)
class BackboneSpec:
    architecture: str
    pretrained: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unsupported architecture {self.architecture!r}, "
                f"expected one of {ARCHITECTURES}")


@dataclass
class ParameterPartition:
    """Disjoint split of a model's parameters by training role."""

    frozen: list[str] = field(default_factory=list)
    backbone_trainable: list[str] = field(default_factory=list)
    head: list[str] = field(default_factory=list)

    def sizes(self, model: nn.Module) -> dict[str, int]:
        numel = {name: p.numel() for name, p in model.named_parameters()}
        return {
            "frozen": sum(numel[n] for n in self.frozen),
            "backbone_trainable": sum(numel[n] for n in self.backbone_trainable),
            "head": sum(numel[n] for n in self.head),
        }


class AdaptedModel(nn.Module):
    """Backbone trunk + global average pooling + two-layer head (64 -> 3)."""

    def __init__(self, spec: BackboneSpec, backbone: nn.Module,
                 frozen_module_names: list[str], frozen_prefix: str):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Linear(_FEATURE_DIMS[spec.architecture], HEAD_HIDDEN),
            nn.ReLU(inplace=True),
            nn.Linear(HEAD_HIDDEN, NUM_CLASSES),
        )
        self.frozen_prefix = frozen_prefix
        self._frozen_module_names = tuple(frozen_module_names)

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        b = self.backbone
        if self.spec.architecture.startswith("resnet"):
            x = b.maxpool(b.relu(b.bn1(b.conv1(x))))
            return b.layer4(b.layer3(b.layer2(b.layer1(x))))
        return torch.relu(b.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, R, R) batch, got shape {tuple(x.shape)}")
        if x.shape[2] != x.shape[3]:
            raise ValueError(f"input must be square, got {tuple(x.shape[2:])}")
        if x.shape[2] not in SUPPORTED_RESOLUTIONS:
            raise ValueError(
                f"resolution {x.shape[2]} not in supported set {SUPPORTED_RESOLUTIONS}")
        pooled = self.pool(self._features(x)).flatten(1)
        return self.head(pooled)

    def train(self, mode: bool = True) -> "AdaptedModel":
        # Frozen batch-norm layers stay in eval mode so their running
        # statistics are frozen together with their weights.
        super().train(mode)
        if mode:
            modules = dict(self.named_modules())
            for name in self._frozen_module_names:
                mod = modules.get(name)
                if isinstance(mod, _NORM_TYPES):
                    mod.eval()
        return self


def _build_trunk(architecture: str) -> nn.Module:
    factory = getattr(torchvision.models, architecture)
    return factory(weights=None)


def _freeze(modules: list[tuple[str, nn.Module]]) -> list[str]:
    names = []
    for name, mod in modules:
        mod.requires_grad_(False)
        names.append(name)
    return names


def _freeze_backbone(architecture: str, trunk: nn.Module,
                     freeze_blocks: int) -> tuple[list[str], str]:
    """Freeze the stem plus the first ``freeze_blocks`` blocks; returns the
    frozen module names (relative to the AdaptedModel) and a description."""
    if architecture.startswith("resnet"):
        blocks = [*trunk.layer1, *trunk.layer2, *trunk.layer3, *trunk.layer4]
        if not 0 <= freeze_blocks <= len(blocks):
            raise ConfigError(
                f"{architecture}: freeze_blocks must be in [0, {len(blocks)}], "
                f"got {freeze_blocks}")
        stage_lengths = [len(trunk.layer1), len(trunk.layer2),
                         len(trunk.layer3), len(trunk.layer4)]
        to_freeze = [("backbone.conv1", trunk.conv1), ("backbone.bn1", trunk.bn1)]
        count = 0
        for stage_idx, stage in enumerate((trunk.layer1, trunk.layer2,
                                           trunk.layer3, trunk.layer4), start=1):
            for block_idx, block in enumerate(stage):
                if count >= freeze_blocks:
                    break
                to_freeze.append((f"backbone.layer{stage_idx}.{block_idx}", block))
                count += 1
        desc = f"stem + residual blocks 1-{freeze_blocks} of {sum(stage_lengths)}"
    else:
        if not 0 <= freeze_blocks <= 4:
            raise ConfigError(
                f"{architecture}: freeze_blocks must be in [0, 4], got {freeze_blocks}")
        to_freeze = [("backbone.features.conv0", trunk.features.conv0),
                     ("backbone.features.norm0", trunk.features.norm0)]
        for i in range(1, freeze_blocks + 1):
            to_freeze.append((f"backbone.features.denseblock{i}",
                              getattr(trunk.features, f"denseblock{i}")))
            if i < 4:
                to_freeze.append((f"backbone.features.transition{i}",
                                  getattr(trunk.features, f"transition{i}")))
        desc = f"stem + dense blocks 1-{freeze_blocks} of 4 (with transitions)"
    return _freeze(to_freeze), desc


def _init_head(head: nn.Sequential, std: float) -> None:
    for mod in head:
        if isinstance(mod, nn.Linear):
            nn.init.normal_(mod.weight, mean=0.0, std=std)
            nn.init.zeros_(mod.bias)


def build_model(spec: BackboneSpec, *, head_init_std: float = 1.0,
                freeze_blocks: int | None = None,
                weight_store: "WeightStore | None" = None) -> AdaptedModel:
    """Build a fine-tunable classifier from a backbone spec.

    The original classifier is dropped, the new head gets Gaussian init
    (zero-mean, ``head_init_std``; zero bias), and the leading blocks are
    frozen — by default 4 of 8 for ResNet-18, 14 of 16 for ResNet-50, and
    dense blocks 1-3 for DenseNet-121.
    """
    if head_init_std <= 0:
        raise ConfigError(f"head_init_std must be positive, got {head_init_std}")
    trunk = _build_trunk(spec.architecture)
    if spec.pretrained:
        if weight_store is None:
            raise WeightStoreError(
                f"{spec.architecture}: pretrained weights requested but no weight store given")
        trunk.load_state_dict(weight_store.load(spec.architecture))
    # drop the original classifier
    if spec.architecture.startswith("resnet"):
        trunk.fc = nn.Identity()
    else:
        trunk.classifier = nn.Identity()

    blocks = DEFAULT_FREEZE_BLOCKS[spec.architecture] if freeze_blocks is None else freeze_blocks
    frozen_names, desc = _freeze_backbone(spec.architecture, trunk, blocks)
    model = AdaptedModel(spec, trunk, frozen_names, desc)
    _init_head(model.head, head_init_std)
    return model


def trainable_parameter_report(model: AdaptedModel) -> ParameterPartition:
    """Partition every parameter into exactly one of frozen,
    backbone_trainable, or head."""
    part = ParameterPartition()
    for name, param in model.named_parameters():
        if name.startswith("head."):
            part.head.append(name)
        elif not param.requires_grad:
            part.frozen.append(name)
        else:
            part.backbone_trainable.append(name)
    return part


def forward(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Deterministic inference-mode forward pass returning (B, 3) logits."""
    model.eval()
    with torch.no_grad():
        return model(batch)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class WeightStore:
    """Local directory of backbone state dicts with checksum sidecars;
    optionally falls back to the torchvision hub when downloads are allowed."""

    def __init__(self, root: str | Path | None, allow_download: bool = False):
        self.root = Path(root) if root is not None else None
        self.allow_download = allow_download

    def weights_path(self, architecture: str) -> Path:
        if self.root is None:
            raise WeightStoreError("weight store has no local directory configured")
        return self.root / f"{architecture}.weights"

    def save(self, architecture: str, state_dict: dict) -> Path:
        path = self.weights_path(architecture)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(state_dict, path)
        path.with_suffix(".weights.sha256").write_text(_sha256(path) + "\n")
        return path

    def load(self, architecture: str) -> dict:
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unsupported architecture {architecture!r}")
        if self.root is not None:
            path = self.weights_path(architecture)
            if path.is_file():
                sidecar = path.with_suffix(".weights.sha256")
                if not sidecar.is_file():
                    raise WeightStoreError(f"missing checksum sidecar for {path}")
                expected = sidecar.read_text().strip()
                actual = _sha256(path)
                if actual != expected:
                    raise WeightStoreError(
                        f"checksum mismatch for {path}: {actual} != {expected}")
                return torch.load(path, map_location="cpu", weights_only=True)
        if self.allow_download:
            try:
                factory = getattr(torchvision.models, architecture)
                return factory(weights="IMAGENET1K_V1").state_dict()
            except Exception as err:
                raise WeightStoreError(
                    f"{architecture}: torchvision fallback failed: {err}") from err
        raise WeightStoreError(
            f"{architecture}: weights not found"
            + (f" under {self.root}" if self.root is not None else "")
            + " and downloads are disabled")
