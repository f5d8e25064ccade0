"""Test-time-augmented inference producing ternary probability tables.

For each image, all 8 dihedral variants are pushed through the model in one
batch, softmax is applied per variant, and the 8 probability vectors are
averaged. Averaging happens in probability space, never in logit space.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .catalog import DatasetManifest
from .dihedral import orbit
from .errors import InferenceError, MissingArtifactError
from .preprocess import PreprocessedTensor, TensorCache
from .tables import PredictionStore, PredictionTable


def softmax_probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)


def tta_predict(model: torch.nn.Module, tensor) -> np.ndarray:
    """Average the softmax outputs over the full dihedral orbit of ``tensor``.

    ``tensor`` is a PreprocessedTensor or a bare (3, R, R) array; ``model``
    is anything mapping a (B, 3, R, R) batch to (B, 3) logits.
    """
    data = tensor.data if isinstance(tensor, PreprocessedTensor) else np.asarray(tensor)
    batch = np.stack(orbit(data)).astype(np.float32)
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(batch))
    if not torch.isfinite(logits).all():
        origin = getattr(tensor, "origin_id", "<array>")
        raise InferenceError(f"non-finite logits for {origin}")
    probs = softmax_probabilities(logits).mean(dim=0)
    return probs.numpy().astype(np.float64)


def predict_dataset(model: torch.nn.Module, manifest: DatasetManifest,
                    resolution: int, cache_root: str | Path, *, source_id: str,
                    split: str = "test",
                    store: PredictionStore | None = None) -> PredictionTable:
    """One TTA probability vector per image of the split, persisted as CSV
    when a store is given. Missing cache entries are enumerated before any
    inference starts."""
    cache = TensorCache(cache_root, resolution)
    image_ids = manifest.split_ids(split)
    missing = cache.missing_ids(image_ids)
    if missing:
        preview = ", ".join(missing[:5])
        raise MissingArtifactError(
            f"{source_id}: cache at {resolution} px is missing {len(missing)} "
            f"{split} entries (e.g. {preview}); run the preprocess stage first")

    rows = {image_id: tta_predict(model, cache.read(image_id)) for image_id in image_ids}
    table = PredictionTable(source_id=source_id, rows=rows)
    if store is not None:
        store.save(table)
    return table


def predict_run_payloads(configs, runs_dir, manifest_path, cache_root, preds_root):
    """Picklable payloads for process-pool prediction over training runs."""
    return [(c.to_dict(), str(runs_dir), str(manifest_path), str(cache_root),
             str(preds_root)) for c in configs]


def run_predict_payload(payload) -> tuple[str, int]:
    from .catalog import load_manifest
    from .training import TrainConfig, load_checkpoint

    config_dict, runs_dir, manifest_path, cache_root, preds_root = payload
    torch.set_num_threads(1)
    config = TrainConfig.from_dict(config_dict)
    model = load_checkpoint(config, runs_dir)
    manifest = load_manifest(manifest_path)
    table = predict_dataset(model, manifest, config.resolution, cache_root,
                            source_id=config.run_id,
                            store=PredictionStore(preds_root))
    return config.run_id, len(table)
