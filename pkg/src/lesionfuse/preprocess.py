"""Image normalization chain and the float32 tensor cache.

The chain runs grayworld colour constancy, then channel-mean subtraction,
then bicubic resize to one of the five supported square resolutions. All
arithmetic stays in floating point: nothing is clamped back to [0, 255],
since clamping would break both the scale equivariance of the grayworld
gains and the mean-subtraction contract.

The resampler is a separable Catmull-Rom bicubic (kernel parameter -0.5)
with center-aligned coordinates, replicated borders, and no anti-alias
prefilter. Non-square inputs are stretched, not cropped.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import DatasetManifest, ImageRecord, decode_image
from .errors import ConfigError, DegenerateInputError, PipelineError, PreprocessError

SUPPORTED_RESOLUTIONS = (64, 128, 224, 448, 768)

#: ImageNet channel means on the 0-255 scale, RGB order
IMAGENET_MEAN_RGB = (123.675, 116.28, 103.53)


@dataclass(frozen=True)
class PreprocessConfig:
    target_resolution: int
    mean_rgb: tuple[float, float, float] = IMAGENET_MEAN_RGB
    apply_color_constancy: bool = True
    # The documented chain subtracts the mean before resizing; this flag lets
    # an experiment move the subtraction after the resize instead.
    mean_after_resize: bool = False

    def __post_init__(self):
        if self.target_resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(
                f"target_resolution {self.target_resolution} not in "
                f"supported set {SUPPORTED_RESOLUTIONS}")
        if len(self.mean_rgb) != 3:
            raise ConfigError(f"mean_rgb must have 3 components, got {self.mean_rgb}")
        if not all(0.0 <= m <= 255.0 for m in self.mean_rgb):
            raise ConfigError(f"mean_rgb components must lie in [0, 255]: {self.mean_rgb}")

    def config_hash(self) -> str:
        payload = json.dumps({
            "target_resolution": self.target_resolution,
            "mean_rgb": [float(m) for m in self.mean_rgb],
            "apply_color_constancy": self.apply_color_constancy,
            "mean_after_resize": self.mean_after_resize,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PreprocessedTensor:
    """Model-ready tensor: float32, channel-first, square."""

    data: np.ndarray
    origin_id: str

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3 \
                or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"expected shape (3, R, R), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"{self.origin_id}: non-finite values in tensor")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]


def grayworld(image: np.ndarray) -> np.ndarray:
    """Grayworld colour constancy: scale each channel by mean_all / mean_c.

    Output channel means are all equal to the input's mean of channel means.
    Requires strictly positive channel means; otherwise the gain is undefined
    and a DegenerateInputError is raised.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    channel_means = image.mean(axis=(1, 2))
    if np.any(channel_means <= 0.0):
        raise DegenerateInputError(
            f"grayworld undefined: non-positive channel means {channel_means.tolist()}")
    gains = channel_means.mean() / channel_means
    return image * gains[:, None, None]


def subtract_mean(image: np.ndarray, mean_rgb) -> np.ndarray:
    """Subtract a per-channel mean (0-255 scale). Results may be negative."""
    image = np.asarray(image, dtype=np.float64)
    mean = np.asarray(mean_rgb, dtype=np.float64).reshape(3, 1, 1)
    return image - mean


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a=-0.5 is the Catmull-Rom spline."""
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resample_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """4-tap indices (clamped to the input range) and weights per output
    coordinate, for center-aligned sampling."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets[None, :]
    weights = _cubic_kernel(frac[:, None] - offsets[None, :])
    idx = np.clip(idx, 0, n_in - 1)
    return idx, weights


def resize_bicubic(image: np.ndarray, target: int) -> np.ndarray:
    """Resize a (3, H, W) image to (3, target, target), distorting the aspect
    ratio for non-square inputs. Separable along the two spatial axes."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    if h < 4 or w < 4:
        raise ValueError(f"input must be at least 4x4, got {h}x{w}")
    if target < 1:
        raise ValueError(f"target must be positive, got {target}")

    row_idx, row_w = _resample_taps(h, target)
    col_idx, col_w = _resample_taps(w, target)
    # rows: (3, target, 4, W) x (target, 4) -> (3, target, W)
    mid = np.einsum("ctkw,tk->ctw", image[:, row_idx, :], row_w)
    # cols: (3, target, target, 4) x (target, 4) -> (3, target, target)
    return np.einsum("crtk,tk->crt", mid[:, :, col_idx], col_w)


def preprocess_array(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Run the normalization chain on a decoded (3, H, W) array; float32 out."""
    out = np.asarray(image, dtype=np.float64)
    if config.apply_color_constancy:
        out = grayworld(out)
    if config.mean_after_resize:
        out = resize_bicubic(out, config.target_resolution)
        out = subtract_mean(out, config.mean_rgb)
    else:
        out = subtract_mean(out, config.mean_rgb)
        out = resize_bicubic(out, config.target_resolution)
    return out.astype(np.float32)


def preprocess_pipeline(record: ImageRecord, config: PreprocessConfig) -> PreprocessedTensor:
    """Decode and normalize one catalog record."""
    try:
        image = decode_image(record.resolved_path)
        data = preprocess_array(image, config)
    except PipelineError:
        raise
    except Exception as err:
        raise PreprocessError(f"{record.image_id}: {err}") from err
    return PreprocessedTensor(data=data, origin_id=record.image_id)


class TensorCache:
    """Read side of the cache: ``<root>/<resolution>/<image_id>.f32`` raw
    little-endian float32 arrays with a JSON sidecar (shape, config hash)."""

    def __init__(self, root: str | Path, resolution: int):
        self.root = Path(root)
        self.resolution = resolution
        self.dir = self.root / str(resolution)

    def tensor_path(self, image_id: str) -> Path:
        return self.dir / f"{image_id}.f32"

    def sidecar_path(self, image_id: str) -> Path:
        return self.dir / f"{image_id}.json"

    def has(self, image_id: str, config_hash: str | None = None) -> bool:
        tpath, spath = self.tensor_path(image_id), self.sidecar_path(image_id)
        if not (tpath.is_file() and spath.is_file()):
            return False
        try:
            meta = json.loads(spath.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        r = self.resolution
        if meta.get("shape") != [3, r, r] or meta.get("dtype") != "float32":
            return False
        if config_hash is not None and meta.get("config_hash") != config_hash:
            return False
        return tpath.stat().st_size == 3 * r * r * 4

    def missing_ids(self, image_ids, config_hash: str | None = None) -> list[str]:
        return sorted(i for i in image_ids if not self.has(i, config_hash))

    def read(self, image_id: str) -> np.ndarray:
        r = self.resolution
        data = np.fromfile(self.tensor_path(image_id), dtype="<f4")
        if data.size != 3 * r * r:
            raise PipelineError(
                f"cache entry {self.tensor_path(image_id)} has wrong size {data.size}")
        return data.reshape(3, r, r)


def _atomic_write(path: Path, payload: bytes) -> None:
    # Temp-then-rename so concurrent materializers never expose partial files.
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CacheResult:
    root: Path
    resolution: int
    written: int
    skipped: int


def materialize_cache(manifest: DatasetManifest, config: PreprocessConfig,
                      cache_root: str | Path) -> CacheResult:
    """Preprocess every manifest record at the configured resolution.

    Idempotent: entries whose sidecar already carries the current config hash
    are skipped, so re-runs write nothing and changed settings invalidate
    stale entries automatically.
    """
    cache = TensorCache(cache_root, config.target_resolution)
    try:
        cache.dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise PipelineError(f"cannot create cache dir {cache.dir}: {err}") from err

    chash = config.config_hash()
    written = skipped = 0
    for rec in manifest.records:
        if cache.has(rec.image_id, chash):
            skipped += 1
            continue
        tensor = preprocess_pipeline(rec, config)
        meta = {
            "image_id": rec.image_id,
            "shape": [3, config.target_resolution, config.target_resolution],
            "dtype": "float32",
            "config_hash": chash,
        }
        try:
            _atomic_write(cache.tensor_path(rec.image_id),
                          tensor.data.astype("<f4").tobytes())
            _atomic_write(cache.sidecar_path(rec.image_id),
                          json.dumps(meta, sort_keys=True).encode())
        except OSError as err:
            raise PipelineError(
                f"cache write failed at {cache.tensor_path(rec.image_id)}: {err}") from err
        written += 1
    return CacheResult(root=Path(cache_root), resolution=config.target_resolution,
                       written=written, skipped=skipped)
