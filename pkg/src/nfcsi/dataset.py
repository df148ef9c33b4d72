"""Synthetic near-field CSI datasets.

Each sample draws a user position, builds the ``1 x 1024`` channel and stores it
as a ``2 x 32 x 32`` real image (plane 0 real, plane 1 imaginary, row-major).
All splits share one global min-max normalization so decoder outputs in
``[0, 1]`` map back to channels with a single affine transform.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nfcsi.channel import (
    DEFAULT_SPACING,
    DEFAULT_WAVELENGTH,
    ChannelMatrix,
    SystemGeometry,
    channel_matrix,
    rayleigh_distance,
)

logger = logging.getLogger(__name__)

IMAGE_SIDE = 32
IMAGE_SHAPE = (2, IMAGE_SIDE, IMAGE_SIDE)
SPLITS = ("train", "val", "test")

MAGIC = b"NFCS"
FORMAT_VERSION = 1
# magic, version, (n_train, n_val, n_test), (channels, height, width), norm_min, norm_max
_HEADER = struct.Struct("<4sH3I3Idd")
_FOOTER = struct.Struct("<I")


class SamplingConfigError(ValueError):
    pass


class LayoutError(ValueError):
    """Channel dimensions incompatible with the 2 x 32 x 32 image layout."""


class NormalizationError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Corrupt, truncated or checksum-mismatched dataset file."""


@dataclass(frozen=True)
class SamplingConfig:
    seed: int = 0
    n_train: int = 25_000
    n_val: int = 5_000
    n_test: int = 5_000
    r_range: tuple[float, float] = (6.0, 300.0)
    theta_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    phi_range: tuple[float, float] = (-math.pi / 6, math.pi / 6)
    n_bs_antennas: int = 1024
    n_user_antennas: int = 1
    wavelength: float = DEFAULT_WAVELENGTH
    antenna_spacing: float = DEFAULT_SPACING

    def __post_init__(self):
        # tuples survive JSON/config round trips as lists
        for name in ("r_range", "theta_range", "phi_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.n_train, self.n_val, self.n_test)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def template(self, r: float, theta: float, phi: float) -> SystemGeometry:
        return SystemGeometry(
            n_bs_antennas=self.n_bs_antennas,
            n_user_antennas=self.n_user_antennas,
            antenna_spacing=self.antenna_spacing,
            wavelength=self.wavelength,
            range=r,
            transmit_angle=theta,
            relative_angle=phi,
        )

    @property
    def min_range(self) -> float:
        return (self.n_bs_antennas + self.n_user_antennas) * self.antenna_spacing

    @property
    def rayleigh_distance(self) -> float:
        aperture = (self.n_bs_antennas - 1) * self.antenna_spacing
        return 2.0 * aperture**2 / self.wavelength

    def validate(self) -> None:
        if any(c <= 0 for c in self.counts):
            raise SamplingConfigError(f"split counts must be > 0, got {self.counts}")
        for name in ("r_range", "theta_range", "phi_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise SamplingConfigError(f"{name} must be a finite interval, got {(lo, hi)}")
        if self.wavelength <= 0 or self.antenna_spacing <= 0:
            raise SamplingConfigError("wavelength and antenna_spacing must be > 0")
        if self.n_bs_antennas < 1 or self.n_user_antennas < 1:
            raise SamplingConfigError("antenna counts must be >= 1")
        lo, hi = self.r_range
        if lo <= self.min_range:
            raise SamplingConfigError(
                f"r_range lower bound {lo} m must exceed (N1 + N2) * d = {self.min_range} m"
            )
        if hi >= self.rayleigh_distance:
            raise SamplingConfigError(
                f"r_range upper bound {hi} m is not inside the near field "
                f"(Rayleigh distance {self.rayleigh_distance:.3f} m)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("r_range", "theta_range", "phi_range"):
            d[name] = list(d[name])
        return d


def sample_geometry(config: SamplingConfig, rng: np.random.Generator) -> SystemGeometry:
    """Draw ``(r, theta, phi)`` independently and uniformly from the configured ranges."""
    r = rng.uniform(*config.r_range)
    theta = rng.uniform(*config.theta_range)
    phi = rng.uniform(*config.phi_range)
    geometry = config.template(float(r), float(theta), float(phi))
    if not geometry.range < rayleigh_distance(geometry):
        raise SamplingConfigError("sampled user is outside the near field")
    return geometry


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for sample ``index``; lets generation run out of order."""
    return np.random.default_rng([seed, index])


def split_complex(h: ChannelMatrix | np.ndarray) -> np.ndarray:
    entries = h.entries if isinstance(h, ChannelMatrix) else np.asarray(h)
    if entries.size != IMAGE_SIDE * IMAGE_SIDE:
        raise LayoutError(
            f"channel has {entries.size} entries; the image layout needs {IMAGE_SIDE**2}"
        )
    flat = entries.reshape(-1)
    return np.stack([flat.real, flat.imag]).reshape(IMAGE_SHAPE)


def merge_complex(img: np.ndarray, shape: tuple[int, int] = (1, IMAGE_SIDE * IMAGE_SIDE)) -> np.ndarray:
    """Inverse of :func:`split_complex`; ``shape`` is the ``(N2, N1)`` of the channel."""
    img = np.asarray(img)
    if img.shape != IMAGE_SHAPE:
        raise LayoutError(f"expected image of shape {IMAGE_SHAPE}, got {img.shape}")
    if shape[0] * shape[1] != IMAGE_SIDE * IMAGE_SIDE:
        raise LayoutError(f"cannot reshape {IMAGE_SIDE**2} entries into {shape}")
    return (img[0] + 1j * img[1]).reshape(shape)


def normalize_bundle(images: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Global min-max scaling of every element to ``[0, 1]``."""
    images = np.asarray(images, dtype=np.float64)
    if images.size == 0:
        raise NormalizationError("cannot normalize an empty bundle")
    lo, hi = float(images.min()), float(images.max())
    if not hi > lo:
        raise NormalizationError("bundle is constant-valued; min == max")
    return (images - lo) / (hi - lo), lo, hi


def denormalize(images: np.ndarray, norm_min: float, norm_max: float) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) * (norm_max - norm_min) + norm_min


@dataclass
class DatasetBundle:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    norm_min: float
    norm_max: float
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.norm_min < self.norm_max:
            raise NormalizationError("norm_min must be < norm_max")
        for name in SPLITS:
            arr = getattr(self, name)
            if arr.ndim != 4 or arr.shape[1:] != IMAGE_SHAPE:
                raise LayoutError(f"{name} split has shape {arr.shape}")

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(len(getattr(self, name)) for name in SPLITS)

    @property
    def zero_level(self) -> float:
        """Normalized value of a zero channel entry."""
        return -self.norm_min / (self.norm_max - self.norm_min)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        return denormalize(images, self.norm_min, self.norm_max)


def build_dataset(config: SamplingConfig) -> DatasetBundle:
    raw = np.empty((config.total, *IMAGE_SHAPE), dtype=np.float64)
    ranges = np.empty((config.total, 3))
    for index in range(config.total):
        geometry = sample_geometry(config, sample_rng(config.seed, index))
        raw[index] = split_complex(channel_matrix(geometry))
        ranges[index] = (geometry.range, geometry.transmit_angle, geometry.relative_angle)
    normalized, lo, hi = normalize_bundle(raw)
    normalized = normalized.astype(np.float32)
    n_train, n_val, _ = config.counts
    manifest = {
        "seed": config.seed,
        "counts": dict(zip(SPLITS, config.counts)),
        "geometry_template": {
            "n_bs_antennas": config.n_bs_antennas,
            "n_user_antennas": config.n_user_antennas,
            "antenna_spacing": config.antenna_spacing,
            "wavelength": config.wavelength,
        },
        "sampling": {
            "r_range": list(config.r_range),
            "theta_range": list(config.theta_range),
            "phi_range": list(config.phi_range),
            "distribution": "independent uniform",
        },
        "rayleigh_distance": config.rayleigh_distance,
        "sampled_r_max": float(ranges[:, 0].max()),
        "all_near_field": bool(ranges[:, 0].max() < config.rayleigh_distance),
        "norm_min": lo,
        "norm_max": hi,
        "split_order": "generation order: train, val, test",
        "image_layout": "plane 0 real, plane 1 imaginary, row-major 32x32",
    }
    logger.info("generated %d samples (seed %d)", config.total, config.seed)
    return DatasetBundle(
        train=normalized[:n_train],
        val=normalized[n_train:n_train + n_val],
        test=normalized[n_train + n_val:],
        norm_min=lo,
        norm_max=hi,
        manifest=manifest,
    )


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def bundle_layout(counts: tuple[int, int, int]) -> dict:
    """Byte offsets of each split's payload inside the dataset file."""
    per_sample = int(np.prod(IMAGE_SHAPE))
    offsets, pos = {}, _HEADER.size
    for name, count in zip(SPLITS, counts):
        offsets[name] = pos
        pos += 4 * per_sample * count
    return {
        "header_bytes": _HEADER.size,
        "dtype": "<f4",
        "sample_shape": list(IMAGE_SHAPE),
        "order": "C",
        "split_offsets": offsets,
        "footer_offset": pos,
        "file_bytes": pos + _FOOTER.size,
    }


def save_bundle(bundle: DatasetBundle, path: str | Path) -> Path:
    path = Path(path)
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, *bundle.counts, *IMAGE_SHAPE, bundle.norm_min, bundle.norm_max
    )
    body = header + b"".join(
        np.ascontiguousarray(bundle.split(name), dtype="<f4").tobytes() for name in SPLITS
    )
    crc = zlib.crc32(body)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + _FOOTER.pack(crc))
    manifest = dict(bundle.manifest)
    manifest.update(format_version=FORMAT_VERSION, crc32=crc, layout=bundle_layout(bundle.counts))
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path: str | Path) -> DatasetBundle:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size + _FOOTER.size:
        raise DatasetFormatError(f"{path}: file too short for header")
    magic, version, *rest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    counts, shape, (lo, hi) = tuple(rest[:3]), tuple(rest[3:6]), rest[6:]
    if shape != IMAGE_SHAPE:
        raise DatasetFormatError(f"{path}: unexpected sample shape {shape}")
    layout = bundle_layout(counts)
    if len(data) != layout["file_bytes"]:
        raise DatasetFormatError(
            f"{path}: expected {layout['file_bytes']} bytes, found {len(data)} (truncated?)"
        )
    (crc,) = _FOOTER.unpack_from(data, layout["footer_offset"])
    if zlib.crc32(data[:layout["footer_offset"]]) != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch")
    splits = {}
    for name, count in zip(SPLITS, counts):
        arr = np.frombuffer(data, dtype="<f4", count=count * int(np.prod(shape)),
                            offset=layout["split_offsets"][name])
        splits[name] = arr.reshape(count, *shape).astype(np.float32)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return DatasetBundle(norm_min=lo, norm_max=hi, manifest=manifest, **splits)
