"""Reconstruction metrics and evaluation reports.

Metrics take batches of real ``(n, 2, S, S)`` images. Two spaces are reported:

* normalized: the network's own ``[0, 1]`` input/output space;
* centered: the same images minus the normalized level of a zero channel.
  Centering undoes the min-max offset, so centered NMSE and rho equal their
  values on the de-normalized complex channels (both metrics are
  scale-invariant).

The min-max offset dominates normalized-space energy, so normalized NMSE of a
model that outputs a constant zero channel is already strongly negative; the
report carries that constant-predictor figure for context.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from nfcsi.channel import ChannelMatrix
from nfcsi.dataset import DatasetBundle
from nfcsi.model import count_parameters, load_checkpoint

PERFECT = float("-inf")


class MetricDomainError(ValueError):
    pass


def _paired(h_in, h_out) -> tuple[np.ndarray, np.ndarray]:
    h_in = np.asarray(h_in, dtype=np.float64)
    h_out = np.asarray(h_out, dtype=np.float64)
    if h_in.shape != h_out.shape:
        raise ValueError(f"shape mismatch: {h_in.shape} vs {h_out.shape}")
    if h_in.ndim < 2:
        raise ValueError("expected a batch of samples (leading sample axis)")
    return h_in, h_out


def nmse_ratios(h_in, h_out) -> np.ndarray:
    """Per-sample ``||H_in - H_out||_F^2 / ||H_in||_F^2``."""
    h_in, h_out = _paired(h_in, h_out)
    n = len(h_in)
    energy = np.sum(h_in.reshape(n, -1) ** 2, axis=1)
    if np.any(energy == 0):
        raise MetricDomainError("reference sample with zero energy")
    return np.sum((h_in - h_out).reshape(n, -1) ** 2, axis=1) / energy


def to_db(ratio: float) -> float:
    return PERFECT if ratio == 0 else 10.0 * math.log10(ratio)


def nmse(h_in, h_out) -> float:
    """NMSE in dB; ``-inf`` for a perfect reconstruction."""
    return to_db(float(np.mean(nmse_ratios(h_in, h_out))))


def _complex_images(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != 2:
        raise ValueError(f"expected (n, 2, H, W) images, got {x.shape}")
    return x[:, 0] + 1j * x[:, 1]


def column_cosines(h_in, h_out) -> np.ndarray:
    """``(n, W)`` per-column ``|h_out^H h_in| / (|h_out| |h_in|)``; NaN where a column is zero."""
    h_in, h_out = _paired(h_in, h_out)
    a, b = _complex_images(h_in), _complex_images(h_out)
    inner = np.abs(np.sum(np.conj(b) * a, axis=1))
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms > 0, inner / np.where(norms > 0, norms, 1.0), np.nan)


def per_sample_rho(h_in, h_out) -> tuple[np.ndarray, int]:
    """Per-sample mean column cosine and the number of excluded zero-norm columns."""
    cos = column_cosines(h_in, h_out)
    excluded = int(np.isnan(cos).sum())
    valid = ~np.isnan(cos)
    counts = valid.sum(axis=1)
    sums = np.where(valid, cos, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return rho, excluded


def cosine_similarity(h_in, h_out) -> float:
    """Mean over samples of the mean absolute cosine between matching columns.

    Images are merged to complex ``S x S`` matrices (plane 0 real, plane 1
    imaginary) before taking columns. Zero-norm columns are skipped with a
    warning.
    """
    rho, excluded = per_sample_rho(h_in, h_out)
    if excluded:
        warnings.warn(f"{excluded} zero-norm column(s) excluded from rho", RuntimeWarning, stacklevel=2)
    if np.all(np.isnan(rho)):
        raise MetricDomainError("no column with non-zero norm")
    return float(np.nanmean(rho))


def precoding_snr_probe(h_true, h_recovered, noise_power: float = 1.0) -> float:
    """Fraction of the perfect-CSI matched-filter SNR kept when precoding with ``h_recovered``.

    ``v = h_rec^H / |h_rec|``; achieved SNR ``|h v|^2 / sigma^2`` over the
    perfect-CSI SNR ``|h|^2 / sigma^2``.
    """
    h = h_true.entries if isinstance(h_true, ChannelMatrix) else np.asarray(h_true)
    g = h_recovered.entries if isinstance(h_recovered, ChannelMatrix) else np.asarray(h_recovered)
    h, g = np.atleast_2d(h), np.atleast_2d(g)
    if h.shape != g.shape or h.shape[0] != 1:
        raise MetricDomainError(f"need matching single-antenna channels, got {h.shape} and {g.shape}")
    if not noise_power > 0:
        raise MetricDomainError("noise_power must be > 0")
    h_norm, g_norm = np.linalg.norm(h), np.linalg.norm(g)
    if h_norm == 0 or g_norm == 0:
        raise MetricDomainError("zero channel")
    v = np.conj(g[0]) / g_norm
    achieved = abs(h[0] @ v) ** 2 / noise_power
    perfect = h_norm**2 / noise_power
    return float(achieved / perfect)


def _rho_or_nan(h_in, h_out) -> float:
    try:
        return cosine_similarity(h_in, h_out)
    except MetricDomainError:
        return math.nan


def reconstruction_metrics(h_in, h_out, zero_level: float) -> dict:
    """NMSE and rho in normalized and centered space (rho is NaN when every column is zero)."""
    h_in, h_out = _paired(h_in, h_out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {
            "nmse_db": nmse(h_in, h_out),
            "rho": _rho_or_nan(h_in, h_out),
            "centered_nmse_db": nmse(h_in - zero_level, h_out - zero_level),
            "centered_rho": _rho_or_nan(h_in - zero_level, h_out - zero_level),
        }


def reconstruct(model: nn.Module, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Run ``model`` in inference mode over ``images`` in batches."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters(), torch.empty(0)).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            xb = torch.as_tensor(np.asarray(images[start:start + batch_size]), dtype=dtype)
            out.append(model(xb).cpu().numpy())
    model.train(was_training)
    return np.concatenate(out).astype(np.float32)


@dataclass
class EvalReport:
    architecture: str
    cr: int | None
    split: str
    nmse_db: float
    rho: float
    centered_nmse_db: float
    centered_rho: float
    constant_baseline_nmse_db: float
    excluded_columns: int
    parameter_audit: dict
    checkpoint: dict
    dataset: dict
    per_sample_nmse: list[float] = field(default_factory=list)
    per_sample_rho: list[float] = field(default_factory=list)
    series: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def is_perfect(self) -> bool:
        return self.nmse_db == PERFECT

    @property
    def poor(self) -> bool:
        """Reconstruction no better than sending nothing (centered NMSE >= 0 dB)."""
        return self.centered_nmse_db >= 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_encode_inf(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls(**_decode_inf(json.loads(Path(path).read_text())))


def _encode_inf(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, float) and math.isnan(obj):
        return "nan"
    if isinstance(obj, dict):
        return {k: _encode_inf(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_inf(v) for v in obj]
    return obj


def _decode_inf(obj):
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode_inf(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_inf(v) for v in obj]
    return obj


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def evaluate(checkpoint: str | Path | nn.Module, bundle: DatasetBundle, cr: int | None = None,
             history: list[dict] | None = None, split: str = "test",
             batch_size: int = 1000) -> EvalReport:
    """Evaluate a checkpoint (or an in-memory model) on one split of ``bundle``."""
    if isinstance(checkpoint, nn.Module):
        model, ckpt_info = checkpoint, {"path": None, "sha256": None}
    else:
        path = Path(checkpoint)
        model, _ = load_checkpoint(path)
        ckpt_info = {"path": str(path), "sha256": _sha256(path)}
    config = getattr(model, "config", None)
    images = bundle.split(split)
    if config is not None:
        size = config.image_size
        if images.shape[1:] != (2, size, size):
            raise ValueError(f"model expects 2x{size}x{size} images, dataset has {images.shape[1:]}")
        if cr is not None and cr != config.compression_ratio:
            raise ValueError(f"requested CR={cr} but checkpoint has CR={config.compression_ratio}")
        cr = config.compression_ratio

    outputs = reconstruct(model, images, batch_size)
    z = bundle.zero_level
    metrics = reconstruction_metrics(images, outputs, z)
    rho_samples, excluded = per_sample_rho(images, outputs)
    constant = np.full_like(images, z)

    series = {}
    if history:
        series = {"epoch": [int(r["epoch"]) for r in history]}
        for key in ("val_nmse_db", "val_rho", "val_centered_nmse_db", "val_centered_rho"):
            if key in history[0]:
                series[key] = [r[key] for r in history]
    audit = count_parameters(model)
    return EvalReport(
        architecture=config.architecture.value if config is not None else type(model).__name__,
        cr=cr,
        split=split,
        nmse_db=metrics["nmse_db"],
        rho=metrics["rho"],
        centered_nmse_db=metrics["centered_nmse_db"],
        centered_rho=metrics["centered_rho"],
        constant_baseline_nmse_db=nmse(images, constant),
        excluded_columns=excluded,
        parameter_audit=audit.to_dict(),
        checkpoint=ckpt_info,
        dataset={
            "seed": bundle.manifest.get("seed"),
            "counts": list(bundle.counts),
            "crc32": bundle.manifest.get("crc32"),
            "norm_min": bundle.norm_min,
            "norm_max": bundle.norm_max,
        },
        per_sample_nmse=nmse_ratios(images, outputs).tolist(),
        per_sample_rho=rho_samples.tolist(),
        series=series,
        notes=[
            "nmse_db/rho: normalized [0,1] image space",
            "centered_*: normalized images minus the zero-channel level; equal to de-normalized channel metrics",
            "rho columns: columns of the complex 32x32 reshape (N_c = 32)",
            "constant_baseline_nmse_db: normalized-space NMSE of an all-zero channel estimate",
        ],
    )


def write_plot_csvs(history: list[dict], out_dir: str | Path, tag: str) -> list[Path]:
    """One ``epoch,<metric>`` CSV per curve (NMSE and rho versus epoch)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in ("val_nmse_db", "val_rho", "val_centered_nmse_db", "val_centered_rho"):
        if history and metric not in history[0]:
            continue
        path = out_dir / f"{metric}_{tag}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", metric])
            for row in history:
                writer.writerow([int(row["epoch"]), repr(float(row[metric]))])
        paths.append(path)
    return paths


def compare_reports(reports: list[EvalReport]) -> list[dict]:
    """Table-shaped rows: one per (metric, architecture), one column per CR."""
    crs = sorted({r.cr for r in reports})
    archs = sorted({r.architecture for r in reports})
    rows = []
    for metric in ("nmse_db", "rho", "centered_nmse_db", "centered_rho"):
        for arch in archs:
            row = {"metric": metric, "architecture": arch}
            for cr in crs:
                match = [r for r in reports if r.architecture == arch and r.cr == cr]
                row[str(cr)] = getattr(match[-1], metric) if match else None
            rows.append(row)
    return rows


def format_comparison(rows: list[dict]) -> str:
    if not rows:
        return ""
    crs = [k for k in rows[0] if k not in ("metric", "architecture")]
    lines = ["| metric | architecture | " + " | ".join(f"CR={c}" for c in crs) + " |",
             "|---|---|" + "---|" * len(crs)]
    for row in rows:
        cells = []
        for c in crs:
            v = row[c]
            if v is None:
                cells.append("-")
            elif "rho" in row["metric"]:
                cells.append(f"{100 * v:.2f}%")
            else:
                cells.append(f"{v:.2f}")
        lines.append(f"| {row['metric']} | {row['architecture']} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
