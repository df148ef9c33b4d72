"""End-to-end MSE training of the CSI autoencoder."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nfcsi.dataset import DatasetBundle
from nfcsi.evaluation import reconstruct, reconstruction_metrics
from nfcsi.model import (
    CsiAutoencoder,
    ModelConfig,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

HISTORY_FIELDS = (
    "epoch", "train_loss", "val_nmse_db", "val_rho",
    "val_centered_nmse_db", "val_centered_rho",
)
# wall-clock lives in its own file so history.csv and checkpoints stay byte-reproducible
TIMING_FIELDS = ("epoch", "wall_time_s")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 100
    batch_size: int = 250
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # 0: only best and last
    grad_clip: float | None = None
    deterministic: bool = True
    eval_batch_size: int = 1000

    def validate(self, n_train: int) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (1 <= self.batch_size <= n_train):
            raise ValueError(f"batch_size {self.batch_size} must be in 1..{n_train}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nmse_db: float
    val_rho: float
    val_centered_nmse_db: float
    val_centered_rho: float
    wall_time_s: float = math.nan


@dataclass
class TrainHistory:
    seed: int
    initial_train_loss: float | None = None
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for r in d["records"]:
                del r["wall_time_s"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        d = dict(d)
        d["records"] = [EpochRecord(**r) for r in d.get("records", [])]
        return cls(**d)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_nmse_db), repr(r.val_rho),
                                 repr(r.val_centered_nmse_db), repr(r.val_centered_rho)])
        return path

    def write_timing_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TIMING_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, f"{r.wall_time_s:.3f}"])
        return path

    def restore_timing(self, path: str | Path) -> None:
        """Fill wall-clock times from a ``timing.csv`` written by an earlier run."""
        path = Path(path)
        if not path.exists():
            return
        times = {int(row["epoch"]): row["wall_time_s"] for row in read_history_csv(path)}
        for r in self.records:
            r.wall_time_s = times.get(r.epoch, math.nan)


def read_history_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def mse_loss(h_in, h_out) -> torch.Tensor:
    """Mean of squared elementwise differences over batch and elements."""
    h_in, h_out = torch.as_tensor(h_in), torch.as_tensor(h_out)
    if h_in.shape != h_out.shape:
        raise ValueError(f"shape mismatch: {tuple(h_in.shape)} vs {tuple(h_out.shape)}")
    return F.mse_loss(h_out, h_in, reduction="mean")


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled)


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    # per-epoch stream so a resumed run shuffles exactly like an uninterrupted one
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


def _optimizer_tensors(model: nn.Module, optimizer: torch.optim.Adam) -> tuple[dict, int]:
    tensors, step = {}, 0
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        tensors[f"adam/{name}/exp_avg"] = state["exp_avg"]
        tensors[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"]
        step = int(state["step"])
    return tensors, step


def _restore_optimizer(model: nn.Module, optimizer: torch.optim.Adam, tensors: dict, step: int) -> None:
    for name, p in model.named_parameters():
        key = f"extra/adam/{name}/exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": tensors[key].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"extra/adam/{name}/exp_avg_sq"].to(p.dtype).clone(),
        }


def _initial_loss(model: CsiAutoencoder, data: torch.Tensor, batch_size: int) -> float:
    """Training-mode loss before any update; BatchNorm buffers are left untouched."""
    buffers = copy.deepcopy({k: v for k, v in model.state_dict().items()})
    model.train()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            xb = data[start:start + batch_size]
            total += mse_loss(xb, model(xb)).item() * len(xb)
    model.load_state_dict(buffers)
    return total / len(data)


def train(config: TrainConfig, bundle: DatasetBundle, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> tuple[CsiAutoencoder, TrainHistory]:
    """Minimize the reconstruction MSE over encoder and decoder jointly.

    Writes ``best.nfck`` (lowest centered validation NMSE), ``last.nfck``,
    ``history.csv`` and ``timing.csv`` under ``out_dir`` when given. ``resume_from`` continues
    from a ``last.nfck`` written by an earlier call with the same config.
    """
    n_train = len(bundle.train)
    config.validate(n_train)
    size = config.model.image_size
    if bundle.train.shape[1:] != (2, size, size):
        raise TrainingError(
            f"dataset images {bundle.train.shape[1:]} do not match model L={config.model.flattened_length}"
        )
    set_deterministic(config.seed, config.deterministic)
    out = Path(out_dir) if out_dir is not None else None

    model = build_model(config.model, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    train_x = torch.from_numpy(np.ascontiguousarray(bundle.train))
    history = TrainHistory(seed=config.seed)
    best_nmse = math.inf
    start_epoch = 1

    if resume_from is not None:
        header, tensors = read_checkpoint(resume_from)
        model, _ = load_checkpoint(resume_from)
        if model.config != config.model:
            raise TrainingError("checkpoint model config differs from the training config")
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        meta = header["metadata"]
        _restore_optimizer(model, optimizer, tensors, meta["adam_step"])
        history = TrainHistory.from_dict(meta["history"])
        history.restore_timing(Path(resume_from).parent / "timing.csv")
        best_nmse = meta.get("best_val_centered_nmse_db", math.inf)
        start_epoch = history.records[-1].epoch + 1 if history.records else 1
    else:
        history.initial_train_loss = _initial_loss(model, train_x, config.batch_size)

    def checkpoint(name: str) -> None:
        if out is None:
            return
        adam, step = _optimizer_tensors(model, optimizer)
        save_checkpoint(out / name, model, extra_tensors=adam, metadata={
            "train_config": config.to_dict(),
            "adam_step": step,
            "history": history.to_dict(timing=False),
            "best_val_centered_nmse_db": best_nmse,
            "dataset_manifest": bundle.manifest,
        })

    for epoch in range(start_epoch, config.epochs + 1):
        tic = time.perf_counter()
        model.train()
        order = torch.randperm(n_train, generator=_epoch_generator(config.seed, epoch))
        running, seen = 0.0, 0
        for batch_no, start in enumerate(range(0, n_train, config.batch_size)):
            xb = train_x[order[start:start + config.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            loss = mse_loss(xb, model(xb))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch_no}")
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            running += loss.item() * len(xb)
            seen += len(xb)

        val_out = reconstruct(model, bundle.val, config.eval_batch_size)
        metrics = reconstruction_metrics(bundle.val, val_out, bundle.zero_level)
        record = EpochRecord(
            epoch=epoch,
            train_loss=running / seen,
            val_nmse_db=metrics["nmse_db"],
            val_rho=metrics["rho"],
            val_centered_nmse_db=metrics["centered_nmse_db"],
            val_centered_rho=metrics["centered_rho"],
            wall_time_s=time.perf_counter() - tic,
        )
        history.records.append(record)
        logger.info("epoch %d loss %.4e val NMSE %.2f dB rho %.4f (centered %.2f dB)",
                    epoch, record.train_loss, record.val_nmse_db, record.val_rho,
                    record.val_centered_nmse_db)
        if record.val_centered_nmse_db < best_nmse:
            best_nmse = record.val_centered_nmse_db
            history.best_epoch = epoch
            checkpoint("best.nfck")
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint(f"epoch_{epoch:04d}.nfck")
        checkpoint("last.nfck")
        if out is not None:
            history.write_csv(out / "history.csv")
            history.write_timing_csv(out / "timing.csv")

    return model, history


@dataclass
class GradientCheckResult:
    max_relative_error: float
    n_checked: int
    n_kink_skipped: int

    def passed(self, tol: float) -> bool:
        return self.max_relative_error < tol


def gradient_check(model: nn.Module, probe: torch.Tensor, target: torch.Tensor | None = None,
                   step: float = 1e-3, floor: float = 1e-8,
                   train_mode: bool = False) -> GradientCheckResult:
    """Compare autograd gradients of the MSE loss with central differences.

    Runs on a float64 copy of ``model``; ``target`` defaults to ``probe``
    (autoencoder reconstruction). Per scalar the error is
    ``|a - n| / max(|a|, |n|, floor)``. A central difference whose +/- step
    flips the sign of any LeakyReLU input straddles a kink and says nothing
    about the derivative, so such scalars are skipped and counted.

    BatchNorm runs with its (frozen) running statistics unless ``train_mode``.
    """
    model = copy.deepcopy(model).double().train(train_mode)
    probe = probe.double()
    target = probe if target is None else target.double()
    saved = {name: buf.clone() for name, buf in model.named_buffers()}
    signs: list[torch.Tensor] = []
    hooks = [
        m.register_forward_hook(lambda _m, inp, _out: signs.append(inp[0] > 0))
        for m in model.modules() if isinstance(m, nn.LeakyReLU)
    ]

    def evaluate() -> tuple[float, list[torch.Tensor]]:
        signs.clear()
        with torch.no_grad():
            for name, buf in model.named_buffers():
                buf.copy_(saved[name])
            return mse_loss(target, model(probe)).item(), list(signs)

    try:
        model.zero_grad()
        _, base_signs = evaluate()
        with torch.enable_grad():
            mse_loss(target, model(probe)).backward()
        worst, checked, skipped = 0.0, 0, 0
        with torch.no_grad():
            for p in model.parameters():
                analytic = p.grad.reshape(-1)
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + step
                    up, up_signs = evaluate()
                    flat[i] = orig - step
                    down, down_signs = evaluate()
                    flat[i] = orig
                    if any(not torch.equal(a, b) or not torch.equal(a, c)
                           for a, b, c in zip(base_signs, up_signs, down_signs)):
                        skipped += 1
                        continue
                    numeric = (up - down) / (2 * step)
                    a = analytic[i].item()
                    worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
                    checked += 1
    finally:
        for h in hooks:
            h.remove()
    return GradientCheckResult(worst, checked, skipped)
