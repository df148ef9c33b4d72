import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from nfcsi.dataset import DatasetBundle, SamplingConfig, build_dataset
from nfcsi.evaluation import nmse, reconstruct
from nfcsi.model import ModelConfig, load_checkpoint
from nfcsi.training import (
    HISTORY_FIELDS,
    TrainConfig,
    TrainingError,
    gradient_check,
    mse_loss,
    read_history_csv,
    train,
)


@pytest.fixture(scope="module")
def toy_bundle():
    return build_dataset(SamplingConfig(seed=3, n_train=40, n_val=8, n_test=8))


def toy_config(**kw):
    base = dict(model=ModelConfig(16, "csinet"), epochs=2, batch_size=10, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestMseLoss:
    def test_identical_is_zero(self):
        x = torch.rand(3, 2, 4, 4)
        assert mse_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.zeros(2, 5, dtype=torch.float64)
        assert mse_loss(x, x + 0.1).item() == pytest.approx(0.01, rel=1e-12)

    def test_loop_oracle(self, rng):
        a, b = rng.random((4, 2, 8, 8)), rng.random((4, 2, 8, 8))
        total = 0.0
        for v, w in zip(a.ravel(), b.ravel()):
            total += (v - w) ** 2
        assert mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(
            total / a.size, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestTrain:
    def test_loss_decreases(self, toy_bundle, tmp_path):
        _, history = train(toy_config(), toy_bundle, out_dir=tmp_path)
        assert len(history.records) == 2
        assert history.train_losses[-1] < history.initial_train_loss
        assert (tmp_path / "best.nfck").exists() and (tmp_path / "last.nfck").exists()
        rows = read_history_csv(tmp_path / "history.csv")
        assert len(rows) == 2 and tuple(rows[0]) == HISTORY_FIELDS
        best = min(history.records, key=lambda r: r.val_centered_nmse_db)
        assert history.best_epoch == best.epoch

    def test_ten_sample_smoke(self, tiny_bundle):
        _, history = train(toy_config(batch_size=5), tiny_bundle)
        assert len(history.records) == 2
        assert history.train_losses[-1] < history.initial_train_loss

    def test_checkpoint_reproduces_validation_nmse(self, toy_bundle, tmp_path):
        model, history = train(toy_config(epochs=1), toy_bundle, out_dir=tmp_path)
        loaded, _ = load_checkpoint(tmp_path / "last.nfck")
        before = nmse(toy_bundle.val, reconstruct(model, toy_bundle.val))
        after = nmse(toy_bundle.val, reconstruct(loaded, toy_bundle.val))
        assert abs(before - after) <= 1e-6
        assert history.records[-1].val_nmse_db == pytest.approx(after, abs=1e-6)

    def test_artifacts_byte_identical(self, toy_bundle, tmp_path):
        for name in ("a", "b"):
            train(toy_config(), toy_bundle, out_dir=tmp_path / name)
        for f in ("best.nfck", "last.nfck", "history.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        timing = (tmp_path / "a" / "timing.csv").read_text().splitlines()
        assert timing[0] == "epoch,wall_time_s" and len(timing) == 3

    def test_deterministic(self, toy_bundle):
        m1, h1 = train(toy_config(), toy_bundle)
        m2, h2 = train(toy_config(), toy_bundle)
        assert h1.train_losses == h2.train_losses
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_resume_matches_uninterrupted(self, toy_bundle, tmp_path):
        full, h_full = train(toy_config(epochs=3), toy_bundle)
        train(toy_config(epochs=1), toy_bundle, out_dir=tmp_path)
        resumed, h_res = train(toy_config(epochs=3), toy_bundle, resume_from=tmp_path / "last.nfck")
        assert [r.epoch for r in h_res.records] == [1, 2, 3]
        assert h_res.train_losses == h_full.train_losses
        for a, b in zip(full.state_dict().values(), resumed.state_dict().values()):
            assert torch.equal(a, b)
        assert not math.isnan(h_res.records[0].wall_time_s)

    def test_checkpoint_cadence(self, toy_bundle, tmp_path):
        train(toy_config(epochs=2, checkpoint_every=1), toy_bundle, out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("epoch_*.nfck")) == ["epoch_0001.nfck", "epoch_0002.nfck"]
        model, header = load_checkpoint(tmp_path / "epoch_0001.nfck")
        assert header["metadata"]["train_config"]["batch_size"] == 10

    def test_invalid_config(self, toy_bundle):
        with pytest.raises(ValueError):
            train(toy_config(batch_size=41), toy_bundle)
        with pytest.raises(ValueError):
            train(toy_config(epochs=0), toy_bundle)

    def test_non_finite_loss(self, toy_bundle):
        bad = toy_bundle.train.copy()
        bad[0, 0, 0, 0] = np.nan
        bundle = DatasetBundle(bad, toy_bundle.val, toy_bundle.test,
                               toy_bundle.norm_min, toy_bundle.norm_max, toy_bundle.manifest)
        with pytest.raises(TrainingError, match="non-finite"):
            train(toy_config(), bundle)


class _FlippedGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return -grad


class _Flipped(nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(4, 4)

    def forward(self, x):
        return _FlippedGrad.apply(self.lin(x))


class TestGradientCheck:
    def test_linear_toy(self):
        result = gradient_check(nn.Linear(4, 4), torch.randn(6, 4))
        assert result.n_checked == 20 and result.n_kink_skipped == 0
        assert result.max_relative_error < 1e-9

    def test_detects_wrong_backward(self):
        result = gradient_check(_Flipped(), torch.randn(6, 4))
        assert result.max_relative_error > 1.0
        assert not result.passed(1e-4)

    def test_leaky_network(self):
        net = nn.Sequential(nn.Linear(3, 5), nn.LeakyReLU(0.3), nn.Linear(5, 3))
        result = gradient_check(net, torch.randn(8, 3))
        assert result.passed(1e-6)
        assert result.n_checked + result.n_kink_skipped == 38
