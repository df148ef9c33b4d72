"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Lines are echoed immediately and repeated in the terminal summary.
Criterion 8 (full-size training of six models) is opt-in:

* ``NFCSI_FULL_RECIPE_DIR=<run root>`` checks reports already produced by the CLI;
* ``NFCSI_FULL_RECIPE=1`` runs the whole recipe first (many CPU hours).
"""

from __future__ import annotations

import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from nfcsi.channel import spherical_distance
from nfcsi.cli import main as cli_main
from nfcsi.dataset import SamplingConfig, build_dataset
from nfcsi.evaluation import EvalReport, cosine_similarity, nmse
from nfcsi.model import (
    Architecture,
    CsiAutoencoder,
    ModelConfig,
    NonLocalBlock,
    RefineBlock,
    build_model,
    count_parameters,
    published_non_fc_budget,
    zero_branch_,
)
from nfcsi.training import TrainConfig, gradient_check, train

D = 0.005  # half-wavelength spacing at 30 GHz


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def draw_geometries(rng, n, r_of=None):
    n1 = rng.integers(1, 1025, n)
    n2 = rng.integers(1, 9, n)
    d1, d2 = n1 * D, n2 * D
    if r_of is None:
        guard = (1024 + 8) * D
        r = rng.uniform(guard * 1.0001, 5000.0, n)
    else:
        r = r_of(d1, d2)
    theta = rng.uniform(-np.pi / 2, np.pi / 2, n)
    phi = rng.uniform(-np.pi / 2, np.pi / 2, n)
    return r, theta, phi, d1, d2


def test_criterion_01_expansion_matches_coordinates():
    rng = np.random.default_rng(2024)
    tic = time.perf_counter()
    r, theta, phi, d1, d2 = draw_geometries(rng, 1_000_000)
    expanded = spherical_distance(r, theta, phi, d1, d2)
    oracle = np.hypot(r * np.cos(theta) - d2 * np.sin(phi),
                      r * np.sin(theta) + d2 * np.cos(phi) - d1)
    elapsed = time.perf_counter() - tic
    worst = float(np.max(np.abs(expanded - oracle) / oracle))
    ok = worst < 1e-9 and elapsed < 30.0
    report(1, ok, f"1e6 geometries, max rel err {worst:.2e} (< 1e-9), {elapsed:.2f} s (< 30 s)")
    assert ok


def test_criterion_02_far_field_limit():
    # stated target uses d2*sin(theta+phi); the coordinate geometry expands to sin(theta-phi)
    rng = np.random.default_rng(7)
    r, theta, phi, d1, d2 = draw_geometries(
        rng, 10_000, r_of=lambda d1, d2: 1e4 * (d1 + d2) * rng.uniform(1.0, 10.0, d1.shape))
    excess = spherical_distance(r, theta, phi, d1, d2) - r
    tol = 1e-3 * (d1 + d2)
    stated = np.abs(excess - (d2 * np.sin(theta + phi) - d1 * np.sin(theta)))
    planar = np.abs(excess - (d2 * np.sin(theta - phi) - d1 * np.sin(theta)))
    ok = bool(np.all(stated < tol))
    report(2, ok, f"1e4 draws with sin(theta+phi): {int(np.sum(stated >= tol))} violations, "
                  f"worst {float(np.max(stated / tol)):.3g}x tol; with sin(theta-phi): "
                  f"{int(np.sum(planar >= tol))} violations, worst {float(np.max(planar / tol)):.3g}x tol")
    assert ok


def test_criterion_03_difference_law():
    diffs = {}
    for arch in Architecture:
        t = [count_parameters(CsiAutoencoder(ModelConfig(cr, arch))).total for cr in (16, 32, 64)]
        diffs[arch.value] = (t[0] - t[1], t[1] - t[2])
    ok = all(d == (262_208, 131_104) for d in diffs.values())
    report(3, ok, ", ".join(f"{a}: {d[0]:,} / {d[1]:,}" for a, d in diffs.items())
           + " (expected 262,208 / 131,104)")
    assert ok


def test_criterion_04_non_fc_budget():
    audit = count_parameters(CsiAutoencoder(ModelConfig(16, Architecture.EXTENDNLNET)))
    target = published_non_fc_budget(Architecture.EXTENDNLNET)
    gap = (audit.non_fc_params - target) / target
    for name, count in audit.layers:
        print(f"    {name:45s} {count:>8,d}")
    ok = target == 16_992 and abs(gap) <= 0.15
    report(4, ok, f"ExtendNLNet non-FC {audit.non_fc_params:,} vs 16,992 ({100 * gap:+.1f}%, band +/-15%); "
                  f"{len(audit.layers)} layers itemized; BN per-width count {audit.legacy_non_fc_params:,}")
    assert ok


def test_criterion_05_gradient_check():
    config = ModelConfig(compression_ratio=8, image_size=4)
    assert config.codeword_length == 4
    model = build_model(config, seed=0)
    probe = torch.rand(4, 2, 4, 4, generator=torch.Generator().manual_seed(1))
    tic = time.perf_counter()
    result = gradient_check(model, probe)
    elapsed = time.perf_counter() - tic
    total = result.n_checked + result.n_kink_skipped
    ok = result.passed(1e-4) and elapsed < 300 and result.n_kink_skipped < 0.05 * total
    report(5, ok, f"4x4 ExtendNLNet K=4: max rel err {result.max_relative_error:.2e} (< 1e-4) over "
                  f"{result.n_checked:,} scalars ({result.n_kink_skipped} straddle a LeakyReLU kink), "
                  f"{elapsed:.0f} s (< 300 s)")
    assert ok


def test_criterion_06_block_identities():
    x = torch.randn(4, 2, 32, 32)
    with torch.no_grad():
        nl_ok = torch.equal(zero_branch_(NonLocalBlock(2))(x), x)
        rb = zero_branch_(RefineBlock(slope=0.3)).eval()
        rb_err = float((rb(x) - torch.where(x > 0, x, 0.3 * x)).abs().max())
        rows = NonLocalBlock(2).attention(x).double().sum(-1)
    row_err = float((rows - 1).abs().max())
    ok = nl_ok and rb_err < 1e-6 and row_err < 1e-6
    report(6, ok, f"Non-Local zero branch identity: {nl_ok}; Refine zero branch vs LeakyReLU "
                  f"{rb_err:.1e}; attention row sums within {row_err:.1e} (< 1e-6)")
    assert ok


@pytest.mark.slow
def test_criterion_07_scaled_training():
    tic = time.perf_counter()
    bundle = build_dataset(SamplingConfig(seed=0, n_train=5_000, n_val=1_000, n_test=1_000))
    config = TrainConfig(model=ModelConfig(16, Architecture.EXTENDNLNET), epochs=20, seed=0)
    _, history = train(config, bundle)
    elapsed = time.perf_counter() - tic
    best = next(r for r in history.records if r.epoch == history.best_epoch)
    decreased = history.train_losses[-1] < history.initial_train_loss
    baseline = nmse(bundle.val, np.full_like(bundle.val, bundle.zero_level))
    ok = (best.val_centered_nmse_db <= -10.0 and best.val_centered_rho >= 0.85
          and elapsed <= 4 * 3600 and decreased)
    report(7, ok, f"5000/1000, 20 epochs, CR=16, best epoch {best.epoch}: channel NMSE "
                  f"{best.val_centered_nmse_db:.2f} dB (<= -10), rho {best.val_centered_rho:.4f} (>= 0.85); "
                  f"[0,1]-image NMSE {best.val_nmse_db:.2f} dB, rho {best.val_rho:.4f}, "
                  f"constant-image NMSE {baseline:.2f} dB; loss decreased: {decreased}; {elapsed / 60:.1f} min")
    assert ok


TABLE_TARGETS = {16: -22.94, 32: -21.18, 64: -16.77}


def _full_recipe_root() -> Path | None:
    if os.environ.get("NFCSI_FULL_RECIPE_DIR"):
        return Path(os.environ["NFCSI_FULL_RECIPE_DIR"])
    if os.environ.get("NFCSI_FULL_RECIPE") != "1":
        return None
    root = Path(os.environ.get("NFCSI_FULL_RECIPE_ROOT", "runs/full-recipe"))
    if not (root / "data" / "dataset.nfcs").exists():
        assert cli_main(["gen-data", "--out", str(root), "--seed", "0"]) == 0
    for arch in Architecture:
        for cr in TABLE_TARGETS:
            common = ["--out", str(root), "--architecture", arch.value, "--cr", str(cr)]
            if not (root / "reports" / f"{arch.value}_cr{cr}.json").exists():
                assert cli_main(["train", "--seed", "0", *common]) == 0
                assert cli_main(["eval", *common]) == 0
    return root


@pytest.mark.slow
def test_criterion_08_full_recipe():
    root = _full_recipe_root()
    if root is None:
        ACCEPTANCE_LINES.append("criterion 8: SKIP | full recipe not run; set NFCSI_FULL_RECIPE=1 "
                                "or NFCSI_FULL_RECIPE_DIR=<run root>")
        pytest.skip("full recipe needs NFCSI_FULL_RECIPE=1 or NFCSI_FULL_RECIPE_DIR")
    reports = {(a, cr): EvalReport.read(root / "reports" / f"{a.value}_cr{cr}.json")
               for a in Architecture for cr in TABLE_TARGETS}
    ext = {cr: reports[Architecture.EXTENDNLNET, cr] for cr in TABLE_TARGETS}
    within = all(abs(ext[cr].centered_nmse_db - t) <= 5.0 for cr, t in TABLE_TARGETS.items())
    n = [ext[cr].centered_nmse_db for cr in (16, 32, 64)]
    rho = [ext[cr].centered_rho for cr in (16, 32, 64)]
    ordered = n[0] <= n[1] <= n[2] and rho[0] >= rho[1] >= rho[2]
    margin = reports[Architecture.CSINET, 64].centered_nmse_db - ext[64].centered_nmse_db
    ok = within and ordered and margin >= 2.0
    report(8, ok, "ExtendNLNet NMSE " + " / ".join(f"{v:.2f}" for v in n)
           + " dB vs -22.94/-21.18/-16.77 (+/-5 dB); rho " + " / ".join(f"{v:.4f}" for v in rho)
           + f"; ordering {ordered}; margin over CsiNet at CR=64 {margin:.2f} dB (>= 2)")
    assert ok


def test_criterion_09_metric_units():
    rng = np.random.default_rng(9)
    h = rng.normal(size=(5, 2, 32, 32))
    g = rng.normal(size=h.shape)
    checks = {
        "nmse(h,0)=0 dB": abs(nmse(h, np.zeros_like(h))) < 1e-9,
        "scale invariance": abs(nmse(4.2 * h, 4.2 * g) - nmse(h, g)) < 1e-9,
        "0.9h gives -20 dB": abs(nmse(h, 0.9 * h) + 20.0) < 1e-9,
        "rho(h,h)=1": abs(cosine_similarity(h, h) - 1.0) < 1e-9,
    }
    a = np.zeros((1, 2, 32, 32))
    b = np.zeros_like(a)
    a[0, 0, 0, :] = 1.0
    b[0, 1, 1, :] = 1.0  # orthogonal support in every column
    checks["rho orthogonal=0"] = abs(cosine_similarity(a, b)) < 1e-9
    ok = all(checks.values())
    report(9, ok, ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


def _digests(root: Path) -> dict[str, str]:
    files = [root / "data" / "dataset.nfcs", root / "data" / "dataset.nfcs.json"]
    files += sorted((root / "checkpoints").rglob("*.nfck"))
    files += sorted((root / "checkpoints").rglob("history.csv"))
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def test_criterion_10_determinism(tmp_path):
    digests = []
    for name in ("one", "two"):
        root = tmp_path / name
        common = ["--out", str(root), "--seed", "11"]
        assert cli_main(["gen-data", *common, "--n-train", "40", "--n-val", "10", "--n-test", "10"]) == 0
        assert cli_main(["train", *common, "--epochs", "2", "--batch-size", "10",
                         "--architecture", "extendnlnet", "--cr", "64"]) == 0
        digests.append(_digests(root))
    ok = digests[0] == digests[1] and len(digests[0]) >= 5
    report(10, ok, f"{len(digests[0])} artifacts (dataset, manifest, checkpoints, history) "
                   f"checksum-identical across two seeded runs: {ok}")
    assert ok
