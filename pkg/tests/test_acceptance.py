"""End-to-end acceptance gate.

Every criterion records one PASS/FAIL line which conftest prints in the terminal summary,
then asserts. Thresholds and runtime budgets are fixed here and never relaxed.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import torch
from scipy.stats import norm

from conftest import ACCEPTANCE_LINES, tiny_config
from lpl_lab import diffusion as dc
from lpl_lab.checkpoint import load_checkpoint, save_checkpoint
from lpl_lab.evalsuite import FeatureSet, frechet_distance, power_grid, prdc, to_luma
from lpl_lab.lpl import LatentPerceptualLoss, depth_weights, lpl_loss
from lpl_lab.outliers import detect_outliers, mask_pyramid
from lpl_lab.probes import penalty_sweep
from lpl_lab.toydata import DataSpec, generate_textured_dataset
from lpl_lab.trainer import train_generator
from oracles import lpl_gradient_check, oracle_mask
from test_evalsuite import brute_prdc

REPRO_ENV = "LPL_LAB_REPRO_SUMMARY"
FULL_SCALE = {"framework": "eps", "resolution": 64, "pretrain_steps": 20_000,
              "posttrain_steps": 10_000, "seeds": [0, 1, 2]}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def test_criterion_1_exact_inversion():
    start = time.perf_counter()
    worst = {}
    for kind in ("eps", "v", "flow"):
        s = dc.build_schedule(kind)
        gen = torch.Generator().manual_seed(0)
        z0 = torch.randn(100, 4, 16, 16, generator=gen)
        eps = torch.randn(100, 4, 16, 16, generator=gen)
        if kind == "flow":
            t = torch.rand(100, generator=gen)
        else:
            t = torch.randint(1, 1001, (100,), generator=gen)
        z_t = dc.add_noise(z0, eps, t, s).float()
        target = dc.training_target(kind, z0, eps, t, s).float()
        rec = dc.recover_x0(kind, z_t, target, t, s)
        assert rec.dtype == torch.float32
        worst[kind] = float((rec - z0).abs().max())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 1.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(1, ok, f"max |z0_rec - z0| {detail} (tol 1e-5), {elapsed:.2f}s")


def test_criterion_2_gradient_check(ae):
    start = time.perf_counter()
    live = lpl_gradient_check(ae, seed=0, detach_stats=False)
    frozen = lpl_gradient_check(ae, seed=0, detach_stats=True)
    elapsed = time.perf_counter() - start
    ok = max(live, frozen) < 1e-3 and elapsed < 60
    assert record(2, ok, f"max rel err {live:.1e} (live stats), {frozen:.1e} (detached stats), "
                         f"tol 1e-3, {elapsed:.1f}s")


def test_criterion_3_zero_at_truth_and_gate(ae, small_latents):
    start = time.perf_counter()
    z0 = small_latents[:4]
    pyr, _ = ae.decode_with_taps(z0)
    pyr_hat, _ = ae.decode_with_taps(z0.clone())
    at_truth = lpl_loss(pyr, pyr_hat, mask_pyramid(pyr_hat), depth_weights(pyr.resolutions))
    z_hat = (z0 + 0.4).requires_grad_(True)
    loss, _ = LatentPerceptualLoss(ae)(z0, z_hat, torch.tensor([True, False, True, False]))
    loss.backward()
    gated_nonzero = int(torch.count_nonzero(z_hat.grad[[1, 3]]))
    live_nonzero = int(torch.count_nonzero(z_hat.grad[[0, 2]]))
    elapsed = time.perf_counter() - start
    ok = at_truth.item() == 0.0 and gated_nonzero == 0 and live_nonzero > 0 and elapsed < 1.0
    assert record(3, ok, f"loss at truth {at_truth.item()}, nonzero grads in gated-off samples "
                         f"{gated_nonzero}, {elapsed:.2f}s")


def test_criterion_4_outlier_masking():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    masked, kept, oracle_ok = 0, [], True
    for _ in range(100):
        f = rng.standard_normal((32, 32))
        i, j = rng.integers(32, size=2)
        f[i, j] = rng.choice([-1, 1]) * rng.uniform(100, 1000)
        mask = detect_outliers(torch.from_numpy(f), 2)[0].numpy()
        masked += int(mask[i, j] == 0)
        inliers = np.ones((32, 32), bool)
        inliers[i, j] = False
        kept.append(mask[inliers].mean())
        oracle_ok &= bool(np.array_equal(mask, oracle_mask(f, 2)))
    constant_ok = all(bool((detect_outliers(torch.full((32, 32), c), d)[0] == 1).all())
                      for c in (0.0, -2.5, 7.0) for d in (1, 2, 4))
    elapsed = time.perf_counter() - start
    ok = masked == 100 and min(kept) >= 0.9 and constant_ok and oracle_ok and elapsed < 10
    assert record(4, ok, f"spikes masked {masked}/100, min inliers kept {min(kept):.3f}, "
                         f"constant kept {constant_ok}, oracle match {oracle_ok}, "
                         f"{elapsed:.1f}s")


def test_criterion_5_projection_identity():
    start = time.perf_counter()
    out = penalty_sweep(100, seed=0)
    elapsed = time.perf_counter() - start
    ok = (out["identity_passes"] == 100 and out["bound_violations"] == 0
          and out["max_identity_error"] < 1e-8 and elapsed < 10)
    assert record(5, ok, f"identity {out['identity_passes']}/100 "
                         f"(max err {out['max_identity_error']:.1e}), "
                         f"bound violations {out['bound_violations']}, {elapsed:.2f}s")


def test_criterion_6_schedule_suite():
    s = dc.make_ddpm_schedule()
    endpoints = s.betas[0] == 0.00085 and abs(s.betas[-1] - 0.012) < 1e-15
    zt = dc.enforce_zero_terminal_snr(s)
    terminal = abs(zt.alphas_cumprod[-1]) < 1e-12
    anchor = abs(np.sqrt(zt.alphas_cumprod[0]) - np.sqrt(s.alphas_cumprod[0])) < 1e-12
    monotone = True
    for kind in ("eps", "v"):
        sch = dc.build_schedule(kind)
        for tau in (0.5, 1.5, 4.0):
            g = dc.gate(sch, np.arange(1, 1001), tau).astype(int)
            monotone &= not np.any(np.diff(g) > 0)
    gen = torch.Generator().manual_seed(6)
    worst = 0.0
    for t in (1, 10, 250, 999):
        z0, eps = (torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64) for _ in range(2))
        eps_hat = eps + 0.1 * torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64)
        tt = torch.tensor([t])
        z0_hat = dc.recover_x0("eps", dc.add_noise(z0, eps, tt, s), eps_hat, tt, s)
        lhs = float(dc.diffusion_loss(eps, eps_hat))
        rhs = float(dc.x0_loss_factor(s, tt) * dc.diffusion_loss(z0, z0_hat))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    ok = endpoints and terminal and anchor and monotone and worst < 1e-6
    assert record(6, ok, f"endpoints {endpoints}, terminal abar {zt.alphas_cumprod[-1]:.1e}, "
                         f"anchor {anchor}, gate monotone {monotone}, "
                         f"loss factor rel err {worst:.1e}")


def test_criterion_7_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    x = FeatureSet(rng.standard_normal((500, 8)))
    fd_same = frechet_distance(x, x)
    grid = norm.ppf((np.arange(100_000) + 0.5) / 100_000)
    fd_gap = frechet_distance(FeatureSet(grid), FeatureSet(grid + 3.0))
    prdc_ok = True
    for _ in range(5):
        real = rng.standard_normal((20, 3))
        fake = rng.standard_normal((20, 3)) * 1.3 + 0.4
        prdc_ok &= prdc(FeatureSet(real), FeatureSet(fake), 3) == \
            brute_prdc(real.tolist(), fake.tolist(), 3)
    imgs = rng.uniform(-1, 1, (4, 32, 48, 3))
    lhs = power_grid(imgs).sum() / (32 * 48)
    rhs = (to_luma(imgs) ** 2).sum(axis=(1, 2)).mean()
    parseval = abs(lhs - rhs) / rhs
    elapsed = time.perf_counter() - start
    ok = (abs(fd_same) < 1e-6 and abs(fd_gap - 9) < 1e-3 and prdc_ok and parseval < 1e-6
          and elapsed < 60)
    assert record(7, ok, f"FD identical {fd_same:.1e}, FD gap-3 {fd_gap:.6f}, "
                         f"prdc brute force {prdc_ok}, Parseval rel err {parseval:.1e}, "
                         f"{elapsed:.1f}s")


def _full_scale(summary: dict) -> list[str]:
    found = summary.get("scale", {})
    return [f"{k}={found.get(k)} (need {v})" for k, v in FULL_SCALE.items()
            if found.get(k) != v]


def test_criterion_8_directional_reproduction():
    path = os.environ.get(REPRO_ENV)
    if not path or not Path(path).exists():
        record(8, False, f"no full-scale repro summary (set {REPRO_ENV} to the "
                         "repro_summary.json of `lpl-lab repro`); the full run needs far more "
                         "than the 2 h CPU budget on this machine")
        raise AssertionError(f"criterion 8 requires a full-scale repro run; {REPRO_ENV} unset")
    summary = json.loads(Path(path).read_text())
    gaps = _full_scale(summary)
    verdict = summary["verdict"]
    elapsed = sum(summary.get("timings", {}).values())
    ok = not gaps and verdict["passed"] and elapsed <= 7200
    detail = (f"winning seeds {verdict['winning_seeds']} (need {verdict['needed']}), "
              f"wall time {elapsed / 3600:.2f}h (budget 2h)")
    if gaps:
        detail += "; not full scale: " + ", ".join(gaps)
    assert record(8, ok, detail)


def test_criterion_9_determinism(ae, tmp_path):
    corpus = generate_textured_dataset(DataSpec(count=64, seed=9))
    cfg = tiny_config(trainer__pretrain_steps=3, trainer__posttrain_steps=3)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        train_generator(cfg, corpus, ae, tmp_path / "a")
        train_generator(cfg, corpus, ae, tmp_path / "b")
    finally:
        torch.set_num_threads(threads)
    same_jsonl = (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ck = load_checkpoint(tmp_path / "a" / "final.ckpt")
    save_checkpoint(tmp_path / "copy.ckpt", ck)
    back = load_checkpoint(tmp_path / "copy.ckpt")
    roundtrip = (list(ck) == list(back)
                 and all(ck[k].dtype == back[k].dtype and ck[k].tobytes() == back[k].tobytes()
                         for k in ck)
                 and (tmp_path / "copy.ckpt").read_bytes() ==
                 (tmp_path / "a" / "final.ckpt").read_bytes())
    ok = same_jsonl and roundtrip
    assert record(9, ok, f"metrics JSONL identical {same_jsonl}, checkpoint round-trip "
                         f"bitwise {roundtrip} ({len(ck)} tensors)")
