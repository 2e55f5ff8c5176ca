"""Acceptance gate: nine end-to-end properties of the erasure framework.

Each test prints one `criterion N: PASS/FAIL` line on the real stdout (so it
survives pytest's capture) and then asserts.  Criteria 7-9 share one cached
small-preset ablation under .acceptance_cache/; the first run trains the
full pipeline (about 80 minutes on one CPU core), later runs reuse every
checkpoint via the config hash.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from erasekit.config import small_config
from erasekit.diffusion import Condition, NoiseSchedule, student_sample
from erasekit.evaluation import (build_eval_cases, ensure_segmentor, evaluate,
                                 identity_eraser, oracle_eraser, run_ablation)
from erasekit.losses import (LossWeights, adaptive_loss_weight, combined_loss,
                             detect_sundries, distribution_matching_grad,
                             feature_coherence_loss, intersection_over_self,
                             sundries_suppression_loss)
from erasekit.training import LossLog, build_denoiser

CACHE_DIR = Path(__file__).resolve().parent.parent / ".acceptance_cache"


@pytest.fixture
def verdict(capfd):
    """Print one criterion line on the real terminal, then assert."""

    def emit(num: int, ok: bool, detail: str):
        with capfd.disabled():
            print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}",
                  flush=True)
        assert ok, f"criterion {num} failed: {detail}"

    return emit


# --------------------------------------------------------------------------
# 1: residual-overlap ratio equals integer pixel counting


def test_c1_ios_matches_pixel_counting(verdict):
    rng = np.random.default_rng(20260816)
    began = time.perf_counter()
    pairs = 10_000
    mismatches = 0
    for i in range(pairs):
        a = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        b = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        if not a.any():
            a[rng.integers(16), rng.integers(16)] = True
        got = intersection_over_self(torch.from_numpy(a.astype(np.float64)),
                                     torch.from_numpy(b.astype(np.float64)))
        if i < 100:
            # anchor the vectorized count with an explicit pixel loop
            inter = sum(1 for r in range(16) for c in range(16)
                        if a[r, c] and b[r, c])
            area = sum(1 for r in range(16) for c in range(16) if a[r, c])
        else:
            inter = int(np.sum(a & b))
            area = int(np.sum(a))
        if got != inter / area:
            mismatches += 1
    elapsed = time.perf_counter() - began
    ok = mismatches == 0 and elapsed < 10.0
    verdict(1, ok, f"{pairs} random 16x16 mask pairs, {mismatches} mismatches "
                    f"vs integer counting, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2: sundries gate truth table at the contractual thresholds


def _mask_pair(total_px: int, inside_px: int):
    """Entity mask of `total_px` pixels, `inside_px` of them in the region."""
    region = torch.zeros(16, 16, dtype=torch.float64)
    region[:, :8] = 1.0  # 128 region pixels
    mask = torch.zeros(16, 16, dtype=torch.float64)
    flat_in = torch.nonzero(region.flatten()).flatten()
    flat_out = torch.nonzero(1 - region.flatten()).flatten()
    mask.flatten()[flat_in[:inside_px]] = 1.0
    mask.flatten()[flat_out[:total_px - inside_px]] = 1.0
    return mask, region


def test_c2_sundries_gate_table(verdict):
    rows = [(20, 20, 0.9, True),    # IoS 1.00, p 0.90 -> detected
            (20, 17, 0.9, False),   # IoS 0.85, p 0.90 -> no
            (20, 20, 0.1, False),   # IoS 1.00, p 0.10 -> no
            (100, 91, 0.21, True)]  # IoS 0.91, p 0.21 -> detected
    results = []
    for total, inside, p1, want in rows:
        mask, region = _mask_pair(total, inside)
        probs = torch.tensor([[1 - p1, p1]], dtype=torch.float64)
        report = detect_sundries(probs, mask[None], region,
                                 ios_threshold=0.9, prob_threshold=0.2)
        assert report.ios[0] == pytest.approx(inside / total, abs=0)
        results.append(bool(report.indices) == want)
    ok = all(results)
    verdict(2, ok, "gate at (IoS, p): (1.0,.9)->yes (0.85,.9)->no "
                    "(1.0,.1)->no (0.91,.21)->yes with thresholds 0.9/0.2")


# --------------------------------------------------------------------------
# 3: suppression and coherence gradients vs central differences


def _fd_worst(loss_fn, tensors, n_coords: int, step: float = 1e-6):
    """Largest relative error between autograd and central differences."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    checked = 0
    for tens, grad in zip(tensors, grads):
        if grad is None:
            continue
        flat_g = grad.flatten()
        flat_t = tens.detach().flatten()
        for idx in flat_g.abs().argsort(descending=True)[:n_coords]:
            an = float(flat_g[idx])
            if abs(an) < 1e-7:
                continue
            orig = float(flat_t[idx])
            with torch.no_grad():
                flat_t[idx] = orig + step
                hi = float(loss_fn())
                flat_t[idx] = orig - step
                lo = float(loss_fn())
                flat_t[idx] = orig
            fd = (hi - lo) / (2 * step)
            worst = max(worst, abs(fd - an) / max(abs(an), abs(fd)))
            checked += 1
    return worst, checked


def _ss_instance(rng):
    region = torch.zeros(8, 8, dtype=torch.float64)
    r, c = rng.integers(0, 4, size=2)
    region[r:r + 4, c:c + 4] = 1.0
    masks = torch.from_numpy(rng.uniform(0.02, 0.3, size=(3, 8, 8)))
    inside = region.bool()
    masks[0][inside] = torch.from_numpy(
        rng.uniform(0.65, 0.95, size=(int(inside.sum()),)))
    p1 = torch.from_numpy(np.array([rng.uniform(0.3, 0.9),
                                    rng.uniform(0.0, 0.15),
                                    rng.uniform(0.0, 0.15)]))
    probs = torch.stack([1 - p1, p1], dim=1)
    probs.requires_grad_()
    masks.requires_grad_()
    report = detect_sundries(probs, masks, region)
    assert report.indices == [0]
    return (lambda: sundries_suppression_loss(probs, masks, report),
            [probs, masks])


def _efc_instance(rng):
    feats = torch.from_numpy(rng.normal(size=(5, 8, 8)))
    feats.requires_grad_()
    region = torch.zeros(8, 8, dtype=torch.float64)
    r, c = rng.integers(2, 5, size=2)
    region[r:r + 3, c:c + 3] = 1.0
    masks = torch.zeros(2, 8, 8, dtype=torch.float64)
    masks[0, 0:5, :] = 0.9            # crosses the region, >=16 px outside
    masks[1, 6:8, 0:2] = 0.9          # too small outside, ineligible
    loss_fn = lambda: feature_coherence_loss(feats, masks, region)[0]
    _, eligible = feature_coherence_loss(feats.detach(), masks, region)
    assert eligible == [0]
    return loss_fn, [feats]


def test_c3_pairfree_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(33)
    began = time.perf_counter()
    worst = 0.0
    instances = 0
    for _ in range(60):
        loss_fn, tensors = _ss_instance(rng)
        rel, checked = _fd_worst(loss_fn, tensors, n_coords=3)
        assert checked > 0
        worst = max(worst, rel)
        instances += 1
    for _ in range(60):
        loss_fn, tensors = _efc_instance(rng)
        rel, checked = _fd_worst(loss_fn, tensors, n_coords=4)
        assert checked > 0
        worst = max(worst, rel)
        instances += 1
    elapsed = time.perf_counter() - began
    ok = worst < 1e-3 and instances >= 100 and elapsed < 120.0
    verdict(3, ok, f"{instances} random 8x8 instances, worst relative "
                    f"error {worst:.2e} vs central differences, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 4: distribution-matching gradient against closed-form Gaussian scores


class _GaussianScore:
    """Exact noise predictor for x0 ~ N(mean, 1) under the schedule."""

    def __init__(self, schedule, mean):
        self.schedule = schedule
        self.mean = mean

    def predict_eps(self, x_t, t, cond):
        ab = self.schedule._gather(t, x_t).to(x_t.dtype)
        return (1 - ab).sqrt() * (x_t - ab.sqrt() * self.mean)


def test_c4_dmd_gradient_analytic(verdict):
    schedule = NoiseSchedule()
    real = _GaussianScore(schedule, 0.0)
    fake = _GaussianScore(schedule, 1.0)
    rng = np.random.default_rng(44)
    worst = 0.0
    for t in (1, 100, 250, 499, 750, 980):
        y = torch.from_numpy(rng.normal(size=(8, 1)))
        noise = torch.from_numpy(rng.normal(size=(8, 1)))
        got = distribution_matching_grad(y, t, None, real, fake, noise,
                                         schedule=schedule)
        root_ab = math.sqrt(float(schedule.alpha_bar[t]))
        want = root_ab / (root_ab + 1e-6)
        worst = max(worst, float((got - want).abs().max()))
    shared = distribution_matching_grad(
        torch.from_numpy(rng.normal(size=(8, 1))), 499, None, fake, fake,
        torch.from_numpy(rng.normal(size=(8, 1))), schedule=schedule)
    exactly_zero = bool((shared == 0).all())
    ok = worst < 1e-6 and exactly_zero
    verdict(4, ok, f"N(0,1) vs N(1,1) exact scores, max deviation "
                    f"{worst:.2e}; shared models give exactly zero: "
                    f"{exactly_zero}")


# --------------------------------------------------------------------------
# 5: combined-loss coefficients and adaptive rescaling


def test_c5_loss_algebra(verdict):
    parts = {k: torch.tensor(1.0, dtype=torch.float64)
             for k in ("distill", "dmd", "gan", "ss", "efc")}
    total = float(combined_loss(parts, LossWeights()))
    coeff_ok = abs(total - 3.0) < 1e-12
    isolated = []
    for name, coeff in (("distill", 1.0), ("dmd", 0.7), ("gan", 0.3),
                        ("ss", 0.5), ("efc", 0.5)):
        bumped = dict(parts)
        bumped[name] = torch.tensor(2.0, dtype=torch.float64)
        isolated.append(abs(float(combined_loss(bumped, LossWeights()))
                            - total - coeff) < 1e-12)

    w = torch.randn(16, dtype=torch.float64, requires_grad=True)
    coeffs = torch.randn(16, dtype=torch.float64)
    main = (coeffs * w).sum()
    twin = (coeffs * w).sum()
    w_equal = adaptive_loss_weight(main, twin, [w])
    k = 8.0
    w_scaled = adaptive_loss_weight(main, k * (coeffs * w).sum(), [w])
    adaptive_ok = abs(w_equal - 1.0) < 1e-4 and abs(w_scaled - 1 / k) < 1e-4
    ok = coeff_ok and all(isolated) and adaptive_ok
    verdict(5, ok, f"unit parts total 3.0 with coefficients "
                    f"(1, 0.7, 0.3, 0.5, 0.5); equal-norm weight "
                    f"{w_equal:.6f}, 8x-scaled weight {w_scaled:.6f}")


# --------------------------------------------------------------------------
# 6: schedule and sampler invariants


def test_c6_schedule_and_sampler_invariants(verdict):
    schedule = NoiseSchedule()
    ab = schedule.alpha_bar
    endpoints_ok = ab[0] == 1.0 and ab[-1] < 1e-3
    monotone_ok = bool(np.all(np.diff(ab) < 0))

    gen = torch.Generator().manual_seed(66)
    x0 = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    worst = 0.0
    for t in (1, 50, 250, 499, 750, 1000):
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        x_t = schedule.add_noise(x0, t, eps)
        back = schedule.pred_x0(eps, x_t, t)
        worst = max(worst, float((back - x0).abs().max()))
    round_trip_ok = worst < 1e-5

    student = build_denoiser(schedule, "x0", seed=6, base_width=16,
                             time_dim=32)
    xm = torch.rand(2, 3, 16, 16, generator=gen)
    m = torch.zeros(2, 1, 16, 16)
    m[:, :, 5:11, 4:12] = 1.0
    xm = xm * (1 - m)
    cond = Condition(x_m=xm, m_in=m)
    out = student_sample(student, cond, num_steps=2, seed=0, composite=True)
    outside = (m == 0).expand_as(out)
    composite_ok = torch.equal(out[outside], xm[outside])

    ok = endpoints_ok and monotone_ok and round_trip_ok and composite_ok
    verdict(6, ok, f"alpha_bar monotone with endpoints (1.0, {ab[-1]:.2e}); "
                    f"noise round-trip residual {worst:.2e}; two-step sample "
                    f"bit-equal to input outside the mask: {composite_ok}")


# --------------------------------------------------------------------------
# 7-9: the trained pipeline (shared cached ablation)


@pytest.fixture(scope="session")
def ablation_result():
    return run_ablation(small_config(), seeds=(0, 1, 2), out_dir=CACHE_DIR)


def test_c7_full_model_beats_baseline(ablation_result, verdict):
    result = ablation_result
    base_msn = result.mean_msn("baseline")
    full_msn = result.mean_msn("full")
    base_mars = result.mean_mars("baseline")
    full_mars = result.mean_mars("full")
    seeds = sorted({r.seed for r in result.rows})
    hours = result.total_seconds / 3600.0
    ok = (len(seeds) >= 3 and full_msn <= 0.5 * base_msn
          and full_mars < base_mars and result.total_seconds < 6 * 3600)
    verdict(7, ok, f"{len(seeds)} seeds: MSN {base_msn:.3f} -> {full_msn:.3f} "
                    f"(<= 0.5x: {full_msn <= 0.5 * base_msn}), MARS "
                    f"{base_mars:.3f} -> {full_mars:.3f}, wall {hours:.2f}h")


def test_c8_stage3_loss_routing(ablation_result, verdict):
    d1_records = 0
    d2_records = 0
    violations = []
    for seed_dir in sorted(CACHE_DIR.glob("seed*")):
        log_path = seed_dir / "row-full" / "stage3_loss.log"
        for rec in LossLog.read(log_path):
            if rec["dataset"] == "d2":
                d2_records += 1
                if "ss" not in rec:
                    violations.append("suppression missing on a d2 batch")
                if "distill" in rec:
                    violations.append("distillation ran on a d2 batch")
                if rec["t"] != 999:
                    violations.append(f"d2 batch at t={rec['t']}")
            else:
                d1_records += 1
                if "distill" not in rec:
                    violations.append("d1 batch without distillation")
                if "ss" in rec:
                    violations.append("suppression leaked onto a d1 batch")
    ok = not violations and d1_records > 0 and d2_records > 0
    detail = (f"{d1_records} paired / {d2_records} unpaired records: "
              f"suppression only on unpaired, distillation only on paired, "
              f"unpaired always t=999")
    if violations:
        detail = "; ".join(sorted(set(violations)))
    verdict(8, ok, detail)


def test_c9_metric_sanity_controls(ablation_result, verdict):
    cfg = small_config()
    segmentor, _ = ensure_segmentor(cfg, CACHE_DIR)
    cases = build_eval_cases(cfg.scene, cfg.eval.eval_scenes,
                             cfg.data.dilate_px, 0)
    ident = evaluate(identity_eraser, cases, segmentor,
                     cfg.eval.ios_threshold, cfg.eval.prob_threshold)
    orac = evaluate(oracle_eraser, cases, segmentor,
                    cfg.eval.ios_threshold, cfg.eval.prob_threshold,
                    subset=lambda c: c.occludes_nothing)
    ok = ident.msn >= 0.8 and orac.msn <= 0.05
    verdict(9, ok, f"identity eraser MSN {ident.msn:.3f} (>= 0.8) on "
                    f"{ident.n_cases} cases; oracle re-render MSN "
                    f"{orac.msn:.3f} (<= 0.05) on {orac.n_cases} "
                    f"occludes-nothing cases")
