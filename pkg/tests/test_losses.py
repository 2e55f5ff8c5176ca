"""Loss-function tests against independent oracles: brute-force pixel counts
for IoS, central finite differences for the pair-free gradients, and the
closed-form Gaussian score difference for distribution matching."""

import math

import numpy as np
import pytest
import torch

from erasekit.diffusion import Condition, Denoiser, NoiseSchedule
from erasekit.losses import (
    FeatureDiscriminator,
    LossWeights,
    SundriesReport,
    adaptive_loss_weight,
    combined_loss,
    detect_sundries,
    distillation_loss,
    distribution_matching_grad,
    distribution_matching_loss,
    feature_coherence_loss,
    intersection_over_self,
    lsgan_losses,
    perceptual_distance,
    sundries_suppression_loss,
)


def _ios_bruteforce(mask, m_in):
    """Reference IoS: explicit per-pixel counting, no vectorization."""
    area = 0
    inter = 0
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            a = mask[r][c] > 0.5
            b = m_in[r][c] > 0.5
            if a:
                area += 1
                if b:
                    inter += 1
    if area == 0:
        return float("nan")
    return inter / area


class TestIntersectionOverSelf:
    def test_matches_bruteforce_on_random_masks(self, rng):
        for _ in range(200):
            mask = rng.random((12, 12))
            m_in = rng.random((12, 12))
            got = intersection_over_self(torch.from_numpy(mask), torch.from_numpy(m_in))
            want = _ios_bruteforce(mask, m_in)
            assert got == want

    def test_empty_mask_is_nan(self):
        mask = torch.zeros(6, 6)
        m_in = torch.ones(6, 6)
        assert math.isnan(intersection_over_self(mask, m_in))

    def test_full_containment(self):
        m_in = torch.zeros(8, 8)
        m_in[:, :4] = 1.0
        mask = torch.zeros(8, 8)
        mask[2:5, 1:3] = 1.0
        assert intersection_over_self(mask, m_in) == 1.0

    def test_exact_fraction(self):
        # 20 mask pixels, 17 inside: IoS is exactly 17/20.
        m_in = torch.zeros(10, 10)
        m_in[:, :5] = 1.0
        mask = torch.zeros(10, 10)
        mask[0, :5] = 1.0
        mask[1, :5] = 1.0
        mask[2, :5] = 1.0
        mask[3, 3:5] = 1.0
        mask[3, 5:8] = 1.0
        assert intersection_over_self(mask, m_in) == 17 / 20

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            intersection_over_self(torch.zeros(4, 4), torch.zeros(4, 5))


def _mask_with_ios(h, w, m_in_cols, total_px, inside_px):
    """A mask with exactly total_px pixels, inside_px of them in m_in."""
    mask = torch.zeros(h, w)
    placed_in = 0
    placed_out = 0
    for r in range(h):
        for c in range(w):
            if c < m_in_cols and placed_in < inside_px:
                mask[r, c] = 1.0
                placed_in += 1
            elif c >= m_in_cols and placed_out < total_px - inside_px:
                mask[r, c] = 1.0
                placed_out += 1
    assert placed_in + placed_out == total_px
    return mask


class TestDetectSundries:
    def _setup(self, specs):
        # specs: list of (inside_px, total_px, p1); m_in is the left half.
        h = w = 10
        m_in = torch.zeros(h, w)
        m_in[:, :5] = 1.0
        masks = torch.stack([_mask_with_ios(h, w, 5, total, inside)
                             for inside, total, _ in specs])
        # float64 keeps the exact-threshold rows exactly on the threshold
        p1 = torch.tensor([s[2] for s in specs], dtype=torch.float64)
        probs = torch.stack([1 - p1, p1], dim=1)
        return probs, masks, m_in

    def test_gate_table(self):
        specs = [
            (20, 20, 0.9),   # IoS 1.00, confident      -> detected
            (17, 20, 0.9),   # IoS 0.85 below threshold -> no
            (20, 20, 0.1),   # confident mask, low p1   -> no
            (18, 20, 0.9),   # IoS exactly 0.90, strict -> no
            (20, 20, 0.2),   # p1 exactly 0.20, strict  -> no
            (19, 20, 0.21),  # IoS 0.95, p1 just above  -> detected
        ]
        probs, masks, m_in = self._setup(specs)
        report = detect_sundries(probs, masks, m_in)
        assert report.indices == [0, 5]
        assert report.skipped == []
        np.testing.assert_allclose(report.ios, [1.0, 0.85, 1.0, 0.9, 1.0, 0.95])
        np.testing.assert_allclose(report.alpha, [0.2] * 6)

    def test_empty_mask_skipped(self):
        probs = torch.tensor([[0.1, 0.9]])
        masks = torch.zeros(1, 6, 6)
        m_in = torch.ones(6, 6)
        report = detect_sundries(probs, masks, m_in)
        assert report.indices == []
        assert report.skipped == [0]
        assert math.isnan(report.ios[0])

    def test_custom_thresholds(self):
        specs = [(17, 20, 0.15)]
        probs, masks, m_in = self._setup(specs)
        assert detect_sundries(probs, masks, m_in).indices == []
        loose = detect_sundries(probs, masks, m_in,
                                ios_threshold=0.8, prob_threshold=0.1)
        assert loose.indices == [0]

    def test_bad_shapes_raise(self):
        with pytest.raises(ValueError):
            detect_sundries(torch.zeros(3, 3), torch.zeros(3, 4, 4), torch.zeros(4, 4))
        with pytest.raises(ValueError):
            detect_sundries(torch.zeros(3, 2), torch.zeros(2, 4, 4), torch.zeros(4, 4))


class TestSundriesSuppressionLoss:
    def test_hand_value(self):
        # One detected entity, p0 = 0.5, area weight 0.1, mask uniformly 0.5:
        # loss = -0.1 log 0.5 - log(0.5) = 1.1 log 2.
        probs = torch.tensor([[0.5, 0.5]])
        masks = torch.full((1, 10, 10), 0.5)
        report = SundriesReport(indices=[0], ios=np.array([1.0]),
                                p1=np.array([0.5]), alpha=np.array([0.1]))
        loss = sundries_suppression_loss(probs, masks, report)
        assert torch.isclose(loss, torch.tensor(1.1 * math.log(2.0)), atol=1e-6)

    def test_no_detections_zero_without_graph(self):
        probs = torch.rand(3, 2, requires_grad=True)
        masks = torch.rand(3, 8, 8, requires_grad=True)
        report = SundriesReport(indices=[], ios=np.full(3, 0.1),
                                p1=np.full(3, 0.9), alpha=np.full(3, 0.1))
        loss = sundries_suppression_loss(probs, masks, report)
        assert float(loss) == 0.0
        assert not loss.requires_grad

    def test_gradients_match_central_differences(self, rng):
        torch.manual_seed(7)
        h = w = 8
        n = 3
        checks = 0
        for case in range(6):
            probs = torch.tensor(rng.uniform(0.2, 0.8, (n, 2)),
                                 dtype=torch.float64, requires_grad=True)
            masks = torch.tensor(rng.uniform(0.15, 0.85, (n, h, w)),
                                 dtype=torch.float64, requires_grad=True)
            report = SundriesReport(indices=[0, 2], ios=np.ones(n),
                                    p1=np.full(n, 0.9),
                                    alpha=rng.uniform(0.05, 0.3, n))
            loss = sundries_suppression_loss(probs, masks, report)
            loss.backward()

            def f(p, m):
                return float(sundries_suppression_loss(p, m, report))

            step = 1e-6
            for i in report.indices:
                for tensor, grad, idx in [
                    (probs, probs.grad, (i, 0)),
                    (masks, masks.grad, (i, rng.integers(h), rng.integers(w))),
                    (masks, masks.grad, (i, rng.integers(h), rng.integers(w))),
                ]:
                    hi = tensor.detach().clone()
                    lo = tensor.detach().clone()
                    hi[idx] += step
                    lo[idx] -= step
                    if tensor is probs:
                        fd = (f(hi, masks.detach()) - f(lo, masks.detach())) / (2 * step)
                    else:
                        fd = (f(probs.detach(), hi) - f(probs.detach(), lo)) / (2 * step)
                    auto = float(grad[idx])
                    assert abs(auto - fd) <= 1e-4 * max(abs(fd), 1e-8)
                    checks += 1
            # Entity 1 is not detected: nothing should reach it.
            assert float(probs.grad[1].abs().sum()) == 0.0
            assert float(masks.grad[1].abs().sum()) == 0.0
        assert checks >= 30

    def test_entity_prob_column_gets_no_gradient(self):
        probs = torch.tensor([[0.4, 0.6]], dtype=torch.float64, requires_grad=True)
        masks = torch.full((1, 4, 4), 0.3, dtype=torch.float64, requires_grad=True)
        report = SundriesReport(indices=[0], ios=np.ones(1), p1=np.array([0.6]),
                                alpha=np.array([0.2]))
        sundries_suppression_loss(probs, masks, report).backward()
        assert float(probs.grad[0, 1]) == 0.0
        assert float(probs.grad[0, 0]) < 0.0  # pushing p0 up


class TestFeatureCoherenceLoss:
    def _straddling_setup(self, rng, c=4, h=8, w=8):
        m_in = torch.zeros(h, w)
        m_in[:, :4] = 1.0
        masks = torch.zeros(1, h, w)
        masks[0, :6, :] = 1.0  # 24 px inside, 24 px outside
        features = torch.tensor(rng.normal(size=(c, h, w)), dtype=torch.float64,
                                requires_grad=True)
        return features, masks, m_in

    def test_eligibility(self, rng):
        features, masks, m_in = self._straddling_setup(rng)
        loss, eligible = feature_coherence_loss(features, masks, m_in)
        assert eligible == [0]
        assert loss.requires_grad

    def test_small_outside_region_excluded(self, rng):
        features, masks, m_in = self._straddling_setup(rng)
        masks = torch.zeros_like(masks)
        masks[0, 0, :4] = 1.0  # fully inside m_in
        masks[0, 0, 4:6] = 1.0  # only 2 px outside, below the 16 px floor
        loss, eligible = feature_coherence_loss(features, masks, m_in)
        assert eligible == []
        assert float(loss) == 0.0

    def test_no_inside_pixels_excluded(self, rng):
        features, masks, m_in = self._straddling_setup(rng)
        masks = torch.zeros_like(masks)
        masks[0, :, 4:] = 1.0  # entirely outside the erasure mask
        loss, eligible = feature_coherence_loss(features, masks, m_in)
        assert eligible == []

    def test_perfect_alignment_saturates(self):
        # All embeddings identical: every cosine is 1, loss = -(#in-mask px).
        features = torch.ones(3, 8, 8, dtype=torch.float64)
        masks = torch.zeros(1, 8, 8)
        masks[0, :6, :] = 1.0
        m_in = torch.zeros(8, 8)
        m_in[:, :4] = 1.0
        loss, eligible = feature_coherence_loss(features, masks, m_in)
        assert eligible == [0]
        assert torch.isclose(loss, torch.tensor(-24.0, dtype=torch.float64))

    def test_gradients_match_central_differences(self, rng):
        checks = 0
        for case in range(4):
            features, masks, m_in = self._straddling_setup(rng)
            loss, eligible = feature_coherence_loss(features, masks, m_in)
            assert eligible == [0]
            loss.backward()
            inside = (masks[0] > 0.5) & (m_in > 0.5)
            rs, cs = torch.nonzero(inside, as_tuple=True)
            step = 1e-6
            for _ in range(8):
                k = rng.integers(len(rs))
                idx = (int(rng.integers(features.shape[0])), int(rs[k]), int(cs[k]))
                hi = features.detach().clone()
                lo = features.detach().clone()
                hi[idx] += step
                lo[idx] -= step
                fd = (float(feature_coherence_loss(hi, masks, m_in)[0])
                      - float(feature_coherence_loss(lo, masks, m_in)[0])) / (2 * step)
                auto = float(features.grad[idx])
                assert abs(auto - fd) <= 1e-4 * max(abs(fd), 1e-8)
                checks += 1
        assert checks >= 30

    def test_visible_center_is_constant(self, rng):
        # The out-of-mask mean is detached, so its pixels get gradient only
        # through their own in-mask appearances (here: none).
        features, masks, m_in = self._straddling_setup(rng)
        loss, _ = feature_coherence_loss(features, masks, m_in)
        loss.backward()
        outside_only = (masks[0] > 0.5) & ~(m_in > 0.5)
        assert float(features.grad[:, outside_only].abs().sum()) == 0.0

    def test_bad_shapes_raise(self):
        with pytest.raises(ValueError):
            feature_coherence_loss(torch.zeros(4, 8), torch.zeros(1, 4, 8),
                                   torch.zeros(4, 8))
        with pytest.raises(ValueError):
            feature_coherence_loss(torch.zeros(2, 4, 8), torch.zeros(1, 4, 6),
                                   torch.zeros(4, 8))


class _GaussianScoreModel:
    """Exact eps-predictor for data ~ N(mean, I) under the schedule.

    With unit data variance the posterior gives eps_hat(x_t, t)
    = sigma_t (x_t - sqrt(ab_t) mean), hence score -(x_t - sqrt(ab_t) mean).
    """

    prediction = "eps"

    def __init__(self, mean, schedule):
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.schedule = schedule

    def predict_eps(self, x_t, t, cond):
        ab = self.schedule._gather(t, x_t)
        return (1 - ab).sqrt() * (x_t - ab.sqrt() * self.mean)


class TestDistributionMatching:
    def test_matches_analytic_gaussian_scores(self):
        # real data N(0, 1), fake data N(mu, 1): score difference is
        # -sqrt(ab_t) mu per coordinate, independent of the sample.
        schedule = NoiseSchedule()
        mu = torch.tensor([1.0, 2.0, -0.5], dtype=torch.float64)
        real = _GaussianScoreModel(torch.zeros(3, dtype=torch.float64), schedule)
        fake = _GaussianScoreModel(mu, schedule)
        gen = torch.Generator().manual_seed(3)
        for t in (20, 250, 500, 980):
            y = torch.randn(8, 3, generator=gen, dtype=torch.float64)
            noise = torch.randn(8, 3, generator=gen, dtype=torch.float64)
            grad = distribution_matching_grad(y, t, None, real, fake, noise,
                                              schedule=schedule)
            ab = math.sqrt(schedule.alpha_bar[t])
            raw = (ab * mu).expand(8, 3)
            expected = raw / (raw.abs().mean(dim=1, keepdim=True) + 1e-6)
            assert float((grad - expected).abs().max()) < 1e-6

    def test_identical_models_give_exact_zero(self):
        schedule = NoiseSchedule()
        model = _GaussianScoreModel(torch.zeros(2, dtype=torch.float64), schedule)
        y = torch.randn(4, 2, dtype=torch.float64)
        noise = torch.randn(4, 2, dtype=torch.float64)
        grad = distribution_matching_grad(y, 300, None, model, model, noise,
                                          schedule=schedule)
        assert float(grad.abs().max()) == 0.0

    def test_rejects_unbatched_input(self):
        schedule = NoiseSchedule()
        model = _GaussianScoreModel(torch.zeros(1, dtype=torch.float64), schedule)
        with pytest.raises(ValueError):
            distribution_matching_grad(torch.randn(5), 100, None, model, model,
                                       torch.randn(5), schedule=schedule)

    def test_grad_carries_no_graph(self):
        schedule = NoiseSchedule()
        model = _GaussianScoreModel(torch.ones(2, dtype=torch.float64), schedule)
        y = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
        grad = distribution_matching_grad(y, 100, None, model,
                                          _GaussianScoreModel(torch.zeros(2, dtype=torch.float64), schedule),
                                          torch.randn(2, 2, dtype=torch.float64),
                                          schedule=schedule)
        assert not grad.requires_grad

    def test_injection_gradient_is_grad_over_numel(self):
        y = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        g = torch.randn(3, 4, dtype=torch.float64)
        distribution_matching_loss(y, g).backward()
        assert torch.allclose(y.grad, g / y.numel(), atol=1e-12)


class _ConstDisc:
    def __init__(self, value):
        self.value = value
        self.noises = []

    def __call__(self, images, t, cond, noise):
        self.noises.append(noise)
        return torch.full((images.shape[0],), self.value)


class TestLsgan:
    def test_hand_values_constant_disc(self):
        real = torch.zeros(4, 3, 8, 8)
        fake = torch.zeros(4, 3, 8, 8)
        noise = torch.zeros(4, 3, 8, 8)
        l_g, l_d = lsgan_losses(_ConstDisc(1.0), real, fake, 100, None, noise)
        assert float(l_g) == 0.0
        assert float(l_d) == 1.0
        l_g, l_d = lsgan_losses(_ConstDisc(0.5), real, fake, 100, None, noise)
        assert float(l_g) == pytest.approx(0.25)
        assert float(l_d) == pytest.approx(0.5)

    def test_same_noise_for_all_branches(self):
        disc = _ConstDisc(0.3)
        noise = torch.randn(2, 3, 8, 8)
        lsgan_losses(disc, torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 8),
                     50, None, noise)
        assert len(disc.noises) == 3
        assert all(n is noise for n in disc.noises)

    def test_generator_gradient_only_through_loss_g(self):
        w = torch.tensor(2.0, requires_grad=True)
        fake = w * torch.ones(2, 3, 4, 4)
        real = torch.zeros(2, 3, 4, 4)

        def disc(images, t, cond, noise):
            return images.mean(dim=(1, 2, 3))

        l_g, l_d = lsgan_losses(disc, real, fake, 10, None, torch.zeros_like(real))
        # The disc here has no parameters, so detaching the fake branch makes
        # the discriminator loss graph-free while L_G still reaches w.
        assert not l_d.requires_grad
        g = torch.autograd.grad(l_g, w)[0]
        assert g is not None and float(g) != 0.0


class TestFeatureDiscriminator:
    def test_teacher_stays_frozen_outside_parameters(self):
        teacher = Denoiser(NoiseSchedule(), prediction="eps", base_width=16,
                           time_dim=32)
        disc = FeatureDiscriminator(teacher, width=16)
        disc_params = {id(p) for p in disc.parameters()}
        teacher_params = {id(p) for p in teacher.parameters()}
        assert disc_params.isdisjoint(teacher_params)
        assert disc.teacher is teacher

    def test_output_shape_and_image_gradients(self):
        teacher = Denoiser(NoiseSchedule(), prediction="eps", base_width=16,
                           time_dim=32)
        disc = FeatureDiscriminator(teacher, width=16)
        images = torch.rand(2, 3, 8, 8, requires_grad=True)
        cond = Condition(torch.rand(2, 3, 8, 8), torch.zeros(2, 1, 8, 8))
        scores = disc(images, 200, cond, torch.randn(2, 3, 8, 8))
        assert scores.shape == (2,)
        scores.sum().backward()
        assert images.grad is not None
        assert float(images.grad.abs().sum()) > 0.0


class TestAdaptiveLossWeight:
    def test_gradient_norm_ratio(self):
        w = torch.tensor([1.0, 2.0], requires_grad=True)
        loss_main = (torch.tensor([3.0, 4.0]) * w).sum()   # grad norm 5
        loss_aux = (torch.tensor([0.0, 2.0]) * w).sum()    # grad norm 2
        got = adaptive_loss_weight(loss_main, loss_aux, w)
        assert got == pytest.approx(5.0 / (2.0 + 1e-6))

    def test_zero_main_gradient_gives_zero(self):
        w = torch.tensor([1.0], requires_grad=True)
        loss_main = (0.0 * w).sum()
        loss_aux = (2.0 * w).sum()
        assert adaptive_loss_weight(loss_main, loss_aux, w) == 0.0

    def test_gradfree_aux_saturates_at_ceiling(self):
        w = torch.tensor([1.0], requires_grad=True)
        loss_main = (3.0 * w).sum()
        assert adaptive_loss_weight(loss_main, torch.tensor(0.0), w) == 1e4
        assert adaptive_loss_weight(loss_main, torch.tensor(0.0), w,
                                    ceiling=7.0) == 7.0

    def test_accepts_single_tensor_params(self):
        w = torch.tensor([2.0], requires_grad=True)
        loss_main = (4.0 * w).sum()
        loss_aux = (1.0 * w).sum()
        assert adaptive_loss_weight(loss_main, loss_aux, w) == pytest.approx(4.0, rel=1e-5)


class TestCombinedLoss:
    def test_coefficients(self):
        parts = {"distill": torch.tensor(1.0), "dmd": torch.tensor(10.0),
                 "gan": torch.tensor(100.0), "ss": torch.tensor(1000.0),
                 "efc": torch.tensor(10000.0)}
        total = combined_loss(parts, ss_weight=0.25, efc_weight=0.5)
        # 1*1 + 0.7*10 + 0.3*100 + 0.5*0.25*1000 + 0.5*0.5*10000
        assert float(total) == pytest.approx(2663.0)

    def test_missing_parts_contribute_nothing(self):
        assert float(combined_loss({"distill": torch.tensor(2.0)})) == 2.0

    def test_unknown_part_raises(self):
        with pytest.raises(ValueError, match="unknown loss parts"):
            combined_loss({"distill": torch.tensor(1.0), "typo": torch.tensor(1.0)})

    def test_custom_weights(self):
        weights = LossWeights(distill=2.0, dmd=0.0, gan=0.0, ss=1.0, efc=1.0)
        parts = {"distill": torch.tensor(3.0), "ss": torch.tensor(5.0)}
        assert float(combined_loss(parts, weights, ss_weight=0.5)) == pytest.approx(8.5)


class TestDistillationLoss:
    def test_l2_is_mse(self):
        a = torch.randn(2, 3, 8, 8)
        b = torch.randn(2, 3, 8, 8)
        assert torch.isclose(distillation_loss(a, b, metric="l2"),
                             torch.nn.functional.mse_loss(a, b))

    def test_perceptual_zero_at_equality(self):
        a = torch.rand(2, 3, 8, 8)
        fn = lambda x: [x * 2.0, x.mean(dim=1, keepdim=True)]
        assert float(perceptual_distance(a, a.clone(), fn)) == 0.0
        assert float(distillation_loss(a, a.clone(), metric="perceptual",
                                       feature_fn=fn)) == 0.0

    def test_perceptual_requires_feature_fn(self):
        a = torch.rand(1, 3, 8, 8)
        with pytest.raises(ValueError, match="feature_fn"):
            distillation_loss(a, a, metric="perceptual")

    def test_unknown_metric_and_shape_mismatch(self):
        a = torch.rand(1, 3, 8, 8)
        with pytest.raises(ValueError, match="unknown metric"):
            distillation_loss(a, a, metric="l1")
        with pytest.raises(ValueError, match="equal shapes"):
            distillation_loss(a, torch.rand(1, 3, 8, 4))
