import numpy as np
import pytest

from evreflex.flow import (
    FlowSolverConfig,
    SolverDivergenceError,
    charbonnier,
    charbonnier_deriv,
    estimate_flow,
    loss_gradient,
    photometric_loss,
    smoothness_loss,
    total_loss,
    warp,
    _loss_and_grad,
)
from evreflex.types import (
    MapSemantics,
    ShapeMismatchError,
    accumulate_events,
    event_mask,
    flow_field,
    float_map,
    make_events,
)


def _const_flow(shape, du, dv):
    return np.stack([np.full(shape, du, dtype=np.float64),
                     np.full(shape, dv, dtype=np.float64)])


def _ramp(shape):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    return xs


# -- warp ---------------------------------------------------------------------


def test_warp_zero_flow_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((6, 7))
    out, valid = warp(img, _const_flow(img.shape, 0.0, 0.0))
    assert np.array_equal(out, img)
    assert valid.all()


def test_warp_integer_shift_on_ramp():
    img = _ramp((5, 8))
    out, valid = warp(img, _const_flow(img.shape, 1.0, 0.0))
    assert np.allclose(out[:, :-1], img[:, :-1] + 1.0)
    assert valid[:, :-1].all() and not valid[:, -1].any()


def test_warp_half_pixel_bilinear():
    img = _ramp((4, 6))
    out, valid = warp(img, _const_flow(img.shape, 0.5, 0.0))
    # interior: linear ramp interpolates exactly
    assert np.allclose(out[:, :-1], img[:, :-1] + 0.5)


def test_warp_floatmap_and_flowfield_types():
    fm = float_map(np.ones((4, 4)), MapSemantics.DEPTH_M)
    out, valid = warp(fm, _const_flow((4, 4), 0.25, -0.25))
    assert out.semantics == MapSemantics.DEPTH_M
    ff = flow_field(np.ones((4, 4)), np.zeros((4, 4)))
    fout, _ = warp(ff, _const_flow((4, 4), 0.0, 0.0))
    assert np.allclose(fout.u, 1.0)


def test_warp_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        warp(np.zeros((4, 4)), _const_flow((5, 5), 0, 0))


# -- charbonnier ---------------------------------------------------------------


def test_charbonnier_zero_closed_form():
    # eps^(2*alpha) = (1e-3)^0.9 = 10^-2.7
    assert charbonnier(0.0) == pytest.approx(10 ** -2.7, rel=1e-12)


def test_charbonnier_even_symmetry():
    rng = np.random.default_rng(1)
    x = rng.normal(size=100)
    assert np.allclose(charbonnier(x), charbonnier(-x))


def test_charbonnier_at_one():
    assert charbonnier(1.0) == pytest.approx((1 + 1e-6) ** 0.45, rel=1e-12)


def test_charbonnier_validation():
    with pytest.raises(ValueError):
        charbonnier(1.0, eps=0.0)
    with pytest.raises(ValueError):
        charbonnier(1.0, alpha=1.5)


def test_charbonnier_deriv_matches_fd():
    xs = np.linspace(-2, 2, 41)
    h = 1e-7
    fd = (charbonnier(xs + h) - charbonnier(xs - h)) / (2 * h)
    assert np.allclose(charbonnier_deriv(xs), fd, atol=1e-4)


# -- losses ---------------------------------------------------------------------


def test_photometric_identical_aligned_images():
    rng = np.random.default_rng(2)
    img = rng.random((8, 8))
    loss = photometric_loss(_const_flow(img.shape, 0.0, 0.0), img, img)
    assert loss == pytest.approx(64 * charbonnier(0.0), rel=1e-12)


def test_photometric_exact_alignment_after_shift():
    img = np.random.default_rng(3).random((8, 8))
    shifted = np.empty_like(img)
    shifted[:, 1:] = img[:, :-1]  # shifted(x) = img(x-1): img(x) = shifted(x+1)
    shifted[:, 0] = img[:, 0]
    loss = photometric_loss(_const_flow(img.shape, 1.0, 0.0), img, shifted)
    interior = 8 * 7  # last column warps out of bounds and contributes 0
    assert loss == pytest.approx(interior * charbonnier(0.0), rel=1e-12)


def test_photometric_matches_double_loop_oracle():
    rng = np.random.default_rng(4)
    it = rng.random((8, 8))
    it1 = rng.random((8, 8))
    u = rng.normal(0, 0.8, (8, 8))
    v = rng.normal(0, 0.8, (8, 8))
    loss = photometric_loss(np.stack([u, v]), it, it1)

    total = 0.0
    h, w = it.shape
    for y in range(h):
        for x in range(w):
            sx, sy = x + u[y, x], y + v[y, x]
            if not (0 <= sx <= w - 1 and 0 <= sy <= h - 1):
                continue
            x0 = min(int(np.floor(sx)), w - 2)
            y0 = min(int(np.floor(sy)), h - 2)
            fx, fy = sx - x0, sy - y0
            val = (it1[y0, x0] * (1 - fx) * (1 - fy) + it1[y0, x0 + 1] * fx * (1 - fy)
                   + it1[y0 + 1, x0] * (1 - fx) * fy + it1[y0 + 1, x0 + 1] * fx * fy)
            total += float(charbonnier(it[y, x] - val))
    assert loss == pytest.approx(total, rel=1e-9)


def test_smoothness_constant_field():
    F = _const_flow((6, 5), 1.7, -0.3)
    pairs = 6 * 4 + 5 * 5  # horizontal + vertical unordered pairs
    assert smoothness_loss(F) == pytest.approx(pairs * 2 * charbonnier(0.0), rel=1e-12)


def test_smoothness_translation_invariance():
    rng = np.random.default_rng(5)
    F = np.stack([rng.normal(size=(6, 6)), rng.normal(size=(6, 6))])
    shifted = F + 3.7
    assert smoothness_loss(F) == pytest.approx(smoothness_loss(shifted), rel=1e-12)


def test_smoothness_matches_double_loop_oracle():
    rng = np.random.default_rng(6)
    u = rng.normal(size=(6, 6))
    v = rng.normal(size=(6, 6))
    total = 0.0
    for chan in (u, v):
        for y in range(6):
            for x in range(6):
                if x + 1 < 6:
                    total += float(charbonnier(chan[y, x] - chan[y, x + 1]))
                if y + 1 < 6:
                    total += float(charbonnier(chan[y, x] - chan[y + 1, x]))
    assert smoothness_loss(np.stack([u, v])) == pytest.approx(total, rel=1e-9)


def test_total_loss_composition():
    rng = np.random.default_rng(7)
    it = rng.random((8, 8))
    it1 = rng.random((8, 8))
    F = np.stack([rng.normal(0, 0.5, (8, 8)), rng.normal(0, 0.5, (8, 8))])
    cfg = FlowSolverConfig(alpha=0.5)
    lp = photometric_loss(F, it, it1, eps=cfg.charbonnier_eps, alpha=cfg.charbonnier_alpha)
    ls = smoothness_loss(F, eps=cfg.charbonnier_eps, alpha=cfg.charbonnier_alpha)
    assert total_loss(F, it, it1, cfg) == pytest.approx(lp + 0.5 * ls, rel=1e-12)
    cfg0 = FlowSolverConfig(alpha=0.0)
    assert total_loss(F, it, it1, cfg0) == pytest.approx(
        photometric_loss(F, it, it1, eps=cfg0.charbonnier_eps, alpha=cfg0.charbonnier_alpha),
        rel=1e-12,
    )


def test_total_loss_pure_smoothness_when_aligned():
    img = np.random.default_rng(8).random((8, 8))
    cfg = FlowSolverConfig(alpha=0.7)
    F = _const_flow(img.shape, 0.0, 0.0)
    expected = 64 * charbonnier(0.0) + 0.7 * smoothness_loss(F)
    assert total_loss(F, img, img, cfg) == pytest.approx(expected, rel=1e-12)


# -- gradient -------------------------------------------------------------------


def _fd_safe_instance(rng, shape=(8, 8)):
    """Random instance whose loss is smooth around the evaluation point."""
    it = rng.random(shape)
    it1 = rng.random(shape)
    fracs = np.linspace(0.15, 0.45, 11)
    u = rng.integers(-2, 3, shape).astype(np.float64) + rng.choice(fracs, shape)
    v = rng.integers(-2, 3, shape).astype(np.float64) + rng.choice(fracs, shape)
    from evreflex.flow import _bilinear, _sample_grid

    xs, ys = _sample_grid(it.shape, u, v)
    sampled, _, _, _ = _bilinear(it1, xs, ys)
    residual = it - sampled
    it = it + np.where(np.abs(residual) < 8e-3, 0.05, 0.0)
    return it, it1, np.stack([u, v])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(99)
    cfg = FlowSolverConfig()
    it, it1, F = _fd_safe_instance(rng)
    gu, gv = loss_gradient(F, it, it1, cfg)
    g = np.stack([gu, gv])
    h = 1e-4
    for c in range(2):
        for i in range(8):
            for j in range(8):
                Fp = F.copy()
                Fp[c, i, j] += h
                Fm = F.copy()
                Fm[c, i, j] -= h
                fd = (total_loss(Fp, it, it1, cfg) - total_loss(Fm, it, it1, cfg)) / (2 * h)
                assert abs(g[c, i, j] - fd) < 1e-3 * (1.0 + abs(g[c, i, j]))


def test_gradient_with_weight_mask_matches_fd():
    rng = np.random.default_rng(100)
    cfg = FlowSolverConfig(charbonnier_eps=0.05)
    it, it1, F = _fd_safe_instance(rng)
    w = (rng.random((8, 8)) > 0.4).astype(np.float64)
    gu, gv = loss_gradient(F, it, it1, cfg, weight_mask=w)
    h = 1e-5
    for c, i, j in [(0, 2, 3), (1, 5, 1), (0, 7, 7), (1, 0, 4)]:
        Fp = F.copy()
        Fp[c, i, j] += h
        Fm = F.copy()
        Fm[c, i, j] -= h
        fd = (total_loss(Fp, it, it1, cfg, weight_mask=w)
              - total_loss(Fm, it, it1, cfg, weight_mask=w)) / (2 * h)
        g = gu if c == 0 else gv
        assert abs(g[i, j] - fd) < 1e-4 * (1.0 + abs(g[i, j]))


def test_gradient_zero_at_constructed_minimum():
    # identical images at zero flow: photometric and smoothness both stationary
    img = np.random.default_rng(101).random((8, 8))
    cfg = FlowSolverConfig()
    gu, gv = loss_gradient(_const_flow(img.shape, 0.0, 0.0), img, img, cfg)
    assert np.abs(gu).max() < 1e-6 and np.abs(gv).max() < 1e-6


def test_gradient_constant_images_reduces_to_smoothness():
    cfg = FlowSolverConfig()
    img = np.full((8, 8), 0.5)
    rng = np.random.default_rng(102)
    F = np.stack([rng.normal(size=(8, 8)), rng.normal(size=(8, 8))])
    gu, gv = loss_gradient(F, img, img, cfg)
    cfg_photo_only = FlowSolverConfig(alpha=0.0)
    gu0, gv0 = loss_gradient(F, img, img, cfg_photo_only)
    # photometric part vanishes (residual 0 -> rho'(0) = 0)
    assert np.abs(gu0).max() < 1e-12 and np.abs(gv0).max() < 1e-12
    ls = lambda f: cfg.alpha * smoothness_loss(
        f, eps=cfg.charbonnier_eps, alpha=cfg.charbonnier_alpha
    )
    h = 1e-6
    Fp = F.copy()
    Fp[0, 3, 3] += h
    Fm = F.copy()
    Fm[0, 3, 3] -= h
    assert gu[3, 3] == pytest.approx((ls(Fp) - ls(Fm)) / (2 * h), rel=1e-4)


# -- estimate_flow ----------------------------------------------------------------


def _events_everywhere(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    ev = make_events(np.zeros(h * w), xs.ravel(), ys.ravel(), np.ones(h * w, int))
    return accumulate_events(ev, (0.0, 1.0), w, h)


def test_estimate_flow_identical_images_stays_zero():
    rng = np.random.default_rng(103)
    img = rng.random((32, 32))
    em = _events_everywhere(img.shape)
    flow, loss = estimate_flow(em, img, img, FlowSolverConfig(pyramid_levels=3))
    aee = np.hypot(flow.u, flow.v).mean()
    assert aee < 0.05
    assert np.isfinite(loss)


def test_estimate_flow_recovers_known_shift():
    ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
    period = 24.0
    img0 = 0.5 + 0.3 * np.sin(2 * np.pi * xs / period) * np.sin(2 * np.pi * ys / period)
    img1 = 0.5 + 0.3 * np.sin(2 * np.pi * (xs - 2.0) / period) * np.sin(2 * np.pi * ys / period)
    em = _events_everywhere(img0.shape)
    cfg = FlowSolverConfig(charbonnier_eps=0.1, iters_per_level=600, convergence_tol=0.0)
    flow, _ = estimate_flow(em, img0, img1, cfg)
    ee = np.hypot(flow.u - 2.0, flow.v)
    assert ee.mean() < 0.5


def test_estimate_flow_monotone_loss_per_level(monkeypatch):
    import evreflex.flow as fl

    records = []
    original = fl._loss_and_grad

    def recording(u, v, it, it1, cfg, weights, oob_zero=True):
        out = original(u, v, it, it1, cfg, weights, oob_zero=oob_zero)
        if not oob_zero:
            records.append((it.shape, out[0]))
        return out

    monkeypatch.setattr(fl, "_loss_and_grad", recording)
    rng = np.random.default_rng(104)
    img0 = rng.random((32, 32))
    img1 = np.roll(img0, 1, axis=1)
    em = _events_everywhere(img0.shape)
    fl.estimate_flow(em, img0, img1, FlowSolverConfig(iters_per_level=50))
    # accepted losses per level never increase: group by level shape and check
    # that the minimum so far is the last value seen for each level
    by_level = {}
    for shape, loss in records:
        by_level.setdefault(shape, []).append(loss)
    for shape, losses in by_level.items():
        running = np.minimum.accumulate(losses)
        assert losses[-1] == running[-1]


def test_estimate_flow_shift_equivariance():
    ys, xs = np.mgrid[0:48, 0:48].astype(np.float64)
    # periods divide the raster so np.roll produces exact translates
    base = 0.5 + 0.25 * np.sin(2 * np.pi * xs / 16) * np.sin(2 * np.pi * ys / 16) \
        + 0.15 * np.sin(2 * np.pi * xs / 12)
    img0 = base
    img1 = np.roll(base, 2, axis=1)
    em = _events_everywhere(img0.shape)
    cfg = FlowSolverConfig(charbonnier_eps=0.1, iters_per_level=400, convergence_tol=0.0)
    f_a, _ = estimate_flow(em, img0, img1, cfg)
    f_b, _ = estimate_flow(em, np.roll(img0, 3, axis=0), np.roll(img1, 3, axis=0), cfg)
    interior = np.s_[8:-8, 8:-8]
    aligned_u = np.roll(f_a.u, 3, axis=0)
    aligned_v = np.roll(f_a.v, 3, axis=0)
    aee = np.hypot(f_b.u - aligned_u, f_b.v - aligned_v)[interior].mean()
    assert aee < 0.1


def test_estimate_flow_divergence_error_reports_location():
    img = np.full((16, 16), np.nan)
    em = _events_everywhere(img.shape)
    with pytest.raises(SolverDivergenceError) as err:
        estimate_flow(em, img, img, FlowSolverConfig(pyramid_levels=1))
    assert err.value.level == 0
    assert "level" in str(err.value)


def test_estimate_flow_event_gated_requires_map():
    img = np.zeros((16, 16))
    with pytest.raises(ValueError):
        estimate_flow(None, img, img, FlowSolverConfig(event_weighting="event_gated"))
    flow, _ = estimate_flow(None, img, img, FlowSolverConfig(event_weighting="uniform"))
    assert flow.width == 16


def test_solver_config_validation():
    with pytest.raises(ValueError):
        FlowSolverConfig(alpha=-1)
    with pytest.raises(ValueError):
        FlowSolverConfig(pyramid_levels=0)
    with pytest.raises(ValueError):
        FlowSolverConfig(step_size=0)
    with pytest.raises(ValueError):
        FlowSolverConfig(event_weighting="sometimes")
