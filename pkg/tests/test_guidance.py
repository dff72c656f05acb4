import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixbrush.guidance import (
    Condition,
    GuidanceError,
    MaskPyramid,
    ToyBackend,
    ToyTargets,
    add_noise,
    build_mask_pyramid,
    combine_ca,
    make_schedule,
    masked_ca,
    one_minus_alpha_bar_weight,
    prompt_color,
    sample_timestep,
    sds_grad,
    toy_predict_noise,
)


def schedule_with_alpha_bar(a):
    """Single-step schedule whose alpha_bar_1 equals ``a``."""
    return make_schedule(1, 1 - a, 1 - a) if a < 1 else None


def test_schedule_single_step():
    s = make_schedule(1, 0.01, 0.01)
    assert s.alpha_bar(1) == pytest.approx(0.99, abs=1e-15)


def test_schedule_linear_default():
    s = make_schedule(1000, 1e-4, 0.02)
    # direct product oracle
    betas = [1e-4 + (0.02 - 1e-4) * k / 999 for k in range(1000)]
    prod, ref = 1.0, []
    for b in betas:
        prod *= 1 - b
        ref.append(prod)
    np.testing.assert_allclose(s.alpha_bars, ref, rtol=1e-12)
    assert (np.diff(s.alpha_bars) < 0).all()
    assert s.alpha_bar(1000) < 0.01 and s.alpha_bar(1) > 0.999


def test_schedule_bad_range():
    with pytest.raises(ValueError):
        make_schedule(10, 0.02, 0.01)
    with pytest.raises(ValueError):
        make_schedule(10).alpha_bar(11)


def test_add_noise_examples():
    x = np.full((2, 2), 0.5)
    eps = np.random.default_rng(0).normal(size=(2, 2))
    # alpha_bar = 0.25
    s = schedule_with_alpha_bar(0.25)
    np.testing.assert_allclose(add_noise(x, 1, np.zeros_like(x), s), 0.25)
    # alpha_bar -> 1 and -> 0 via a hand-built schedule
    from pixbrush.guidance import NoiseSchedule

    ends = NoiseSchedule(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(add_noise(x, 1, eps, ends), x)
    np.testing.assert_array_equal(add_noise(x, 2, eps, ends), eps)
    with pytest.raises(ValueError):
        add_noise(x, 1, np.zeros(3), s)


def test_combine_ca_examples():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    np.testing.assert_array_equal(combine_ca(a, b, 0.0), a)
    np.testing.assert_array_equal(combine_ca(a, np.zeros_like(b), 0.7), a)
    np.testing.assert_array_equal(combine_ca(np.ones((2, 2)), np.full((2, 2), 2.0), 0.5), 2.0)
    with pytest.raises(ValueError):
        combine_ca(a, b[:2], 1.0)


def test_masked_ca_examples():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(8, 8, 5)), rng.normal(size=(8, 8, 5))
    np.testing.assert_array_equal(masked_ca(a, b, 0.8, np.ones((8, 8))), combine_ca(a, b, 0.8))
    np.testing.assert_array_equal(masked_ca(a, b, 0.8, np.zeros((8, 8))), a)
    half = np.zeros((8, 8), dtype=np.uint8)
    half[:, :4] = 1
    out = masked_ca(a, b, 0.8, half)
    np.testing.assert_array_equal(out[:, :4], combine_ca(a, b, 0.8)[:, :4])
    np.testing.assert_array_equal(out[:, 4:], a[:, 4:])
    with pytest.raises(ValueError):
        masked_ca(a, b, 0.8, np.ones((4, 4)))


def test_mask_pyramid_examples():
    hi = build_mask_pyramid(np.full((8, 8), 0.9), 0.5, (4, 2, 1))
    lo = build_mask_pyramid(np.full((8, 8), 0.1), 0.5, (4, 2, 1))
    for r in (8, 4, 2, 1):
        assert (hi.level(r) == 1).all() and (lo.level(r) == 0).all()
    checker = build_mask_pyramid(np.array([[1.0, 0.0], [0.0, 1.0]]), 0.5, (1,))
    assert checker.level(1).tolist() == [[1]]
    with pytest.raises(ValueError):
        build_mask_pyramid(np.zeros((8, 8)), 0.5, (3,))
    with pytest.raises(KeyError):
        hi.level(16)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (8, 8), elements=st.floats(0, 1)),
    arrays(np.float64, (8, 8), elements=st.floats(0, 1)),
)
def test_mask_pyramid_monotone(a, b):
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    pa = build_mask_pyramid(hi, 0.5, (4, 2, 1))
    pb = build_mask_pyramid(lo, 0.5, (4, 2, 1))
    for r in (8, 4, 2, 1):
        assert (pa.level(r) >= pb.level(r)).all()


def test_condition_variants():
    ref = np.zeros((4, 4, 3))
    mask = build_mask_pyramid(np.ones((4, 4)))
    assert Condition("a").kind == "text"
    assert Condition("a", ref).kind == "text+image"
    assert Condition("a", ref, mask).kind == "text+image+mask"
    with pytest.raises(ValueError):
        Condition("a", None, mask)


def test_prompt_color_documented_hash():
    import hashlib

    d = hashlib.sha256(b"a cow with sunglasses").digest()
    np.testing.assert_array_equal(prompt_color("a cow with sunglasses"), np.array(list(d[:3])) / 255)


def toy_setup(seed=0, shape=(8, 8, 3)):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(size=shape)
    backend = ToyBackend(ToyTargets(), make_schedule())
    return rng, ref, backend


def test_toy_zero_at_target_and_delta():
    rng, ref, backend = toy_setup()
    cond = Condition("a shoe with laces", ref)
    s = backend.schedule
    for t in (20, 500, 980):
        eps = rng.normal(size=ref.shape)
        # x = target -> eps_hat - eps = 0
        z = add_noise(ref, t, eps, s)
        np.testing.assert_allclose(toy_predict_noise(z, t, cond, s, backend.targets) - eps, 0, atol=1e-9)
        # x = target + delta -> sqrt(abar)/sqrt(1-abar) * delta
        delta = rng.normal(scale=0.1, size=ref.shape)
        z = add_noise(ref + delta, t, eps, s)
        a = s.alpha_bar(t)
        np.testing.assert_allclose(
            toy_predict_noise(z, t, cond, s, backend.targets) - eps, np.sqrt(a) / np.sqrt(1 - a) * delta, atol=1e-9
        )


def test_toy_masked_all_ones_is_reference():
    ref = np.random.default_rng(3).uniform(size=(8, 8, 3))
    cond = Condition("p", ref, build_mask_pyramid(np.ones((8, 8))))
    np.testing.assert_array_equal(ToyTargets().target_image(cond, ref.shape), ref)
    text = ToyTargets().target_image(Condition("p"), ref.shape)
    masked0 = ToyTargets().target_image(Condition("p", ref, build_mask_pyramid(np.zeros((8, 8)))), ref.shape)
    np.testing.assert_array_equal(masked0, text)


def test_toy_rejects_clean_end():
    from pixbrush.guidance import NoiseSchedule

    s = NoiseSchedule(np.array([1e-12]), np.array([1 - 1e-12]))
    with pytest.raises(GuidanceError):
        toy_predict_noise(np.zeros((2, 2)), 1, Condition("p"), s, ToyTargets())


def test_sds_closed_form_example():
    s = schedule_with_alpha_bar(0.5)
    ref = np.random.default_rng(4).uniform(size=(4, 4, 3))
    backend = ToyBackend(ToyTargets(), s)
    g = sds_grad(backend, ref + 0.1, Condition("p", ref), 1, np.random.default_rng(5).normal(size=ref.shape))
    np.testing.assert_allclose(g.grad, 0.1, atol=1e-12)
    assert g.weight == 1.0 and g.t == 1 and g.grad_norm == pytest.approx(np.linalg.norm(g.grad))


def test_sds_zero_at_target():
    rng, ref, backend = toy_setup(6)
    for t in (20, 700):
        g = sds_grad(backend, ref, Condition("p", ref), t, rng.normal(size=ref.shape))
        np.testing.assert_allclose(g.grad, 0, atol=1e-9)


def test_sds_masked_zero_equals_text_only():
    rng, ref, backend = toy_setup(7)
    x = rng.uniform(size=ref.shape)
    eps = rng.normal(size=ref.shape)
    a = sds_grad(backend, x, Condition("p", ref, build_mask_pyramid(np.zeros((8, 8)))), 300, eps)
    b = sds_grad(backend, x, Condition("p"), 300, eps)
    np.testing.assert_array_equal(a.grad, b.grad)
    assert a.mask_coverage == 0.0 and b.mask_coverage is None


def test_sds_eps_independent_and_weighted():
    rng, ref, backend = toy_setup(8)
    x = rng.uniform(size=ref.shape)
    cond = Condition("p", ref)
    g1 = sds_grad(backend, x, cond, 400, rng.normal(size=x.shape), weight_fn=one_minus_alpha_bar_weight)
    g2 = sds_grad(backend, x, cond, 400, rng.normal(size=x.shape), weight_fn=one_minus_alpha_bar_weight)
    np.testing.assert_allclose(g1.grad, g2.grad, atol=1e-6)
    assert g1.weight == pytest.approx(1 - backend.schedule.alpha_bar(400))


def test_sds_descent():
    rng, ref, backend = toy_setup(9)
    s = backend.schedule
    for t in (20, 250, 900):
        x = rng.uniform(size=ref.shape)
        g = sds_grad(backend, x, Condition("p", ref), t, rng.normal(size=x.shape)).grad
        a = s.alpha_bar(t)
        eta = 0.1 / (np.sqrt(a) / np.sqrt(1 - a))
        before = ((x - ref) ** 2).sum()
        after = ((x - eta * g - ref) ** 2).sum()
        assert after < before


def test_sds_backend_failure_and_nonfinite():
    class Broken:
        feature_resolutions = ()
        schedule = make_schedule()

        def predict_noise(self, z, t, cond):
            raise RuntimeError("boom")

    class NaNs(Broken):
        def predict_noise(self, z, t, cond):
            return np.full(z.shape, np.nan)

    x = np.zeros((4, 4, 3))
    with pytest.raises(GuidanceError, match="boom"):
        sds_grad(Broken(), x, Condition("p"), 10, x)
    with pytest.raises(GuidanceError, match="non-finite"):
        sds_grad(NaNs(), x, Condition("p"), 10, x)


def test_sample_timestep_range():
    rng = np.random.default_rng(0)
    ts = [sample_timestep(rng, (20, 980)) for _ in range(5000)]
    assert min(ts) >= 20 and max(ts) <= 980


def test_mask_pyramid_coverage():
    m = MaskPyramid(np.array([[1, 0], [0, 0]], dtype=np.uint8), {}, 0.5)
    assert m.coverage == 0.25
