import math

import numpy as np
import pytest

from helpers import central_difference, rel_error
from pixbrush.fields import (
    NUM_BLOCKS,
    EncodingSpec,
    eval_localization,
    eval_texture,
    extract_maps,
    field_backward,
    field_forward,
    fourier_encode,
    init_field_params,
)
from pixbrush.geometry import invert_uv, unit_square_mesh


def small_field(kind, seed=0, width=8, mode="axis"):
    return init_field_params(EncodingSpec(3, 1.0, seed, mode), kind, seed, width)


def test_encode_origin():
    enc = fourier_encode(np.zeros((1, 3)), EncodingSpec(5))
    np.testing.assert_array_equal(enc[0, :15], 0.0)
    np.testing.assert_array_equal(enc[0, 15:], 1.0)


def test_encode_dimensions():
    assert fourier_encode(np.ones((2, 3)), EncodingSpec(4)).shape == (2, 24)
    assert fourier_encode(np.ones((2, 3)), EncodingSpec(4, mode="gaussian")).shape == (2, 8)
    assert EncodingSpec(4).output_dim == 24


def test_encode_gaussian_recompute():
    x = (0.3, -0.1, 0.5)
    spec = EncodingSpec(5, 2.0, seed=7, mode="gaussian")
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7)))
    freqs = [[2.0 * float(gen.standard_normal()) for _ in range(3)] for _ in range(5)]
    proj = [2 * math.pi * sum(f * c for f, c in zip(row, x)) for row in freqs]
    expected = [math.sin(p) for p in proj] + [math.cos(p) for p in proj]
    np.testing.assert_allclose(fourier_encode(np.array([x]), spec)[0], expected, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(fourier_encode(np.array([x]), spec), fourier_encode(np.array([x]), spec))


def test_zero_frequencies_rejected():
    with pytest.raises(ValueError):
        EncodingSpec(0)


def test_init_structure_and_determinism():
    a = init_field_params(EncodingSpec(), "probability", 5, 16)
    b = init_field_params(EncodingSpec(), "probability", 5, 16)
    assert len(a.blocks) == NUM_BLOCKS == 6
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


def test_init_probability_mean():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(1000, 3))
    for seed in range(3):
        p = eval_localization(init_field_params(EncodingSpec(), "probability", seed, 64), pts)
        assert 0.35 <= p.mean() <= 0.65


@pytest.mark.parametrize("training", [False, True])
def test_output_ranges(training):
    pts = np.random.default_rng(1).uniform(-1, 1, size=(200, 3))
    p = eval_localization(small_field("probability"), pts, training)
    c = eval_texture(small_field("rgb"), pts, training)
    assert p.shape == (200,) and c.shape == (200, 3)
    assert ((p > 0) & (p < 1)).all() and ((c > 0) & (c < 1)).all()


def test_zeroed_head_is_half():
    pts = np.random.default_rng(2).normal(size=(10, 3))
    for kind, fn in (("probability", eval_localization), ("rgb", eval_texture)):
        params = small_field(kind)
        params.head_weight[...] = 0
        params.head_bias[...] = 0
        np.testing.assert_array_equal(fn(params, pts), 0.5)


def test_wrong_head_kind():
    with pytest.raises(ValueError):
        eval_localization(small_field("rgb"), np.zeros((2, 3)))


@pytest.mark.parametrize("kind", ["probability", "rgb"])
@pytest.mark.parametrize("training", [False, True])
def test_gradients_match_finite_differences(kind, training):
    rng = np.random.default_rng(4)
    params = small_field(kind, seed=3)
    for blk in params.blocks:  # non-trivial BN state for eval mode
        blk.running_mean[...] = rng.normal(scale=0.1, size=blk.running_mean.shape)
        blk.running_var[...] = rng.uniform(0.5, 2.0, size=blk.running_var.shape)
        blk.gamma[...] = rng.uniform(0.5, 1.5, size=blk.gamma.shape)
        blk.beta[...] = rng.normal(scale=0.3, size=blk.beta.shape)
    pts = rng.uniform(-1, 1, size=(12, 3))
    out, cache = field_forward(params, pts, training)
    g = rng.normal(size=out.shape)
    grads = field_backward(params, cache, g)

    def loss():
        return float((field_forward(params, pts, training)[0] * g).sum())

    arrays = params.arrays()
    for _ in range(10):
        k = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(n)) for n in arrays[k].shape)
        fd = central_difference(loss, arrays[k], idx)
        if abs(fd) < 1e-9 and abs(grads[k][idx]) < 1e-9:
            continue  # dead ReLU unit
        assert rel_error(grads[k][idx], fd) < 1e-4, (k, idx)


def test_running_stats_untouched_by_forward():
    params = small_field("probability")
    before = [a.copy() for a in params.running_stats()]
    _, cache = field_forward(params, np.random.default_rng(0).normal(size=(20, 3)), training=True)
    for a, b in zip(before, params.running_stats()):
        np.testing.assert_array_equal(a, b)
    params.update_running_stats(cache.batch_stats, 0.1)
    assert any(not np.array_equal(a, b) for a, b in zip(before, params.running_stats()))


def test_extract_maps_square():
    samples = invert_uv(unit_square_mesh(), 4)
    loc, tex = small_field("probability"), small_field("rgb", seed=1)
    p_map, rgb_map = extract_maps(loc, tex, samples)
    assert p_map.shape == (4, 4) and rgb_map.shape == (4, 4, 3)
    for (i, j), pt in zip(samples.texels, samples.points):
        assert p_map[i, j] == eval_localization(loc, pt[None])[0]
    np.testing.assert_array_equal(rgb_map.reshape(-1, 3)[samples.flat_index], eval_texture(tex, samples.points))


def test_extract_maps_constant_and_uncovered():
    mesh = unit_square_mesh()
    # keep only the first triangle so half the chart is uncovered
    from pixbrush.geometry import Mesh

    half = Mesh(mesh.vertices, mesh.faces[:1], mesh.corner_uvs[:1])
    samples = invert_uv(half, 8)
    loc = small_field("probability")
    loc.head_weight[...] = 0
    p_map, rgb_map = extract_maps(loc, small_field("rgb"), samples)
    np.testing.assert_array_equal(p_map[samples.coverage_mask], 0.5)
    np.testing.assert_array_equal(p_map[~samples.coverage_mask], 0.0)
    np.testing.assert_array_equal(rgb_map[~samples.coverage_mask], 0.0)
