import json
import sys
import types

import numpy as np
import pytest

from pixbrush.adapter import (
    ExternalBackend,
    build_request,
    decode_array,
    encode_array,
    load_external_backend,
    parse_request,
)
from pixbrush.guidance import Condition, GuidanceError, ToyBackend, build_mask_pyramid, make_schedule, sds_grad


def test_array_round_trip_layout():
    a = np.arange(24, dtype=np.float64).reshape(2, 4, 3) / 7
    enc = encode_array(a)
    assert enc["shape"] == [2, 4, 3] and enc["dtype"] == "float32"
    np.testing.assert_array_equal(decode_array(enc), a.astype(np.float32))
    # row-major little-endian
    import base64

    raw = np.frombuffer(base64.b64decode(enc["data"]), dtype="<f4")
    np.testing.assert_array_equal(raw, a.astype(np.float32).ravel(order="C"))
    np.testing.assert_array_equal(decode_array(encode_array(a, "float64")), a)


def test_malformed_array():
    with pytest.raises(GuidanceError):
        decode_array({"shape": [3], "dtype": "float32", "data": "AAAA"})


def test_request_round_trip_json():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(8, 8, 3))
    ref = rng.uniform(size=(8, 8, 3))
    render = rng.uniform(size=(8, 8))
    cond = Condition("a cow with sunglasses", ref, build_mask_pyramid(render, 0.5, (4, 2)), 0.7)
    req = json.loads(json.dumps(build_request(z, 123, cond)))
    assert set(req) == {"image", "timestep", "prompt", "reference_image", "image_weight", "mask_pyramid"}
    assert set(req["mask_pyramid"]) == {"8", "4", "2"}
    z2, t, cond2 = parse_request(req)
    assert t == 123 and cond2.prompt == cond.prompt and cond2.image_weight == 0.7
    np.testing.assert_allclose(z2, z, atol=1e-6)
    for r in (8, 4, 2):
        np.testing.assert_array_equal(cond2.mask.level(r), cond.mask.level(r))


def test_text_only_request_has_nulls():
    req = build_request(np.zeros((4, 4, 3)), 5, Condition("p"))
    assert req["reference_image"] is None and req["mask_pyramid"] is None


def toy_server(toy):
    def transport(request):
        z, t, cond = parse_request(json.loads(json.dumps(request)))
        return {"noise": encode_array(toy.predict_noise(z, t, cond), "float64")}

    return transport


def test_external_backend_matches_toy():
    toy = ToyBackend(schedule=make_schedule())
    ext = ExternalBackend(toy_server(toy), (8,), toy.schedule)
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(8, 8, 3))
    eps = rng.normal(size=x.shape)
    cond = Condition("p", rng.uniform(size=(8, 8, 3)), build_mask_pyramid(rng.uniform(size=(8, 8))))
    g_ext = sds_grad(ext, x, cond, 300, eps)
    g_toy = sds_grad(toy, x.astype(np.float32).astype(np.float64), cond, 300, eps)
    np.testing.assert_allclose(g_ext.grad, g_toy.grad, atol=1e-4)


def test_external_backend_rejects_bad_response():
    ext = ExternalBackend(lambda req: {"noise": encode_array(np.zeros((2, 2)))})
    with pytest.raises(GuidanceError, match="shape"):
        ext.predict_noise(np.zeros((4, 4, 3)), 5, Condition("p"))
    ext = ExternalBackend(lambda req: {})
    with pytest.raises(GuidanceError, match="noise"):
        ext.predict_noise(np.zeros((4, 4, 3)), 5, Condition("p"))


def test_load_external_backend(monkeypatch):
    mod = types.ModuleType("fake_backend_mod")
    mod.single = lambda cfg: "b"
    mod.pair = lambda cfg: ("loc", "img")
    monkeypatch.setitem(sys.modules, "fake_backend_mod", mod)
    assert load_external_backend("fake_backend_mod:single") == ("b", "b")
    assert load_external_backend("fake_backend_mod:pair") == ("loc", "img")
    with pytest.raises(ValueError):
        load_external_backend("no_colon")
