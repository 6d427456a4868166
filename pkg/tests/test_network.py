import numpy as np
import pytest

from simnet.mex import PoolSpec, mex
from simnet.network import (
    LayerConfig,
    MlpConvBlock,
    NetworkSpec,
    NonFiniteError,
    SimNetMlp,
    build_network,
    forward_batch,
    micro_network,
    mlp_forward,
    mlp_predict,
    mlpconv_forward,
    network_backward,
    network_forward,
    network_predict,
)
from simnet.similarity import ConvLpSim, SimilarityLayer, similarity, similarity_map
from simnet.tensor import PatchGeometry, ShapeError

import straightline


def random_mlp(rng, kind="lp", n=3, d=4, k=2, beta=0.7):
    layer = SimilarityLayer(kind, rng.normal(size=(n, d)), rng.uniform(0.2, 1.5, (n, d)), True, 1.5)
    return SimNetMlp(layer, beta, rng.normal(size=(k, n)))


def test_mlp_single_template():
    rng = np.random.default_rng(0)
    net = random_mlp(rng, n=1, k=3)
    x = rng.normal(size=4)
    np.testing.assert_allclose(mlp_forward(x, net), similarity(x, net.sim, 0) + net.offsets[:, 0], atol=1e-12)


def test_mlp_identical_offsets_equal_scores():
    rng = np.random.default_rng(1)
    net = random_mlp(rng, k=4)
    net.offsets[:] = net.offsets[0]
    out = mlp_forward(rng.normal(size=4), net)
    assert np.all(out == out[0])


def test_mlp_matches_flat_formula():
    rng = np.random.default_rng(2)
    net = random_mlp(rng, n=2, k=2)
    x = rng.normal(size=4)
    s = [similarity(x, net.sim, l) for l in range(2)]
    for r in range(2):
        assert abs(mlp_forward(x, net)[r] - mex(np.add(s, net.offsets[r]), net.beta)) < 1e-12


def test_mlp_predict():
    rng = np.random.default_rng(3)
    net = random_mlp(rng, k=2)
    net.offsets[1] = net.offsets[0] + 1.0
    for _ in range(20):
        assert mlp_predict(rng.normal(size=4), net) == 1
    net = random_mlp(rng, k=3)
    x = rng.normal(size=4)
    assert mlp_predict(x, net) == int(np.argmax(mlp_forward(x, net)))
    net.offsets[:] = 0.0
    assert mlp_predict(x, net) == 0


def _block(rng, beta1, beta2, kind="lp", k=2):
    layer = SimilarityLayer(kind, rng.normal(size=(3, 4)), rng.uniform(0.2, 1, (3, 4)), True, 1.3, PatchGeometry(2, 2))
    return MlpConvBlock(layer, beta1, rng.normal(size=(k, 3)), beta2)


def test_mlpconv_single_location_is_mlp():
    rng = np.random.default_rng(4)
    net = random_mlp(rng)
    block = MlpConvBlock(net.sim, net.beta, net.offsets, 2.0)
    x = rng.normal(size=(1, 1, 4))
    np.testing.assert_allclose(mlpconv_forward(x, block), mlp_forward(x.ravel(), net), atol=1e-12)


def test_mlpconv_collapse_including_negative_beta():
    rng = np.random.default_rng(5)
    for beta in (0.3, 1.7, 5.0):
        block = _block(rng, beta, beta)
        x = rng.normal(size=(4, 5, 1))
        s = similarity_map(x, block.sim).reshape(-1, 3)
        flat = [mex((s + block.offsets[r]).ravel(), beta) for r in range(2)]
        np.testing.assert_allclose(mlpconv_forward(x, block), flat, atol=1e-9)
    # a shared negative value for both MEX stages (offsets-free flat form)
    layer = SimilarityLayer("lp", rng.normal(size=(3, 4)), None, False, 2.0, PatchGeometry(2, 2))
    x = rng.normal(size=(3, 3, 1))
    s = similarity_map(x, layer)
    from simnet.mex import mex_reduce
    inner = mex_reduce(s, -1.2, axis=-1)
    assert abs(mex(inner.ravel(), -1.2) - mex(s.ravel(), -1.2)) < 1e-9


def test_mlpconv_symmetry_and_translation():
    rng = np.random.default_rng(6)
    layer = SimilarityLayer("lp", np.tile(rng.normal(size=(1, 4)), (3, 1)), None, False, 2.0, PatchGeometry(2, 2))
    block = MlpConvBlock(layer, 1.1, rng.normal(size=(2, 3)), 0.7)
    x = np.full((3, 3, 1), 0.4)
    out = mlpconv_forward(x, block)
    s = similarity_map(x, layer)[0, 0, 0]
    np.testing.assert_allclose(out, [s + mex(block.offsets[r], 1.1) for r in range(2)], atol=1e-12)
    block = _block(rng, 1.3, 0.6, k=3)
    x = rng.normal(size=(4, 4, 1))
    base = mlpconv_forward(x, block)
    block.offsets[1] += 2.5
    shifted = mlpconv_forward(x, block)
    assert abs(shifted[1] - base[1] - 2.5) <= 1e-12
    np.testing.assert_array_equal(shifted[[0, 2]], base[[0, 2]])


def test_network_l1_equals_mlpconv():
    rng = np.random.default_rng(7)
    geom = PatchGeometry(2, 2)
    W = rng.normal(size=(3, 4))
    sim = SimilarityLayer("lp", rng.normal(size=(3, 3)), rng.uniform(0.2, 1, (3, 3)), True, 1.6)
    block = MlpConvBlock(ConvLpSim(W, sim, geom), 0.9, rng.normal(size=(2, 3)), 1.4)
    spec = block.to_network()
    x = rng.normal(size=(4, 4, 1))
    np.testing.assert_allclose(network_forward(x, spec), mlpconv_forward(x, block), atol=1e-12)


def test_constant_network_scores_from_offsets():
    rng = np.random.default_rng(8)
    spec = build_network((4, 4, 2), [LayerConfig(field=2, channels=3, whiten_dim=4)], 3, class_beta=1.3, global_beta=0.5)
    params = spec.parameters()
    for name in params:
        if name.endswith((".W", ".z")):
            params[name] = np.zeros_like(params[name])
    params["class.b"] = rng.normal(size=(3, 3))
    spec.set_parameters(params)
    out = network_forward(np.zeros((4, 4, 2)), spec)
    np.testing.assert_allclose(out, [mex(params["class.b"][r], 1.3) for r in range(3)], atol=1e-12)


def _random_deep(rng, input_shape=(4, 4, 2)):
    spec = build_network(
        input_shape,
        [LayerConfig(field=2, pad=1, channels=3, whiten_dim=5, p=1.4, pool=PoolSpec(2, 2, 1, 1, beta=3.0)),
         LayerConfig(field=2, channels=4, whiten_dim=6, p=2.3, kind="lp")],
        3, class_beta=1.2, global_beta=-0.4, seed=int(rng.integers(1000)))
    params = spec.parameters()
    for name, v in params.items():
        if name.endswith(".u"):
            params[name] = rng.uniform(0.1, 0.5, v.shape)
        elif name.endswith((".z", ".b")):
            params[name] = rng.normal(size=v.shape)
    spec.set_parameters(params)
    return spec


def test_network_matches_straightline_oracle():
    rng = np.random.default_rng(9)
    for trial in range(5):
        spec = _random_deep(rng)
        if trial % 2:
            spec.input_mean = rng.normal(size=2)
        x = rng.normal(size=(4, 4, 2))
        np.testing.assert_allclose(network_forward(x, spec), straightline.forward(straightline.describe(spec), x.tolist()),
                                   atol=1e-8, rtol=0)
    spec, x, _ = micro_network(0)
    np.testing.assert_allclose(network_forward(x, spec), straightline.forward(straightline.describe(spec), x.tolist()),
                               atol=1e-8, rtol=0)


def test_batch_and_single_agree_and_deterministic():
    rng = np.random.default_rng(10)
    spec = _random_deep(rng)
    xs = rng.normal(size=(5, 4, 4, 2))
    batch = network_forward(xs, spec)
    for i in range(5):
        np.testing.assert_allclose(batch[i], network_forward(xs[i], spec), atol=1e-13)
    np.testing.assert_array_equal(network_forward(xs, spec), batch)
    np.testing.assert_array_equal(network_predict(xs, spec), np.argmax(batch, axis=1))


def test_prediction_invariant_to_shared_offset_shift():
    rng = np.random.default_rng(11)
    spec = _random_deep(rng)
    xs = rng.normal(size=(20, 4, 4, 2))
    base = network_predict(xs, spec)
    spec.offsets = spec.offsets + 3.0
    np.testing.assert_array_equal(network_predict(xs, spec), base)


def test_backward_zero_upstream_and_requires_cache():
    spec, x, _ = micro_network(0)
    _, cache = forward_batch(spec, x[None], keep=True)
    grads = network_backward(cache, np.zeros((1, 3)))
    assert all(not np.any(g) for g in grads.values())
    with pytest.raises(RuntimeError):
        network_backward(None, np.zeros((1, 3)))
    _, nocache = forward_batch(spec, x[None], keep=False), None
    with pytest.raises(RuntimeError):
        network_backward(nocache, np.zeros((1, 3)))


def test_backward_duplicate_templates_get_equal_gradients():
    rng = np.random.default_rng(12)
    spec = _random_deep(rng)
    layer = spec.layers[1]
    layer.sim.templates[1] = layer.sim.templates[0]
    layer.sim.weights[1] = layer.sim.weights[0]
    spec.offsets[:, 1] = spec.offsets[:, 0]
    _, cache = forward_batch(spec, rng.normal(size=(2, 4, 4, 2)), keep=True)
    g = network_backward(cache, rng.normal(size=(2, 3)))
    np.testing.assert_allclose(g["layer1.z"][0], g["layer1.z"][1], atol=1e-12)
    np.testing.assert_allclose(g["layer1.u"][0], g["layer1.u"][1], atol=1e-12)
    np.testing.assert_allclose(g["class.b"][:, 0], g["class.b"][:, 1], atol=1e-12)


def test_backward_input_gradient_matches_fd():
    rng = np.random.default_rng(13)
    spec = _random_deep(rng)
    x = rng.normal(size=(1, 4, 4, 2))
    up = rng.normal(size=(1, 3))
    _, cache = forward_batch(spec, x, keep=True)
    dx = network_backward(cache, up)["input"]
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 3, 2, 1), (0, 1, 1, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (np.sum(up * forward_batch(spec, xp)) - np.sum(up * forward_batch(spec, xm))) / (2 * h)
        assert abs(dx[idx] - fd) < 1e-6


def test_parameter_names_and_count():
    spec, _, _ = micro_network(0)
    names = list(spec.parameters())
    assert names == ["layer0.W", "layer0.z", "layer0.u", "layer0.p", "pool0.beta", "layer1.W", "layer1.z",
                     "layer1.u", "layer1.p", "class.beta", "class.b", "global.beta"]
    assert spec.parameter_count() == 5 * 18 + 3 * 5 * 2 + 1 + 6 * 12 + 4 * 6 * 2 + 1 + 3 * 4
    minimal = NetworkSpec([], [], 1.0, np.zeros((2, 1)), 0.0)
    assert minimal.parameter_count() == 2
    np.testing.assert_allclose(network_forward(np.ones((1, 1, 1)), minimal), [1.0, 1.0])


def test_validation_errors():
    rng = np.random.default_rng(14)
    spec = _random_deep(rng)
    with pytest.raises(ShapeError):
        network_forward(rng.normal(size=(4, 4, 3)), spec)
    with pytest.raises(ShapeError):
        network_forward(rng.normal(size=(4, 4)), spec)
    with pytest.raises(ValueError):
        NetworkSpec([], [], 0.0, np.zeros((2, 1)), 0.0)
    with pytest.raises(ValueError):
        NetworkSpec([], [], 1.0, np.zeros((1, 1)), 0.0)
    with pytest.raises(ShapeError):
        NetworkSpec(spec.layers, spec.pools, 1.0, np.zeros((2, 7)), 0.0)
    with pytest.raises(ValueError):
        SimNetMlp(SimilarityLayer("lp", [[1.0]]), -1.0, [[0.0], [0.0]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_names_stage():
    spec, x, _ = micro_network(0)
    spec.layers[0].sim.order_p = 400.0
    with pytest.raises(NonFiniteError, match="layer 0"):
        forward_batch(spec, 1e6 * x[None])
