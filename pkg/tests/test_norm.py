import numpy as np
import pytest

from msnlab.errors import ArgumentError, BatchSizeError
from msnlab.gradcheck import GRAD_RTOL, layer_gradcheck, msn_backward_check
from msnlab.norm import (SCHEMES, BatchNormState, MsnState, NormLayer, bn_forward, msn_center, msn_forward,
                         sn_layer_forward)
from msnlab.spectral import PowerIterState, converge_power_iteration, flatten_weight, init_power_state
from msnlab.tensor import Tensor, backward, tensor_sum


def converge_layer(layer):
    _, st = converge_power_iteration(flatten_weight(layer.weight), layer.power)
    layer.power.u, layer.power.v = st.u, st.v


def dense(scheme, n_in=6, n_out=4, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return NormLayer("dense", n_in, n_out, scheme, weight_rng=rng, power_rng=rng, **kw)


# batch norm

def test_bn_standardized_batch_passes_through():
    x = np.array([[-1.0], [1.0]]) * np.ones((2, 3))
    out = bn_forward(Tensor(x), BatchNormState.create(3), "probe").data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_bn_gamma_zero_gives_beta(rng):
    state = BatchNormState.create(3)
    state.gamma.data = np.zeros(3)
    state.beta.data = np.array([0.5, -1.0, 2.0])
    out = bn_forward(Tensor(rng.standard_normal((5, 3))), state, "probe").data
    np.testing.assert_array_equal(out, np.tile(state.beta.data, (5, 1)))


def test_bn_hand_standardization():
    state = BatchNormState.create(1, eps=0.0)
    np.testing.assert_allclose(bn_forward(Tensor([[1.0], [3.0]]), state, "probe").data, [[-1.0], [1.0]])


def test_bn_conv_statistics_cover_spatial_axes(rng):
    out = bn_forward(Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2), BatchNormState.create(3), "probe").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_bn_running_stats_converge_on_fixed_batch(rng):
    x = rng.standard_normal((8, 3)) * 2 + 1
    state = BatchNormState.create(3)
    for _ in range(200):
        bn_forward(Tensor(x), state, "train")
    np.testing.assert_allclose(state.running_mean, x.mean(0), atol=1e-3)
    np.testing.assert_allclose(state.running_var, x.var(0), atol=1e-3)
    # eval output now matches train output for this batch
    np.testing.assert_allclose(bn_forward(Tensor(x), state, "eval").data,
                               bn_forward(Tensor(x), state, "probe").data, atol=1e-3)


def test_bn_batch_of_one_rejected_outside_eval():
    state = BatchNormState.create(2)
    with pytest.raises(BatchSizeError):
        bn_forward(Tensor(np.ones((1, 2))), state, "train")
    bn_forward(Tensor(np.ones((1, 2))), state, "eval")


def test_unknown_mode():
    with pytest.raises(ArgumentError):
        bn_forward(Tensor(np.ones((2, 2))), BatchNormState.create(2), "test")


# spectral-norm layer

def test_sn_layer_cancels_scaling(rng):
    x = rng.standard_normal((3, 4))
    w = Tensor(5 * np.eye(4))
    state = PowerIterState(np.ones(4) / 2, np.ones(4) / 2)
    np.testing.assert_allclose(sn_layer_forward(Tensor(x), w, state, "train").data, x, atol=1e-12)


def test_sn_layer_zero_input(rng):
    w = Tensor(rng.standard_normal((3, 4)))
    out = sn_layer_forward(Tensor(np.zeros((2, 4))), w, init_power_state(3, 4, rng), "train")
    np.testing.assert_array_equal(out.data, 0.0)


def test_sn_layer_empirical_lipschitz():
    layer = dense("sn", 8, 8, seed=3)
    converge_layer(layer)
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((1000, 8)), rng.standard_normal((1000, 8))
    d = layer(Tensor(x1), "eval").data - layer(Tensor(x2), "eval").data
    ratio = np.linalg.norm(d, axis=1) / np.linalg.norm(x1 - x2, axis=1)
    assert ratio.max() <= 1 + 1e-3


def test_sn_layer_advances_power_state_only_in_train(rng):
    layer = dense("sn")
    u0 = layer.power.u.copy()
    layer(Tensor(rng.standard_normal((3, 6))), "eval")
    np.testing.assert_array_equal(layer.power.u, u0)
    layer.weight.data = layer.weight.data + 0.5 * rng.standard_normal(layer.weight.shape)
    layer(Tensor(rng.standard_normal((3, 6))), "train")
    assert not np.array_equal(layer.power.u, u0)


# mean spectral normalization

def test_msn_constant_batch_gives_zero():
    state = MsnState.create(None, 3)
    np.testing.assert_array_equal(msn_center(Tensor(np.full((4, 3), 2.5)), state, "train").data, 0.0)


def test_msn_hand_example():
    state = MsnState.create(None, 1)
    state.m.data = np.array([0.5])
    np.testing.assert_allclose(msn_center(Tensor([[1.0], [3.0]]), state, "train").data, [[-0.5], [1.5]])


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_msn_output_means_equal_m(kind):
    rng = np.random.default_rng(2)
    if kind == "dense":
        layer, x = dense("msn"), rng.standard_normal((7, 6)) + 3
    else:
        layer = NormLayer("conv", 2, 4, "msn", weight_rng=rng, power_rng=rng)
        x = rng.standard_normal((3, 2, 6, 6)) + 3
    layer.state.m.data = rng.standard_normal(4)
    out = layer(Tensor(x), "train").data
    np.testing.assert_allclose(out.mean(axis=(0,) if kind == "dense" else (0, 2, 3)), layer.state.m.data,
                               rtol=0, atol=1e-9)


def test_msn_constant_upstream_gives_zero_gradient_through_centering(rng):
    h = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    state = MsnState.create(None, 3)
    backward(tensor_sum(msn_center(h, state, "train") * np.array([1.0, -2.0, 0.5])))
    np.testing.assert_allclose(h.grad, 0.0, atol=1e-15)


def test_msn_m_gradient_is_channel_sum_of_upstream(rng):
    layer = NormLayer("conv", 2, 3, "msn", weight_rng=rng, power_rng=rng)
    out = layer(Tensor(rng.standard_normal((2, 2, 4, 4))), "probe")
    g = rng.standard_normal(out.shape)
    backward(tensor_sum(out * g))
    np.testing.assert_allclose(layer.state.m.grad, g.sum(axis=(0, 2, 3)), atol=1e-12)


def test_msn_functional_form_matches_layer(rng):
    layer = dense("msn")
    x = rng.standard_normal((5, 6))
    ref = layer(Tensor(x), "probe").data
    out = msn_forward(Tensor(x), layer.weight, layer.state, "probe")
    np.testing.assert_array_equal(out.data, ref)


def test_msn_dense_6_to_4_gradcheck(rng):
    layer = dense("msn", 6, 4, seed=5)
    converge_layer(layer)
    layer.state.m.data = rng.standard_normal(4)
    assert msn_backward_check(layer, rng.standard_normal((5, 6))) <= 1e-3


@pytest.mark.parametrize("kind", ["dense", "conv"])
@pytest.mark.parametrize("scheme", SCHEMES)
def test_layer_gradients(kind, scheme):
    errs = layer_gradcheck(kind, scheme, seed=3)
    assert max(errs.values()) <= GRAD_RTOL, errs


# layer bookkeeping

@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_parameter_count_identity(kind):
    counts = {}
    for scheme in SCHEMES:
        rng = np.random.default_rng(0)
        counts[scheme] = NormLayer(kind, 3, 5, scheme, weight_rng=rng, power_rng=rng).param_count()
    assert counts["bn"] - counts["msn"] == 5
    assert counts["msn"] - counts["sn"] == 5


def test_scheme_swap_preserves_shapes(rng):
    x = rng.standard_normal((4, 2, 7, 7))
    shapes = {NormLayer("conv", 2, 3, s, weight_rng=np.random.default_rng(0), stride=2)(Tensor(x), "train").shape
              for s in SCHEMES}
    assert shapes == {(4, 3, 4, 4)}


def test_eval_and_probe_do_not_mutate(rng):
    for scheme in ("bn", "sn", "msn"):
        layer = dense(scheme)
        layer(Tensor(rng.standard_normal((5, 6))), "train")
        before = {k: v.copy() for k, v in layer.state_arrays().items()}
        for mode in ("eval", "probe"):
            layer(Tensor(rng.standard_normal((5, 6))), mode)
        for k, v in layer.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])


def test_unknown_scheme():
    with pytest.raises(ArgumentError):
        dense("wn")


def test_state_arrays_round_trip(rng):
    layer = dense("msn")
    layer(Tensor(rng.standard_normal((4, 6))), "train")
    twin = dense("msn", seed=9)
    twin.load_state_arrays(layer.state_arrays())
    for k, v in layer.state_arrays().items():
        np.testing.assert_array_equal(twin.state_arrays()[k], v)
