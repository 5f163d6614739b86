"""Central finite-difference checks of the analytic gradients."""

import numpy as np

from .norm import SCHEMES, NormLayer
from .spectral import converge_power_iteration, flatten_weight
from .tensor import Tensor, backward, mul, tensor_sum

FD_EPS = 1e-5
GRAD_RTOL = 1e-3


def rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr, eps=FD_EPS):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated and restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_function(f, params, eps=FD_EPS):
    """``f(params) -> scalar Tensor``. Returns max relative error per parameter name."""
    for p in params.values():
        p.grad = None
    backward(f())
    out = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: float(f().data), p.data, eps)
        out[name] = float(rel_error(analytic, numeric).max())
    return out


def make_layer(kind, scheme, seed=0):
    rng = np.random.default_rng(seed)
    if kind == "dense":
        layer = NormLayer("dense", 5, 4, scheme, weight_rng=rng, power_rng=rng)
        x = rng.standard_normal((6, 5))
    else:
        layer = NormLayer("conv", 2, 3, scheme, weight_rng=rng, power_rng=rng, kernel=3, stride=1, pad=1)
        x = rng.standard_normal((3, 2, 5, 5))
    # nonzero affine/shift params so their gradients are not trivially symmetric
    for name, p in layer.parameters().items():
        if name != "weight":
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    if layer.power is not None:
        _, st = converge_power_iteration(flatten_weight(layer.weight), layer.power)
        layer.power.u, layer.power.v = st.u, st.v
    return layer, x


def layer_gradcheck(kind, scheme, seed=0, eps=FD_EPS):
    """Check one dense/conv layer under one scheme in ``"probe"`` mode.

    Probe mode keeps batch statistics but freezes the power vectors, so the
    forward map is a deterministic function of the parameters and of ``x``.
    The loss is a fixed random projection of the output.
    """
    layer, x = make_layer(kind, scheme, seed)
    xt = Tensor(x, requires_grad=True)
    proj_shape = layer(xt, "probe").shape
    proj = np.random.default_rng(seed + 1).standard_normal(proj_shape)
    params = dict(layer.parameters())
    params["input"] = xt
    return check_function(lambda: tensor_sum(mul(layer(xt, "probe"), proj)), params, eps)


def all_layer_checks(seed=0):
    """``{(kind, scheme): max relative error}`` over every layer kind and scheme."""
    return {(kind, scheme): max(layer_gradcheck(kind, scheme, seed).values())
            for kind in ("dense", "conv") for scheme in SCHEMES}


def msn_backward_check(layer, x, eps=FD_EPS):
    """Max relative gradient error of an MSN layer on input ``x``."""
    xt = Tensor(x, requires_grad=True)
    proj = np.random.default_rng(0).standard_normal(layer(xt, "probe").shape)
    params = dict(layer.parameters())
    params["input"] = xt
    return max(check_function(lambda: tensor_sum(mul(layer(xt, "probe"), proj)), params, eps).values())
