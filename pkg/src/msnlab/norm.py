"""Normalization schemes and the layer wrapper that applies them.

A :class:`NormLayer` is a dense or convolutional map followed by exactly one
scheme:

``none``  ``W x + b``
``bn``    ``gamma * (h - E[h]) / sqrt(Var[h] + eps) + beta`` with ``h = W x``
``sn``    ``(W / sigma(W)) x``
``msn``   ``h - E[h] + m`` with ``h = (W / sigma(W)) x``

Statistics are per output channel over the batch axis and, for convolution
outputs, the spatial axes too.

Modes: ``"train"`` uses batch statistics and advances running averages and
power-iteration vectors; ``"eval"`` uses running averages and frozen
vectors; ``"probe"`` uses batch statistics but mutates nothing (used by
diagnostics and gradient checks).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, BatchSizeError
from .spectral import WARMUP_ITERS, PowerIterState, flatten_weight, init_power_state, power_iteration, spectral_normalize
from .tensor import Tensor, conv2d, matmul, reduce_mean, reshape, sqrt, transpose

SCHEMES = ("none", "bn", "sn", "msn")
MODES = ("train", "eval", "probe")
BN_EPS = 1e-5
MOMENTUM = 0.1


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = MOMENTUM

    @classmethod
    def create(cls, channels, eps=BN_EPS, momentum=MOMENTUM):
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), eps, momentum)


@dataclass
class MsnState:
    power: PowerIterState
    m: Tensor
    running_mean: np.ndarray
    momentum: float = MOMENTUM

    @classmethod
    def create(cls, power, channels, momentum=MOMENTUM):
        return cls(power, Tensor(np.zeros(channels), requires_grad=True), np.zeros(channels), momentum)


def _check_mode(mode):
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")


def channel_axes(ndim):
    return (0,) if ndim == 2 else (0,) + tuple(range(2, ndim))


def _per_channel(vec, ndim):
    # (C,) -> broadcastable against (N, C, ...)
    return reshape(vec, (1, -1) + (1,) * (ndim - 2))


def _const_per_channel(arr, ndim):
    return np.asarray(arr).reshape((1, -1) + (1,) * (ndim - 2))


def _check_batch(g, mode):
    if mode != "eval" and g.shape[0] < 2:
        raise BatchSizeError(f"batch statistics need at least 2 samples, got batch of {g.shape[0]}")


def _batch_moments(g, axes):
    mean = reduce_mean(g, axes, keepdims=True)
    centered = g - mean
    var = reduce_mean(centered * centered, axes, keepdims=True)
    return mean, centered, var


def bn_forward(g, state, mode="train"):
    _check_mode(mode)
    _check_batch(g, mode)
    nd = g.ndim
    if mode == "eval":
        xhat = (g - _const_per_channel(state.running_mean, nd)) / np.sqrt(
            _const_per_channel(state.running_var, nd) + state.eps)
    else:
        axes = channel_axes(nd)
        mean, centered, var = _batch_moments(g, axes)
        xhat = centered / sqrt(var + state.eps)
        if mode == "train":
            mom = state.momentum
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.data.reshape(-1)
            state.running_var = (1 - mom) * state.running_var + mom * var.data.reshape(-1)
    return _per_channel(state.gamma, nd) * xhat + _per_channel(state.beta, nd)


def linear_map(x, w, stride=1, pad=0):
    """Dense ``x @ w.T`` for 2-D weights, cross-correlation for 4-D kernels."""
    if w.ndim == 2:
        return matmul(x, transpose(w))
    return conv2d(x, w, stride, pad)


def _sn_weight_for_mode(w, state, mode):
    w_hat, sigma, new_state = spectral_normalize(w, state, 1 if mode == "train" else 0)
    if mode == "train":
        state.u, state.v = new_state.u, new_state.v
    return w_hat, sigma


def sn_layer_forward(g_prev, w, state, mode="train", stride=1, pad=0):
    """Spectrally normalized dense/conv map; one power iteration per train call."""
    _check_mode(mode)
    w_hat, _ = _sn_weight_for_mode(w, state, mode)
    return linear_map(g_prev, w_hat, stride, pad)


def msn_center(h, state, mode="train"):
    """``h - E[h] + m`` (running mean in eval mode)."""
    _check_mode(mode)
    _check_batch(h, mode)
    nd = h.ndim
    if mode == "eval":
        centered = h - _const_per_channel(state.running_mean, nd)
    else:
        mean = reduce_mean(h, channel_axes(nd), keepdims=True)
        centered = h - mean
        if mode == "train":
            mom = state.momentum
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.data.reshape(-1)
    return centered + _per_channel(state.m, nd)


def msn_forward(g_prev, w, state, mode="train", stride=1, pad=0):
    _check_mode(mode)
    _check_batch(g_prev, mode)
    w_hat, _ = _sn_weight_for_mode(w, state.power, mode)
    return msn_center(linear_map(g_prev, w_hat, stride, pad), state, mode)


class NormLayer:
    """Dense (``kind="dense"``) or conv (``kind="conv"``) map plus one scheme.

    Normalized layers carry no additive bias of their own; BN's ``beta`` and
    MSN's ``m`` take that role and SN goes without, so the trainable-parameter
    gap between schemes is exactly one vector of length C per step
    (BN > MSN > SN).  ``bias=True`` forces a bias anyway (used for the SN
    output unit of the toy discriminator).
    """

    def __init__(self, kind, in_features, out_features, scheme="none", *, weight_rng, power_rng=None,
                 kernel=3, stride=1, pad=1, slope=0.01, bias=None, init_scale=None, name="layer"):
        if scheme not in SCHEMES:
            raise ArgumentError(f"unknown normalization scheme {scheme!r}; expected one of {SCHEMES}")
        if kind not in ("dense", "conv"):
            raise ArgumentError(f"unknown layer kind {kind!r}")
        if in_features < 1 or out_features < 1:
            raise ArgumentError(f"layer widths must be positive, got {in_features}->{out_features}")
        self.kind, self.scheme, self.name = kind, scheme, name
        self.stride, self.pad = (stride, pad) if kind == "conv" else (1, 0)
        shape = (out_features, in_features) if kind == "dense" else (out_features, in_features, kernel, kernel)
        fan_in = int(np.prod(shape[1:]))
        std = init_scale if init_scale is not None else np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
        self.weight = Tensor(weight_rng.normal(0.0, std, size=shape), requires_grad=True)
        self.channels = out_features

        use_bias = (scheme == "none") if bias is None else bias
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if use_bias else None

        self.state = None
        if scheme == "bn":
            self.state = BatchNormState.create(out_features)
        elif scheme in ("sn", "msn"):
            rng = power_rng if power_rng is not None else np.random.default_rng(0)
            w_bar = flatten_weight(self.weight)
            power = init_power_state(*w_bar.shape, rng)
            _, power = power_iteration(w_bar, power, WARMUP_ITERS)
            self.state = power if scheme == "sn" else MsnState.create(power, out_features)

        self.last_h = None
        self.last_out = None

    @property
    def power(self):
        if self.scheme == "sn":
            return self.state
        if self.scheme == "msn":
            return self.state.power
        return None

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        if self.scheme == "bn":
            params["gamma"] = self.state.gamma
            params["beta"] = self.state.beta
        elif self.scheme == "msn":
            params["m"] = self.state.m
        return params

    def param_count(self):
        return sum(p.size for p in self.parameters().values())

    def forward(self, x, mode="train"):
        _check_mode(mode)
        if self.scheme in ("sn", "msn"):
            w, _ = _sn_weight_for_mode(self.weight, self.power, mode)
        else:
            w = self.weight
        h = linear_map(x, w, self.stride, self.pad)
        self.last_h = h.data
        if self.scheme == "bn":
            out = bn_forward(h, self.state, mode)
        elif self.scheme == "msn":
            out = msn_center(h, self.state, mode)
        else:
            out = h
        if self.bias is not None:
            out = out + _per_channel(self.bias, out.ndim)
        self.last_out = out.data
        return out

    __call__ = forward

    def sigma_estimate(self):
        """Tracked sigma ``u^T W v`` of the raw weight (SN/MSN only)."""
        if self.power is None:
            return None
        return float(self.power.u @ flatten_weight(self.weight) @ self.power.v)

    def effective_weight(self):
        """The weight actually applied: ``W / sigma`` for SN/MSN, raw ``W`` otherwise."""
        if self.power is None:
            return self.weight.data.copy()
        sigma = max(self.sigma_estimate(), 1e-12)
        return self.weight.data / sigma

    def state_arrays(self):
        """Non-trainable state as plain arrays (running stats, power vectors)."""
        if self.scheme == "bn":
            return {"running_mean": self.state.running_mean.copy(), "running_var": self.state.running_var.copy()}
        if self.scheme == "sn":
            return {"u": self.state.u.copy(), "v": self.state.v.copy()}
        if self.scheme == "msn":
            return {"u": self.state.power.u.copy(), "v": self.state.power.v.copy(),
                    "running_mean": self.state.running_mean.copy()}
        return {}

    def load_state_arrays(self, arrays):
        if self.scheme == "bn":
            self.state.running_mean = np.array(arrays["running_mean"])
            self.state.running_var = np.array(arrays["running_var"])
        elif self.scheme in ("sn", "msn"):
            self.power.u, self.power.v = np.array(arrays["u"]), np.array(arrays["v"])
            if self.scheme == "msn":
                self.state.running_mean = np.array(arrays["running_mean"])
