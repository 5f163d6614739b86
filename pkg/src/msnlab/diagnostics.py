"""Training-dynamics measurements taken from model snapshots.

Everything here is a pure function of the model's arrays plus a fixed probe
batch: the probe pass runs in ``"probe"`` mode (batch statistics, no state
updates) and existing ``.grad`` values are restored afterwards.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .spectral import SVD_MAX_DIM, flatten_weight, svd_oracle
from .tensor import Tensor, backward, cross_entropy

SPARSITY_TOL = 1e-8
HIST_BINS = 101
HIST_RANGE = 0.2


@dataclass
class Histogram:
    edges: np.ndarray  # bins + 1 edges over [-range, range]
    counts: np.ndarray  # bins
    underflow: int
    overflow: int
    variance: float

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow

    def rows(self):
        """``(left, right, count)`` rows including the two open-ended overflow bins."""
        out = [(-np.inf, float(self.edges[0]), self.underflow)]
        out += [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]
        out.append((float(self.edges[-1]), np.inf, self.overflow))
        return out


@dataclass
class LayerStats:
    wmean: float
    wvar: float
    premean: float
    sigma: float = None
    msv: float = None
    grad_var: float = None
    out_channel_means: np.ndarray = None
    m: np.ndarray = None


@dataclass
class MetricsRecord:
    step: int
    loss: float
    test_acc: float = None
    sparsity_pct: float = None
    step_ms: float = 0.0
    layers: list = field(default_factory=list)
    histograms: list = field(default_factory=list)


def _flat_grads(grads):
    if isinstance(grads, dict):
        grads = grads.values()
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in grads if g is not None]
    return np.concatenate(arrays) if arrays else np.zeros(0)


def gradient_sparsity(grads, tol=SPARSITY_TOL):
    """Percentage of gradient entries with ``|g| <= tol`` across all tensors."""
    if tol < 0:
        raise ArgumentError(f"sparsity tolerance must be >= 0, got {tol}")
    flat = _flat_grads(grads)
    if flat.size == 0:
        raise ArgumentError("gradient_sparsity needs at least one gradient entry")
    return 100.0 * np.count_nonzero(np.abs(flat) <= tol) / flat.size


def gradient_histogram(grads, bins=HIST_BINS, value_range=HIST_RANGE):
    """Fixed-bin histogram over ``[-value_range, value_range]`` plus overflow bins."""
    if bins < 2:
        raise ArgumentError(f"histogram needs at least 2 bins, got {bins}")
    if value_range <= 0:
        raise ArgumentError(f"histogram range must be positive, got {value_range}")
    flat = _flat_grads(grads)
    edges = np.linspace(-value_range, value_range, bins + 1)
    inside = flat[(flat >= -value_range) & (flat <= value_range)]
    counts, _ = np.histogram(inside, bins=edges)
    return Histogram(edges, counts, int(np.count_nonzero(flat < -value_range)),
                     int(np.count_nonzero(flat > value_range)),
                     float(np.var(flat)) if flat.size else 0.0)


def _svd_values(w):
    w_bar = flatten_weight(w)
    if min(w_bar.shape) > SVD_MAX_DIM:
        return None
    return svd_oracle(w_bar)


def singular_spectrum(model):
    """Mean singular value of each layer's applied weight (None when too large)."""
    out = []
    for layer in model.layers:
        sv = _svd_values(layer.effective_weight())
        out.append(None if sv is None else float(sv.mean()))
    return out


def spectral_norm_product(model):
    """Product over layers of the largest singular value of the applied weight."""
    prod = 1.0
    for layer in model.layers:
        sv = _svd_values(layer.effective_weight())
        if sv is None:
            raise ArgumentError(f"layer {layer.name} exceeds the SVD size guard")
        prod *= float(sv[0])
    return prod


def param_count(model):
    per_layer = [layer.param_count() for layer in model.layers]
    return sum(per_layer), per_layer


def probe_forward(model, probe_x):
    """Forward the probe batch without touching running statistics or power vectors."""
    x = Tensor(probe_x)
    return model(x, "probe")


def layer_mean_drift(model, probe_x):
    """Per layer: batch mean of the pre-normalization activation ``h`` on the probe
    batch, plus mean/variance of the raw weight entries."""
    probe_forward(model, probe_x)
    stats = []
    for layer in model.layers:
        w = layer.weight.data
        stats.append(LayerStats(float(w.mean()), float(w.var()), float(layer.last_h.mean())))
    return stats


def _layer_sigma(layer):
    est = layer.sigma_estimate()
    if est is not None:
        return est
    sv = _svd_values(layer.weight.data)
    return None if sv is None else float(sv[0])


def snapshot_diagnostics(model, probe_x, probe_y, step, *, tol=SPARSITY_TOL, bins=HIST_BINS,
                         hist_range=HIST_RANGE, test_acc=None, step_ms=0.0):
    """Build a :class:`MetricsRecord` from the current model state.

    Loss and gradients are those of the probe batch, so records from runs
    with different schemes are measured on identical data.
    """
    params = model.named_parameters()
    saved = [p.grad for _, p in params]
    for _, p in params:
        p.grad = None
    logits = probe_forward(model, probe_x)
    loss = cross_entropy(logits, probe_y)
    backward(loss)

    rec = MetricsRecord(step=step, loss=float(loss.data), test_acc=test_acc, step_ms=step_ms)
    rec.sparsity_pct = gradient_sparsity([p.grad for _, p in params], tol)
    msv = singular_spectrum(model)
    for i, layer in enumerate(model.layers):
        w = layer.weight.data
        grads = [p.grad for p in layer.parameters().values()]
        hist = gradient_histogram(grads, bins, hist_range)
        ls = LayerStats(float(w.mean()), float(w.var()), float(layer.last_h.mean()),
                        _layer_sigma(layer), msv[i], hist.variance)
        if layer.scheme == "msn":
            ls.m = layer.state.m.data.copy()
        rec.layers.append(ls)
        rec.histograms.append(hist)

    for ls, layer in zip(rec.layers, model.layers):
        if layer.scheme == "msn":
            out = layer.last_out
            ls.out_channel_means = out.mean(axis=(0,) if out.ndim == 2 else (0, 2, 3))

    for (_, p), g in zip(params, saved):
        p.grad = g
    return rec
