"""Model zoo: MLP, a three-layer CNN, and a toy generator/discriminator pair."""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalGuardError
from .norm import SCHEMES, NormLayer
from .tensor import as_tensor, clip, concat, leaky_relu, log, reduce_mean, reshape, sigmoid

D_CLAMP = 1e-6


@dataclass
class ModelSpec:
    kind: str = "cnn3"
    norm: str = "msn"
    widths: tuple = ()
    slope: float = 0.01
    n_classes: int = 10
    in_shape: tuple = (1, 28, 28)
    z_dim: int = 2
    data_dim: int = 2

    def resolved_widths(self):
        if self.widths:
            return tuple(int(w) for w in self.widths)
        return {"mlp": (64, 64), "cnn3": (16, 32), "gan_toy": (64, 64)}[self.kind]

    def validate(self):
        if self.kind not in ("mlp", "cnn3", "gan_toy"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.norm not in SCHEMES:
            raise ConfigError(f"unknown normalization scheme {self.norm!r}")
        widths = self.resolved_widths()
        if not widths or any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive integers, got {widths}")
        if self.kind == "cnn3" and len(widths) != 2:
            raise ConfigError(f"cnn3 takes exactly two conv widths, got {widths}")
        if not 0.0 <= self.slope <= 1.0:
            raise ConfigError(f"activation slope must lie in [0, 1], got {self.slope}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")


class Model:
    """Stack of :class:`NormLayer` with LeakyReLU between layers.

    The last layer is the output layer and gets no activation.  For cnn3 the
    conv output is flattened before the dense classifier.
    """

    def __init__(self, kind, layers, slope, flatten_at=None):
        self.kind = kind
        self.layers = layers
        self.slope = slope
        self.flatten_at = flatten_at

    def forward(self, x, mode="train"):
        out = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if i == self.flatten_at:
                out = reshape(out, (out.shape[0], -1))
            out = layer(out, mode)
            if i < last:
                out = leaky_relu(out, self.slope)
        return out

    __call__ = forward

    def named_parameters(self):
        return [(f"L{i}.{k}", p) for i, layer in enumerate(self.layers) for k, p in layer.parameters().items()]

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    @property
    def normalized_layers(self):
        return [layer for layer in self.layers if layer.scheme != "none"]

    def norm_states(self):
        return [(f"L{i}", layer.scheme, layer.state) for i, layer in enumerate(self.layers)]

    def state_arrays(self):
        arrays = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state_arrays().items():
                arrays[f"L{i}.state.{k}"] = v
        return arrays

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            p.data = np.array(arrays[name], dtype=np.float64)
        for i, layer in enumerate(self.layers):
            prefix = f"L{i}.state."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            if sub:
                layer.load_state_arrays(sub)

    def state_hash(self):
        h = hashlib.sha256()
        for k, v in sorted(self.state_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def weight_hash(self):
        """Hash of the raw linear weights only (identical across schemes at init)."""
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.weight.data).tobytes())
        return h.hexdigest()


@dataclass
class GanPair:
    generator: Model
    discriminator: Model
    z_dim: int = 2


def _rngs(seed, stream):
    ss = np.random.SeedSequence([seed, stream])
    w_seq, p_seq = ss.spawn(2)
    return np.random.default_rng(w_seq), np.random.default_rng(p_seq)


def build(spec, seed=0):
    """Build a model (or a :class:`GanPair` for ``gan_toy``) from ``spec``.

    Weights depend only on ``seed`` and the architecture, never on the
    normalization scheme; power-iteration vectors come from a separate stream.
    """
    spec.validate()
    widths = spec.resolved_widths()
    slope = spec.slope

    if spec.kind == "gan_toy":
        return GanPair(_build_generator(spec, widths, seed), _build_discriminator(spec, widths, seed), spec.z_dim)

    wrng, prng = _rngs(seed, 0)
    layers = []
    if spec.kind == "mlp":
        sizes = (int(np.prod(spec.in_shape)),) + widths
        for i in range(len(widths)):
            layers.append(NormLayer("dense", sizes[i], sizes[i + 1], spec.norm, weight_rng=wrng,
                                    power_rng=prng, slope=slope, name=f"L{i}"))
        layers.append(NormLayer("dense", sizes[-1], spec.n_classes, "none", weight_rng=wrng,
                                init_scale=np.sqrt(1.0 / sizes[-1]), name=f"L{len(widths)}"))
        return Model("mlp", layers, slope, flatten_at=0)

    c, h, w = spec.in_shape
    chans = (c,) + widths
    for i in range(2):
        layers.append(NormLayer("conv", chans[i], chans[i + 1], spec.norm, weight_rng=wrng, power_rng=prng,
                                kernel=3, stride=2, pad=1, slope=slope, name=f"L{i}"))
        h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    flat = chans[-1] * h * w
    layers.append(NormLayer("dense", flat, spec.n_classes, "none", weight_rng=wrng,
                            init_scale=np.sqrt(1.0 / flat), name="L2"))
    return Model("cnn3", layers, slope, flatten_at=2)


def _build_generator(spec, widths, seed):
    wrng, _ = _rngs(seed, 1)
    sizes = (spec.z_dim,) + widths
    layers = [NormLayer("dense", sizes[i], sizes[i + 1], "none", weight_rng=wrng, slope=spec.slope, name=f"G{i}")
              for i in range(len(widths))]
    layers.append(NormLayer("dense", sizes[-1], spec.data_dim, "none", weight_rng=wrng,
                            init_scale=np.sqrt(1.0 / sizes[-1]), name=f"G{len(widths)}"))
    return Model("generator", layers, spec.slope)


def _build_discriminator(spec, widths, seed):
    # the scalar output unit is spectrally normalized as well whenever the hidden
    # layers are, so the whole critic is 1-Lipschitz before the sigmoid
    wrng, prng = _rngs(seed, 2)
    sizes = (spec.data_dim,) + widths
    layers = [NormLayer("dense", sizes[i], sizes[i + 1], spec.norm, weight_rng=wrng, power_rng=prng,
                        slope=spec.slope, name=f"D{i}")
              for i in range(len(widths))]
    out_scheme = "sn" if spec.norm in ("sn", "msn") else "none"
    layers.append(NormLayer("dense", sizes[-1], 1, out_scheme, weight_rng=wrng, power_rng=prng,
                            bias=True, init_scale=np.sqrt(1.0 / sizes[-1]), name=f"D{len(widths)}"))
    return Model("discriminator", layers, spec.slope)


def discriminator_prob(d_logits, delta=D_CLAMP):
    """Sigmoid squash clamped to ``[delta, 1 - delta]``."""
    prob = sigmoid(d_logits)
    if not np.all(np.isfinite(prob.data)) or np.any(prob.data < 0) or np.any(prob.data > 1):
        raise NumericalGuardError("discriminator output left (0, 1) after squashing")
    return clip(prob, delta, 1.0 - delta)


def wgan_losses_from_probs(d_real, d_fake):
    """``loss_D = -(E log D(x) + E log(1 - D(G(z))))``, ``loss_G = -E log D(G(z))``."""
    for p in (d_real, d_fake):
        if np.any(p.data <= 0) or np.any(p.data >= 1) or not np.all(np.isfinite(p.data)):
            raise NumericalGuardError("discriminator probabilities must lie strictly inside (0, 1)")
    loss_d = -(reduce_mean(log(d_real)) + reduce_mean(log(1.0 - d_fake)))
    loss_g = -reduce_mean(log(d_fake))
    return loss_d, loss_g


def wgan_losses(D, G, real_batch, noise_batch, mode="train"):
    """Adversarial losses for one real batch and one noise batch.

    Real and generated samples pass through ``D`` as one concatenated batch
    so MSN's batch mean is shared by both halves.
    """
    real = as_tensor(real_batch)
    fake = G(as_tensor(noise_batch), mode)
    n = real.shape[0]
    probs = discriminator_prob(D(concat([real, fake], axis=0), mode))
    return wgan_losses_from_probs(probs[:n], probs[n:])
