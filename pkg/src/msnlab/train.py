"""Training and evaluation loops for the classifiers and the toy GAN."""

import copy
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import reporting
from .data import load_mnist, ring_centers, sample_ring, subset, batches, RING_STD
from .diagnostics import HIST_BINS, HIST_RANGE, SPARSITY_TOL, param_count, snapshot_diagnostics
from .errors import ArgumentError, ConfigError, NonFiniteGradientError
from .models import ModelSpec, build, discriminator_prob, wgan_losses_from_probs
from .optim import Adam
from .spectral import converge_power_iteration, flatten_weight, svd_oracle
from .tensor import Tensor, backward, concat, cross_entropy

log = logging.getLogger(__name__)

BATCH_STAT_SCHEMES = ("bn", "msn")


@dataclass
class ExperimentConfig:
    model: str = "cnn3"
    norm: str = "msn"
    widths: tuple = ()
    slope: float = 0.01
    data_dir: str = None
    subset: int = 2000
    test_subset: int = 500
    lr: float = 1e-3
    batch: int = 20
    epochs: int = 5
    seed: int = 0
    snap_every: int = 25
    sparsity_tol: float = SPARSITY_TOL
    hist_bins: int = HIST_BINS
    hist_range: float = HIST_RANGE
    probe_size: int = 256
    track_sigma: bool = False
    out: str = None

    def model_spec(self):
        return ModelSpec(kind=self.model, norm=self.norm, widths=tuple(self.widths), slope=self.slope)

    def validate(self):
        if self.model not in ("mlp", "cnn3"):
            raise ConfigError(f"--model must be mlp or cnn3, got {self.model!r}")
        self.model_spec().validate()
        if self.norm in BATCH_STAT_SCHEMES and self.batch < 2:
            raise ConfigError(f"--batch {self.batch} is incompatible with --norm {self.norm}: "
                              "batch statistics need at least 2 samples")
        if self.lr <= 0:
            raise ConfigError(f"--lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 0 or self.snap_every < 1:
            raise ConfigError(f"need batch >= 1, epochs >= 0, snap_every >= 1 "
                              f"(got {self.batch}, {self.epochs}, {self.snap_every})")
        if self.subset < 10 or self.test_subset < 10:
            raise ConfigError(f"--subset {self.subset} too small: need at least one sample per class")
        if self.sparsity_tol < 0:
            raise ConfigError(f"--sparsity-tol must be >= 0, got {self.sparsity_tol}")
        if self.norm in BATCH_STAT_SCHEMES and self.probe_size < 2:
            raise ConfigError(f"probe_size {self.probe_size} is incompatible with --norm {self.norm}")

    def to_text(self):
        return reporting.config_text(self)

    @classmethod
    def from_text(cls, text):
        return reporting.parse_config_text(cls, text)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    model: object
    records: list
    step_losses: list
    step_ms: list
    init_weight_hash: str
    sigma_track: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    exit_status: int = 0
    wall_s: float = 0.0

    @property
    def mean_step_ms(self):
        return float(np.mean(self.step_ms)) if self.step_ms else 0.0

    def timing(self):
        arr = np.asarray(self.step_ms) if self.step_ms else np.zeros(1)
        return {"mean_step_ms": float(arr.mean()), "median_step_ms": float(np.median(arr)), "steps": len(self.step_ms)}


def evaluate(model, ds, batch_size=500):
    """Top-1 accuracy in eval mode; ties go to the lowest class index."""
    if ds is None or len(ds) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    correct = 0
    for i in range(0, len(ds), batch_size):
        logits = model(Tensor(ds.images[i:i + batch_size]), "eval").data
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == ds.labels[i:i + batch_size]))
    return correct / len(ds)


def load_data(config):
    train_full = load_mnist(config.data_dir, "train")
    test_full = load_mnist(config.data_dir, "test")
    return subset(train_full, config.subset, config.seed), subset(test_full, config.test_subset, config.seed)


def _summary_text(art, counts):
    total, per_layer = counts
    lines = [f"model={art.config.model}", f"norm={art.config.norm}", f"params_total={total}",
             "params_per_layer=" + ",".join(str(c) for c in per_layer),
             f"init_weight_sha256={art.init_weight_hash}",
             f"final_state_sha256={art.model.state_hash()}"]
    for k, v in art.timing().items():
        lines.append(f"{k}={v}")
    if art.records:
        lines.append(f"final_test_acc={reporting.fmt(art.records[-1].test_acc)}")
    lines.append(f"exit_status={art.exit_status}")
    return "\n".join(lines) + "\n"


def _write_nan_dump(out, step, err, losses):
    with open(os.path.join(out, "nan_dump.txt"), "w", encoding="utf-8") as f:
        f.write(f"step={step}\noffending={','.join(err.offending)}\n")
        f.write("recent_losses=" + ",".join(reporting.fmt(x) for x in losses[-10:]) + "\n")


def train(config, train_ds=None, test_ds=None):
    """Minibatch cross-entropy training with Adam and periodic diagnostics snapshots."""
    config.validate()
    t_start = time.perf_counter()
    if train_ds is None:
        train_ds, test_ds = load_data(config)
    model = build(config.model_spec(), config.seed)
    params = model.parameters()
    opt = Adam(lr=config.lr)
    probe = train_ds.take(np.arange(min(config.probe_size, len(train_ds))))

    art = RunArtifacts(config, model, [], [], [], model.weight_hash())
    out = config.out
    if out:
        os.makedirs(out, exist_ok=True)
        reporting.write_text(os.path.join(out, "config.txt"), config.to_text())
        np.savez_compressed(os.path.join(out, "probe.npz"), x=probe.images, y=probe.labels)

    def snapshot(step, since):
        ms = float(np.mean(art.step_ms[since:])) if len(art.step_ms) > since else 0.0
        acc = evaluate(model, test_ds) if test_ds is not None else None
        rec = snapshot_diagnostics(model, probe.images, probe.labels, step, tol=config.sparsity_tol,
                                   bins=config.hist_bins, hist_range=config.hist_range, test_acc=acc, step_ms=ms)
        art.records.append(rec)
        if out:
            reporting.save_snapshot(out, step, model.state_arrays(), test_acc=acc, step_ms=ms)
        return len(art.step_ms)

    since = snapshot(0, 0)
    step = 0
    for epoch in range(config.epochs):
        for idx in batches(len(train_ds), config.batch, config.seed, epoch):
            x, y = Tensor(train_ds.images[idx]), train_ds.labels[idx]
            weights_before = [layer.weight.data for layer in model.layers]
            t0 = time.perf_counter()
            model.zero_grad()
            loss = cross_entropy(model(x, "train"), y)
            backward(loss)
            try:
                opt.step(params)
            except NonFiniteGradientError as err:
                art.exit_status = 2
                if out:
                    _write_nan_dump(out, step + 1, err, art.step_losses)
                raise
            art.step_ms.append(1000.0 * (time.perf_counter() - t0))
            step += 1
            art.step_losses.append(float(loss.data))
            if config.track_sigma:
                for i, layer in enumerate(model.layers):
                    if layer.power is not None:
                        tracked = float(layer.power.u @ flatten_weight(weights_before[i]) @ layer.power.v)
                        exact = float(svd_oracle(flatten_weight(weights_before[i]))[0])
                        art.sigma_track.append((step, i, tracked, exact))
            if step % config.snap_every == 0:
                since = snapshot(step, since)
        log.info("epoch %d done: step %d loss %.4f", epoch, step, art.step_losses[-1] if art.step_losses else 0.0)
    if step % config.snap_every != 0:
        snapshot(step, since)
    art.wall_s = time.perf_counter() - t_start

    if out:
        reporting.write_records(out, art.records)
        reporting.write_text(os.path.join(out, "model_summary.txt"), _summary_text(art, param_count(model)))
        art.paths = {"metrics": os.path.join(out, "metrics.csv"), "summary": os.path.join(out, "model_summary.txt"),
                     "config": os.path.join(out, "config.txt")}
    return art


def recompute_records(out_dir):
    """Rebuild the metrics records of a finished run from its saved snapshots."""
    with open(os.path.join(out_dir, "config.txt"), encoding="utf-8") as f:
        config = ExperimentConfig.from_text(f.read())
    with np.load(os.path.join(out_dir, "probe.npz")) as z:
        px, py = z["x"], z["y"]
    model = build(config.model_spec(), config.seed)
    records = []
    for step, arrays, meta in reporting.load_snapshots(out_dir):
        model.load_state_arrays(arrays)
        records.append(snapshot_diagnostics(model, px, py, step, tol=config.sparsity_tol, bins=config.hist_bins,
                                            hist_range=config.hist_range, test_acc=meta.get("test_acc"),
                                            step_ms=meta.get("step_ms") or 0.0))
    return config, records


# toy GAN


@dataclass
class GanConfig:
    norm: str = "msn"
    widths: tuple = (64, 64)
    slope: float = 0.01
    z_dim: int = 2
    steps: int = 5000
    batch: int = 64
    lr: float = 2e-4
    seed: int = 0
    log_every: int = 250
    n_eval: int = 2000
    lipschitz_pairs: int = 10000
    out: str = None

    def validate(self):
        ModelSpec(kind="gan_toy", norm=self.norm, widths=self.widths, slope=self.slope).validate()
        if self.norm in BATCH_STAT_SCHEMES and self.batch < 2:
            raise ConfigError(f"--batch {self.batch} is incompatible with --norm {self.norm}")
        if self.lr <= 0 or self.steps < 0:
            raise ConfigError(f"need lr > 0 and steps >= 0, got lr={self.lr}, steps={self.steps}")


@dataclass
class GanArtifacts:
    config: GanConfig
    pair: object
    history: list
    samples: np.ndarray
    modes: int
    lipschitz: float
    step_ms: list
    exit_status: int = 0


def modes_covered(samples, min_frac=0.01):
    """Number of ring centres that receive at least ``min_frac`` of the samples
    within 3 standard deviations."""
    centers = ring_centers()
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    close = d[np.arange(len(samples)), nearest] <= 3 * RING_STD
    counts = np.bincount(nearest[close], minlength=len(centers))
    return int(np.count_nonzero(counts >= max(1, min_frac * len(samples))))


def converged_copy(model):
    """Deep copy whose power-iteration vectors are run to convergence."""
    twin = copy.deepcopy(model)
    for layer in twin.layers:
        if layer.power is not None:
            _, st = converge_power_iteration(flatten_weight(layer.weight), layer.power)
            layer.power.u, layer.power.v = st.u, st.v
    return twin


def lipschitz_ratio(D, n_pairs, rng, scale=1.5):
    """Largest ``|D(x1) - D(x2)| / |x1 - x2|`` of the pre-sigmoid logit.

    Half the pairs are independent uniform points in ``[-scale, scale]^2``;
    the other half are close neighbours of such points.
    """
    critic = converged_copy(D)
    half = n_pairs // 2
    x1 = rng.uniform(-scale, scale, size=(n_pairs, 2))
    x2 = np.concatenate([rng.uniform(-scale, scale, size=(half, 2)),
                         x1[half:] + 1e-2 * rng.standard_normal((n_pairs - half, 2))])
    d1 = critic(Tensor(x1), "eval").data.ravel()
    d2 = critic(Tensor(x2), "eval").data.ravel()
    return float(np.max(np.abs(d1 - d2) / np.linalg.norm(x1 - x2, axis=1)))


def train_gan(config):
    """Alternating single D/G Adam steps on the adversarial objective."""
    config.validate()
    spec = ModelSpec(kind="gan_toy", norm=config.norm, widths=tuple(config.widths), slope=config.slope,
                     z_dim=config.z_dim)
    pair = build(spec, config.seed)
    G, D = pair.generator, pair.discriminator
    g_params, d_params = G.parameters(), D.parameters()
    opt_g, opt_d = Adam(lr=config.lr), Adam(lr=config.lr)
    rng = np.random.default_rng([config.seed, 99])
    n = config.batch
    history, step_ms = [], []

    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        real = Tensor(sample_ring(n, None, rng=rng))
        z = Tensor(rng.standard_normal((n, config.z_dim)))

        D.zero_grad()
        fake = Tensor(G(z, "train").data)
        probs = discriminator_prob(D(concat([real, fake]), "train"))
        loss_d, _ = wgan_losses_from_probs(probs[:n], probs[n:])
        backward(loss_d)
        opt_d.step(d_params)

        G.zero_grad()
        z = Tensor(rng.standard_normal((n, config.z_dim)))
        probs = discriminator_prob(D(concat([real, G(z, "train")]), "probe"))
        _, loss_g = wgan_losses_from_probs(probs[:n], probs[n:])
        backward(loss_g)
        opt_g.step(g_params)
        step_ms.append(1000.0 * (time.perf_counter() - t0))

        if step % config.log_every == 0 or step == config.steps:
            history.append((step, float(loss_d.data), float(loss_g.data)))
            log.info("gan step %d: loss_D %.4f loss_G %.4f", step, history[-1][1], history[-1][2])

    eval_rng = np.random.default_rng([config.seed, 7])
    samples = G(Tensor(eval_rng.standard_normal((config.n_eval, config.z_dim))), "eval").data
    art = GanArtifacts(config, pair, history, samples, modes_covered(samples),
                       lipschitz_ratio(D, config.lipschitz_pairs, eval_rng), step_ms)
    if config.out:
        _write_gan(art)
    return art


def _write_gan(art):
    out = art.config.out
    os.makedirs(out, exist_ok=True)
    reporting.write_text(os.path.join(out, "config.txt"), reporting.config_text(art.config))
    lines = ["step,loss_d,loss_g"] + [f"{s},{reporting.fmt(a)},{reporting.fmt(b)}" for s, a, b in art.history]
    reporting.write_text(os.path.join(out, "gan_metrics.csv"), "\n".join(lines) + "\n")
    lines = ["x,y"] + [f"{reporting.fmt(a)},{reporting.fmt(b)}" for a, b in art.samples]
    reporting.write_text(os.path.join(out, "samples.csv"), "\n".join(lines) + "\n")
    summary = [f"norm={art.config.norm}", f"modes_covered={art.modes}", f"lipschitz_ratio={art.lipschitz!r}",
               f"mean_step_ms={float(np.mean(art.step_ms)) if art.step_ms else 0.0!r}",
               f"exit_status={art.exit_status}"]
    reporting.write_text(os.path.join(out, "model_summary.txt"), "\n".join(summary) + "\n")
