"""On-disk formats: metrics.csv, histogram CSVs, key=value config echoes, snapshots."""

import dataclasses
import glob
import io
import os

import numpy as np

LAYER_FIELDS = ("wmean", "wvar", "premean", "sigma", "msv")


def fmt(x):
    """Shortest round-tripping float text; empty for absent values."""
    if x is None:
        return ""
    return repr(float(x))


def metrics_header(n_layers):
    cols = ["step", "loss", "test_acc", "sparsity_pct", "step_ms"]
    for i in range(n_layers):
        cols += [f"L{i}_{f}" for f in LAYER_FIELDS]
    return ",".join(cols)


def metrics_row(rec):
    vals = [str(rec.step), fmt(rec.loss), fmt(rec.test_acc), fmt(rec.sparsity_pct), fmt(rec.step_ms)]
    for ls in rec.layers:
        vals += [fmt(getattr(ls, f)) for f in LAYER_FIELDS]
    return ",".join(vals)


def metrics_csv(records):
    lines = [metrics_header(len(records[0].layers))] + [metrics_row(r) for r in records]
    return "\n".join(lines) + "\n"


def read_metrics_csv(path):
    """Parse metrics.csv into a list of ``{column: float or None}`` rows."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    header = lines[0].split(",")
    return [{k: (float(v) if v != "" else None) for k, v in zip(header, line.split(","))} for line in lines[1:]]


def histogram_csv(hist):
    buf = io.StringIO()
    buf.write("bin_left,bin_right,count\n")
    for left, right, count in hist.rows():
        buf.write(f"{fmt(left)},{fmt(right)},{count}\n")
    return buf.getvalue()


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_records(out_dir, records, metrics_name="metrics.csv"):
    write_text(os.path.join(out_dir, metrics_name), metrics_csv(records))
    for rec in records:
        for i, hist in enumerate(rec.histograms):
            write_text(os.path.join(out_dir, f"hist_step{rec.step}_layer{i}.csv"), histogram_csv(hist))


def config_text(cfg):
    """``key=value`` lines for every field of a config dataclass, in field order."""
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        elif val is None:
            val = ""
        lines.append(f"{f.name}={val}")
    return "\n".join(lines) + "\n"


def parse_config_text(cls, text):
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        values[key] = raw
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        elif isinstance(default, tuple):
            kwargs[f.name] = tuple(int(v) for v in raw.split(",")) if raw else ()
        elif default is None:
            kwargs[f.name] = raw or None
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def save_snapshot(out_dir, step, arrays, **meta):
    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    payload = dict(arrays)
    for k, v in meta.items():
        payload[f"meta.{k}"] = np.array(np.nan if v is None else v, dtype=np.float64)
    np.savez_compressed(os.path.join(snap_dir, f"step{step:07d}.npz"), **payload)


def load_snapshots(out_dir):
    """``[(step, arrays, meta)]`` sorted by step."""
    out = []
    for path in sorted(glob.glob(os.path.join(out_dir, "snapshots", "step*.npz"))):
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files if not k.startswith("meta.")}
            meta = {}
            for k in z.files:
                if k.startswith("meta."):
                    v = float(z[k])
                    meta[k[5:]] = None if np.isnan(v) else v
        step = int(os.path.basename(path)[4:-4])
        out.append((step, arrays, meta))
    return out
