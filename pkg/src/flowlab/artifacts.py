"""Run directory IO: config.json, metrics.csv, sample/trajectory dumps and
flat binary checkpoints.

Checkpoint layout (all little-endian): 8-byte magic, int64 header with the
flow topology and flags, then float64 parameter blocks in the fixed
``DenseNet.params()`` order, flow net first, source net (if any) second.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .flow import (METRICS_COLUMNS, FlowModel, RunArtifacts, TrainConfig)
from .source import SOURCE_KINDS, SourceModel

MAGIC = b"FLOWLAB1"


def _write_net(fh, net):
    fh.write(struct.pack("<q", len(net.layer_dims)))
    fh.write(np.asarray(net.layer_dims, dtype="<i8").tobytes())
    fh.write(struct.pack("<qq", int(net.with_time), int(net.with_cond)))
    for p in net.params():
        fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _read_net(fh):
    from .nnet import DenseNet
    (n,) = struct.unpack("<q", fh.read(8))
    dims = np.frombuffer(fh.read(8 * n), dtype="<i8").tolist()
    with_time, with_cond = struct.unpack("<qq", fh.read(16))
    net = DenseNet(dims, with_time=bool(with_time), with_cond=bool(with_cond))
    for p in net.params():
        buf = fh.read(8 * p.size)
        p[...] = np.frombuffer(buf, dtype="<f8").reshape(p.shape)
    return net


def save_checkpoint(path, flow: FlowModel, source: SourceModel):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", int(flow.condition_injected)))
        _write_net(fh, flow.net)
        fh.write(struct.pack("<q", SOURCE_KINDS.index(source.kind)))
        fh.write(struct.pack("<q", source.output_dim))
        fh.write(struct.pack("<q", int(source.net is not None)))
        if source.net is not None:
            _write_net(fh, source.net)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a flowlab checkpoint")
        (cond_inj,) = struct.unpack("<q", fh.read(8))
        flow = FlowModel.__new__(FlowModel)
        flow.net = _read_net(fh)
        flow.condition_injected = bool(cond_inj)
        (kind_idx,) = struct.unpack("<q", fh.read(8))
        (out_dim,) = struct.unpack("<q", fh.read(8))
        (has_net,) = struct.unpack("<q", fh.read(8))
        source = SourceModel.__new__(SourceModel)
        source.kind = SOURCE_KINDS[kind_idx]
        source.output_dim = int(out_dim)
        source.net = _read_net(fh) if has_net else None
    return flow, source


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_COLUMNS + "\n")
        for row in rows:
            fh.write(row.to_csv_line() + "\n")


def write_samples_csv(path, sources, generated, targets, c):
    """kind,c,x,y rows for source (x), generated and target points."""
    with open(path, "w", newline="") as fh:
        fh.write("kind,c,x,y\n")
        for kind, pts in (("source", sources), ("generated", generated),
                          ("target", targets)):
            for ci, (x, y) in zip(c, pts):
                fh.write(f"{kind},{float(ci)!r},{float(x)!r},{float(y)!r}\n")


def write_trajectories_csv(path, traj, max_trajectories: int = 256):
    """sample_id,t,x,y,c rows; trims to the first max_trajectories paths."""
    n = min(traj.states.shape[1], max_trajectories)
    with open(path, "w", newline="") as fh:
        fh.write("sample_id,t,x,y,c\n")
        for i in range(n):
            for k, tk in enumerate(traj.times):
                x, y = traj.states[k, i]
                fh.write(f"{i},{float(tk)!r},{float(x)!r},{float(y)!r},"
                         f"{float(traj.c[i])!r}\n")


def write_run_dir(run_dir, art: RunArtifacts):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(art.cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_metrics_csv(run_dir / "metrics.csv", art.rows)
    write_samples_csv(run_dir / "samples.csv", art.final_sources,
                      art.final_samples, art.eval_x1, art.eval_c)
    write_trajectories_csv(run_dir / "trajectories.csv", art.final_traj)
    ck = run_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_checkpoint(ck / "final.bin", art.flow, art.source)
    return run_dir


def load_config(run_dir) -> TrainConfig:
    with open(Path(run_dir) / "config.json") as fh:
        return TrainConfig.from_dict(json.load(fh))


def final_checkpoint_path(run_dir) -> Path:
    p = Path(run_dir) / "checkpoints" / "final.bin"
    return p


def read_metrics_csv(path):
    """Parse metrics.csv into a list of dicts (floats; '' -> None)."""
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.rstrip("\n").split(",")
            row = {}
            for k, v in zip(header, vals):
                if v == "":
                    row[k] = None
                elif k == "step" or k.endswith("_flag"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out
