"""Estimators and diagnostics: local intrinsic variance, per-sample gradient
variance profiles, two-sample distances, and collapse/explosion detectors.

All estimators are pure functions of their inputs; randomness comes in only
through explicitly passed streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .rng import SplitRng
from .source import SourceModel, sample_source

COLLAPSE_THRESHOLD = 1e-3
EXPLOSION_THRESHOLD = 1e2
DETECTOR_PERSISTENCE = 10


@dataclass
class GradVarianceProfile:
    """Summed element-wise per-sample gradient variance, per time bin."""

    bin_edges: np.ndarray          # (n_bins + 1,)
    variance: np.ndarray           # (n_bins,), nan where a bin is empty
    counts: np.ndarray             # (n_bins,)
    layers: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("t_bin_lo,t_bin_hi,grad_variance,count\n")
            for i in range(len(self.counts)):
                v = "" if math.isnan(self.variance[i]) else repr(float(self.variance[i]))
                fh.write(f"{float(self.bin_edges[i])!r},"
                         f"{float(self.bin_edges[i + 1])!r},{v},{int(self.counts[i])}\n")


def intrinsic_variance_knn(xt, t, delta, t_bins: int = 10, k: int = 32):
    """Local-neighborhood estimate of E[Var(delta | X_t)] per time bin.

    Within each bin, each point's Var(delta) is the trace of the sample
    covariance of delta over its k nearest neighbors in x-space (excluding
    the point itself); the bin value is the mean of those local variances.
    Bins with fewer than k+1 points are returned as nan ("missing").

    Returns (bin_edges, estimates, counts).
    """
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    edges = np.linspace(0.0, 1.0, t_bins + 1)
    estimates = np.full(t_bins, np.nan)
    counts = np.zeros(t_bins, dtype=int)
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, t_bins - 1)
    for b in range(t_bins):
        sel = idx == b
        counts[b] = int(sel.sum())
        if counts[b] < k + 1:
            continue
        xb, db = xt[sel], delta[sel]
        tree = cKDTree(xb)
        _, nbr = tree.query(xb, k=k + 1)     # first neighbor is the point itself
        nbr_delta = db[nbr[:, 1:]]           # (n_b, k, d)
        local = nbr_delta.var(axis=1, ddof=1).sum(axis=1)
        estimates[b] = float(local.mean())
    return edges, estimates, counts


def intrinsic_variance_csv(path, edges, estimates, counts):
    with open(path, "w", newline="") as fh:
        fh.write("t_bin_lo,t_bin_hi,intrinsic_variance,count\n")
        for i in range(len(counts)):
            v = "" if math.isnan(estimates[i]) else repr(float(estimates[i]))
            fh.write(f"{float(edges[i])!r},{float(edges[i + 1])!r},{v},{int(counts[i])}\n")


def gradient_variance_probe(flow, source: SourceModel, x1, c, rng: SplitRng,
                            t_bins: int = 10, layers=None,
                            batch_cap: int = 4096) -> GradVarianceProfile:
    """Per-sample FM-loss gradient variance across interpolation time.

    For each probe sample: draw x0 from the source and t uniformly, form the
    interpolant, and take the gradient of that sample's own squared residual
    with respect to the selected weight matrices. Per bin, variance is
    element-wise across samples, summed over elements, then averaged across
    the selected layers. Empty bins are nan.

    ``layers`` defaults to all hidden weight matrices of the flow net
    (every layer except input and output).
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    n = x1.shape[0]
    if layers is None:
        layers = list(range(1, flow.net.n_layers - 1))
    if not layers:
        raise ValueError("layer selection is empty")

    draw = sample_source(source, c, rng.split(1))
    t = rng.split(2).uniform(n)
    xt = (1.0 - t)[:, None] * draw.x0 + t[:, None] * x1
    delta = x1 - draw.x0

    edges = np.linspace(0.0, 1.0, t_bins + 1)
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, t_bins - 1)
    variance = np.full(t_bins, np.nan)
    counts = np.zeros(t_bins, dtype=int)
    for b in range(t_bins):
        sel = np.flatnonzero(idx == b)
        counts[b] = len(sel)
        if len(sel) < 2:
            continue
        # accumulate element-wise first/second moments per layer in chunks
        sums = {l: 0.0 for l in layers}
        sqs = {l: 0.0 for l in layers}
        for lo in range(0, len(sel), batch_cap):
            part = sel[lo:lo + batch_cap]
            if flow.condition_injected:
                v, tape = flow.net.forward(xt[part], t=t[part], c=c[part])
            else:
                v, tape = flow.net.forward(xt[part], t=t[part])
            gy = 2.0 * (v - delta[part])     # d/dv of each sample's own loss
            _, _, _, _, deltas_l = flow.net.backward(tape, gy, want_deltas=True)
            for l in layers:
                prev = tape.x if l == 0 else tape.act[l - 1]
                d = deltas_l[l]
                sums[l] = sums[l] + d.T @ prev
                sqs[l] = sqs[l] + (d * d).T @ (prev * prev)
        m = len(sel)
        per_layer = []
        for l in layers:
            mean = sums[l] / m
            var = sqs[l] / m - mean * mean
            per_layer.append(float(np.sum(np.maximum(var, 0.0))))
        variance[b] = float(np.mean(per_layer))
    return GradVarianceProfile(bin_edges=edges, variance=variance,
                               counts=counts, layers=list(layers))


def sliced_wasserstein(a, b, projections: int = 128,
                       rng: SplitRng | None = None) -> float:
    """Sliced 2-Wasserstein distance between two point sets.

    Averages squared 1D W2 distances over random uniform directions and
    returns the square root. Unequal sizes are handled by quantile
    interpolation of the sorted projections.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 points per set")
    if rng is None:
        rng = SplitRng(0)
    d = a.shape[1]
    dirs = rng.normal((projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        q = (np.arange(max(pa.shape[0], pb.shape[0])) + 0.5) / max(pa.shape[0], pb.shape[0])
        qa = (np.arange(pa.shape[0]) + 0.5) / pa.shape[0]
        qb = (np.arange(pb.shape[0]) + 0.5) / pb.shape[0]
        pa = np.stack([np.interp(q, qa, pa[:, j]) for j in range(projections)], axis=1)
        pb = np.stack([np.interp(q, qb, pb[:, j]) for j in range(projections)], axis=1)
    w2_sq = np.mean((pa - pb) ** 2, axis=0)
    return float(np.sqrt(np.mean(w2_sq)))


def energy_distance(a, b) -> float:
    """Energy distance 2 E|a-b| - E|a-a'| - E|b-b'| over all pairs.

    All expectations are plain means over every pair (within-set means
    include the zero diagonal), which keeps the statistic non-negative and
    exactly zero on identical multisets.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 points per set")
    cross = cdist(a, b).mean()
    within_a = cdist(a, a).mean()
    within_b = cdist(b, b).mean()
    return float(2.0 * cross - within_a - within_b)


@dataclass
class DetectorState:
    """Sticky collapse/explosion flags over a logged sigma2-mean series."""

    collapse_threshold: float = COLLAPSE_THRESHOLD
    explosion_threshold: float = EXPLOSION_THRESHOLD
    persistence: int = DETECTOR_PERSISTENCE
    collapse_flag: bool = False
    explosion_flag: bool = False
    collapse_step: int | None = None
    explosion_step: int | None = None
    _below: int = 0
    _above: int = 0

    def update(self, sigma2_mean: float, step: int):
        self._below = self._below + 1 if sigma2_mean < self.collapse_threshold else 0
        self._above = self._above + 1 if sigma2_mean > self.explosion_threshold else 0
        if self._below >= self.persistence and not self.collapse_flag:
            self.collapse_flag = True
            self.collapse_step = step
        if self._above >= self.persistence and not self.explosion_flag:
            self.explosion_flag = True
            self.explosion_step = step
        return self


def collapse_explosion_detect(sigma2_series, steps=None,
                              collapse_threshold=COLLAPSE_THRESHOLD,
                              explosion_threshold=EXPLOSION_THRESHOLD,
                              persistence=DETECTOR_PERSISTENCE) -> DetectorState:
    """Run the sticky detectors over a full logged series."""
    sigma2_series = np.asarray(sigma2_series, dtype=np.float64)
    if sigma2_series.size == 0:
        raise ValueError("empty series")
    if steps is None:
        steps = np.arange(len(sigma2_series))
    det = DetectorState(collapse_threshold=collapse_threshold,
                        explosion_threshold=explosion_threshold,
                        persistence=persistence)
    for s, v in zip(steps, sigma2_series):
        det.update(float(v), int(s))
    return det
