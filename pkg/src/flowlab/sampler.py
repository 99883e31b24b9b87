"""Euler integration of a learned velocity field and path-straightness.

Integration uses a uniform time grid and explicit Euler only; trajectories
record every grid point so straightness and plots need no recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitRng
from .source import SourceModel, sample_source


@dataclass
class TrajectoryBatch:
    """Paths for a batch: times (K+1,), states (K+1, B, d), conditions (B,)."""

    times: np.ndarray
    states: np.ndarray
    c: np.ndarray
    diverged: bool = False   # set when integration hit non-finite state

    @property
    def endpoints(self):
        return self.states[-1]


def euler_integrate(flow, x0, c=None, steps: int = 16) -> TrajectoryBatch:
    """x_{k+1} = x_k + (1/steps) v(x_k, t_k), t_k = k/steps.

    On non-finite state the partial trajectory is returned with
    ``diverged=True``; remaining grid points repeat the last finite state.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    B = x.shape[0]
    if c is not None:
        c = np.asarray(c, dtype=np.float64).reshape(-1)
    h = 1.0 / steps
    times = np.arange(steps + 1) * h
    states = np.empty((steps + 1, B, x.shape[1]))
    states[0] = x
    t_batch = np.empty(B)
    diverged = False
    for k in range(steps):
        t_batch.fill(times[k])
        if flow.condition_injected:
            v, _ = flow.net.forward(x, t=t_batch, c=c)
        else:
            v, _ = flow.net.forward(x, t=t_batch)
        x = x + h * v
        if not np.all(np.isfinite(x)):
            diverged = True
            states[k + 1:] = states[k]
            break
        states[k + 1] = x
    return TrajectoryBatch(times=times, states=states,
                           c=c if c is not None else np.zeros(B),
                           diverged=diverged)


def generate_batch(flow, source: SourceModel, conditions, steps: int,
                   rng: SplitRng, return_trajectories: bool = False):
    """Draw x0 from the source for each condition and integrate to t=1."""
    conditions = np.asarray(conditions, dtype=np.float64).reshape(-1)
    draw = sample_source(source, conditions, rng)
    traj = euler_integrate(flow, draw.x0, conditions, steps)
    if return_trajectories:
        return traj.endpoints, draw.x0, traj
    return traj.endpoints, draw.x0


def straightness(states) -> np.ndarray:
    """Normalized mean squared chord deviation per trajectory.

    ``states`` is (K+1, B, d) on a uniform grid. Zero iff every point lies
    on the chord between the endpoints (up to the 1e-12 guard).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[:, None, :]
    K = states.shape[0] - 1
    if K < 2:
        raise ValueError("trajectory needs at least 3 points")
    t = (np.arange(K + 1) / K)[:, None, None]
    chord = (1.0 - t) * states[0] + t * states[-1]
    dev = np.sum((states - chord) ** 2, axis=2)          # (K+1, B)
    chord_len2 = np.sum((states[-1] - states[0]) ** 2, axis=1)
    return dev.mean(axis=0) / (chord_len2 + 1e-12)
