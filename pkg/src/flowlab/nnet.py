"""Fixed-topology dense networks with hand-written reverse-mode gradients.

All parameters and activations are float64. The hidden nonlinearity is the
exact erf-based GELU; the output layer is affine. Scalar time and condition
inputs, when enabled, are linearly projected into the first hidden width and
summed into the first pre-activation.

Gradients are exact analytic reverse-mode: ``backward`` differentiates the
scalar sum(<output_grad, outputs>) with respect to every parameter and every
input channel. A forward tape is tied to the parameter snapshot that produced
it (``version``); consuming a stale tape is a contract violation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .rng import SplitRng

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ConfigError(ValueError):
    """Network built or called with inconsistent shapes/options."""


class StaleTapeError(RuntimeError):
    """Backward called with a tape from an older parameter snapshot."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer update saw a NaN/inf gradient."""


def gelu(x):
    """Exact GELU: x * Phi(x) with the error-function normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_prime(x):
    """d/dx of gelu: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


@dataclass
class Tape:
    """Per-batch forward record, sufficient for one backward pass."""

    x: np.ndarray
    t: np.ndarray | None
    c: np.ndarray | None
    pre: list          # pre-activations z_l for layers 0..L-2
    act: list          # activations gelu(z_l)
    cdf: list          # Phi(z_l), cached so backward skips the erf
    version: int


class DenseNet:
    """MLP with GELU hidden layers, identity output, optional t/c injection.

    ``layer_dims`` has one entry per layer boundary: L weight matrices map
    layer_dims[l] -> layer_dims[l+1]. Weight l has shape (out, in).
    """

    def __init__(self, layer_dims, with_time: bool = False,
                 with_cond: bool = False, rng: SplitRng | None = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigError(f"bad layer_dims {layer_dims}")
        self.layer_dims = dims
        self.with_time = with_time
        self.with_cond = with_cond
        self.version = 0

        if rng is None:
            rng = SplitRng(0)
        # He scaling, std = sqrt(2 / fan_in); scalar projections have fan_in 1
        self.weights = []
        self.biases = []
        for l in range(len(dims) - 1):
            fan_in = dims[l]
            std = np.sqrt(2.0 / fan_in)
            self.weights.append(std * rng.normal((dims[l + 1], dims[l])))
            self.biases.append(np.zeros(dims[l + 1]))
        h1 = dims[1]
        self.time_w = np.sqrt(2.0) * rng.normal(h1) if with_time else None
        self.cond_w = np.sqrt(2.0) * rng.normal(h1) if with_cond else None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        """Parameter arrays in a fixed order; gradients follow the same order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        if self.time_w is not None:
            out.append(self.time_w)
        if self.cond_w is not None:
            out.append(self.cond_w)
        return out

    def mark_updated(self):
        """Invalidate outstanding tapes after an in-place parameter update."""
        self.version += 1

    def copy(self) -> "DenseNet":
        dup = DenseNet.__new__(DenseNet)
        dup.layer_dims = list(self.layer_dims)
        dup.with_time = self.with_time
        dup.with_cond = self.with_cond
        dup.version = 0
        dup.weights = [W.copy() for W in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup.time_w = None if self.time_w is None else self.time_w.copy()
        dup.cond_w = None if self.cond_w is None else self.cond_w.copy()
        return dup

    # -- forward / backward ------------------------------------------------

    def forward(self, x, t=None, c=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.layer_dims[0]:
            raise ConfigError(
                f"input width {x.shape[1]} != layer_dims[0]={self.layer_dims[0]}")
        if (t is not None) != self.with_time:
            raise ConfigError("time input presence does not match construction")
        if (c is not None) != self.with_cond:
            raise ConfigError("condition input presence does not match construction")
        if t is not None:
            t = np.asarray(t, dtype=np.float64).reshape(-1)
        if c is not None:
            c = np.asarray(c, dtype=np.float64).reshape(-1)

        L = self.n_layers
        pre, act, cdf = [], [], []
        a = x
        for l in range(L - 1):
            z = a @ self.weights[l].T + self.biases[l]
            if l == 0:
                if t is not None:
                    z = z + t[:, None] * self.time_w
                if c is not None:
                    z = z + c[:, None] * self.cond_w
            phi = 0.5 * (1.0 + erf(z / _SQRT2))
            a = z * phi
            pre.append(z)
            act.append(a)
            cdf.append(phi)
        y = a @ self.weights[L - 1].T + self.biases[L - 1]
        if L == 1:  # single affine layer; projections land on the output
            if t is not None:
                y = y + t[:, None] * self.time_w
            if c is not None:
                y = y + c[:, None] * self.cond_w
        return y, Tape(x=x, t=t, c=c, pre=pre, act=act, cdf=cdf,
                       version=self.version)

    def backward(self, tape: Tape, output_grad, want_deltas: bool = False):
        """Gradients of sum(<output_grad, outputs>).

        Returns (param_grads, input_grad, time_grad, cond_grad) and, when
        ``want_deltas``, additionally the per-layer pre-activation gradients
        (one (B, out) array per weight layer, in layer order).
        """
        if tape.version != self.version:
            raise StaleTapeError("tape predates the current parameter snapshot")
        gy = np.asarray(output_grad, dtype=np.float64)
        if gy.shape != (tape.x.shape[0], self.layer_dims[-1]):
            raise ConfigError("output_grad shape mismatch")

        L = self.n_layers
        gW = [None] * L
        gb = [None] * L
        deltas = [None] * L

        d = gy
        deltas[L - 1] = d
        last_in = tape.act[L - 2] if L > 1 else tape.x
        gW[L - 1] = d.T @ last_in
        gb[L - 1] = d.sum(axis=0)
        da = d @ self.weights[L - 1]
        for l in range(L - 2, -1, -1):
            z = tape.pre[l]
            gp = tape.cdf[l] + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
            dz = da * gp
            deltas[l] = dz
            prev = tape.x if l == 0 else tape.act[l - 1]
            gW[l] = dz.T @ prev
            gb[l] = dz.sum(axis=0)
            da = dz @ self.weights[l]
        gx = da if L > 1 else d @ self.weights[0]

        # layer receiving the scalar projections
        d_inj = deltas[0] if L > 1 else gy
        gt = gtw = gc = gcw = None
        if self.time_w is not None:
            gt = d_inj @ self.time_w
            gtw = (d_inj * tape.t[:, None]).sum(axis=0)
        if self.cond_w is not None:
            gc = d_inj @ self.cond_w
            gcw = (d_inj * tape.c[:, None]).sum(axis=0)

        grads = []
        for W_g, b_g in zip(gW, gb):
            grads.extend([W_g, b_g])
        if self.time_w is not None:
            grads.append(gtw)
        if self.cond_w is not None:
            grads.append(gcw)
        if want_deltas:
            return grads, gx, gt, gc, deltas
        return grads, gx, gt, gc


def per_sample_weight_grads(net: DenseNet, tape: Tape, output_grads,
                            layers) -> dict:
    """Per-sample gradients of the designated weight matrices.

    ``output_grads[i]`` is d(loss_i)/d(outputs_i) for sample i's own loss.
    Returns {layer_index: array (B, out, in)}; the mean over axis 0 equals
    the batch gradient of the mean loss.
    """
    B = tape.x.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    for l in layers:
        if not 0 <= l < net.n_layers:
            raise ConfigError(f"layer {l} not in net")
    _, _, _, _, deltas = net.backward(tape, output_grads, want_deltas=True)
    out = {}
    for l in layers:
        prev = tape.x if l == 0 else tape.act[l - 1]
        out[l] = np.einsum("bo,bi->boi", deltas[l], prev)
    return out


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter list."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, in place on ``params``."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter {i} "
                f"(|g|_max={np.max(np.abs(g))}) at step {state.step_count + 1}")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
