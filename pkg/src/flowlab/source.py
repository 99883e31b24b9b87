"""Condition-dependent source distributions and their auxiliary losses.

Three source kinds:
  * fixed_gaussian      -- X0 ~ N(0, I), no parameters
  * deterministic       -- X0 = mu(c), the mean head of a small MLP
  * conditional_gaussian-- X0 ~ N(mu(c), sigma2(c) I) via reparameterization

The generator MLP maps a scalar condition to concatenated mean and
log-variance heads; log-variance parameterization keeps sigma2 > 0 by
construction. Reparameterized draws record the noise so parameter gradients
flow pathwise through both mean and variance.

Auxiliary losses return (value, gradients) pairs; gradients are with respect
to the differentiated argument under the batch-mean convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnet import ConfigError, DenseNet
from .rng import SplitRng

SOURCE_KINDS = ("fixed_gaussian", "deterministic", "conditional_gaussian")
_NORM_GUARD = 1e-12


@dataclass
class SourceDraw:
    """One batch of source samples with the quantities backward needs."""

    x0: np.ndarray       # (B, d)
    mu: np.ndarray       # (B, d)
    sigma2: np.ndarray   # (B, d)
    eps: np.ndarray      # (B, d) reparameterization noise
    tape: object = None  # generator forward tape (None for fixed_gaussian)


class SourceModel:
    """Source distribution p(X0 | c) of one of the three kinds."""

    def __init__(self, kind: str, output_dim: int = 2, hidden: int = 64,
                 n_hidden_layers: int = 2, rng: SplitRng | None = None):
        if kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {kind!r}")
        self.kind = kind
        self.output_dim = output_dim
        if kind == "fixed_gaussian":
            self.net = None
        else:
            # 3-layer MLP: condition -> [mu | log sigma2]
            dims = [1] + [hidden] * n_hidden_layers + [2 * output_dim]
            self.net = DenseNet(dims, rng=rng)
            # neutral start: the whole output layer is zeroed so the
            # generator begins as exactly N(0, I) for every condition,
            # matching the fixed-Gaussian baseline (a randomly initialized
            # mean head would bake in arbitrary condition-dependent offsets
            # that the flat mean-landscape of the FM loss never corrects)
            self.net.weights[-1][...] = 0.0
            self.net.biases[-1][...] = 0.0

    def params(self):
        return [] if self.net is None else self.net.params()

    def copy(self) -> "SourceModel":
        dup = SourceModel.__new__(SourceModel)
        dup.kind = self.kind
        dup.output_dim = self.output_dim
        dup.net = None if self.net is None else self.net.copy()
        return dup

    def heads(self, c):
        """(mu, sigma2, log_sigma2, tape) of the generator at conditions c."""
        out, tape = self.net.forward(np.asarray(c, dtype=np.float64).reshape(-1, 1))
        d = self.output_dim
        mu = out[:, :d]
        log_s2 = out[:, d:]
        return mu, np.exp(log_s2), log_s2, tape

    def backward_heads(self, tape, g_mu, g_log_sigma2):
        """Generator parameter gradients from head gradients."""
        gy = np.concatenate([g_mu, g_log_sigma2], axis=1)
        grads, _, _, _ = self.net.backward(tape, gy)
        return grads


def sample_source(model: SourceModel, c, rng: SplitRng) -> SourceDraw:
    """Draw X0 per the model kind; records everything backward needs."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    B, d = c.shape[0], model.output_dim
    if model.kind == "fixed_gaussian":
        eps = rng.normal((B, d))
        return SourceDraw(x0=eps.copy(), mu=np.zeros((B, d)),
                          sigma2=np.ones((B, d)), eps=eps)
    mu, sigma2, _, tape = model.heads(c)
    if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma2)):
        raise FloatingPointError("source generator produced non-finite output")
    if model.kind == "deterministic":
        zeros = np.zeros((B, d))
        return SourceDraw(x0=mu.copy(), mu=mu, sigma2=zeros, eps=zeros, tape=tape)
    eps = rng.normal((B, d))
    x0 = mu + np.sqrt(sigma2) * eps
    return SourceDraw(x0=x0, mu=mu, sigma2=sigma2, eps=eps, tape=tape)


def source_param_grads(model: SourceModel, draw: SourceDraw,
                       g_x0, g_mu_extra=None, g_sigma2_extra=None):
    """Backpropagate x0/mu/sigma2 gradients to generator parameters.

    ``g_x0`` flows pathwise: mu gets it directly; log sigma2 gets
    g_x0 * eps * sqrt(sigma2) / 2. Extra terms (regularizers) are added on
    the mu / sigma2 heads directly.
    """
    if model.net is None:
        return None
    g_mu = np.array(g_x0, dtype=np.float64)
    if model.kind == "conditional_gaussian":
        g_log_s2 = 0.5 * g_x0 * draw.eps * np.sqrt(draw.sigma2)
        if g_sigma2_extra is not None:
            g_log_s2 = g_log_s2 + g_sigma2_extra * draw.sigma2
    else:
        g_log_s2 = np.zeros_like(g_mu)
    if g_mu_extra is not None:
        g_mu = g_mu + g_mu_extra
    return model.backward_heads(draw.tape, g_mu, g_log_s2)


# -- auxiliary losses ------------------------------------------------------

def varreg_loss(sigma2) -> float:
    """KL(N(mu, s2 I) || N(mu, I)), batch mean: 1/2 sum_i (s2 - log s2 - 1)."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    return float(np.mean(np.sum(0.5 * (sigma2 - np.log(sigma2) - 1.0), axis=-1)))


def varreg_loss_grad(sigma2):
    """d varreg_loss / d sigma2 (batch-mean convention)."""
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    return 0.5 * (1.0 - 1.0 / sigma2) / sigma2.shape[0]


def standard_kl_loss(mu, sigma2) -> float:
    """KL(N(mu, s2 I) || N(0, I)), batch mean."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    terms = 0.5 * (mu * mu + sigma2 - np.log(sigma2) - 1.0)
    return float(np.mean(np.sum(terms, axis=-1)))


def standard_kl_loss_grad(mu, sigma2):
    """(d/d mu, d/d sigma2) of standard_kl_loss."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    B = mu.shape[0]
    return mu / B, 0.5 * (1.0 - 1.0 / sigma2) / B


def cosine_align_loss(x0, x1):
    """Batch mean of 1 - cos(x0, x1) and its gradient w.r.t. x0.

    x1 is data and receives no gradient. Samples where either norm falls
    below 1e-12 contribute loss 1 with zero gradient.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError("shape mismatch")
    B = x0.shape[0]
    n0 = np.linalg.norm(x0, axis=1)
    n1 = np.linalg.norm(x1, axis=1)
    ok = (n0 > _NORM_GUARD) & (n1 > _NORM_GUARD)
    n0s = np.where(ok, n0, 1.0)
    n1s = np.where(ok, n1, 1.0)
    dot = np.sum(x0 * x1, axis=1)
    cos = np.where(ok, dot / (n0s * n1s), 0.0)
    loss = float(np.mean(1.0 - cos))
    # d(-cos)/dx0 = -(x1/(|x0||x1|) - cos * x0/|x0|^2)
    grad = -(x1 / (n0s * n1s)[:, None] - (cos / (n0s * n0s))[:, None] * x0)
    grad[~ok] = 0.0
    return loss, grad / B


def mse_align_loss(x0, x1):
    """Batch mean over samples of the per-dimension mean of (x0-x1)^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError("shape mismatch")
    diff = x0 - x1
    loss = float(np.mean(np.mean(diff * diff, axis=1)))
    grad = 2.0 * diff / diff.size
    return loss, grad


def source_grid_csv(path, model: SourceModel, c_values):
    """Export mu/sigma2 over a condition grid: c, mu_x, mu_y, sigma2_x, sigma2_y."""
    c_values = np.asarray(c_values, dtype=np.float64).reshape(-1)
    if model.kind == "fixed_gaussian":
        mu = np.zeros((len(c_values), model.output_dim))
        sigma2 = np.ones_like(mu)
    else:
        mu, sigma2, _, _ = model.heads(c_values)
        if model.kind == "deterministic":
            sigma2 = np.zeros_like(sigma2)
    with open(path, "w", newline="") as fh:
        fh.write("c,mu_x,mu_y,sigma2_x,sigma2_y\n")
        for ci, m, s in zip(c_values, mu, sigma2):
            fh.write(f"{float(ci)!r},{float(m[0])!r},{float(m[1])!r},"
                     f"{float(s[0])!r},{float(s[1])!r}\n")
