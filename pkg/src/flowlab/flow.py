"""Joint training of the flow network and the learnable source.

One train step: sample a data batch (x1, c), draw x0 from the source, build
the linear interpolant, regress the flow net on delta = x1 - x0, and update
both parameter sets with Adam. Source parameters receive gradients through
two paths: the interpolant input x_t and the regression target delta; the
stop-gradient variant removes the delta path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from . import sampler as smp
from .datasets import DatasetSpec, sample_dataset
from .nnet import AdamState, ConfigError, DenseNet, adam_step
from .rng import SplitRng
from .source import (SourceModel, cosine_align_loss, mse_align_loss,
                     sample_source, source_param_grads, standard_kl_loss,
                     standard_kl_loss_grad, varreg_loss, varreg_loss_grad)

FLOW_HIDDEN = 64
FLOW_LAYERS = 10          # weight layers in the velocity MLP
SOURCE_HIDDEN = 64
SOURCE_LAYERS = 3


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""

    def __init__(self, msg, state_dump=None):
        super().__init__(msg)
        self.state_dump = state_dump or {}


@dataclass
class LossWeights:
    lambda_varreg: float = 0.0
    lambda_align: float = 0.0
    align_kind: str = "none"        # none | cosine | mse
    stop_grad_delta: bool = False


@dataclass
class TrainConfig:
    """Fully resolved description of one training run."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    source_kind: str = "fixed_gaussian"
    regularizer: str = "none"       # none | standard_kl | varreg
    weights: LossWeights = field(default_factory=LossWeights)
    condition_injected: bool = True
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 3e-4
    time_sampler: str = "uniform"
    seed: int = 0
    log_interval: int = 100
    eval_interval: int = 1000
    eval_size: int = 2048
    eval_ode_steps: int = 16
    checkpoint_interval: int = 0    # 0: final checkpoint only

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ConfigError("steps >= 1 and batch_size >= 2 required")
        if self.time_sampler != "uniform":
            raise ConfigError("only the uniform time sampler is supported")
        if self.regularizer not in ("none", "standard_kl", "varreg"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dataset"] = DatasetSpec(**d["dataset"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


class FlowModel:
    """Velocity field v(x, t[, c]) as a dense net with scalar injections."""

    def __init__(self, condition_injected: bool = True,
                 rng: SplitRng | None = None, hidden: int = FLOW_HIDDEN,
                 n_layers: int = FLOW_LAYERS, dim: int = 2):
        dims = [dim] + [hidden] * (n_layers - 1) + [dim]
        self.net = DenseNet(dims, with_time=True,
                            with_cond=condition_injected, rng=rng)
        self.condition_injected = condition_injected

    def velocity(self, x, t, c=None):
        if self.condition_injected:
            return self.net.forward(x, t=t, c=c)
        return self.net.forward(x, t=t)

    def copy(self) -> "FlowModel":
        dup = FlowModel.__new__(FlowModel)
        dup.net = self.net.copy()
        dup.condition_injected = self.condition_injected
        return dup


def build_models(cfg: TrainConfig, rng: SplitRng):
    flow = FlowModel(condition_injected=cfg.condition_injected,
                     rng=rng.split(1))
    source = SourceModel(cfg.source_kind, output_dim=2, hidden=SOURCE_HIDDEN,
                         n_hidden_layers=SOURCE_LAYERS - 1, rng=rng.split(2))
    return flow, source


def interpolate(x0, x1, t):
    """Linear interpolant and conditional velocity: exact identities."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None] if t.ndim == x0.ndim - 1 else t
    xt = (1.0 - tt) * x0 + tt * x1
    return xt, x1 - x0


def fm_residual_loss(v, delta) -> float:
    """Batch mean of the squared residual norm, summed over dimensions."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    if v.shape != delta.shape:
        raise ValueError("shape mismatch")
    r = v - delta
    return float(np.mean(np.sum(r * r, axis=1)))


def total_loss(fm: float, reg: float, align: float, w: LossWeights) -> float:
    return fm + w.lambda_varreg * reg + w.lambda_align * align


@dataclass
class LossBreakdown:
    fm: float
    reg: float
    align: float
    total: float
    sigma2_mean: float
    sigma2_min: float
    sigma2_max: float


@dataclass
class TrainState:
    """Everything a training loop mutates."""

    cfg: TrainConfig
    flow: FlowModel
    source: SourceModel
    opt_flow: AdamState
    opt_source: AdamState | None
    step: int = 0


def init_train_state(cfg: TrainConfig) -> TrainState:
    root = SplitRng(cfg.seed)
    flow, source = build_models(cfg, root.split(0xA11))
    opt_flow = AdamState.for_params(flow.net.params(), lr=cfg.learning_rate)
    src_params = source.params()
    opt_source = (AdamState.for_params(src_params, lr=cfg.learning_rate)
                  if src_params else None)
    return TrainState(cfg=cfg, flow=flow, source=source,
                      opt_flow=opt_flow, opt_source=opt_source)


def train_step(state: TrainState, x1, c, t, eps_rng: SplitRng) -> LossBreakdown:
    """One joint update of flow and source on a fixed data batch."""
    cfg = state.cfg
    w = cfg.weights
    B = x1.shape[0]

    draw = sample_source(state.source, c, eps_rng)
    xt, delta = interpolate(draw.x0, x1, t)

    if state.flow.condition_injected:
        v, tape = state.flow.net.forward(xt, t=t, c=c)
    else:
        v, tape = state.flow.net.forward(xt, t=t)
    r = v - delta
    loss_fm = float(np.mean(np.sum(r * r, axis=1)))

    gy = 2.0 * r / B
    theta_grads, g_xt, _, _ = state.flow.net.backward(tape, gy)

    # phi path: through the interpolant input, plus the target unless stopped
    g_x0 = (1.0 - t)[:, None] * g_xt
    if not w.stop_grad_delta:
        g_x0 = g_x0 + 2.0 * r / B      # d loss/d delta = -2r/B, d delta/d x0 = -1

    loss_reg = 0.0
    g_mu_extra = None
    g_sigma2_extra = None
    if state.source.kind == "conditional_gaussian" and cfg.regularizer != "none":
        if cfg.regularizer == "varreg":
            loss_reg = varreg_loss(draw.sigma2)
            g_sigma2_extra = w.lambda_varreg * varreg_loss_grad(draw.sigma2)
        else:
            loss_reg = standard_kl_loss(draw.mu, draw.sigma2)
            gm, gs = standard_kl_loss_grad(draw.mu, draw.sigma2)
            g_mu_extra = w.lambda_varreg * gm
            g_sigma2_extra = w.lambda_varreg * gs

    loss_align = 0.0
    if w.align_kind != "none" and w.lambda_align > 0:
        if w.align_kind == "cosine":
            loss_align, g_align = cosine_align_loss(draw.x0, x1)
        elif w.align_kind == "mse":
            loss_align, g_align = mse_align_loss(draw.x0, x1)
        else:
            raise ConfigError(f"unknown align_kind {w.align_kind!r}")
        g_x0 = g_x0 + w.lambda_align * g_align

    total = total_loss(loss_fm, loss_reg, loss_align, w)
    if not np.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step + 1}",
            state_dump={"loss_fm": loss_fm, "loss_reg": loss_reg,
                        "loss_align": loss_align, "step": state.step + 1,
                        "sigma2_mean": float(np.mean(draw.sigma2))})

    adam_step(state.opt_flow, state.flow.net.params(), theta_grads)
    state.flow.net.mark_updated()
    if state.opt_source is not None:
        phi_grads = source_param_grads(state.source, draw, g_x0,
                                       g_mu_extra=g_mu_extra,
                                       g_sigma2_extra=g_sigma2_extra)
        adam_step(state.opt_source, state.source.params(), phi_grads)
        state.source.net.mark_updated()

    state.step += 1
    return LossBreakdown(
        fm=loss_fm, reg=loss_reg, align=loss_align, total=total,
        sigma2_mean=float(np.mean(draw.sigma2)),
        sigma2_min=float(np.min(draw.sigma2)),
        sigma2_max=float(np.max(draw.sigma2)))


METRICS_COLUMNS = ("step,loss_fm,loss_reg,loss_align,loss_total,"
                   "sigma2_mean,sigma2_min,sigma2_max,"
                   "sliced_w2,energy_distance,straightness_mean,"
                   "collapse_flag,explosion_flag")


@dataclass
class MetricsRow:
    step: int
    loss_fm: float
    loss_reg: float
    loss_align: float
    loss_total: float
    sigma2_mean: float
    sigma2_min: float
    sigma2_max: float
    sliced_w2: float | None
    energy_distance: float | None
    straightness_mean: float | None
    collapse_flag: bool
    explosion_flag: bool

    def to_csv_line(self):
        def f(v):
            return "" if v is None else repr(float(v))
        return (f"{self.step},{f(self.loss_fm)},{f(self.loss_reg)},"
                f"{f(self.loss_align)},{f(self.loss_total)},"
                f"{f(self.sigma2_mean)},{f(self.sigma2_min)},{f(self.sigma2_max)},"
                f"{f(self.sliced_w2)},{f(self.energy_distance)},"
                f"{f(self.straightness_mean)},"
                f"{int(self.collapse_flag)},{int(self.explosion_flag)}")


@dataclass
class RunArtifacts:
    cfg: TrainConfig
    flow: FlowModel
    source: SourceModel
    rows: list                      # list[MetricsRow]
    detector: met.DetectorState
    eval_x1: np.ndarray             # held-out targets
    eval_c: np.ndarray
    final_samples: np.ndarray       # generated endpoints at the final eval
    final_sources: np.ndarray
    final_traj: smp.TrajectoryBatch


def _evaluate(cfg, flow, source, eval_x1, eval_c, rng):
    endpoints, x0, traj = smp.generate_batch(
        flow, source, eval_c, cfg.eval_ode_steps, rng.split(1),
        return_trajectories=True)
    sw = met.sliced_wasserstein(endpoints, eval_x1, rng=rng.split(2))
    ed = met.energy_distance(endpoints, eval_x1)
    st = float(np.mean(smp.straightness(traj.states)))
    return endpoints, x0, traj, sw, ed, st


def train_run(cfg: TrainConfig, step_callback=None) -> RunArtifacts:
    """Execute a full training run; deterministic under cfg.seed."""
    state = init_train_state(cfg)
    root = SplitRng(cfg.seed)
    data_rng = root.split(1)
    noise_rng = root.split(2)
    time_rng = root.split(3)
    eval_root = root.split(4)

    eval_x1, eval_c = sample_dataset(cfg.eval_size, cfg.dataset,
                                     eval_root.split(0))

    rows = []
    detector = met.DetectorState()
    final = None
    for s in range(1, cfg.steps + 1):
        x1, c = sample_dataset(cfg.batch_size, cfg.dataset, data_rng)
        t = time_rng.uniform(cfg.batch_size)
        lb = train_step(state, x1, c, t, noise_rng)

        if s % cfg.log_interval == 0 or s == cfg.steps:
            detector.update(lb.sigma2_mean, s)
            sw = ed = st = None
            if s % cfg.eval_interval == 0 or s == cfg.steps:
                endpoints, x0, traj, sw, ed, st = _evaluate(
                    cfg, state.flow, state.source, eval_x1, eval_c,
                    eval_root.split(s))
                final = (endpoints, x0, traj)
            rows.append(MetricsRow(
                step=s, loss_fm=lb.fm, loss_reg=lb.reg, loss_align=lb.align,
                loss_total=lb.total, sigma2_mean=lb.sigma2_mean,
                sigma2_min=lb.sigma2_min, sigma2_max=lb.sigma2_max,
                sliced_w2=sw, energy_distance=ed, straightness_mean=st,
                collapse_flag=detector.collapse_flag,
                explosion_flag=detector.explosion_flag))
        if step_callback is not None:
            step_callback(state, s, lb)

    endpoints, x0, traj = final
    return RunArtifacts(cfg=cfg, flow=state.flow, source=state.source,
                        rows=rows, detector=detector,
                        eval_x1=eval_x1, eval_c=eval_c,
                        final_samples=endpoints, final_sources=x0,
                        final_traj=traj)


def reflow_finetune(flow: FlowModel, source: SourceModel, cfg: TrainConfig,
                    rng: SplitRng, steps: int | None = None,
                    pool_size: int = 8192, pool_refresh: int = 1000,
                    ode_steps: int = 50) -> FlowModel:
    """Fine-tune the flow on its own (x0, generated endpoint) pairs.

    The source is frozen: x0 is drawn from it but its parameters are never
    touched. Pairs are regenerated from the current flow every
    ``pool_refresh`` steps. Only the FM loss is trained.
    """
    if steps is None:
        steps = max(1, cfg.steps // 5)   # 20% of the original budget
    flow = flow.copy()
    opt = AdamState.for_params(flow.net.params(), lr=cfg.learning_rate)
    data_rng = rng.split(1)
    noise_rng = rng.split(2)
    time_rng = rng.split(3)
    pick_rng = rng.split(4)

    pool_x0 = pool_c = pool_x1 = None
    for s in range(steps):
        if s % pool_refresh == 0:
            _, pool_c = sample_dataset(pool_size, cfg.dataset, data_rng)
            endpoints, x0 = smp.generate_batch(flow, source, pool_c,
                                               ode_steps, noise_rng)
            pool_x0, pool_x1 = x0, endpoints
        idx = pick_rng.integers(0, pool_size, size=cfg.batch_size)
        x0b, x1b, cb = pool_x0[idx], pool_x1[idx], pool_c[idx]
        t = time_rng.uniform(cfg.batch_size)
        xt, delta = interpolate(x0b, x1b, t)
        if flow.condition_injected:
            v, tape = flow.net.forward(xt, t=t, c=cb)
        else:
            v, tape = flow.net.forward(xt, t=t)
        r = v - delta
        if not np.isfinite(r).all():
            raise TrainingDiverged(f"non-finite reflow residual at step {s + 1}")
        gy = 2.0 * r / cfg.batch_size
        grads, _, _, _ = flow.net.backward(tape, gy)
        adam_step(opt, flow.net.params(), grads)
        flow.net.mark_updated()
    return flow
