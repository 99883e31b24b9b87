"""Preset orchestration: train, post-run analyses, artifact emission."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import metrics as met
from . import plotting
from . import sampler as smp
from .datasets import sample_dataset
from .flow import TrainConfig, reflow_finetune, train_run
from .presets import Preset, build_preset
from .rng import SplitRng

DEFAULT_SWEEP_STEPS = (2, 3, 5, 10, 50)
GRADVAR_PROBE_SIZE = 20000


def run_config(cfg: TrainConfig, out_dir) -> Path:
    """Train under cfg and write the full run directory."""
    result = train_run(cfg)
    run_dir = art.write_run_dir(out_dir, result)
    if result.source.net is not None:
        c_grid = np.quantile(result.eval_c, np.linspace(0.0, 1.0, 64))
        from .source import source_grid_csv
        source_grid_csv(run_dir / "source_grid.csv", result.source, c_grid)
    plotting.render_run_plots(run_dir)
    return run_dir


def run_preset(preset: Preset | str, seed: int = 0, out_dir=None,
               dataset: str = "eight_gaussians") -> Path:
    if isinstance(preset, str):
        preset = build_preset(preset, dataset=dataset, seed=seed)
    else:
        preset.config.seed = seed
    run_dir = run_config(preset.config, out_dir)
    for analysis in preset.analyses:
        if analysis == "sweep":
            sweep_steps(run_dir, DEFAULT_SWEEP_STEPS)
        elif analysis == "gradvar":
            gradvar_probe(run_dir)
        elif analysis == "reflow":
            reflow_run(run_dir)
    return run_dir


def _load_run(run_dir, checkpoint="final.bin"):
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / checkpoint
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    cfg = art.load_config(run_dir)
    flow, source = art.load_checkpoint(ckpt)
    return cfg, flow, source


def _eval_pool(cfg):
    """Held-out targets/conditions, identical to the training-time eval set."""
    eval_root = SplitRng(cfg.seed).split(4)
    return sample_dataset(cfg.eval_size, cfg.dataset, eval_root.split(0))


def sweep_steps(run_dir, step_counts, checkpoint="final.bin",
                out_name="steps_vs_distance.csv") -> Path:
    """Distances to held-out targets as a function of Euler step count."""
    cfg, flow, source = _load_run(run_dir, checkpoint)
    eval_x1, eval_c = _eval_pool(cfg)
    sweep_rng = SplitRng(cfg.seed).split(0x5EEB)
    out = Path(run_dir) / out_name
    with open(out, "w", newline="") as fh:
        fh.write("steps,sliced_w2,energy_distance\n")
        for steps in step_counts:
            endpoints, _ = smp.generate_batch(flow, source, eval_c,
                                              int(steps), sweep_rng.split(steps))
            sw = met.sliced_wasserstein(endpoints, eval_x1,
                                        rng=sweep_rng.split(10000 + steps))
            ed = met.energy_distance(endpoints, eval_x1)
            fh.write(f"{int(steps)},{sw!r},{ed!r}\n")
    return out


def gradvar_probe(run_dir, checkpoint="final.bin", t_bins: int = 10,
                  probe_size: int = GRADVAR_PROBE_SIZE,
                  out_name="gradvar.csv") -> Path:
    """Per-sample gradient-variance profile of a stored checkpoint."""
    cfg, flow, source = _load_run(run_dir, checkpoint)
    probe_rng = SplitRng(cfg.seed).split(0x6AD)
    x1, c = sample_dataset(probe_size, cfg.dataset, probe_rng.split(0))
    profile = met.gradient_variance_probe(flow, source, x1, c,
                                          probe_rng.split(1), t_bins=t_bins)
    out = Path(run_dir) / out_name
    profile.to_csv(out)
    return out


def reflow_run(run_dir, checkpoint="final.bin") -> Path:
    """Reflow fine-tune; writes checkpoints/reflowed.bin and a before/after
    few-step sweep."""
    cfg, flow, source = _load_run(run_dir, checkpoint)
    rng = SplitRng(cfg.seed).split(0xEF10)
    tuned = reflow_finetune(flow, source, cfg, rng)
    out = Path(run_dir) / "checkpoints" / "reflowed.bin"
    art.save_checkpoint(out, tuned, source)
    sweep_steps(run_dir, DEFAULT_SWEEP_STEPS, checkpoint="final.bin",
                out_name="steps_vs_distance.csv")
    sweep_steps(run_dir, DEFAULT_SWEEP_STEPS, checkpoint="reflowed.bin",
                out_name="steps_vs_distance_reflow.csv")
    return out
