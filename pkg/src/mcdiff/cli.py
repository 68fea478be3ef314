"""Command-line entry point wiring all modules.

Exit codes: 0 success, 2 usage error, 1 IO failure, 3 numerical failure.
Configuration is a flat JSON object with dotted keys; --set key=value flags
override the file, and the effective config is echoed to the output
directory before anything runs.
"""

import hashlib
import json
import os
import sys
from dataclasses import replace

import click
import numpy as np

from . import data as dmod
from . import evaluation as emod
from . import synth as smod
from .errors import (
    BadConfig,
    BadMagic,
    BadSpec,
    EmptyObservedSet,
    EmptyProtocol,
    McdiffError,
    NoOverlap,
    NonFiniteLoss,
    PanelCountMismatch,
    StatsMismatch,
    TruncatedFile,
    UnknownChannel,
    VersionUnsupported,
)
from .network import NetworkConfig, load_checkpoint
from .sampling import SamplerConfig, impute_batch, load_sampler
from .schedule import build_schedule
from .training import TrainConfig, fixed_channel_mode, sample_mask, train

DEFAULTS = {
    "seed": 0,
    "schedule.kind": "cosine",
    "schedule.T": 400,
    "net.levels": 2,
    "net.base_width": 32,
    "net.width_mults": [1, 2],
    "net.unet_channel_attention": "se",
    "net.attention_placement": "bottleneck",
    "net.output_channel_attention": True,
    "net.injection": "se_gate",
    "net.se_reduction": 4,
    "net.attention_dim": 16,
    "net.temb_dim": 64,
    "net.mask_indicator": False,
    "train.p_observed": 0.5,
    "train.batch_size": 16,
    "train.steps": 2000,
    "train.lr": 2e-4,
    "train.grad_clip": 1.0,
    "train.loss_weighting": "all",
    "train.checkpoint_interval": 1000,
    "sample.steps": 50,
    "sample.sigma_mode": "stochastic",
    "sample.k": 4,
    "sample.overwrite_observed": False,
    "norm.clip_percentile": 0.99,
}

_USAGE_ERRORS = (UnknownChannel, EmptyObservedSet, BadSpec, BadConfig,
                 EmptyProtocol, NoOverlap, StatsMismatch, ValueError, KeyError)
_IO_ERRORS = (OSError, BadMagic, TruncatedFile, VersionUnsupported,
              PanelCountMismatch)


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        fn()
    except NonFiniteLoss as e:
        _fail(3, str(e))
    except _USAGE_ERRORS as e:
        _fail(2, str(e))
    except _IO_ERRORS as e:
        _fail(1, str(e))
    sys.exit(0)


def _merge_config(config_path, sets):
    cfg = dict(DEFAULTS)
    if config_path:
        with open(config_path) as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            if k not in cfg:
                raise ValueError(f"unknown config key {k!r}")
            cfg[k] = v
    for item in sets or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, _, raw = item.partition("=")
        if k not in cfg:
            raise ValueError(f"unknown config key {k!r}")
        try:
            cfg[k] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[k] = raw
    return cfg


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


def _net_config(cfg, c, h, w, conditional=True):
    return NetworkConfig(
        in_channels=c, height=h, width=w,
        levels=int(cfg["net.levels"]),
        base_width=int(cfg["net.base_width"]),
        width_mults=tuple(cfg["net.width_mults"]),
        unet_channel_attention=cfg["net.unet_channel_attention"],
        attention_placement=cfg["net.attention_placement"],
        output_channel_attention=bool(cfg["net.output_channel_attention"]),
        injection=cfg["net.injection"],
        se_reduction=int(cfg["net.se_reduction"]),
        attention_dim=int(cfg["net.attention_dim"]),
        temb_dim=int(cfg["net.temb_dim"]),
        conditional=conditional,
        mask_indicator=bool(cfg["net.mask_indicator"]),
    )


def _train_config(cfg):
    return TrainConfig(
        p_observed=float(cfg["train.p_observed"]),
        batch_size=int(cfg["train.batch_size"]),
        steps=int(cfg["train.steps"]),
        lr=float(cfg["train.lr"]),
        grad_clip=float(cfg["train.grad_clip"]),
        seed=int(cfg["seed"]),
        loss_weighting=cfg["train.loss_weighting"],
        checkpoint_interval=int(cfg["train.checkpoint_interval"]),
    )


def _sampler_config(cfg):
    return SamplerConfig(
        steps=int(cfg["sample.steps"]),
        sigma_mode=cfg["sample.sigma_mode"],
        k_samples=int(cfg["sample.k"]),
        overwrite_observed=bool(cfg["sample.overwrite_observed"]),
        seed=int(cfg["seed"]),
    )


@click.group()
@click.version_option(package_name="mcdiff")
def main():
    """Conditional diffusion for multi-channel imputation."""


# ----------------------------------------------------------------------
@main.command("gen")
@click.option("--preset", default=None, help="preset name (see synth.standard_presets)")
@click.option("--spec-file", default=None, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
@click.option("--clip-percentile", default=0.99, type=float)
def cmd_gen(preset, spec_file, out_dir, seed, clip_percentile):
    """Generate a synthetic dataset (containers + manifest + spec)."""

    def run():
        presets = smod.standard_presets()
        if spec_file:
            with open(spec_file) as f:
                spec = smod.SynthSpec.from_json(f.read())
            _write_spatial(spec, out_dir, clip_percentile)
            return
        if preset not in presets:
            raise ValueError(
                f"unknown preset {preset!r}; available: {sorted(presets)}")
        obj = presets[preset](seed)
        if preset == "spatial-pair":
            for tag, spec in obj.items():
                _write_spatial(spec, os.path.join(out_dir, tag),
                               clip_percentile, normalize=False)
            with open(os.path.join(out_dir, "manifest.json"), "w") as f:
                json.dump({"pair": ["A", "B"], "preset": preset, "seed": seed}, f,
                          indent=2)
        elif preset == "singlecell-basic":
            splits, observed = smod.split_singlecell(obj)
            stats = dmod.compute_normalization(splits["train"], clip_percentile)
            norm = {k: dmod.apply_normalization(v, stats) for k, v in splits.items()}
            dmod.save_dataset_dir(norm, out_dir, extra={
                "preset": preset, "seed": seed,
                "canonical_targets": [n for n, o in
                                      zip(splits["train"].panel.names, observed)
                                      if not o]})
            with open(os.path.join(out_dir, "spec.json"), "w") as f:
                f.write(obj.to_json())
        else:
            _write_spatial(obj, out_dir, clip_percentile)
        click.echo(f"wrote dataset to {out_dir}")

    _guard(run)


def _write_spatial(spec, out_dir, clip_percentile, normalize=True):
    splits = smod.split_spatial(spec)
    extra = {"seed": spec.seed}
    if normalize:
        stats = dmod.compute_normalization(splits["train"], clip_percentile)
        splits = {k: dmod.apply_normalization(v, stats) for k, v in splits.items()}
    dmod.save_dataset_dir(splits, out_dir, extra=extra)
    with open(os.path.join(out_dir, "spec.json"), "w") as f:
        f.write(spec.to_json())


# ----------------------------------------------------------------------
@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--set", "sets", multiple=True, help="override config: key=value")
@click.option("--mode", type=click.Choice(["random", "single-channel"]),
              default="random")
@click.option("--target", multiple=True, help="target channel(s) for single-channel mode")
@click.option("--unconditional", is_flag=True, default=False)
@click.option("--resume", "resume_from", default=None, type=click.Path(exists=True))
def cmd_train(data_dir, out_dir, config_path, sets, mode, target,
              unconditional, resume_from):
    """Train a denoiser on a dataset directory (uses the train split)."""

    def run():
        if not os.path.isdir(data_dir):
            raise ValueError(f"data dir {data_dir!r} does not exist")
        cfg = _merge_config(config_path, sets)
        _echo_config(cfg, out_dir)
        ds = dmod.load_dataset_dir(data_dir, "train")
        sched = build_schedule(cfg["schedule.kind"], int(cfg["schedule.T"]))
        tc = _train_config(cfg)
        if mode == "single-channel":
            if not target:
                raise ValueError("--mode single-channel requires --target")
            tc = fixed_channel_mode(target)(tc)
        n, c, h, w = ds.data.shape
        nc = _net_config(cfg, c, h, w, conditional=not unconditional)
        result = train(ds, tc, nc, sched, out_dir)
        click.echo(f"final checkpoint: {result.checkpoint_path}")

    _guard(run)


# ----------------------------------------------------------------------
def _parse_mask_spec(spec, panel, seed):
    """'CH1,CH4' lists the missing channels; '@p=x' draws a random mask."""
    if spec.startswith("@p="):
        p = float(spec[3:])
        rng = np.random.default_rng(seed)
        observed = sample_mask(panel.count, p, rng)
        if observed.all():
            observed[rng.integers(0, panel.count)] = False
        return dmod.ChannelMask(observed)
    missing = [s.strip() for s in spec.split(",") if s.strip()]
    if not missing:
        raise ValueError("empty mask spec")
    mask = dmod.ChannelMask.from_missing(panel, missing)
    mask.require_observed()
    return mask


@main.command("impute")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--missing", "mask_spec", required=True,
              help="'CH1,CH4' (missing channels) or '@p=0.5'")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--k", default=4, type=int)
@click.option("--steps", default=50, type=int)
@click.option("--sigma-mode", type=click.Choice(["stochastic", "deterministic"]),
              default="stochastic")
@click.option("--overwrite-observed", is_flag=True, default=False)
@click.option("--seed", default=0, type=int)
def cmd_impute(checkpoint, input_path, mask_spec, out_dir, k, steps,
               sigma_mode, overwrite_observed, seed):
    """Impute the missing channels of every sample in a container."""

    def run():
        ds = dmod.read_container(input_path)
        net, sched, ckpt = load_sampler(checkpoint)
        if ds.stats is not None and ckpt.stats is not None \
                and not ckpt.stats.same_as(ds.stats):
            raise StatsMismatch("input normalization differs from checkpoint's")
        mask = _parse_mask_spec(mask_spec, ds.panel, seed)
        cfg = SamplerConfig(steps=steps, sigma_mode=sigma_mode, k_samples=k,
                            overwrite_observed=overwrite_observed, seed=seed)
        preds = impute_batch(net, sched, ds.data, mask.observed, cfg)
        flat = preds.reshape(-1, *ds.data.shape[1:])
        os.makedirs(out_dir, exist_ok=True)
        out_path = os.path.join(out_dir, "imputed.mct")
        dmod.write_container(
            dmod.Dataset(flat, ds.panel, split="imputed", stats=ds.stats), out_path)
        with open(checkpoint, "rb") as f:
            ckpt_hash = hashlib.sha256(f.read()).hexdigest()
        with open(os.path.join(out_dir, "provenance.json"), "w") as f:
            json.dump({
                "checkpoint": os.path.abspath(checkpoint),
                "checkpoint_sha256": ckpt_hash,
                "input": os.path.abspath(input_path),
                "mask_observed": mask.observed.astype(int).tolist(),
                "missing": [n for n, o in zip(ds.panel.names, mask.observed) if not o],
                "seed": seed,
                "k": k,
                "steps": steps,
                "sigma_mode": sigma_mode,
                "overwrite_observed": overwrite_observed,
            }, f, indent=2)
        click.echo(f"wrote {flat.shape[0]} samples to {out_path}")

    _guard(run)


# ----------------------------------------------------------------------
@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--protocol", required=True,
              help="single-channel | random-mask | unconditional")
@click.option("--out", "out_prefix", required=True)
@click.option("--split", default="test")
@click.option("--p", default=0.5, type=float)
@click.option("--trials", default=8, type=int)
@click.option("--steps", default=50, type=int)
@click.option("--k", default=4, type=int)
@click.option("--max-samples", default=None, type=int)
@click.option("--seed", default=0, type=int)
def cmd_eval(checkpoint, data_dir, protocol, out_prefix, split, p, trials,
             steps, k, max_samples, seed):
    """Run an evaluation protocol and write CSV + JSON reports."""

    def run():
        ds = dmod.load_dataset_dir(data_dir, split)
        cfg = SamplerConfig(steps=steps, k_samples=k, seed=seed)
        if protocol == "single-channel":
            report = emod.eval_single_channel(checkpoint, ds, cfg,
                                              max_samples=max_samples)
        elif protocol == "random-mask":
            report = emod.eval_random_mask(checkpoint, ds, p, trials, cfg,
                                           max_samples=max_samples)
        elif protocol == "unconditional":
            report = emod.eval_unconditional(checkpoint, ds, cfg,
                                             max_samples=max_samples)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        os.makedirs(os.path.dirname(os.path.abspath(out_prefix)), exist_ok=True)
        path = report.save(out_prefix)
        click.echo(f"r_p={report.r_p:.4f} r_c={report.r_c:.4f} -> {path}")

    _guard(run)


# ----------------------------------------------------------------------
@main.command("baseline")
@click.option("--method", required=True,
              help="most-corr | most-corr-spatial | krr")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--target", required=True)
@click.option("--out", "out_path", default=None)
@click.option("--ridge-lambda", default=1e-3, type=float)
@click.option("--bandwidth", default=None, type=float)
@click.option("--max-pixels", default=4096, type=int)
@click.option("--seed", default=0, type=int)
def cmd_baseline(method, data_dir, target, out_path, ridge_lambda, bandwidth,
                 max_pixels, seed):
    """Analytic baselines for single-channel prediction."""

    def run():
        train_ds = dmod.load_dataset_dir(data_dir, "train")
        test_ds = dmod.load_dataset_dir(data_dir, "test")
        if method == "most-corr":
            r, info = emod.baseline_most_correlated(train_ds, test_ds, target)
        elif method == "most-corr-spatial":
            r, info = emod.baseline_most_correlated(train_ds, test_ds, target,
                                                    spatial=True)
        elif method == "krr":
            r, info = emod.baseline_krr(train_ds, test_ds, target,
                                        ridge_lambda=ridge_lambda,
                                        bandwidth=bandwidth,
                                        max_train_pixels=max_pixels, seed=seed)
        else:
            raise ValueError(f"unknown method {method!r}")
        payload = {"method": method, "target": target, "r": r, **info}
        if out_path:
            with open(out_path, "w") as f:
                json.dump(payload, f, indent=2)
        click.echo(json.dumps(payload))

    _guard(run)


# ----------------------------------------------------------------------
@main.command("ablate")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--grid", "grid_path", default=None, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--set", "sets", multiple=True)
@click.option("--seeds", default="0", help="comma-separated seeds")
@click.option("--max-samples", default=None, type=int)
def cmd_ablate(data_dir, out_dir, grid_path, config_path, sets, seeds,
               max_samples):
    """Train every grid row and emit a Table-3-shaped CSV of mean r."""

    def run():
        cfg = _merge_config(config_path, sets)
        _echo_config(cfg, out_dir)
        if grid_path:
            with open(grid_path) as f:
                grid = json.load(f)
        else:
            grid = list(emod.DEFAULT_GRID)
        train_ds = dmod.load_dataset_dir(data_dir, "train")
        test_ds = dmod.load_dataset_dir(data_dir, "test")
        sched = build_schedule(cfg["schedule.kind"], int(cfg["schedule.T"]))
        n, c, h, w = train_ds.data.shape
        rows = emod.run_ablation(
            train_ds, test_ds, grid, _train_config(cfg),
            _net_config(cfg, c, h, w), sched, _sampler_config(cfg), out_dir,
            seeds=tuple(int(s) for s in seeds.split(",")),
            max_eval_samples=max_samples)
        path = emod.write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
        click.echo(f"wrote {path}")

    _guard(run)


if __name__ == "__main__":
    main()
