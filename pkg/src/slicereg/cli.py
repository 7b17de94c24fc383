"""Command-line entry points.

Every subcommand writes delimited output (CSV) plus rendered figures into
its --out directory, together with a ``manifest.json`` recording the seed,
a config digest, and library versions, so runs can be reproduced bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
import time
import typing
from dataclasses import fields, is_dataclass
from pathlib import Path

import click
import numpy as np
import yaml

from . import io_formats, plotting
from .errors import ConfigError, SliceregError
from .forward_model import PsfKernel, VolumeGrid, system_matrices
from .geometry import PlaneExtent
from .metrics import distance_profile, eval_registration, mean_ed, psnr
from .network import SvortConfig, SvortModel, TrainSchedule, train
from .recon import SliceWeights, solve_weighted_volume
from .synth import (
    ArtifactSpec,
    MotionSpec,
    SampleSpecs,
    SamplingSpec,
    generate_sample,
    substream,
)


@dataclasses.dataclass
class RunConfig:
    sample: SampleSpecs
    model: SvortConfig
    schedule: TrainSchedule


def _build_dataclass(cls, mapping, path=""):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, f in known.items():
        here = f"{path}.{name}" if path else name
        ftype = hints[name]
        if name not in mapping:
            # nested sections may be omitted entirely; scalars keep their defaults
            if is_dataclass(ftype):
                kwargs[name] = _build_dataclass(ftype, {}, here)
            continue
        value = mapping[name]
        if is_dataclass(ftype):
            kwargs[name] = _build_dataclass(ftype, value, here)
        elif ftype is tuple or typing.get_origin(ftype) is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{here}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _apply_overrides(mapping: dict, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = mapping
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a mapping")
        node[parts[-1]] = value
    return mapping


def load_run_config(path=None, overrides=()) -> RunConfig:
    mapping = {}
    if path:
        try:
            mapping = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    _apply_overrides(mapping, overrides)
    return _build_dataclass(RunConfig, mapping)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fail(e: SliceregError):
    sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
    raise SystemExit(2)


@click.group()
def main():
    """Slice-to-volume registration toolkit."""


def _config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML run config.")(fn)
    fn = click.option("--set", "overrides", multiple=True,
                      help="Dotted override, e.g. model.iterations=1.")(fn)
    return fn


@main.command()
@_config_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def gen(config_path, overrides, seed, out_dir):
    """Generate one synthetic motion-corrupted sample."""
    t0 = time.time()
    try:
        cfg = load_run_config(config_path, overrides)
        stacks, vol = generate_sample(seed, cfg.sample)
        ext = PlaneExtent(cfg.sample.sampling.slice_size_px,
                          cfg.sample.sampling.in_plane_res_mm)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_formats.save_stacks(out / "stacks", stacks, ext)
        io_formats.save_volume(out / "volume.json", vol)
        io_formats.save_transforms(out / "gt_transforms.txt", stacks.transforms_gt, ext)
        io_formats.write_manifest(out, "gen", _to_plain(cfg), seed, time.time() - t0,
                                  {"n_slices": stacks.n})
    except SliceregError as e:
        _fail(e)
    click.echo(f"wrote {stacks.n} slices to {out_dir}")


@main.command("train")
@_config_options
@click.option("--seed", type=int, default=None, help="Overrides schedule.seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train_cmd(config_path, overrides, seed, out_dir):
    """Train the registration network on the synthetic stream."""
    t0 = time.time()
    try:
        cfg = load_run_config(config_path, overrides)
        sched = cfg.schedule if seed is None else dataclasses.replace(cfg.schedule, seed=seed)
        model = SvortModel(cfg.model, seed=sched.seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        def progress(step, loss, ed):
            click.echo(f"step {step}: loss {loss:.4g}  val ED {ed:.3f} mm")

        log = train(model, cfg.sample, sched, progress=progress)
        io_formats.save_checkpoint(out / "checkpoint", _to_plain(cfg.model), model.params)
        _write_csv(out / "train_log.csv", ["step", "loss", "lr"],
                   zip(log.steps, log.losses, log.lrs))
        _write_csv(out / "validation.csv", ["step", "ed_mm"],
                   zip(log.val_steps, log.val_ed))
        plotting.plot_training_curves(log.steps, log.losses, log.val_steps,
                                      log.val_ed, out / "training.png")
        io_formats.write_manifest(out, "train", _to_plain(cfg), sched.seed,
                                  time.time() - t0,
                                  {"identity_ed_mm": log.identity_ed,
                                   "final_val_ed_mm": log.val_ed[-1]})
    except SliceregError as e:
        _fail(e)
    click.echo(f"final val ED {log.val_ed[-1]:.3f} mm (identity {log.identity_ed:.3f} mm)")


def _load_model(checkpoint_dir):
    cfg_dict, arrays = io_formats.load_checkpoint(checkpoint_dir)
    cfg = _build_dataclass(SvortConfig, cfg_dict)
    model = SvortModel(cfg)
    model.load_params(arrays)
    return model


@main.command()
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(exists=True), required=True)
@click.option("--stacks", "stacks_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def register(checkpoint_dir, stacks_dir, out_dir):
    """Estimate slice transforms for a stack directory."""
    t0 = time.time()
    try:
        model = _load_model(checkpoint_dir)
        stacks, ext = io_formats.load_stacks(stacks_dir)
        state = model.forward(stacks, ext)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_formats.save_transforms(out / "transforms_pred.txt",
                                   state.final_transforms, ext)
        stack_idx = [s.stack_index for s in stacks.slices]
        rows = [[i, stack_idx[i], s.slice_index,
                 "" if state.weights[-1] is None else f"{state.weights[-1].data[i]:.6f}"]
                for i, s in enumerate(stacks.slices)]
        _write_csv(out / "slices.csv", ["slice", "stack_index", "slice_index", "weight"], rows)
        plotting.plot_attention(state.attention[-1], stack_idx, out / "attention.png")
        extras = {"n_slices": stacks.n}
        if stacks.transforms_gt is not None:
            extras["ed_mm"] = mean_ed(state.final_transforms, stacks.transforms_gt, ext)
        io_formats.write_manifest(out, "register",
                                  _to_plain(model.cfg), None, time.time() - t0, extras)
    except SliceregError as e:
        _fail(e)
    click.echo(f"registered {stacks.n} slices"
               + (f", ED {extras['ed_mm']:.3f} mm" if "ed_mm" in extras else ""))


@main.command()
@click.option("--stacks", "stacks_dir", type=click.Path(exists=True), required=True)
@click.option("--transforms", "transforms_path", type=click.Path(exists=True),
              default=None, help="Anchor table; defaults to stored ground truth.")
@click.option("--weights", "weights_path", type=click.Path(exists=True), default=None,
              help="CSV with a 'weight' column (e.g. register output).")
@click.option("--grid-size", type=int, default=32, show_default=True)
@click.option("--grid-spacing", type=float, default=2.0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def reconstruct(stacks_dir, transforms_path, weights_path, grid_size, grid_spacing, out_dir):
    """Solve the weighted volume from slices and transforms."""
    t0 = time.time()
    try:
        stacks, ext = io_formats.load_stacks(stacks_dir)
        if transforms_path:
            transforms = io_formats.load_transforms(transforms_path, ext)
        elif stacks.transforms_gt is not None:
            transforms = stacks.transforms_gt
        else:
            raise ConfigError("no --transforms given and the stacks carry no ground truth")
        if len(transforms) != stacks.n:
            raise ConfigError(f"{len(transforms)} transforms for {stacks.n} slices")
        w = np.ones(stacks.n)
        if weights_path:
            with open(weights_path) as f:
                rows = list(csv.DictReader(f))
            if len(rows) != stacks.n:
                raise ConfigError(f"{len(rows)} weights for {stacks.n} slices")
            w = np.array([float(r["weight"] or 1.0) for r in rows])
        grid = VolumeGrid.centered(np.zeros((grid_size,) * 3), [grid_spacing] * 3)
        psfs = [PsfKernel.default(ext.res_mm, s.thickness_mm) for s in stacks.slices]
        vol, diag = solve_weighted_volume(stacks, transforms, SliceWeights(w),
                                          psfs, grid)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io_formats.save_volume(out / "volume.json", vol)
        _write_csv(out / "cg.csv", ["iteration", "residual_norm"],
                   enumerate(diag.residual_norms))
        plotting.plot_volume_comparison({"reconstruction": vol.data}, out / "volume.png")
        io_formats.write_manifest(out, "reconstruct", {"grid_size": grid_size,
                                  "grid_spacing": grid_spacing}, None,
                                  time.time() - t0,
                                  {"cg_iterations": diag.iterations,
                                   "converged": diag.converged})
    except SliceregError as e:
        _fail(e)
    click.echo(f"CG finished in {diag.iterations} iterations "
               f"(converged={diag.converged})")


@main.command("eval")
@click.option("--stacks", "stacks_dir", type=click.Path(exists=True), required=True)
@click.option("--transforms", "transforms_path", type=click.Path(exists=True), required=True)
@click.option("--volume", "volume_path", type=click.Path(), required=True,
              help="Ground-truth volume sidecar (.json).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def eval_cmd(stacks_dir, transforms_path, volume_path, out_dir):
    """Score predicted transforms against stored ground truth."""
    t0 = time.time()
    try:
        stacks, ext = io_formats.load_stacks(stacks_dir)
        if stacks.transforms_gt is None:
            raise ConfigError("stacks carry no ground-truth transforms")
        predicted = io_formats.load_transforms(transforms_path, ext)
        vol = io_formats.load_volume(volume_path)
        report = eval_registration(predicted, stacks.transforms_gt, vol,
                                   stacks.slices, ext)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "per_slice.csv",
                   ["slice", "ed_mm", "gd_rad", "psnr_db", "ssim"],
                   [[i, report.ed_mm[i], report.gd_rad[i],
                     report.slice_psnr[i], report.slice_ssim[i]]
                    for i in range(stacks.n)])
        summary = report.summary()
        flat = []
        for k, v in summary.items():
            if isinstance(v, dict):
                flat.extend([f"{k}_{kk}", vv] for kk, vv in v.items())
            else:
                flat.append([k, v])
        _write_csv(out / "summary.csv", ["metric", "value"], flat)
        profile = distance_profile(predicted, stacks.transforms_gt, ext)
        _write_csv(out / "distance_profile.csv",
                   ["bin_center_mm", "n", "median_ed_mm", "p25_ed_mm", "p75_ed_mm"],
                   [[r["bin_center_mm"], r["n"], r["median_ed_mm"], r["p25_ed_mm"], r["p75_ed_mm"]]
                    for r in profile])
        plotting.plot_distance_profile(profile, out / "distance_profile.png")
        io_formats.write_manifest(out, "eval", {}, None, time.time() - t0,
                                  {"summary": summary})
    except SliceregError as e:
        _fail(e)
    click.echo(f"mean ED {summary['ed_mm']['mean']:.3f} mm, "
               f"mean GD {summary['gd_rad']['mean']:.4f} rad")


def _gradcheck_rows(seed):
    from . import autodiff as ad
    from .geometry import random_transform
    from .recon import solve_weighted_volume_diff

    rng = np.random.default_rng(seed)
    rows = []

    # forward/adjoint consistency of the slice sampler
    ext = PlaneExtent(12, 3.0)
    grid = VolumeGrid.centered(np.zeros((10, 10, 10)), [4.0] * 3)
    worst = 0.0
    for _ in range(5):
        t = random_transform(rng, trans_range_mm=10.0)
        mat = system_matrices(_single_stack(rng, ext), [t],
                              PsfKernel.default(ext.res_mm, 4.0), grid)[0]
        x = rng.standard_normal(mat.shape[1])
        y = rng.standard_normal(mat.shape[0])
        lhs, rhs = float((mat @ x) @ y), float(x @ (mat.T @ y))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    rows.append(("sampler adjoint", worst, 1e-10))

    # gradient of the weighted CG solve w.r.t. slice weights
    stacks, vol = generate_sample(seed, _gradcheck_specs())
    psfs = [PsfKernel.default(4.0, s.thickness_mm) for s in stacks.slices]
    g = VolumeGrid.centered(np.zeros((10, 10, 10)), [6.4] * 3)
    mats = system_matrices(stacks, stacks.transforms_gt, psfs, g)
    ys = [s.pixels.ravel() for s in stacks.slices]
    w0 = rng.uniform(0.3, 0.9, stacks.n)

    def loss_of(wv):
        w = ad.Tensor(wv, requires_grad=True)
        x = solve_weighted_volume_diff(mats, ys, w, g, unroll_iters=6)
        return x.square().sum(), w

    loss, w = loss_of(w0)
    loss.backward()
    worst = 0.0
    for j in range(min(3, stacks.n)):
        h = 1e-5
        wp, wm = w0.copy(), w0.copy()
        wp[j] += h
        wm[j] -= h
        fd = (float(loss_of(wp)[0].data) - float(loss_of(wm)[0].data)) / (2 * h)
        denom = max(abs(fd), abs(w.grad[j]), 1e-9)
        worst = max(worst, abs(fd - w.grad[j]) / denom)
    rows.append(("CG weight gradient", worst, 1e-3))
    return rows


def _single_stack(rng, ext):
    from .forward_model import Slice, SliceStackSet
    return SliceStackSet([Slice(rng.random((ext.size_px, ext.size_px)), ext, 4.0)])


def _gradcheck_specs():
    return SampleSpecs(
        sampling=SamplingSpec(n_stacks=2, slices_per_stack=(3, 4),
                              thickness_mm=(3.0, 3.0), in_plane_res_mm=4.0,
                              slice_size_px=16),
        motion=MotionSpec(rot_std_deg=3.0, trans_std_mm=1.0),
        artifacts=ArtifactSpec.disabled(),
        grid_shape=(16, 16, 16), grid_spacing_mm=4.0,
    )


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(seed):
    """Numerically verify the differentiable pipeline; exits nonzero on failure."""
    try:
        rows = _gradcheck_rows(seed)
    except SliceregError as e:
        _fail(e)
    ok = True
    for name, err, tol in rows:
        status = "pass" if err < tol else "FAIL"
        ok = ok and err < tol
        click.echo(f"{status}  {name}: max rel err {err:.3e} (tol {tol:g})")
    if not ok:
        raise SystemExit(1)


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--stack-counts", default="1,2,3,4", show_default=True)
@click.option("--grid-size", type=int, default=24, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def study(seed, stack_counts, grid_size, out_dir):
    """Reconstruction quality versus number of stacks, at true transforms."""
    t0 = time.time()
    try:
        counts = [int(c) for c in stack_counts.split(",")]
        base = _build_dataclass(SampleSpecs, {})
        spacing = base.grid_spacing_mm * base.grid_shape[0] / grid_size
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows, psnrs = [], []
        vols = {}
        target = None
        for c in counts:
            specs = dataclasses.replace(
                base,
                sampling=dataclasses.replace(base.sampling, n_stacks=c,
                                             slice_size_px=grid_size,
                                             in_plane_res_mm=spacing),
                grid_shape=(grid_size,) * 3, grid_spacing_mm=spacing,
                phantom_seed=seed,
            )
            stacks, vol = generate_sample(seed, specs)
            target = vol
            grid = VolumeGrid.centered(np.zeros((grid_size,) * 3), [spacing] * 3)
            psfs = [PsfKernel.default(specs.sampling.in_plane_res_mm, s.thickness_mm)
                    for s in stacks.slices]
            recon, diag = solve_weighted_volume(stacks, stacks.transforms_gt,
                                                SliceWeights.ones(stacks.n), psfs, grid)
            p = psnr(recon.data, vol.data, peak=max(vol.data.max(), 1e-9))
            rows.append([c, stacks.n, p, diag.iterations])
            psnrs.append(p)
            vols[f"{c} stacks"] = recon.data
        vols["reference"] = target.data
        _write_csv(out / "study.csv", ["n_stacks", "n_slices", "psnr_db", "cg_iterations"], rows)
        plotting.plot_metric_vs_count(counts, psnrs, "volume PSNR (dB)",
                                      out / "psnr_vs_stacks.png")
        plotting.plot_volume_comparison(vols, out / "volumes.png")
        io_formats.write_manifest(out, "study", {"stack_counts": counts,
                                  "grid_size": grid_size}, seed, time.time() - t0)
    except SliceregError as e:
        _fail(e)
    click.echo("  ".join(f"{c} stacks: {p:.2f} dB" for c, p in zip(counts, psnrs)))


if __name__ == "__main__":
    main()
