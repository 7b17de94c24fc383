"""Acceptance gate: one pass/fail line per criterion, fixed tolerances.

The learning criteria run the full pipeline end to end at a desk-scale
budget (small phantoms, short schedules, scaled learning rate); the
numerical criteria check against independent oracles.  These tests are the
slowest in the suite -- the training fixture alone takes on the order of an
hour on one CPU core.
"""

import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from slicereg import autodiff as ad
from slicereg import io_formats
from slicereg.forward_model import (
    PsfKernel,
    Slice,
    SliceStackSet,
    VolumeGrid,
    psf_reconstruct,
    sampling_matrix,
    system_matrices,
)
from slicereg.geometry import (
    AnchorPoints,
    PlaneExtent,
    RigidTransform,
    anchors_to_transform,
    euclidean_distance,
    geodesic_distance,
    random_rotation,
    random_transform,
    transform_to_anchors,
)
from slicereg.metrics import mean_ed, psnr, ssim
from slicereg.network import (
    ParamStore,
    SvortConfig,
    SvortModel,
    Svt,
    TrainSchedule,
    identity_ed,
    train,
    validation_ed,
)
from slicereg.recon import CgParams, SliceWeights, solve_weighted_volume, solve_weighted_volume_diff
from slicereg.synth import ArtifactSpec, MotionSpec, SampleSpecs, SamplingSpec, generate_sample

RESULTS = []


def report(criterion, ok, detail):
    line = f"{criterion} {'pass' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared desk-scale problem definitions --------------------------------

EXT = PlaneExtent(16, 4.0)

TRAIN_SPECS = SampleSpecs(
    sampling=SamplingSpec(n_stacks=3, slices_per_stack=(3, 4),
                          thickness_mm=(4.0, 4.0), in_plane_res_mm=4.0,
                          slice_size_px=16, orientation_cone_deg=15.0),
    motion=MotionSpec(rot_std_deg=5.0, trans_std_mm=2.0),
    artifacts=ArtifactSpec(noise_std=(0.0, 0.05), bias_amplitude=0.2,
                           bias_smoothness_mm=20.0, void_probability=0.15,
                           void_max_bands=2, contrast_gamma=(0.9, 1.15)),
    grid_shape=(16, 16, 16), grid_spacing_mm=4.0, phantom_seed=123,
)

TRAIN_STEPS = 300
TRAIN_LR = 1e-3  # scaled to compensate the reduced step budget
TRAIN_SEEDS = (0, 1, 2)


def desk_config(**kw):
    base = dict(iterations=3, feature_dim=44, heads=4, n_encoders=4,
                cnn_channels=(8, 16, 32), grid_shape=(16, 16, 16),
                grid_spacing_mm=4.0, cg_unroll=8, volume_loss_weight=1e3)
    base.update(kw)
    return SvortConfig(**base)


ABLATIONS = {
    "full": desk_config(),
    "k1": desk_config(iterations=1),
    "no_pe": desk_config(use_positional_embedding=False),
    "no_vol": desk_config(use_volume_estimation=False),
}


@pytest.fixture(scope="module")
def trained():
    """Train every ablation for every seed once; reused by A5/A6/A7."""
    out = {}
    for name, cfg in ABLATIONS.items():
        runs = []
        for seed in TRAIN_SEEDS:
            model = SvortModel(cfg, seed=seed)
            sched = TrainSchedule(steps=TRAIN_STEPS, lr0=TRAIN_LR, val_every=0,
                                  n_val_samples=10, seed=seed)
            log = train(model, TRAIN_SPECS, sched)
            runs.append((model, log))
        out[name] = runs
    return out


# -- A1: forward/adjoint --------------------------------------------------


def test_a1_adjoint():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(4, 10))
        ext = PlaneExtent(size, float(rng.uniform(1.0, 4.0)))
        grid = VolumeGrid.centered(np.zeros(tuple(rng.integers(5, 9, 3))),
                                   rng.uniform(2.0, 5.0, 3))
        psf = PsfKernel(float(rng.uniform(1.0, 3.0)), float(rng.uniform(2.0, 5.0)))
        t = random_transform(rng, trans_range_mm=10.0)
        mat = sampling_matrix(t, psf, ext, grid)
        x = rng.standard_normal(mat.shape[1])
        y = rng.standard_normal(mat.shape[0])
        lhs, rhs = float((mat @ x) @ y), float(x @ (mat.T @ y))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    ok = worst < 1e-5

    # dense-matrix equivalence on a 6^3 grid
    grid = VolumeGrid.centered(np.zeros((6, 6, 6)), [3.0] * 3)
    ext = PlaneExtent(5, 3.0)
    psf = PsfKernel.default(3.0, 4.0)
    t = random_transform(rng, trans_range_mm=5.0)
    mat = sampling_matrix(t, psf, ext, grid).toarray()
    adj_err = np.abs(mat.T - sampling_matrix(t, psf, ext, grid).T.toarray()).max()
    ok = ok and adj_err == 0.0
    report("A1", ok, f"dot-product max rel err {worst:.2e} (tol 1e-5), "
                     f"dense transpose err {adj_err:.1e}")


# -- A2: weighted CG solver ----------------------------------------------


def _orthogonal_stacks(rng, ext, grid, thickness):
    bases = [RigidTransform.identity(),
             RigidTransform(np.array([[0.0, 0, 1], [0, 1.0, 0], [-1.0, 0, 0]]),
                            np.zeros(3)),
             RigidTransform(np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]]),
                            np.zeros(3))]
    slices, transforms = [], []
    extent = grid.spacing_mm[0] * (grid.shape[0] - 1)
    offsets = np.linspace(-extent / 2 + thickness, extent / 2 - thickness, 4)
    for si, base in enumerate(bases):
        normal = base.rotation[:, 2]
        for k, off in enumerate(offsets):
            t = RigidTransform(base.rotation, off * normal)
            slices.append(Slice(rng.random((ext.size_px, ext.size_px)), ext,
                                thickness, si, k))
            transforms.append(t)
    return SliceStackSet(slices, transforms), transforms


def test_a2_solver():
    rng = np.random.default_rng(22)
    grid = VolumeGrid.centered(np.zeros((8, 8, 8)), [4.0] * 3)
    ext = PlaneExtent(8, 4.0)
    stacks, transforms = _orthogonal_stacks(rng, ext, grid, 4.0)
    psf = PsfKernel.default(4.0, 4.0)
    w = rng.uniform(0.2, 1.0, stacks.n)
    cg = CgParams(max_iters=3000, rel_tol=1e-12, tikhonov_eps=1e-6)
    vol, _ = solve_weighted_volume(stacks, transforms, SliceWeights(w), psf, grid, cg)

    mats = system_matrices(stacks, transforms, psf, grid)
    n_vox = int(np.prod(grid.shape))
    trace = sum(wi * (m.power(2)).sum() for m, wi in zip(mats, w)) / n_vox
    A = 1e-6 * trace * np.eye(n_vox)
    b = np.zeros(n_vox)
    for m, s, wi in zip(mats, stacks.slices, w):
        d = m.toarray()
        A += wi * d.T @ d
        b += wi * d.T @ s.pixels.ravel()
    x_dense = np.linalg.solve(A, b)
    rel = np.linalg.norm(vol.data.ravel() - x_dense) / np.linalg.norm(x_dense)
    ok = rel < 1e-4

    # zero-weight slices act exactly as if removed
    w0 = w.copy()
    w0[::3] = 0.0
    vol_a, _ = solve_weighted_volume(stacks, transforms, SliceWeights(w0), psf, grid, cg)
    keep = np.flatnonzero(w0)
    sub = SliceStackSet([stacks.slices[i] for i in keep])
    vol_b, _ = solve_weighted_volume(sub, [transforms[i] for i in keep],
                                     SliceWeights(w0[keep]), psf, grid, cg)
    removal = np.abs(vol_a.data - vol_b.data).max()
    ok = ok and removal < 1e-10
    report("A2", ok, f"dense-oracle rel err {rel:.2e} (tol 1e-4), "
                     f"zero-weight removal {removal:.1e} (tol 1e-10)")


# -- A3: differentiation --------------------------------------------------


def _fd(fn, arr, h=1e-6):
    g = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = fn()
        arr[i] = orig - h
        fm = fn()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def test_a3_differentiation():
    rng = np.random.default_rng(33)
    worst_prim = 0.0

    def check(build, *arrays):
        nonlocal worst_prim
        ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*ts)
        loss.backward()
        for t, a in zip(ts, arrays):
            fd = _fd(lambda: float(build(*[ad.Tensor(x) for x in arrays]).data), a)
            denom = max(np.abs(fd).max(), np.abs(t.grad).max(), 1e-8)
            worst_prim = max(worst_prim, np.abs(fd - t.grad).max() / denom)

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 2))
    check(lambda x, y: (x * y + x / (y.square() + 2.0)).sum(), a.copy(), b.copy())
    check(lambda x, w: ((x @ w).relu().sigmoid() * 3.0).sum(), a.copy(), m.copy())
    check(lambda x: x.softmax_rows().square().sum(), a.copy())
    check(lambda x: x.abs().mean(), a.copy())
    img = rng.standard_normal((1, 2, 6, 6))
    ker = rng.standard_normal((3, 2, 3, 3))
    check(lambda x, w: ad.conv2d(x, w, padding=1).square().sum(), img.copy(), ker.copy())
    ok = worst_prim < 1e-4

    # stacked-encoder path
    store = ParamStore()
    cfg = SvortConfig(iterations=1, feature_dim=22, heads=2, n_encoders=4,
                      cnn_channels=(3, 4, 4), grid_shape=(16, 16, 16))
    svt = Svt(store, rng, "s", cfg, 2)
    svt.head_w.data = rng.standard_normal(svt.head_w.shape) * 0.05
    y = rng.random((3, 1, 16, 16))
    ysim = rng.random((3, 1, 16, 16))
    anchors = rng.normal(scale=20.0, size=(3, 9))

    def enc_loss():
        out = svt(ad.Tensor(y), ad.Tensor(ysim), anchors, np.zeros(3), np.arange(3))
        return (out * out).sum()

    loss = enc_loss()
    loss.backward()
    worst_enc = 0.0
    for name in ["s.enc0.head0.wq", "s.enc3.ff2.w", "s.cnn.stage1.blk0.conv1.w"]:
        p = store.params[name]
        for j in rng.integers(0, p.data.size, 2):
            j = int(j)
            h = 1e-5
            orig = p.data.ravel()[j]
            p.data.ravel()[j] = orig + h
            fp = float(enc_loss().data)
            p.data.ravel()[j] = orig - h
            fm = float(enc_loss().data)
            p.data.ravel()[j] = orig
            fd = (fp - fm) / (2 * h)
            g = p.grad.ravel()[j]
            worst_enc = max(worst_enc, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
    ok = ok and worst_enc < 1e-3

    # gradient through the unrolled CG solve
    grid = VolumeGrid.centered(np.zeros((8, 8, 8)), [6.0] * 3)
    ext = PlaneExtent(8, 6.0)
    stacks, transforms = _orthogonal_stacks(rng, ext, grid, 6.0)
    psf = PsfKernel.default(6.0, 6.0)
    mats = system_matrices(stacks, transforms, psf, grid)
    ys = [s.pixels.ravel() for s in stacks.slices]
    w0 = rng.uniform(0.3, 0.9, stacks.n)

    def cg_loss(wv):
        w = ad.Tensor(wv, requires_grad=True)
        x = solve_weighted_volume_diff(mats, ys, w, grid, unroll_iters=6)
        return x.square().sum(), w

    loss, w = cg_loss(w0)
    loss.backward()
    worst_cg = 0.0
    for j in range(4):
        h = 1e-5
        wp, wm = w0.copy(), w0.copy()
        wp[j] += h
        wm[j] -= h
        fd = (float(cg_loss(wp)[0].data) - float(cg_loss(wm)[0].data)) / (2 * h)
        worst_cg = max(worst_cg, abs(fd - w.grad[j]) / max(abs(fd), abs(w.grad[j]), 1e-9))
    ok = ok and worst_cg < 1e-3
    report("A3", ok, f"primitives {worst_prim:.2e} (tol 1e-4), "
                     f"encoders {worst_enc:.2e}, CG-path {worst_cg:.2e} (tol 1e-3)")


# -- A4: geometry ---------------------------------------------------------


def test_a4_geometry():
    rng = np.random.default_rng(44)
    ext = PlaneExtent(32, 1.5)
    worst_rt = 0.0
    for _ in range(1000):
        t = random_transform(rng)
        t2 = anchors_to_transform(
            AnchorPoints.from_flat(transform_to_anchors(t, ext).as_flat()), ext)
        worst_rt = max(worst_rt, np.abs(t2.matrix() - t.matrix()).max())
    ok = worst_rt < 1e-7

    worst_gd = 0.0
    for _ in range(500):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        gd = geodesic_distance(r1, r2)
        # quaternion-angle oracle
        rel = r1.T @ r2
        w = 0.5 * np.sqrt(max(0.0, 1.0 + np.trace(rel)))
        oracle = 2.0 * np.arccos(np.clip(w, -1.0, 1.0))
        worst_gd = max(worst_gd, abs(gd - oracle))
    ok = ok and worst_gd < 1e-9

    # mean anchor displacement, recomputed literally
    t1, t2 = random_transform(rng), random_transform(rng)
    a1 = transform_to_anchors(t1, ext).as_array()
    a2 = transform_to_anchors(t2, ext).as_array()
    literal = sum(np.linalg.norm(a1[j] - a2[j]) for j in range(3)) / 3.0
    ed = euclidean_distance(transform_to_anchors(t1, ext), transform_to_anchors(t2, ext))
    ed_err = abs(ed - literal)
    ok = ok and ed_err < 1e-12
    report("A4", ok, f"round-trip {worst_rt:.2e} (tol 1e-7), "
                     f"GD oracle {worst_gd:.2e} (tol 1e-9), ED formula {ed_err:.1e}")


# -- A5: desk-scale learning ----------------------------------------------


def _final_ed(runs):
    return float(np.mean([log.val_ed[-1] for _, log in runs]))


def test_a5_learning(trained):
    ident = identity_ed(TRAIN_SPECS, EXT,
                        [int(s) for s in np.random.default_rng(77).integers(0, 2**31, 12)])
    ed = {name: _final_ed(runs) for name, runs in trained.items()}
    ratio = ed["full"] / ident
    ok = ratio <= 0.5
    ok = ok and ed["full"] <= ed["k1"]
    ok = ok and ed["full"] <= ed["no_pe"]
    ok = ok and ed["full"] <= ed["no_vol"]
    report("A5", ok,
           f"val ED {ed['full']:.2f} mm = {100 * ratio:.0f}% of identity {ident:.2f} mm "
           f"(tol 50%); ablations [K=1 {ed['k1']:.2f}, no-PE {ed['no_pe']:.2f}, "
           f"no-Vol {ed['no_vol']:.2f}] mm over {len(TRAIN_SEEDS)} seeds")


# -- A6: slice-weight ordering --------------------------------------------


def _corrupt_one(stacks, rng):
    i = int(rng.integers(0, stacks.n))
    s = stacks.slices[i]
    bad = Slice(rng.random(s.pixels.shape), s.ext, s.thickness_mm,
                s.stack_index, s.slice_index)
    slices = list(stacks.slices)
    slices[i] = bad
    return SliceStackSet(slices, stacks.transforms_gt), i


def _recon_psnr(stacks, w, grid, psf, target):
    vol, _ = solve_weighted_volume(stacks, stacks.transforms_gt, SliceWeights(w),
                                   psf, grid)
    return psnr(vol.data, target.data, peak=max(float(target.data.max()), 1e-9))


def _learned_weights(model, stacks, grid, psf):
    x_psf = psf_reconstruct(stacks, stacks.transforms_gt, psf, grid)
    mats = system_matrices(stacks, stacks.transforms_gt, psf, grid)
    sims = np.stack([(m @ x_psf.data.ravel()).reshape(EXT.size_px, EXT.size_px)
                     for m in mats])[:, None]
    y = np.stack([s.pixels for s in stacks.slices])[:, None]
    anchors = np.stack([transform_to_anchors(t, EXT).as_flat()
                        for t in stacks.transforms_gt])
    svt_x = model.svt_x[-1]
    logits = svt_x(ad.Tensor(y), ad.Tensor(sims), anchors,
                   [s.stack_index for s in stacks.slices],
                   [s.slice_index for s in stacks.slices])
    return 1.0 / (1.0 + np.exp(-logits.data.ravel()))


def _a6_case(seed, model=None):
    rng = np.random.default_rng(seed)
    clean = dataclasses.replace(TRAIN_SPECS, artifacts=ArtifactSpec.disabled())
    stacks, target = generate_sample(seed, clean)
    stacks, bad = _corrupt_one(stacks, rng)
    grid = VolumeGrid.centered(np.zeros(clean.grid_shape), [clean.grid_spacing_mm] * 3)
    psf = PsfKernel.default(EXT.res_mm, stacks.slices[0].thickness_mm)
    p_psf = psnr(psf_reconstruct(stacks, stacks.transforms_gt, psf, grid).data,
                 target.data, peak=max(float(target.data.max()), 1e-9))
    p_uniform = _recon_psnr(stacks, np.ones(stacks.n), grid, psf, target)
    oracle = np.ones(stacks.n)
    oracle[bad] = 0.0
    p_oracle = _recon_psnr(stacks, oracle, grid, psf, target)
    p_learned = None
    if model is not None:
        w = _learned_weights(model, stacks, grid, psf)
        p_learned = _recon_psnr(stacks, w, grid, psf, target)
    return p_psf, p_uniform, p_oracle, p_learned


def test_a6_weight_ordering(trained):
    model = trained["full"][0][0]
    cases = [_a6_case(seed, model) for seed in (101, 102, 103, 104, 105, 106)]
    p_psf, p_uni, p_orc, p_lrn = (float(np.mean([c[i] for c in cases]))
                                  for i in range(4))
    ok = p_orc > p_uni > p_psf and p_lrn > p_uni
    report("A6", ok, f"mean PSNR (dB): oracle {p_orc:.2f}, learned {p_lrn:.2f}, "
                     f"uniform {p_uni:.2f}, PSF {p_psf:.2f} "
                     f"(need oracle > uniform > PSF and learned > uniform)")


# -- A7: stack-count ordering ---------------------------------------------


def test_a7_stack_count(trained):
    eds = {}
    for n_stacks in (2, 3):
        specs = dataclasses.replace(
            TRAIN_SPECS,
            sampling=dataclasses.replace(TRAIN_SPECS.sampling, n_stacks=n_stacks))
        seeds = [int(s) for s in
                 np.random.default_rng(88).integers(0, 2**31, 20)]
        per_seed = []
        for model, _ in trained["full"]:
            per_seed.append(validation_ed(model, specs, EXT, seeds))
        eds[n_stacks] = float(np.mean(per_seed))
    ok = eds[3] <= eds[2]
    report("A7", ok, f"mean ED {eds[3]:.2f} mm (3 stacks) <= {eds[2]:.2f} mm "
                     f"(2 stacks), 20 samples x {len(TRAIN_SEEDS)} seeds")


# -- A8: metrics and network invariants -----------------------------------


def test_a8_metrics_and_invariants():
    rng = np.random.default_rng(55)
    a = rng.random((20, 20))
    b = rng.random((20, 20))
    mse = np.mean((a - b) ** 2)
    psnr_err = abs(psnr(a, b, peak=1.0) - 10.0 * np.log10(1.0 / mse))
    ok = psnr_err < 1e-9

    # literal per-window SSIM transcription
    sigma, size = 1.5, 11
    x = np.arange(size) - (size - 1) / 2.0
    g1 = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    half = size // 2
    ap = np.pad(a, half, mode="symmetric")
    bp = np.pad(b, half, mode="symmetric")
    vals = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            pa = ap[i:i + size, j:j + size]
            pb = bp[i:i + size, j:j + size]
            mua, mub = (win * pa).sum(), (win * pb).sum()
            va = (win * pa * pa).sum() - mua ** 2
            vb = (win * pb * pb).sum() - mub ** 2
            cov = (win * pa * pb).sum() - mua * mub
            vals[i, j] = ((2 * mua * mub + c1) * (2 * cov + c2) /
                          ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
    ssim_map_err = abs(ssim(a, b) - float(vals.mean()))
    ok = ok and ssim_map_err < 1e-9
    ok = ok and abs(ssim(a, a) - 1.0) < 1e-9

    # network invariants: permutation equivariance (no PE) + stochastic rows
    store = ParamStore()
    cfg = SvortConfig(iterations=1, feature_dim=22, heads=2, n_encoders=2,
                      cnn_channels=(3, 4, 4), grid_shape=(16, 16, 16),
                      use_positional_embedding=False)
    svt = Svt(store, rng, "s", cfg, 9)
    svt.head_w.data = rng.standard_normal(svt.head_w.shape) * 0.05
    y = rng.random((6, 1, 16, 16))
    ysim = rng.random((6, 1, 16, 16))
    anchors = rng.normal(size=(6, 9))
    idx = np.zeros(6)
    out = svt(ad.Tensor(y), ad.Tensor(ysim), anchors, idx, idx).data
    att = svt.last_attention
    row_err = np.abs(att.sum(axis=1) - 1.0).max()
    perm = rng.permutation(6)
    out_p = svt(ad.Tensor(y[perm]), ad.Tensor(ysim[perm]), anchors[perm], idx, idx).data
    perm_err = np.abs(out_p - out[perm]).max()
    ok = ok and row_err < 1e-10 and perm_err < 1e-6
    report("A8", ok, f"PSNR oracle {psnr_err:.1e}, SSIM oracle {ssim_map_err:.1e} "
                     f"(tol 1e-9); attention rows {row_err:.1e}, "
                     f"permutation equivariance {perm_err:.1e} (tol 1e-6)")


# -- A9: bitwise reproducibility ------------------------------------------

A9_YAML = """\
sample:
  sampling: {n_stacks: 2, slices_per_stack: [3, 4], thickness_mm: [3.0, 3.0], in_plane_res_mm: 4.0, slice_size_px: 16}
  motion: {rot_std_deg: 3.0, trans_std_mm: 1.0}
  grid_shape: [16, 16, 16]
  grid_spacing_mm: 4.0
model:
  iterations: 1
  feature_dim: 22
  heads: 2
  n_encoders: 2
  cnn_channels: [4, 8, 8]
  grid_shape: [16, 16, 16]
  grid_spacing_mm: 4.0
  cg_unroll: 3
schedule: {steps: 2, lr0: 0.0001, val_every: 0, n_val_samples: 1, seed: 1}
"""


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "slicereg.cli", *args],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _rerun_from_manifest(command, run_dir, redo_dir, *extra):
    """Re-invoke a command using only what the manifest recorded."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg_yaml = run_dir.parent / f"rerun_{command}.yaml"
    cfg_yaml.write_text(yaml.safe_dump(manifest["config"]))
    args = [command, "--config", str(cfg_yaml), "--out", str(redo_dir)]
    if manifest.get("seed") is not None:
        args += ["--seed", str(manifest["seed"])]
    _cli(*args, *extra)


def test_a9_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(A9_YAML)
    _cli("gen", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "gen1"))
    _rerun_from_manifest("gen", tmp_path / "gen1", tmp_path / "gen2")
    gen_ok = all(
        (tmp_path / "gen1" / f).read_bytes() == (tmp_path / "gen2" / f).read_bytes()
        for f in ["stacks/slices.bin", "stacks/stacks.json", "volume.bin",
                  "gt_transforms.txt"])

    _cli("train", "--config", str(cfg), "--out", str(tmp_path / "run1"))
    _rerun_from_manifest("train", tmp_path / "run1", tmp_path / "run2")
    train_ok = all(
        (tmp_path / "run1" / f).read_bytes() == (tmp_path / "run2" / f).read_bytes()
        for f in ["checkpoint/weights.bin", "checkpoint/manifest.json",
                  "train_log.csv", "validation.csv"])

    _cli("register", "--checkpoint", str(tmp_path / "run1/checkpoint"),
         "--stacks", str(tmp_path / "gen1/stacks"), "--out", str(tmp_path / "reg"))
    for d in ("ev1", "ev2"):
        _cli("eval", "--stacks", str(tmp_path / "gen1/stacks"),
             "--transforms", str(tmp_path / "reg/transforms_pred.txt"),
             "--volume", str(tmp_path / "gen1/volume.json"),
             "--out", str(tmp_path / d))
    eval_ok = all(
        (tmp_path / "ev1" / f).read_bytes() == (tmp_path / "ev2" / f).read_bytes()
        for f in ["per_slice.csv", "summary.csv", "distance_profile.csv"])

    ok = gen_ok and train_ok and eval_ok
    report("A9", ok, f"bitwise rerun: gen {gen_ok}, train {train_ok}, eval {eval_ok}")
