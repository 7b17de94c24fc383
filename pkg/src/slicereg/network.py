"""The iterative registration network: slice feature extraction, sinusoidal
positional embeddings, transformer encoders, residual anchor regression,
slice-weight prediction, the K-iteration alternating loop, and training.

All math runs on the autodiff tape; the per-iteration transforms feeding the
slice sampler are detached, and supervision reaches the parameters through
the anchor L2 loss (pre-projection anchors) and the volume L1 loss (via the
differentiable CG weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteLoss, ShapeMismatch
from .forward_model import (
    PsfKernel,
    SliceStackSet,
    VolumeGrid,
    psf_reconstruct,
    sampling_matrix,
    system_matrices,
)
from .geometry import AnchorPoints, PlaneExtent, RigidTransform, anchors_to_transform, transform_to_anchors
from .metrics import mean_ed
from .recon import solve_weighted_volume_diff
from .synth import SampleSpecs, generate_sample, substream

N_EMBED_SCALARS = 11  # 9 anchor coordinates + stack index + slice index


@dataclass
class SvortConfig:
    iterations: int = 3               # K
    volume_loss_weight: float = 1e3   # lambda
    feature_dim: int = 128            # d
    heads: int = 4                    # h
    n_encoders: int = 4
    cnn_channels: tuple = (8, 16, 32)
    ff_mult: int = 2
    grid_shape: tuple = (32, 32, 32)
    grid_spacing_mm: float = 2.0
    cg_unroll: int = 10
    use_positional_embedding: bool = True
    use_volume_estimation: bool = True
    share_iteration_params: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.volume_loss_weight < 0:
            raise ValueError("bad config: K >= 1 and lambda >= 0 required")
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")


@dataclass
class SvortState:
    """Per-iteration estimates recorded by one forward pass."""

    anchors: list = field(default_factory=list)     # Tensor (n, 9) per iter
    transforms: list = field(default_factory=list)  # list of RigidTransform per iter
    volumes: list = field(default_factory=list)     # Tensor (n_vox,) per iter
    weights: list = field(default_factory=list)     # Tensor (n,) or None per iter
    attention: list = field(default_factory=list)   # head-averaged (n, n) per iter

    @property
    def final_transforms(self):
        return self.transforms[-1]


# -- parameter initialization ---------------------------------------------

def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _xavier(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParamStore:
    """Flat name -> Tensor registry shared by all submodules."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}

    def add(self, name, value):
        t = ad.Tensor(value, requires_grad=True)
        self.params[name] = t
        return t


# -- building blocks ------------------------------------------------------

class ResidualCnn:
    """Reduced residual feature extractor: 3 stages x 2 blocks, global pool,
    linear projection to the transformer width."""

    def __init__(self, store: ParamStore, rng, prefix, in_ch, channels, d):
        self.prefix = prefix
        self.channels = channels
        p = store.add
        c_prev = in_ch
        self.names = []
        for s, c in enumerate(channels):
            stride = 1 if s == 0 else 2
            p(f"{prefix}.stage{s}.down.w", _he(rng, (c, c_prev, 3, 3), c_prev * 9))
            p(f"{prefix}.stage{s}.down.b", np.zeros(c))
            for blk in range(2):
                p(f"{prefix}.stage{s}.blk{blk}.conv1.w", _he(rng, (c, c, 3, 3), c * 9))
                p(f"{prefix}.stage{s}.blk{blk}.conv1.b", np.zeros(c))
                p(f"{prefix}.stage{s}.blk{blk}.conv2.w", _he(rng, (c, c, 3, 3), c * 9))
                p(f"{prefix}.stage{s}.blk{blk}.conv2.b", np.zeros(c))
            self.names.append((s, stride))
            c_prev = c
        p(f"{prefix}.proj.w", _xavier(rng, (channels[-1], d)))
        p(f"{prefix}.proj.b", np.zeros(d))
        self.store = store

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        g = self.store.params
        pre = self.prefix
        for s, stride in self.names:
            x = ad.conv2d(x, g[f"{pre}.stage{s}.down.w"], g[f"{pre}.stage{s}.down.b"],
                          stride=stride, padding=1).relu()
            for blk in range(2):
                h = ad.conv2d(x, g[f"{pre}.stage{s}.blk{blk}.conv1.w"],
                              g[f"{pre}.stage{s}.blk{blk}.conv1.b"], padding=1).relu()
                h = ad.conv2d(h, g[f"{pre}.stage{s}.blk{blk}.conv2.w"],
                              g[f"{pre}.stage{s}.blk{blk}.conv2.b"], padding=1)
                x = (x + h).relu()
        feats = ad.global_avg_pool(x)
        return feats @ g[f"{pre}.proj.w"] + g[f"{pre}.proj.b"]


def positional_embedding(anchors9: np.ndarray, stack_idx, slice_idx, d: int) -> np.ndarray:
    """Sinusoidal code of 11 per-slice scalars, channels split evenly.

    Each scalar p fills its sub-band with interleaved
    sin(p / 10000^(2i/d_sub)), cos(p / 10000^(2i/d_sub)); leftover channels
    stay zero.
    """
    anchors9 = np.asarray(anchors9, dtype=float)
    n = anchors9.shape[0]
    scalars = np.concatenate([
        anchors9,
        np.asarray(stack_idx, dtype=float).reshape(n, 1),
        np.asarray(slice_idx, dtype=float).reshape(n, 1),
    ], axis=1)
    d_sub = (d // N_EMBED_SCALARS) // 2 * 2
    out = np.zeros((n, d))
    if d_sub == 0:
        raise ShapeMismatch(f"feature dim {d} too small for {N_EMBED_SCALARS} scalars")
    half = d_sub // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / d_sub))
    for k in range(N_EMBED_SCALARS):
        p = scalars[:, k:k + 1]
        band = p * freqs  # (n, half)
        base = k * d_sub
        out[:, base:base + d_sub:2] = np.sin(band)
        out[:, base + 1:base + d_sub:2] = np.cos(band)
    return out


class TransformerEncoder:
    """Pre-norm encoder: attention + feed-forward, each behind layer norm
    with a residual connection."""

    def __init__(self, store: ParamStore, rng, prefix, d, h, ff_mult):
        self.prefix, self.d, self.h = prefix, d, h
        dh = d // h
        p = store.add
        for j in range(h):
            p(f"{prefix}.head{j}.wq", _xavier(rng, (d, dh)))
            p(f"{prefix}.head{j}.wk", _xavier(rng, (d, dh)))
            p(f"{prefix}.head{j}.wv", _xavier(rng, (d, dh)))
        p(f"{prefix}.wo", _xavier(rng, (d, d)))
        p(f"{prefix}.ln1.g", np.ones(d))
        p(f"{prefix}.ln1.b", np.zeros(d))
        p(f"{prefix}.ln2.g", np.ones(d))
        p(f"{prefix}.ln2.b", np.zeros(d))
        ff = ff_mult * d
        p(f"{prefix}.ff1.w", _xavier(rng, (d, ff)))
        p(f"{prefix}.ff1.b", np.zeros(ff))
        p(f"{prefix}.ff2.w", _xavier(rng, (ff, d)))
        p(f"{prefix}.ff2.b", np.zeros(d))
        self.store = store
        self.last_attention = None  # head-averaged numpy matrix

    def attend(self, x: ad.Tensor) -> ad.Tensor:
        g = self.store.params
        pre = self.prefix
        heads = []
        att_acc = None
        for j in range(self.h):
            q = x @ g[f"{pre}.head{j}.wq"]
            k = x @ g[f"{pre}.head{j}.wk"]
            v = x @ g[f"{pre}.head{j}.wv"]
            # scale divisor is sqrt(d) over the full width, not the head width
            logits = (q @ k.T) / np.sqrt(self.d)
            att = logits.softmax_rows()
            att_acc = att.data.copy() if att_acc is None else att_acc + att.data
            heads.append(att @ v)
        self.last_attention = att_acc / self.h
        return ad.concat(heads, axis=1) @ g[f"{pre}.wo"]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        g = self.store.params
        pre = self.prefix
        x = x + self.attend(ad.layer_norm(x, g[f"{pre}.ln1.g"], g[f"{pre}.ln1.b"]))
        h = ad.layer_norm(x, g[f"{pre}.ln2.g"], g[f"{pre}.ln2.b"])
        h = (h @ g[f"{pre}.ff1.w"] + g[f"{pre}.ff1.b"]).relu()
        h = h @ g[f"{pre}.ff2.w"] + g[f"{pre}.ff2.b"]
        return x + h


class Svt:
    """Slice-volume fusion submodule: CNN features of (acquired, simulated)
    slice pairs + positional embeddings -> encoder stack -> linear head."""

    def __init__(self, store: ParamStore, rng, prefix, cfg: SvortConfig, out_dim: int):
        self.cfg = cfg
        self.prefix = prefix
        self.cnn = ResidualCnn(store, rng, f"{prefix}.cnn", 2, cfg.cnn_channels, cfg.feature_dim)
        self.encoders = [TransformerEncoder(store, rng, f"{prefix}.enc{i}",
                                            cfg.feature_dim, cfg.heads, cfg.ff_mult)
                         for i in range(cfg.n_encoders)]
        # zero head: the first iteration starts from the previous estimate
        self.head_w = store.add(f"{prefix}.head.w", np.zeros((cfg.feature_dim, out_dim)))
        self.head_b = store.add(f"{prefix}.head.b", np.zeros(out_dim))

    def slice_features(self, y: ad.Tensor, y_sim: ad.Tensor) -> ad.Tensor:
        if y.shape != y_sim.shape:
            raise ShapeMismatch(f"slice stacks {y.shape} vs simulations {y_sim.shape}")
        x = ad.concat([y, y_sim], axis=1)  # channel axis
        return self.cnn(x)

    def __call__(self, y: ad.Tensor, y_sim: ad.Tensor, anchors9: np.ndarray,
                 stack_idx, slice_idx) -> ad.Tensor:
        x = self.slice_features(y, y_sim)
        if self.cfg.use_positional_embedding:
            x = x + ad.Tensor(positional_embedding(anchors9, stack_idx, slice_idx,
                                                   self.cfg.feature_dim))
        for enc in self.encoders:
            x = enc(x)
        return x @ self.head_w + self.head_b

    @property
    def last_attention(self):
        return self.encoders[-1].last_attention


class SvortModel:
    """K-iteration alternating estimator of slice transforms and the volume."""

    def __init__(self, cfg: SvortConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = substream(seed, "init")
        n_sets = 1 if cfg.share_iteration_params else cfg.iterations
        self.svt_t = [Svt(self.store, rng, f"svt_t.k{i}", cfg, 9) for i in range(n_sets)]
        self.svt_x = [Svt(self.store, rng, f"svt_x.k{i}", cfg, 1) for i in range(n_sets)]
        self._identity_mats: dict = {}  # the first iteration always samples at identity

    @property
    def params(self):
        return self.store.params

    def load_params(self, arrays: dict):
        """Install checkpointed arrays; names and shapes must match exactly."""
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeMismatch(f"checkpoint mismatch: missing={sorted(missing)[:3]} "
                                f"extra={sorted(extra)[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=float)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} != {t.data.shape}")
            t.data = arr

    def _svt_for(self, bank, k):
        return bank[0] if self.cfg.share_iteration_params else bank[k]

    def _cached_identity_matrix(self, thickness_mm, ext, grid):
        key = (thickness_mm, ext.size_px, ext.res_mm,
               grid.shape, tuple(grid.spacing_mm))
        if key not in self._identity_mats:
            self._identity_mats[key] = sampling_matrix(
                RigidTransform.identity(), PsfKernel.default(ext.res_mm, thickness_mm),
                ext, grid)
        return self._identity_mats[key]

    def forward(self, stacks: SliceStackSet, ext: PlaneExtent) -> SvortState:
        cfg = self.cfg
        n = stacks.n
        grid = VolumeGrid.centered(np.zeros(cfg.grid_shape), [cfg.grid_spacing_mm] * 3)
        stack_idx = [s.stack_index for s in stacks.slices]
        slice_idx = [s.slice_index for s in stacks.slices]
        psfs = [PsfKernel.default(ext.res_mm, s.thickness_mm) for s in stacks.slices]
        y_np = np.stack([s.pixels for s in stacks.slices])[:, None]  # (n,1,H,W)
        y = ad.Tensor(y_np)
        ys_flat = [s.pixels.ravel() for s in stacks.slices]

        transforms = [RigidTransform.identity() for _ in range(n)]
        x_vol = ad.Tensor(np.zeros(int(np.prod(cfg.grid_shape))))
        state = SvortState()

        for k in range(cfg.iterations):
            prev_anchors = np.stack([transform_to_anchors(t, ext).as_flat()
                                     for t in transforms])
            if k == 0:
                mats = [self._cached_identity_matrix(s.thickness_mm, ext, grid)
                        for s in stacks.slices]
            else:
                mats = system_matrices(stacks, transforms, psfs, grid)
            sims = [ad.sparse_matmul(m, x_vol).reshape(1, ext.size_px, ext.size_px)
                    for m in mats]
            y_sim = ad.stack(sims)  # (n,1,H,W)

            svt_t = self._svt_for(self.svt_t, k)
            delta = svt_t(y, y_sim, prev_anchors, stack_idx, slice_idx)  # (n, 9)
            anchors_pred = ad.Tensor(prev_anchors) + delta
            transforms = [anchors_to_transform(AnchorPoints.from_flat(row), ext)
                          for row in anchors_pred.data]

            x_psf = psf_reconstruct(stacks, transforms, psfs, grid)
            mats_k = system_matrices(stacks, transforms, psfs, grid)
            if cfg.use_volume_estimation:
                sim_psf = np.stack([(m @ x_psf.data.ravel()).reshape(ext.size_px, ext.size_px)
                                    for m in mats_k])[:, None]
                svt_x = self._svt_for(self.svt_x, k)
                cur_anchors = np.stack([transform_to_anchors(t, ext).as_flat()
                                        for t in transforms])
                logits = svt_x(y, ad.Tensor(sim_psf), cur_anchors, stack_idx, slice_idx)
                w = logits.reshape(n).sigmoid()
                x_vol = solve_weighted_volume_diff(mats_k, ys_flat, w, grid,
                                                   unroll_iters=cfg.cg_unroll)
            else:
                w = None
                x_vol = ad.Tensor(x_psf.data.ravel())

            state.anchors.append(anchors_pred)
            state.transforms.append(transforms)
            state.volumes.append(x_vol)
            state.weights.append(w)
            state.attention.append(svt_t.last_attention)
        return state


# -- losses ---------------------------------------------------------------

def anchor_loss(pred_anchors: ad.Tensor, target_anchors: np.ndarray) -> ad.Tensor:
    """Summed squared anchor-point error over all slices."""
    target = np.asarray(target_anchors, dtype=float)
    if pred_anchors.shape != target.shape:
        raise ShapeMismatch(f"anchors {pred_anchors.shape} vs {target.shape}")
    return (pred_anchors - ad.Tensor(target)).square().sum()


def volume_loss(pred_volume: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    target = np.asarray(target, dtype=float).ravel()
    if pred_volume.shape != target.shape:
        raise ShapeMismatch(f"volumes {pred_volume.shape} vs {target.shape}")
    return (pred_volume - ad.Tensor(target)).abs().sum()


def total_loss(state: SvortState, target_anchors: np.ndarray,
               target_volume: np.ndarray, lam: float) -> ad.Tensor:
    loss = None
    for anchors, vol in zip(state.anchors, state.volumes):
        term = anchor_loss(anchors, target_anchors)
        if lam > 0:
            term = term + lam * volume_loss(vol, target_volume)
        loss = term if loss is None else loss + term
    return loss


# -- training -------------------------------------------------------------

@dataclass
class TrainSchedule:
    steps: int = 20_000
    lr0: float = 2e-4
    val_every: int = 500
    n_val_samples: int = 8
    seed: int = 0

    def lr_at(self, step: int) -> float:
        """Linear decay from lr0 at step 0 to zero at the final step."""
        if self.steps <= 1:
            return self.lr0
        return self.lr0 * (1.0 - step / (self.steps - 1))


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_ed: list = field(default_factory=list)
    identity_ed: float = np.nan


def _sample_to_training_arrays(stacks, ext):
    return np.stack([transform_to_anchors(t, ext).as_flat() for t in stacks.transforms_gt])


def validation_ed(model: SvortModel, specs: SampleSpecs, ext: PlaneExtent,
                  seeds) -> float:
    eds = []
    for s in seeds:
        stacks, _ = generate_sample(s, specs)
        state = model.forward(stacks, ext)
        eds.append(mean_ed(state.final_transforms, stacks.transforms_gt, ext))
    return float(np.mean(eds))


def identity_ed(specs: SampleSpecs, ext: PlaneExtent, seeds) -> float:
    eds = []
    for s in seeds:
        stacks, _ = generate_sample(s, specs)
        ident = [RigidTransform.identity()] * stacks.n
        eds.append(mean_ed(ident, stacks.transforms_gt, ext))
    return float(np.mean(eds))


def train(model: SvortModel, specs: SampleSpecs, schedule: TrainSchedule,
          progress=None) -> TrainLog:
    """Adam with linear learning-rate decay; one generated sample per step."""
    cfg = model.cfg
    ext = PlaneExtent(specs.sampling.slice_size_px, specs.sampling.in_plane_res_mm)
    opt = ad.Adam(model.params, lr=schedule.lr0)
    log = TrainLog()
    sample_rng = substream(schedule.seed, "train-samples")
    val_seeds = [int(s) for s in
                 substream(schedule.seed, "val-samples").integers(0, 2**31 - 1, schedule.n_val_samples)]
    log.identity_ed = identity_ed(specs, ext, val_seeds)

    for step in range(schedule.steps):
        seed = int(sample_rng.integers(0, 2**31 - 1))
        stacks, target_vol = generate_sample(seed, specs)
        state = model.forward(stacks, ext)
        target_anchors = _sample_to_training_arrays(stacks, ext)
        loss = total_loss(state, target_anchors, target_vol.data, cfg.volume_loss_weight)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise NonFiniteLoss(f"loss became {lv} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr=schedule.lr_at(step))
        log.steps.append(step)
        log.losses.append(lv)
        log.lrs.append(schedule.lr_at(step))
        if schedule.val_every and (step + 1) % schedule.val_every == 0:
            ed = validation_ed(model, specs, ext, val_seeds)
            log.val_steps.append(step + 1)
            log.val_ed.append(ed)
            if progress:
                progress(step + 1, lv, ed)
    if not log.val_ed:
        log.val_steps.append(schedule.steps)
        log.val_ed.append(validation_ed(model, specs, ext, val_seeds))
    return log
