"""Synthetic training data: phantom volumes, random stack geometries,
motion perturbation, and MR artifact simulation.

Everything is pure given (seed, specs); independent substreams are derived
from one seed by name so parallel generation stays bitwise reproducible.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .forward_model import PsfKernel, Slice, SliceStackSet, VolumeGrid, sample_slice
from .geometry import (
    PlaneExtent,
    RigidTransform,
    compose,
    random_rotation,
)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child RNG of one master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class SamplingSpec:
    n_stacks: int = 3
    slices_per_stack: tuple = (15, 30)
    thickness_mm: tuple = (2.5, 3.5)
    in_plane_res_mm: float = 1.0
    slice_size_px: int = 128
    gap_mm: float = 0.0
    # None: orientations uniform over the sphere.  Otherwise stacks cycle
    # through the three canonical views (axial/coronal/sagittal) with a
    # random rotation of at most this angle applied on top, mimicking
    # roughly planned acquisitions.
    orientation_cone_deg: float | None = None

    def __post_init__(self):
        if self.n_stacks < 1 or self.slice_size_px < 1:
            raise ValueError("bad sampling spec")
        if self.slices_per_stack[0] > self.slices_per_stack[1]:
            raise ValueError("empty slices_per_stack range")
        if self.thickness_mm[0] > self.thickness_mm[1] or self.thickness_mm[0] <= 0:
            raise ValueError("bad thickness range")


@dataclass(frozen=True)
class MotionSpec:
    rot_std_deg: float = 5.0
    trans_std_mm: float = 2.0
    temporal_correlation: float = 0.7
    # Per-slice outlier motion: with this probability a slice receives one
    # extra large displacement on top of the random walk, modelling sudden
    # movement that leaves a single badly misregistered slice.
    outlier_probability: float = 0.0
    outlier_rot_deg: float = 0.0
    outlier_trans_mm: float = 0.0

    def __post_init__(self):
        if self.rot_std_deg < 0 or self.trans_std_mm < 0:
            raise ValueError("motion scales must be nonnegative")
        if not (0 <= self.temporal_correlation < 1):
            raise ValueError("temporal_correlation must be in [0, 1)")
        if not (0 <= self.outlier_probability <= 1):
            raise ValueError("outlier_probability must be in [0, 1]")
        if self.outlier_rot_deg < 0 or self.outlier_trans_mm < 0:
            raise ValueError("outlier scales must be nonnegative")


@dataclass(frozen=True)
class ArtifactSpec:
    noise_std: tuple = (0.0, 0.05)
    bias_amplitude: float = 0.3
    bias_smoothness_mm: float = 20.0
    void_probability: float = 0.1
    void_max_bands: int = 2
    contrast_gamma: tuple = (0.75, 1.3)

    def __post_init__(self):
        if not (0 <= self.void_probability <= 1):
            raise ValueError("void_probability must be in [0, 1]")

    @staticmethod
    def disabled() -> "ArtifactSpec":
        return ArtifactSpec(noise_std=(0.0, 0.0), bias_amplitude=0.0,
                            void_probability=0.0, contrast_gamma=(1.0, 1.0))


def make_phantom(seed: int, grid_shape=(32, 32, 32), spacing_mm=2.0) -> VolumeGrid:
    """Smooth nested-shell phantom with asymmetric internal structure.

    Deterministic from the seed; intensities in [0, 1]; internal blobs break
    all rotational self-symmetries so slice poses are identifiable.
    """
    if min(grid_shape) < 16:
        raise ValueError("phantom grid must be at least 16^3")
    rng = substream(seed, "phantom")
    shape = np.asarray(grid_shape)
    idx = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1)
    c = (shape - 1) / 2.0
    u = (idx - c) / (shape / 2.0)  # normalized coords in [-1, 1]

    # nested ellipsoidal shells with distinct randomized axes
    axes_outer = np.array([rng.uniform(0.85, 0.95), rng.uniform(0.7, 0.8),
                           rng.uniform(0.55, 0.65)])
    axes_inner = axes_outer * rng.uniform(0.5, 0.65, size=3)
    r_out = np.sqrt(((u / axes_outer) ** 2).sum(-1))
    r_in = np.sqrt(((u / axes_inner) ** 2).sum(-1))
    vol = 0.45 * np.clip(1.0 - r_out, 0, 1) ** 0.5
    vol += 0.25 * np.clip(1.0 - r_in, 0, 1)

    # asymmetric blobs at random interior sites
    for _ in range(10):
        center = rng.uniform(-0.5, 0.5, size=3)
        radius = rng.uniform(0.1, 0.25)
        amp = rng.uniform(0.25, 0.6) * rng.choice([-1.0, 1.0])
        d2 = ((u - center) ** 2).sum(-1)
        vol += amp * np.exp(-d2 / (2 * radius ** 2))

    # one off-center bright rod along a random direction kills mirror symmetry
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = (u * direction).sum(-1)
    perp = u - t[..., None] * direction
    rod = np.exp(-((np.linalg.norm(perp, axis=-1) / 0.1) ** 2)) * (np.abs(t - 0.25) < 0.35)
    vol += 0.6 * rod

    vol = ndimage.gaussian_filter(vol, sigma=0.8)
    vol *= np.clip(1.0 - r_out, 0, 1) > 0  # hard background
    vol = np.clip(vol, 0, None)
    vmax = vol.max()
    if vmax > 0:
        vol = vol / vmax
    return VolumeGrid.centered(vol, [spacing_mm] * 3)


def _stack_rotation(rng: np.random.Generator) -> np.ndarray:
    """Random plane orientation: normal uniform on the sphere plus uniform
    in-plane rotation."""
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    # rotation taking +z to n
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, n)
    s = np.linalg.norm(v)
    c = float(z @ n)
    if s < 1e-12:
        base = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        base = np.eye(3) + vx + vx @ vx * ((1 - c) / s ** 2)
    phi = rng.uniform(0, 2 * np.pi)
    cp, sp = np.cos(phi), np.sin(phi)
    inplane = np.array([[cp, -sp, 0], [sp, cp, 0], [0, 0, 1]])
    return base @ inplane


def random_stack_geometry(spec: SamplingSpec, rng: np.random.Generator):
    """Per-slice ground-truth transforms for all stacks of one sample.

    Returns (transforms, stack_indices, slice_indices, thicknesses).
    """
    canonical = [
        np.eye(3),
        np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]]),   # coronal
        np.array([[0.0, 0, 1], [1.0, 0, 0], [0, 1.0, 0]]),    # sagittal
    ]
    transforms, stack_idx, slice_idx, thick = [], [], [], []
    for si in range(spec.n_stacks):
        if spec.orientation_cone_deg is None:
            rot = _stack_rotation(rng)
        else:
            axis = rng.standard_normal(3)
            angle = rng.uniform(0.0, np.deg2rad(spec.orientation_cone_deg))
            rot = _axis_angle(axis, angle) @ canonical[si % 3]
        normal = rot @ np.array([0.0, 0.0, 1.0])
        n_slices = int(rng.integers(spec.slices_per_stack[0], spec.slices_per_stack[1] + 1))
        thickness = float(rng.uniform(*spec.thickness_mm))
        step = thickness + spec.gap_mm
        offsets = (np.arange(n_slices) - (n_slices - 1) / 2.0) * step
        for k, o in enumerate(offsets):
            transforms.append(RigidTransform(rot, o * normal))
            stack_idx.append(si)
            slice_idx.append(k)
            thick.append(thickness)
    return transforms, stack_idx, slice_idx, thick


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def perturb_motion(transforms, stack_idx, spec: MotionSpec, rng: np.random.Generator):
    """AR(1) random-walk perturbation per stack, applied on the left."""
    rho = spec.temporal_correlation
    innov_scale = np.sqrt(1.0 - rho ** 2) if rho > 0 else 1.0
    out = []
    state_rotvec = np.zeros(3)
    state_trans = np.zeros(3)
    prev_stack = None
    for t, si in zip(transforms, stack_idx):
        if si != prev_stack:
            state_rotvec = rng.standard_normal(3)
            state_trans = rng.standard_normal(3)
            prev_stack = si
        else:
            state_rotvec = rho * state_rotvec + innov_scale * rng.standard_normal(3)
            state_trans = rho * state_trans + innov_scale * rng.standard_normal(3)
        angle_std = np.deg2rad(spec.rot_std_deg)
        rotvec = state_rotvec * angle_std
        angle = np.linalg.norm(rotvec)
        rot = np.eye(3) if angle < 1e-12 else _axis_angle(rotvec, angle)
        delta = RigidTransform(rot, state_trans * spec.trans_std_mm)
        perturbed = compose(delta, t)
        # The p == 0 guard also keeps the random stream identical to builds
        # without outlier motion.
        if spec.outlier_probability > 0 and rng.random() < spec.outlier_probability:
            axis = rng.standard_normal(3)
            jump = RigidTransform(
                _axis_angle(axis, np.deg2rad(spec.outlier_rot_deg)),
                spec.outlier_trans_mm * rng.standard_normal(3) / np.sqrt(3.0))
            perturbed = compose(jump, perturbed)
        out.append(perturbed)
    return out


def _bias_field(shape, amplitude, smoothness_px, rng):
    f = rng.standard_normal(shape)
    f = ndimage.gaussian_filter(f, sigma=smoothness_px)
    m = np.abs(f).max()
    if m > 0:
        f = f / m
    return 1.0 + amplitude * f


def apply_artifacts(s: Slice, spec: ArtifactSpec, rng: np.random.Generator) -> Slice:
    """Noise, multiplicative bias field, signal-void bands, contrast jitter."""
    px = s.pixels.copy()
    peak = max(px.max(), 1e-6)

    g = float(rng.uniform(*spec.contrast_gamma))
    if g != 1.0:
        px = peak * (np.clip(px / peak, 0, 1) ** g)

    if spec.bias_amplitude > 0:
        smooth_px = max(1.0, spec.bias_smoothness_mm / s.ext.res_mm / 4.0)
        px = px * _bias_field(px.shape, spec.bias_amplitude, smooth_px, rng)

    if spec.void_probability > 0 and rng.uniform() < spec.void_probability:
        for _ in range(int(rng.integers(1, spec.void_max_bands + 1))):
            h = px.shape[0]
            start = int(rng.integers(0, h))
            width = int(rng.integers(1, max(2, h // 8)))
            if rng.uniform() < 0.5:
                px[start:start + width, :] = 0.0
            else:
                px[:, start:start + width] = 0.0

    noise = float(rng.uniform(*spec.noise_std))
    if noise > 0:
        px = px + rng.normal(0, noise, size=px.shape)

    return Slice(np.clip(px, 0, None), s.ext, s.thickness_mm, s.stack_index, s.slice_index)


@dataclass
class SampleSpecs:
    sampling: SamplingSpec
    motion: MotionSpec
    artifacts: ArtifactSpec
    grid_shape: tuple = (32, 32, 32)
    grid_spacing_mm: float = 2.0
    phantom_seed: int | None = None  # defaults to the sample seed


_phantom_cache: dict = {}  # phantoms are deterministic and read-only once built


def generate_sample(seed: int, specs: SampleSpecs):
    """One training/validation sample: (SliceStackSet with ground truth, target VolumeGrid)."""
    phantom_seed = specs.phantom_seed if specs.phantom_seed is not None else seed
    key = (phantom_seed, tuple(specs.grid_shape), specs.grid_spacing_mm)
    if key not in _phantom_cache:
        if len(_phantom_cache) > 32:
            _phantom_cache.clear()
        _phantom_cache[key] = make_phantom(phantom_seed, key[1], key[2])
    vol = _phantom_cache[key]

    geo_rng = substream(seed, "geometry")
    transforms, stack_idx, slice_idx, thick = random_stack_geometry(specs.sampling, geo_rng)

    motion_rng = substream(seed, "motion")
    transforms = perturb_motion(transforms, stack_idx, specs.motion, motion_rng)

    ext = PlaneExtent(specs.sampling.slice_size_px, specs.sampling.in_plane_res_mm)
    art_rng = substream(seed, "artifacts")
    slices = []
    for t, si, ki, th in zip(transforms, stack_idx, slice_idx, thick):
        psf = PsfKernel.default(ext.res_mm, th)
        s = sample_slice(vol, t, psf, ext, th, stack_index=si, slice_index=ki)
        slices.append(apply_artifacts(s, specs.artifacts, art_rng))
    return SliceStackSet(slices, transforms), vol


def eval_seed_pairs(phantom_seeds, samples_per_phantom: int = 4):
    """(phantom_seed, sample_seed) pairs: fixed count of samples per subject."""
    pairs = []
    for p in phantom_seeds:
        for k in range(samples_per_phantom):
            pairs.append((p, p * 10007 + k + 1))
    return pairs
