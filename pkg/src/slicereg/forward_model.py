"""Slice acquisition forward model: PSF blurring + oriented-plane sampling.

A slice pixel value is a PSF-weighted average of volume voxels around the
pixel's position in atlas space.  The weights are materialized as a sparse
gather matrix, so the adjoint is exactly the transpose and the operator can
participate in autodiff via :func:`slicereg.autodiff.sparse_matmul`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DimensionMismatch
from .geometry import PlaneExtent, RigidTransform

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class VolumeGrid:
    """3D scalar image on a regular grid; origin is the position of voxel (0,0,0)."""

    data: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        object.__setattr__(self, "spacing_mm", np.asarray(self.spacing_mm, dtype=float).reshape(3))
        object.__setattr__(self, "origin_mm", np.asarray(self.origin_mm, dtype=float).reshape(3))
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError("volume must be a non-empty 3D array")
        if np.any(self.spacing_mm <= 0):
            raise ValueError("spacing must be positive")

    @property
    def shape(self):
        return self.data.shape

    def like(self, data: np.ndarray) -> "VolumeGrid":
        return VolumeGrid(data.reshape(self.shape), self.spacing_mm, self.origin_mm)

    @staticmethod
    def centered(data: np.ndarray, spacing_mm) -> "VolumeGrid":
        """Grid whose physical center sits at the atlas origin."""
        data = np.asarray(data, dtype=float)
        spacing = np.asarray(spacing_mm, dtype=float).reshape(3)
        origin = -spacing * (np.asarray(data.shape) - 1) / 2.0
        return VolumeGrid(data, spacing, origin)


@dataclass(frozen=True)
class Slice:
    """One acquired (or simulated) 2D image with its acquisition metadata."""

    pixels: np.ndarray
    ext: PlaneExtent
    thickness_mm: float
    stack_index: int = 0
    slice_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=float))
        if self.pixels.ndim != 2:
            raise ValueError("slice pixels must be 2D")
        if self.thickness_mm <= 0:
            raise ValueError("thickness must be positive")


@dataclass
class SliceStackSet:
    """All slices of one scan, in acquisition order, with optional ground truth."""

    slices: list
    transforms_gt: list | None = None

    def __post_init__(self):
        if self.transforms_gt is not None and len(self.transforms_gt) != len(self.slices):
            raise DimensionMismatch("transforms_gt length != slice count")

    @property
    def n(self) -> int:
        return len(self.slices)


@dataclass(frozen=True)
class PsfKernel:
    """Anisotropic Gaussian PSF, FWHM in mm, truncated at a sigma multiple."""

    fwhm_inplane_mm: float
    fwhm_through_mm: float
    truncation_radius_sigma: float = 3.0

    def __post_init__(self):
        if min(self.fwhm_inplane_mm, self.fwhm_through_mm, self.truncation_radius_sigma) <= 0:
            raise ValueError("PSF parameters must be positive")

    @property
    def sigma_inplane(self) -> float:
        return self.fwhm_inplane_mm * FWHM_TO_SIGMA

    @property
    def sigma_through(self) -> float:
        return self.fwhm_through_mm * FWHM_TO_SIGMA

    @staticmethod
    def default(res_mm: float, thickness_mm: float) -> "PsfKernel":
        """In-plane FWHM 1.2x the in-plane resolution, through-plane FWHM = thickness."""
        return PsfKernel(1.2 * res_mm, thickness_mm)


def pixel_centers_atlas(t: RigidTransform, ext: PlaneExtent) -> np.ndarray:
    """Atlas-space positions of all pixel centers, shape (size_px**2, 3).

    Row-major raster: row v runs top (+y) to bottom (-y), column u runs
    left (-x) to right (+x), matching the corner convention of the anchors.
    """
    m = ext.size_px
    c = (m - 1) / 2.0
    u = np.arange(m)
    x = (u - c) * ext.res_mm
    y = (c - u) * ext.res_mm
    xs, ys = np.meshgrid(x, y)  # row index -> y, col index -> x
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(m * m)], axis=1)
    return t.apply(pts)


def _gather_weights(points: np.ndarray, t: RigidTransform, psf: PsfKernel,
                    grid: VolumeGrid):
    """Raw Gaussian gather weights from atlas points onto the voxel lattice.

    Returns (rows, cols, weights, total_per_point) where ``total_per_point``
    includes lattice sites outside the volume (zero-padding semantics) and
    rows/cols index only in-volume sites.
    """
    si, st = psf.sigma_inplane, psf.sigma_through
    rmax = psf.truncation_radius_sigma * max(si, st)
    spacing, origin = grid.spacing_mm, grid.origin_mm
    shape = np.asarray(grid.shape)

    base = np.floor((points - origin) / spacing).astype(int)  # (np, 3)
    m = np.ceil(rmax / spacing).astype(int)
    offs = np.stack(np.meshgrid(*[np.arange(-mi, mi + 2) for mi in m],
                                indexing="ij"), axis=-1).reshape(-1, 3)

    idx = base[:, None, :] + offs[None, :, :]            # (np, noff, 3)
    pos = origin + idx * spacing                          # lattice positions
    d = pos - points[:, None, :]                          # atlas displacement
    # displacement in the plane frame: x,y in-plane, z through-plane
    dp = d @ t.rotation  # == (R^T d^T)^T
    q = (dp[..., 0] ** 2 + dp[..., 1] ** 2) / si ** 2 + dp[..., 2] ** 2 / st ** 2
    w = np.where(q <= psf.truncation_radius_sigma ** 2, np.exp(-0.5 * q), 0.0)

    total = w.sum(axis=1)
    inside = np.all((idx >= 0) & (idx < shape), axis=-1)
    keep = inside & (w > 0)
    pt_id = np.broadcast_to(np.arange(points.shape[0])[:, None], w.shape)
    flat = (idx[..., 0] * shape[1] + idx[..., 1]) * shape[2] + idx[..., 2]
    return pt_id[keep], flat[keep], w[keep], total


def sampling_matrix(t: RigidTransform, psf: PsfKernel, ext: PlaneExtent,
                    grid: VolumeGrid) -> sparse.csr_matrix:
    """The slice-sampling operator as a (n_pixels, n_voxels) sparse matrix.

    Each row holds per-pixel normalized PSF weights; rows whose PSF mass
    falls entirely outside the volume are zero.
    """
    pts = pixel_centers_atlas(t, ext)
    rows, cols, w, total = _gather_weights(pts, t, psf, grid)
    norm = np.where(total > 0, total, 1.0)
    w = w / norm[rows]
    n_vox = int(np.prod(grid.shape))
    mat = sparse.coo_matrix((w, (rows, cols)),
                            shape=(ext.size_px ** 2, n_vox))
    return mat.tocsr()


def sample_slice(vol: VolumeGrid, t: RigidTransform, psf: PsfKernel,
                 ext: PlaneExtent, thickness_mm: float,
                 stack_index: int = 0, slice_index: int = 0) -> Slice:
    """Simulate one slice: PSF-weighted gather of the volume at plane pose t."""
    mat = sampling_matrix(t, psf, ext, vol)
    pix = (mat @ vol.data.ravel()).reshape(ext.size_px, ext.size_px)
    return Slice(pix, ext, thickness_mm, stack_index, slice_index)


def adjoint_sample(s: Slice, t: RigidTransform, psf: PsfKernel,
                   grid: VolumeGrid) -> VolumeGrid:
    """Exact adjoint of sample_slice: transpose of the gather matrix."""
    mat = sampling_matrix(t, psf, s.ext, grid)
    return grid.like(mat.T @ s.pixels.ravel())


def psf_reconstruct(stacks: SliceStackSet, transforms: list, psf: PsfKernel,
                    grid: VolumeGrid, weight_eps: float = 1e-8) -> VolumeGrid:
    """Scatter-and-normalize interpolation of slices into the volume.

    x(v) = sum_i w_iv y_iv / sum_i w_iv with raw (unnormalized) PSF weights;
    voxels with total weight below ``weight_eps`` are zero.
    """
    if len(transforms) != stacks.n:
        raise DimensionMismatch("one transform per slice required")
    psfs = list(psf) if isinstance(psf, (list, tuple)) else [psf] * stacks.n
    num = np.zeros(grid.shape).ravel()
    den = np.zeros_like(num)
    for s, t, p in zip(stacks.slices, transforms, psfs):
        pts = pixel_centers_atlas(t, s.ext)
        rows, cols, w, _ = _gather_weights(pts, t, p, grid)
        vals = s.pixels.ravel()[rows]
        np.add.at(num, cols, w * vals)
        np.add.at(den, cols, w)
    out = np.where(den > weight_eps, num / np.where(den > 0, den, 1.0), 0.0)
    return grid.like(out)


def system_matrices(stacks: SliceStackSet, transforms: list, psf: PsfKernel,
                    grid: VolumeGrid) -> list:
    """Per-slice sampling matrices for the reconstruction solver."""
    if len(transforms) != stacks.n:
        raise DimensionMismatch("one transform per slice required")
    psfs = list(psf) if isinstance(psf, (list, tuple)) else [psf] * stacks.n
    return [sampling_matrix(t, p, s.ext, grid)
            for s, t, p in zip(stacks.slices, transforms, psfs)]
