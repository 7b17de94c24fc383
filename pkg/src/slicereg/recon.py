"""Weighted least-squares volume estimation by conjugate gradients.

Solves  min_x  sum_i w_i ||S_i x - y_i||^2 + eps ||x||^2  on the normal
equations (sum_i w_i S_i' S_i + eps I) x = sum_i w_i S_i' y_i.  A plain
numpy path returns diagnostics; a tape-recorded path unrolls a fixed CG
budget so gradients with respect to the slice weights flow through the
solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import BreakdownDetected, DimensionMismatch
from .forward_model import PsfKernel, SliceStackSet, VolumeGrid, system_matrices


@dataclass(frozen=True)
class SliceWeights:
    """Per-slice quality weights in [0, 1]."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        if np.any((self.w < 0) | (self.w > 1)):
            raise ValueError("slice weights must lie in [0, 1]")

    @staticmethod
    def ones(n: int) -> "SliceWeights":
        return SliceWeights(np.ones(n))


@dataclass(frozen=True)
class CgParams:
    max_iters: int = 200
    rel_tol: float = 1e-4
    tikhonov_eps: float = 1e-6  # scaled by the operator's trace scale

    def __post_init__(self):
        if self.max_iters < 1 or self.rel_tol <= 0 or self.tikhonov_eps < 0:
            raise ValueError("bad CG parameters")

    @staticmethod
    def for_grid(grid_shape) -> "CgParams":
        n = int(np.prod(grid_shape))
        return CgParams(max_iters=min(200, max(1, int(2 * np.sqrt(n)))))


@dataclass
class CgDiagnostics:
    iterations: int = 0
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    objective: float = np.nan


def cg_solve(apply_A, b: np.ndarray, params: CgParams,
             x0: np.ndarray | None = None):
    """Conjugate gradients for an SPD operator given as a callable.

    Returns (x, diagnostics).  A non-positive curvature direction raises
    BreakdownDetected since it signals a non-SPD operator.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    r = b - apply_A(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(b)) or 1.0
    diag = CgDiagnostics(residual_norms=[np.sqrt(rs)])
    for it in range(params.max_iters):
        if np.sqrt(rs) / b_norm <= params.rel_tol:
            diag.converged = True
            break
        ap = apply_A(p)
        pap = float(p @ ap)
        if pap <= -1e-12 * float(p @ p) or (pap <= 0 and rs > 0):
            raise BreakdownDetected(f"p'Ap = {pap:.3e} at iteration {it}")
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        diag.iterations = it + 1
        diag.residual_norms.append(np.sqrt(rs))
    else:
        diag.converged = np.sqrt(rs) / b_norm <= params.rel_tol
    return x, diag


def _check_counts(stacks: SliceStackSet, transforms, weights):
    if len(transforms) != stacks.n:
        raise DimensionMismatch(f"{len(transforms)} transforms for {stacks.n} slices")
    if weights.w.shape[0] != stacks.n:
        raise DimensionMismatch(f"{weights.w.shape[0]} weights for {stacks.n} slices")


def _trace_scale(mats, w, n_vox: int) -> float:
    """trace(sum_i w_i S_i' S_i) / n_vox, from the sparse data directly."""
    tr = sum(float(wi) * float((m.data ** 2).sum()) for wi, m in zip(w, mats))
    return tr / n_vox if tr > 0 else 1.0


def weighted_objective(mats, ys, w, x, eps_abs: float) -> float:
    obj = eps_abs * float(x @ x)
    for m, y, wi in zip(mats, ys, w):
        r = m @ x - y
        obj += float(wi) * float(r @ r)
    return obj


def solve_weighted_volume(stacks: SliceStackSet, transforms, weights: SliceWeights,
                          psf: PsfKernel, grid: VolumeGrid,
                          cg: CgParams | None = None):
    """Solve the weighted inverse problem; returns (VolumeGrid, CgDiagnostics)."""
    _check_counts(stacks, transforms, weights)
    cg = cg or CgParams.for_grid(grid.shape)
    mats = system_matrices(stacks, transforms, psf, grid)
    ys = [s.pixels.ravel() for s in stacks.slices]
    w = weights.w
    n_vox = int(np.prod(grid.shape))
    eps_abs = cg.tikhonov_eps * _trace_scale(mats, w, n_vox)

    def apply_A(x):
        out = eps_abs * x
        for m, wi in zip(mats, w):
            if wi != 0.0:
                out = out + wi * (m.T @ (m @ x))
        return out

    b = np.zeros(n_vox)
    for m, y, wi in zip(mats, ys, w):
        if wi != 0.0:
            b += wi * (m.T @ y)

    x, diag = cg_solve(apply_A, b, cg)
    diag.objective = weighted_objective(mats, ys, w, x, eps_abs)
    return grid.like(x), diag


def solve_weighted_volume_diff(mats, ys, w: ad.Tensor, grid: VolumeGrid,
                               unroll_iters: int = 10,
                               tikhonov_eps: float = 1e-6) -> ad.Tensor:
    """Tape-recorded solve with a fixed CG budget; differentiable in ``w``.

    ``mats`` are per-slice sparse sampling matrices (constants), ``ys`` the
    flattened slice pixels, ``w`` a length-n tensor of slice weights.
    Returns the flattened volume as a tensor.
    """
    if len(mats) != len(ys) or w.shape[0] != len(mats):
        raise DimensionMismatch("mats / ys / w length mismatch")
    n_vox = int(np.prod(grid.shape))
    eps_abs = tikhonov_eps * _trace_scale(mats, w.data, n_vox)

    mts = [m.T.tocsr() for m in mats]
    aty = [mt @ y for mt, y in zip(mts, ys)]  # constant vectors

    def apply_A(x: ad.Tensor) -> ad.Tensor:
        out = x * eps_abs
        for i, (m, mt) in enumerate(zip(mats, mts)):
            out = out + w[i] * ad.sparse_matmul(mt, ad.sparse_matmul(m, x))
        return out

    b = None
    for i in range(len(mats)):
        term = w[i] * ad.Tensor(aty[i])
        b = term if b is None else b + term

    # unrolled CG from x0 = 0: r0 = b
    x = ad.Tensor(np.zeros(n_vox))
    r = b
    p = r
    rs = (r * r).sum()
    tiny = 1e-30
    for _ in range(unroll_iters):
        ap = apply_A(p)
        pap = (p * ap).sum()
        alpha = rs / (pap + tiny)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = (r * r).sum()
        beta = rs_new / (rs + tiny)
        p = r + beta * p
        rs = rs_new
    return x
