"""Dense linear-algebra kernels: jittered Cholesky, thin QR, triangular solves,
and conjugate gradients for several right-hand sides against a black-box
operator.

Matrices are plain numpy arrays. Upper-triangular factors U satisfy
M = U^T U (LAPACK convention, lower=False).
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence
import warnings

import numpy as np
import scipy.linalg

from .errors import (
    CGNotConvergedWarning,
    DimensionMismatch,
    NotPositiveDefinite,
    RankDeficient,
    SingularTriangular,
)

# Relative jitter rungs tried in order; absolute jitter is rung * mean(diag(M)).
DEFAULT_JITTER_MULTIPLIERS = (0.0, 1e-8, 1e-6, 1e-4)

RANK_TOL = 1e-12


def default_jitter_schedule(m: np.ndarray) -> list[float]:
    scale = float(np.mean(np.diagonal(m)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    return [mult * scale for mult in DEFAULT_JITTER_MULTIPLIERS]


def cholesky_upper(m: np.ndarray, jitter_schedule: Sequence[float] | None = None):
    """Upper Cholesky factor of an SPD matrix with a jitter escalation ladder.

    Tries M + eps*I for each eps in the schedule (default: relative rungs
    {0, 1e-8, 1e-6, 1e-4} times mean(diag M)) and returns ``(U, eps_used)``
    for the first factorization that succeeds. Raises NotPositiveDefinite
    if every rung fails or the input is not finite.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    if jitter_schedule is None:
        jitter_schedule = default_jitter_schedule(m)
    # symmetrize: callers build M from products that are symmetric only to
    # rounding, and potrf reads a single triangle anyway
    m = 0.5 * (m + m.T)
    eye = np.eye(m.shape[0], dtype=m.dtype)
    for eps in jitter_schedule:
        try:
            u = scipy.linalg.cholesky(m + eps * eye, lower=False)
        except scipy.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(u)):
            return u, float(eps)
    raise NotPositiveDefinite(
        f"Cholesky failed for all {len(list(jitter_schedule))} jitter values"
    )


def qr_thin(a: np.ndarray):
    """Thin (economy) Householder QR of a tall matrix.

    Returns (Q, R) with Q of shape (n, m) and R upper triangular (m, m).
    Raises RankDeficient when any |R_ii| < 1e-12 * max_j |R_jj|.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise DimensionMismatch(f"expected rows >= cols, got {a.shape}")
    q, r = scipy.linalg.qr(a, mode="economic")
    d = np.abs(np.diagonal(r))
    if d.size and np.any(d < RANK_TOL * d.max()):
        raise RankDeficient("triangular factor has a near-zero diagonal entry")
    return q, r


def tri_solve_upper(r: np.ndarray, b: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve R x = b (or R^T x = b) for upper-triangular R by substitution."""
    r = np.asarray(r)
    b = np.asarray(b)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise DimensionMismatch(f"expected a square triangular matrix, got {r.shape}")
    if b.shape[0] != r.shape[0]:
        raise DimensionMismatch(f"rhs length {b.shape[0]} != order {r.shape[0]}")
    if np.any(np.diagonal(r) == 0.0):
        raise SingularTriangular("exact zero on the triangular diagonal")
    return scipy.linalg.solve_triangular(r, b, lower=False, trans="T" if transpose else "N")


@dataclass
class CGReport:
    """Outcome of a multi-RHS conjugate-gradient solve."""

    solutions: np.ndarray          # (n, k)
    iterations: int
    final_residual_norms: np.ndarray  # (k,) relative to each ||b_j||
    converged: bool
    history: list = field(default_factory=list)  # per-iteration max relative residual


def block_cg(
    matvec: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    tol: float = 1e-6,
    max_iters: int = 500,
    record_history: bool = False,
) -> CGReport:
    """Conjugate gradients on an SPD black-box operator, one recurrence per
    column, run in lockstep across all right-hand sides.

    Stops when every column's relative residual ||b - A x|| / ||b|| is <= tol,
    or after max_iters (then converged=False and the best iterates are
    returned, with a CGNotConvergedWarning).
    """
    rhs = np.asarray(rhs)
    if rhs.dtype.kind != "f":
        rhs = rhs.astype(float)
    squeeze = rhs.ndim == 1
    if squeeze:
        rhs = rhs[:, None]
    n, k = rhs.shape

    b_norms = np.linalg.norm(rhs, axis=0)
    safe = np.where(b_norms > 0, b_norms, 1.0)

    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    active = b_norms > 0  # zero rhs columns are solved by x = 0
    history: list[float] = []
    iters = 0

    for iters in range(1, max_iters + 1):
        ap = matvec(p)
        pap = np.einsum("ij,ij->j", p, ap)
        # frozen columns keep alpha = 0 so their iterates stay put
        alpha = np.where(active & (pap > 0), rs / np.where(pap > 0, pap, 1.0), 0.0)
        x += alpha * p
        r -= alpha * ap
        rs_new = np.einsum("ij,ij->j", r, r)
        rel = np.sqrt(rs_new) / safe
        if record_history:
            history.append(float(rel.max()))
        active = rel > tol
        if not active.any():
            break
        beta = np.where(rs > 0, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = r + beta * p
        rs = rs_new

    final = np.linalg.norm(rhs - matvec(x), axis=0) / safe
    converged = bool(np.all(final <= tol))
    if not converged:
        warnings.warn(
            f"CG stopped after {iters} iterations at max rel residual {final.max():.3e}",
            CGNotConvergedWarning,
        )
    sols = x[:, 0] if squeeze else x
    return CGReport(
        solutions=sols,
        iterations=iters,
        final_residual_norms=final,
        converged=converged,
        history=history,
    )
