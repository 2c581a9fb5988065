"""QR-stabilized posterior fit and predictions.

The representer weights alpha solve  Chat alpha = Khat^T Lambda^-1 y  with
Chat = K_zz + Khat^T Lambda^-1 Khat. Instead of forming Chat (which squares
the condition number), stack

    A = [ Khat / beta ]        rhs = [ y / beta ]
        [ U_zz        ]              [ 0        ]

where U_zz^T U_zz = K_zz, so A^T A = Chat, and take a thin QR of A. Then
R alpha = Q^T rhs, the predictive mean at x* is  khat_*^T alpha, and the
predictive variance is  ||R^-T khat_*||^2 = khat_*^T Chat^-1 khat_*  (the
approximate prior variance term cancels exactly against the Nystrom-form
correction, so this single solve is the whole variance).

The stack is reduced in row blocks: each block is absorbed into a carried
[R | Q^T rhs] factor by re-triangularizing, so the full Q is never formed and
peak extra memory is O(block_rows * m) independent of n.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import linalg
from .data import Dataset
from .errors import RankDeficient
from .interp import softmax_weights
from .kernel import matern32
from .objective import SoftKIHyperparams

DEFAULT_BLOCK_ROWS = 8192


@dataclass
class FittedPosterior:
    hp: SoftKIHyperparams
    u_zz: np.ndarray           # (m, m) upper, U^T U = K_zz (+ jitter)
    r: np.ndarray              # (m, m) upper, R^T R = Chat
    alpha: np.ndarray          # (m,)
    projected_rhs: np.ndarray  # (m,) Q^T of the stacked rhs
    diagnostics: dict = field(default_factory=dict)


def stacked_qr_solve(blocks, u_zz: np.ndarray, block_rows: int = DEFAULT_BLOCK_ROWS):
    """Streaming thin QR of a stacked system.

    blocks yields (a_block, b_block) pairs of pre-scaled rows; the
    interpolation-regularizer rows [u_zz | 0] are appended automatically.
    Returns (r, projected_rhs, residual_norm, diag) where r is (m, m) upper,
    R alpha = projected_rhs is the least-squares solution, and residual_norm
    is the accumulated orthogonal-complement magnitude of the rhs.
    """
    m = u_zz.shape[0]
    carry = None
    max_stack = 0
    n_blocks = 0
    rows_seen = 0

    def absorb(carry, a_blk, b_blk):
        b_blk = np.asarray(b_blk, dtype=a_blk.dtype)
        aug = np.concatenate([a_blk, b_blk[:, None]], axis=1)
        stack = aug if carry is None else np.vstack([carry, aug])
        r = scipy.linalg.qr(stack, mode="r")[0]  # upper trapezoid, Householder
        return r[: m + 1], stack.shape[0]

    for a_blk, b_blk in blocks:
        a_blk = np.atleast_2d(np.asarray(a_blk))
        if a_blk.dtype.kind != "f":
            a_blk = a_blk.astype(float)
        rows_seen += a_blk.shape[0]
        n_blocks += 1
        carry, stacked = absorb(carry, a_blk, b_blk)
        max_stack = max(max_stack, stacked)

    carry, stacked = absorb(carry, u_zz, np.zeros(m))
    max_stack = max(max_stack, stacked)
    n_blocks += 1

    r_full = carry
    r = np.triu(r_full[:m, :m])
    d = np.abs(np.diagonal(r))
    if d.size == 0 or np.any(d < linalg.RANK_TOL * d.max()):
        raise RankDeficient("stacked system is numerically rank deficient")
    c = r_full[:m, m]
    residual = float(np.abs(r_full[m, m])) if r_full.shape[0] > m else 0.0
    diag = {
        "blocks": n_blocks,
        "max_stack_rows": max_stack,
        "rows": rows_seen + m,
    }
    return r, c, residual, diag


def _row_blocks(x, y, hp, k_zz, block_rows):
    beta = hp.noise
    n = y.shape[0]
    for start in range(0, n, block_rows):
        xb = x[start : start + block_rows]
        wb = softmax_weights(xb, hp.interp)
        yield (wb @ k_zz) / beta, y[start : start + block_rows] / beta


def fit_qr(
    data: Dataset,
    hp: SoftKIHyperparams,
    block_rows: int = DEFAULT_BLOCK_ROWS,
) -> FittedPosterior:
    """Fit the posterior representer weights through the stacked QR."""
    x, y = data.x, data.y
    k_zz = matern32(hp.interp.z, hp.interp.z, hp.kernel)
    u_zz, jitter = linalg.cholesky_upper(k_zz)
    r, c, residual, diag = stacked_qr_solve(
        _row_blocks(x, y, hp, k_zz, block_rows), u_zz, block_rows
    )
    alpha = linalg.tri_solve_upper(r, c)
    diag.update({"jitter": jitter, "block_rows": block_rows, "residual": residual})
    return FittedPosterior(
        hp=hp, u_zz=u_zz, r=r, alpha=alpha, projected_rhs=c, diagnostics=diag
    )


def _cross_covariance(post: FittedPosterior, xs: np.ndarray) -> np.ndarray:
    k_zz = matern32(post.hp.interp.z, post.hp.interp.z, post.hp.kernel)
    w = softmax_weights(np.atleast_2d(xs), post.hp.interp)
    return w @ k_zz


def predict_mean(post: FittedPosterior, xs: np.ndarray) -> np.ndarray:
    return _cross_covariance(post, xs) @ post.alpha


def predict_var(post: FittedPosterior, xs: np.ndarray) -> np.ndarray:
    """Latent predictive variance khat_*^T Chat^-1 khat_* (noise excluded)."""
    khat = _cross_covariance(post, xs)
    half = linalg.tri_solve_upper(post.r, khat.T, transpose=True)
    var = np.einsum("ij,ij->j", half, half)
    # a sum of squares; clamp the tiny negatives rounding could leave
    var[(var < 0) & (var > -1e-12)] = 0.0
    return var


def gaussian_nll(y: np.ndarray, mean: np.ndarray, total_var: np.ndarray) -> float:
    """Average negative log density of y under N(mean, total_var)."""
    return float(np.mean(
        0.5 * np.log(2.0 * np.pi * total_var) + (y - mean) ** 2 / (2.0 * total_var)
    ))


def test_metrics(post: FittedPosterior, xs: np.ndarray, ys: np.ndarray):
    """(rmse, nll) on the standardized scale; nll adds the noise variance."""
    mean = predict_mean(post, xs)
    var = predict_var(post, xs)
    rmse = float(np.sqrt(np.mean((mean - ys) ** 2)))
    nll = gaussian_nll(ys, mean, var + post.hp.noise**2)
    return rmse, nll


@dataclass
class AltSolveResult:
    method: str
    alpha: np.ndarray | None
    residual: float            # ||Chat alpha - rhs|| / ||rhs||
    iterations: int = 0
    error: str | None = None
    history: list = field(default_factory=list)


def alt_solve(data: Dataset, hp: SoftKIHyperparams, method: str) -> AltSolveResult:
    """Solve Chat alpha = Khat^T Lambda^-1 y with an explicitly assembled Chat.

    method is one of "direct", "cholesky", "cg:<tol>", or "qr" (the stacked
    path, included so solver studies can tabulate it alongside the others).
    Failures are recorded on the result, not raised.
    """
    x, y = data.x, data.y
    beta2 = hp.noise**2
    k_zz = matern32(hp.interp.z, hp.interp.z, hp.kernel)
    w = softmax_weights(x, hp.interp)
    khat = w @ k_zz
    chat = k_zz + (khat.T @ khat) / beta2
    chat = 0.5 * (chat + chat.T)
    rhs = khat.T @ y / beta2

    def residual(alpha):
        return float(np.linalg.norm(chat @ alpha - rhs) / np.linalg.norm(rhs))

    if method == "qr":
        try:
            post = fit_qr(data, hp)
        except Exception as err:  # recorded, not raised, to match the others
            return AltSolveResult(method, None, np.inf, error=str(err))
        return AltSolveResult(method, post.alpha, residual(post.alpha))

    if method == "direct":
        try:
            alpha = np.linalg.solve(chat, rhs)
        except np.linalg.LinAlgError as err:
            return AltSolveResult(method, None, np.inf, error=str(err))
        if not np.all(np.isfinite(alpha)):
            return AltSolveResult(method, alpha, np.inf, error="non-finite solution")
        return AltSolveResult(method, alpha, residual(alpha))

    if method == "cholesky":
        try:
            u = scipy.linalg.cholesky(chat, lower=False)  # no jitter: raw method
        except scipy.linalg.LinAlgError as err:
            return AltSolveResult(method, None, np.inf, error=str(err))
        alpha = scipy.linalg.solve_triangular(
            u, scipy.linalg.solve_triangular(u, rhs, lower=False, trans="T"),
            lower=False,
        )
        if not np.all(np.isfinite(alpha)):
            return AltSolveResult(method, alpha, np.inf, error="non-finite solution")
        return AltSolveResult(method, alpha, residual(alpha))

    if method.startswith("cg:"):
        tol = float(method.split(":", 1)[1])
        rep = linalg.block_cg(
            lambda v: chat @ v, rhs, tol=tol,
            max_iters=max(1000, 10 * chat.shape[0]), record_history=True,
        )
        alpha = rep.solutions
        return AltSolveResult(
            method, alpha, residual(alpha), iterations=rep.iterations,
            error=None if rep.converged else "cg did not converge",
            history=rep.history,
        )

    raise ValueError(f"unknown solve method {method!r}")


DEFAULT_STUDY_METHODS = ("qr", "direct", "cholesky", "cg:1e-1", "cg:1e-2",
                         "cg:1e-3", "cg:1e-4")


def near_degenerate_instance(n: int = 400, m: int = 24, d: int = 2,
                             delta: float = 1e-3, noise: float = 1e-4,
                             weak_fraction: float = 0.3, seed: int = 0,
                             dtype="float32"):
    """Dataset plus hyperparameters whose projected system is near singular.

    Interpolation points come in pairs ``delta`` apart, so the projected
    cross-covariance has near-coincident columns and the normal-equations
    matrix squares an already extreme condition number. The targets are built
    inside the model's span and mix each pair's shared response with its
    (tiny-norm) difference response, so about ``weak_fraction`` of the signal
    variance lives in directions a squared-condition solve cannot resolve at
    working precision while the stacked factorization still can. The default
    dtype is float32, the precision where that separation shows; everything
    downstream (weights, factors, solves) stays in the instance dtype.
    Returns (data, hp).
    """
    from .interp import InterpolationState
    from .kernel import MaternParams

    dt = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, d))
    base = x[rng.choice(n, size=m // 2, replace=False)]
    z = np.repeat(base, 2, axis=0)
    z[1::2] += delta
    hp = SoftKIHyperparams(
        noise=noise,
        kernel=MaternParams(lengthscales=np.ones(d, dtype=dt), outputscale=1.0),
        interp=InterpolationState(z=z.astype(dt), temperatures=np.ones(d, dtype=dt)),
    )

    khat = _study_cross(x.astype(dt), hp)
    shared = khat @ np.repeat(rng.standard_normal(m // 2), 2).astype(dt)
    shared /= np.linalg.norm(shared)
    weak = np.zeros(n, dtype=dt)
    for j in range(m // 2):
        diff = khat[:, 2 * j] - khat[:, 2 * j + 1]
        norm = np.linalg.norm(diff)
        if norm > 0:
            weak += dt.type(rng.standard_normal()) * diff / norm
    norm = np.linalg.norm(weak)
    if norm > 0:
        weak *= dt.type(weak_fraction) / norm
    y = shared + weak
    y = ((y - y.mean()) / y.std()).astype(dt)
    return Dataset(x=x.astype(dt), y=y, stats=None, split="train"), hp


def solver_study(data: Dataset, hp: SoftKIHyperparams,
                 methods=DEFAULT_STUDY_METHODS):
    """Score each solve route by training-set RMSE of the resulting mean.

    Returns a list of (AltSolveResult, rmse) pairs; a failed or non-finite
    solve scores inf so orderings stay well defined.
    """
    khat = _study_cross(data.x, hp)
    rows = []
    for method in methods:
        res = alt_solve(data, hp, method)
        if res.alpha is None or not np.all(np.isfinite(res.alpha)):
            rmse = np.inf
        else:
            mean = khat @ res.alpha
            rmse = float(np.sqrt(np.mean((mean - data.y) ** 2)))
            if not np.isfinite(rmse):
                rmse = np.inf
        rows.append((res, rmse))
    return rows


def _study_cross(x: np.ndarray, hp: SoftKIHyperparams) -> np.ndarray:
    k_zz = matern32(hp.interp.z, hp.interp.z, hp.kernel)
    return softmax_weights(x, hp.interp) @ k_zz
