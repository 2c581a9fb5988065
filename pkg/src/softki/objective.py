"""Training objectives for the softmax-interpolation GP.

The model covariance of a batch is D = W K_zz W^T + beta^2 I with W the
row-stochastic interpolation weights. The exact marginal log likelihood

    value = -1/2 [ y^T D^-1 y + log det D + n log(2 pi) ]

is evaluated either through the low-rank structure (Cholesky of K_zz plus the
matrix determinant lemma, never materializing D) or through a dense Cholesky
of D itself; the two paths agree to rounding and the dense one exists for
cross-checks at small n.

When K_zz stops being numerically positive definite, or the exact value or
gradient goes non-finite, a Hutchinson-style pseudoloss takes over: solve
D [u_0, u_1..u_l] = [y, w_1..w_l] by conjugate gradients with unit-norm
Gaussian probes w_j, then

    value = -1/2 [ u_0^T D u_0 + (1/l) sum_j u_j^T (D w_j) ]

with the solutions u treated as constants with respect to the hyperparameters
(no differentiation through the solver). Gradients of both objectives share
one assembly: for any symmetric sensitivity G with dL = <G, dD>,

    dL/d beta   = 2 beta tr(G)
    dL/d K_zz   = W^T G W      (kernel parameters and z through K_zz)
    dL/d W      = 2 G W K_zz   (z and temperatures through the softmax)

For the exact objective G = (a a^T - D^-1)/2 with a = D^-1 y; for the
pseudoloss G = u_0 u_0^T / 2 - (c / 2l) sym(sum_j u_j w_j^T), where c = n
by default: the probes have unit norm, so E[w w^T] = I/n and the trace
estimate must be scaled by n to target tr(D^-1 dD). ``scale_trace=False``
keeps the unscaled form.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite, ObjectiveFailed
from .interp import InterpolationState, softmax_weights, softmax_weights_backward
from .kernel import MaternParams, matern32, matern32_param_grads

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class SoftKIHyperparams:
    """Noise standard deviation, kernel parameters, interpolation state."""

    noise: float
    kernel: MaternParams
    interp: InterpolationState

    def __post_init__(self):
        self.noise = float(self.noise)
        if self.noise <= 0:
            raise ValueError("noise must be positive")


@dataclass
class Gradients:
    """Derivatives of an objective with respect to the constrained parameters."""

    noise: float
    lengthscales: np.ndarray
    outputscale: float
    z: Optional[np.ndarray] = None
    temperatures: Optional[np.ndarray] = None

    def arrays(self):
        out = {"noise": np.asarray(self.noise), "lengthscales": self.lengthscales,
               "outputscale": np.asarray(self.outputscale)}
        if self.z is not None:
            out["z"] = self.z
        if self.temperatures is not None:
            out["temperatures"] = self.temperatures
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    @staticmethod
    def nan_like(hp: "SoftKIHyperparams") -> "Gradients":
        d = hp.kernel.lengthscales.shape[0]
        return Gradients(
            noise=np.nan,
            lengthscales=np.full(d, np.nan),
            outputscale=np.nan,
            z=np.full_like(hp.interp.z, np.nan),
            temperatures=np.full(d, np.nan),
        )


@dataclass
class ObjectiveReport:
    value: float
    gradients: Gradients
    mode_used: str                      # "exact" or "pseudoloss"
    diagnostics: dict = field(default_factory=dict)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value)) and self.gradients.is_finite()


@dataclass
class ObjectiveConfig:
    mode: str = "auto"                  # auto | exact | pseudoloss
    probes: int = 10
    probe_seed: object = 0              # anything default_rng accepts
    cg_tol: float = 1e-6
    cg_max_iters: int = 500
    scale_trace: bool = True
    dtype: str = "float64"


def draw_probes(n: int, count: int, seed) -> np.ndarray:
    """(n, count) Gaussian probe vectors, each normalized to unit length."""
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((n, count))
    p /= np.linalg.norm(p, axis=0, keepdims=True)
    return p


def _assemble_gradients(x, hp, w, g_k, g_w, tr_g) -> Gradients:
    """Map sensitivities on (K_zz, W, beta) to parameter gradients."""
    kg = matern32_param_grads(
        hp.interp.z, hp.interp.z, hp.kernel, np.asarray(g_k, dtype=float),
        want_x=True, want_z=True,
    )
    z_soft, g_t = softmax_weights_backward(
        np.asarray(x, dtype=float), hp.interp, np.asarray(g_w, dtype=float)
    )
    return Gradients(
        noise=2.0 * hp.noise * float(tr_g),
        lengthscales=kg.lengthscales,
        outputscale=kg.outputscale,
        z=kg.x + kg.z + z_soft,
        temperatures=g_t,
    )


def exact_mll(
    x: np.ndarray,
    y: np.ndarray,
    hp: SoftKIHyperparams,
    path: str = "lowrank",
    jitter_schedule=None,
    dtype="float64",
) -> ObjectiveReport:
    """Exact marginal log likelihood of one batch, with analytic gradients.

    path="lowrank" factorizes K_zz and the m-by-m inner matrix only;
    path="dense" factorizes D itself (test-scale cross-check).
    Raises NotPositiveDefinite when the required Cholesky fails after the
    jitter schedule.
    """
    dt = np.dtype(dtype)
    x = np.asarray(x, dtype=dt)
    y = np.asarray(y, dtype=dt)
    n = y.shape[0]
    beta = dt.type(hp.noise)
    beta2 = beta * beta

    # the working dtype applies to the whole assembly: in float32 mode the
    # kernel distances themselves are computed in float32, which is where
    # near-coincident interpolation points destabilize the factorization
    z = hp.interp.z.astype(dt, copy=False)
    w = softmax_weights(x, hp.interp).astype(dt)
    k_zz = matern32(z, z, hp.kernel)
    m = k_zz.shape[0]

    diag = {}
    if path == "dense":
        d_mat = w @ k_zz @ w.T + beta2 * np.eye(n, dtype=dt)
        u_d, jit = linalg.cholesky_upper(d_mat, jitter_schedule)
        diag["jitter"] = jit
        a = linalg.tri_solve_upper(u_d, linalg.tri_solve_upper(u_d, y, transpose=True))
        quad = float(y @ a)
        logdet = 2.0 * float(np.sum(np.log(np.diagonal(u_d))))
        d_inv = linalg.tri_solve_upper(
            u_d, linalg.tri_solve_upper(u_d, np.eye(n, dtype=dt), transpose=True)
        )
        g = 0.5 * (np.outer(a, a) - d_inv)
        g_k = w.T @ g @ w
        g_w = 2.0 * g @ (w @ k_zz)
        tr_g = float(np.trace(g))
    elif path == "lowrank":
        u_zz, jit = linalg.cholesky_upper(k_zz, jitter_schedule)
        diag["jitter"] = jit
        b = w @ u_zz.T                                   # B B^T = W K_zz W^T
        m_mat = beta2 * np.eye(m, dtype=dt) + b.T @ b
        u_m, jit_m = linalg.cholesky_upper(m_mat, jitter_schedule)
        diag["jitter_inner"] = jit_m

        def m_solve(v):
            return linalg.tri_solve_upper(
                u_m, linalg.tri_solve_upper(u_m, v, transpose=True)
            )

        a = (y - b @ m_solve(b.T @ y)) / beta2           # D^-1 y by Woodbury
        quad = float(y @ a)
        logdet = (n - m) * float(np.log(beta2)) + 2.0 * float(
            np.sum(np.log(np.diagonal(u_m)))
        )

        u_m_inv = linalg.tri_solve_upper(u_m, np.eye(m, dtype=dt))
        tr_m_inv = float(np.sum(u_m_inv * u_m_inv))
        tr_d_inv = (n - m + beta2 * tr_m_inv) / beta2

        wk = w @ k_zz
        wt_b = w.T @ b
        g_k = 0.5 * (
            np.outer(w.T @ a, w.T @ a)
            - (w.T @ w - wt_b @ m_solve(wt_b.T)) / beta2
        )
        d_inv_wk = (wk - b @ m_solve(b.T @ wk)) / beta2
        g_w = np.outer(a, a @ wk) - d_inv_wk
        tr_g = 0.5 * (float(a @ a) - tr_d_inv)
    else:
        raise ValueError(f"unknown path {path!r}")

    value = -0.5 * (quad + logdet + n * LOG_2PI)
    grads = _assemble_gradients(x, hp, w, g_k, g_w, tr_g)
    return ObjectiveReport(value=float(value), gradients=grads, mode_used="exact",
                           diagnostics=diag)


def hutchinson_pseudoloss(
    x: np.ndarray,
    y: np.ndarray,
    hp: SoftKIHyperparams,
    probes: np.ndarray,
    cg_tol: float = 1e-6,
    cg_max_iters: int = 500,
    scale_trace: bool = True,
    dtype="float64",
) -> ObjectiveReport:
    """Factorization-free objective: CG solves against D, probe-based trace.

    The CG solutions are constants of the gradient (the solver is not
    differentiated through). The value keeps the literal unscaled trace term;
    the gradient's trace estimate is scaled by n when scale_trace is on, so it
    targets the exact gradient's tr(D^-1 dD).
    """
    dt = np.dtype(dtype)
    x = np.asarray(x, dtype=dt)
    y = np.asarray(y, dtype=dt)
    probes = np.asarray(probes, dtype=dt)
    n = y.shape[0]
    ell = probes.shape[1]
    beta2 = dt.type(hp.noise) ** 2

    z = hp.interp.z.astype(dt, copy=False)
    w = softmax_weights(x, hp.interp).astype(dt)
    k_zz = matern32(z, z, hp.kernel)

    def matvec(v):
        return w @ (k_zz @ (w.T @ v)) + beta2 * v

    rhs = np.concatenate([y[:, None], probes], axis=1)
    rep = linalg.block_cg(matvec, rhs, tol=cg_tol, max_iters=cg_max_iters)
    u0 = rep.solutions[:, 0]
    us = rep.solutions[:, 1:]

    d_probes = matvec(probes)
    value = -0.5 * (float(u0 @ matvec(u0)) + float(np.mean(
        np.einsum("ij,ij->j", us, d_probes)
    )))

    c = float(n) if scale_trace else 1.0
    wk = w @ k_zz
    wu0 = w.T @ u0
    ws = w.T @ us
    wp = w.T @ probes
    g_k = 0.5 * np.outer(wu0, wu0) - (c / (4.0 * ell)) * (ws @ wp.T + wp @ ws.T)
    g_w = np.outer(u0, u0 @ wk) - (c / (2.0 * ell)) * (
        us @ (probes.T @ wk) + probes @ (us.T @ wk)
    )
    tr_g = 0.5 * float(u0 @ u0) - (c / (2.0 * ell)) * float(
        np.einsum("ij,ij->", us, probes)
    )

    grads = _assemble_gradients(x, hp, w, g_k, g_w, tr_g)
    return ObjectiveReport(
        value=float(value),
        gradients=grads,
        mode_used="pseudoloss",
        diagnostics={
            "cg_iterations": rep.iterations,
            "cg_converged": rep.converged,
            "cg_max_residual": float(rep.final_residual_norms.max()),
        },
    )


def stabilized_objective(
    x: np.ndarray,
    y: np.ndarray,
    hp: SoftKIHyperparams,
    cfg: ObjectiveConfig,
) -> ObjectiveReport:
    """Exact MLL with automatic fallback to the pseudoloss.

    mode="auto": try the exact objective; on NotPositiveDefinite or any
    non-finite value/gradient, recompute with the pseudoloss. Raises
    ObjectiveFailed only if both are non-finite. Forced modes run a single
    objective and report nan on failure instead of raising.
    """
    failure = None
    if cfg.mode in ("auto", "exact"):
        try:
            rep = exact_mll(x, y, hp, path="lowrank", dtype=cfg.dtype)
            if rep.is_finite():
                return rep
            failure = "non-finite exact value or gradient"
        except NotPositiveDefinite as err:
            failure = str(err)
        if cfg.mode == "exact":
            return ObjectiveReport(
                value=float("nan"),
                gradients=Gradients.nan_like(hp),
                mode_used="exact",
                diagnostics={"failure": failure},
            )

    probes = draw_probes(y.shape[0], cfg.probes, cfg.probe_seed)
    rep = hutchinson_pseudoloss(
        x, y, hp, probes,
        cg_tol=cfg.cg_tol, cg_max_iters=cfg.cg_max_iters,
        scale_trace=cfg.scale_trace, dtype=cfg.dtype,
    )
    if failure is not None:
        rep.diagnostics["fallback_reason"] = failure
    if rep.is_finite():
        return rep
    if cfg.mode == "pseudoloss":
        return ObjectiveReport(
            value=float("nan"),
            gradients=Gradients.nan_like(hp),
            mode_used="pseudoloss",
            diagnostics=rep.diagnostics,
        )
    raise ObjectiveFailed(
        f"exact objective failed ({failure}); pseudoloss non-finite as well"
    )