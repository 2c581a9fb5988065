"""Matern-3/2 kernel with per-dimension lengthscales and an output scale.

k(x, z) = s2 * (1 + sqrt(3) r) exp(-sqrt(3) r),  r = ||(x - z) / ell||_2

with the division taken elementwise. The kernel is once differentiable;
derivatives with respect to inputs and lengthscales stay finite at r = 0
(the r in the denominator cancels), and the gradient at exactly coincident
inputs is 0.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

SQRT3 = float(np.sqrt(3.0))  # python float: keeps float32 operands in float32

LENGTHSCALE_MIN = 0.01
LENGTHSCALE_MAX = 5.0


@dataclass
class MaternParams:
    """Constrained kernel hyperparameters.

    lengthscales: (d,) positive, kept inside [LENGTHSCALE_MIN, LENGTHSCALE_MAX]
    outputscale:  scalar variance s2 > 0
    """

    lengthscales: np.ndarray
    outputscale: float
    bounds: tuple = field(default=(LENGTHSCALE_MIN, LENGTHSCALE_MAX), repr=False)

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales))
        if self.lengthscales.dtype.kind != "f":
            self.lengthscales = self.lengthscales.astype(float)
        self.outputscale = float(self.outputscale)
        lo, hi = self.bounds
        if np.any(self.lengthscales < lo) or np.any(self.lengthscales > hi):
            raise ValueError(f"lengthscales must lie in [{lo}, {hi}]")
        if self.outputscale <= 0:
            raise ValueError("outputscale must be positive")


def scaled_distance(x: np.ndarray, z: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise ||(x_i - z_j) / ell||_2 without an (n, m, d) intermediate."""
    x = np.asarray(x)
    z = np.asarray(z)
    if x.shape[1] != z.shape[1]:
        raise DimensionMismatch(f"x has d={x.shape[1]} but z has d={z.shape[1]}")
    ell = np.asarray(lengthscales, dtype=x.dtype)
    xs = x / ell
    zs = z / ell
    sq = (
        np.sum(xs * xs, axis=1)[:, None]
        + np.sum(zs * zs, axis=1)[None, :]
        - 2.0 * (xs @ zs.T)
    )
    # expanded-norm form can go slightly negative from cancellation
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def matern32(x: np.ndarray, z: np.ndarray, params: MaternParams) -> np.ndarray:
    """Kernel matrix K with K[i, j] = k(x_i, z_j)."""
    r = scaled_distance(x, z, params.lengthscales)
    sr = SQRT3 * r
    return params.outputscale * (1.0 + sr) * np.exp(-sr)


@dataclass
class MaternGrads:
    lengthscales: np.ndarray        # (d,)
    outputscale: float
    x: np.ndarray | None = None     # (n, d)
    z: np.ndarray | None = None     # (m, d)


def matern32_param_grads(
    x: np.ndarray,
    z: np.ndarray,
    params: MaternParams,
    upstream: np.ndarray,
    want_x: bool = False,
    want_z: bool = True,
) -> MaternGrads:
    """Contract dK/dtheta with an upstream sensitivity matrix.

    Returns sum_ij upstream[i, j] * dK[i, j]/dtheta for theta in
    {lengthscales, outputscale} and, on request, the input-point gradients
    (z for learning interpolation/inducing points; x for completeness).

    When x and z are the same points, K depends on them through both slots;
    callers pass want_x=want_z=True and add the two pieces.

    Derivatives used (r cancels, so everything is finite at r = 0):
        dk/d ell_c = 3 s2 e^{-sqrt(3) r} (x_c - z_c)^2 / ell_c^3
        dk/d x_c   = -3 s2 e^{-sqrt(3) r} (x_c - z_c) / ell_c^2
        dk/d z_c   = -dk/d x_c
        dk/d s2    = k / s2
    """
    x = np.asarray(x)
    z = np.asarray(z)
    upstream = np.asarray(upstream)
    if upstream.shape != (x.shape[0], z.shape[0]):
        raise DimensionMismatch(
            f"upstream shape {upstream.shape} != ({x.shape[0]}, {z.shape[0]})"
        )
    ell = params.lengthscales
    s2 = params.outputscale

    r = scaled_distance(x, z, ell)
    e = np.exp(-SQRT3 * r)
    k = s2 * (1.0 + SQRT3 * r) * e

    w = upstream * (3.0 * s2 * e)           # shared factor, (n, m)
    row = w.sum(axis=1)                      # (n,)
    col = w.sum(axis=0)                      # (m,)
    wz = w @ z                               # (n, d)

    # sum_ij w_ij (x_ic - z_jc)^2 expanded to avoid an (n, m, d) array
    g_ell = (x * x).T @ row - 2.0 * np.einsum("ic,ic->c", x, wz) + (z * z).T @ col
    g_ell /= ell**3

    g_s2 = float(np.sum(upstream * k) / s2)

    g_x = None
    g_z = None
    inv2 = 1.0 / ell**2
    if want_x:
        g_x = -(x * row[:, None] - wz) * inv2[None, :]
    if want_z:
        g_z = (w.T @ x - z * col[:, None]) * inv2[None, :]
    return MaternGrads(lengthscales=g_ell, outputscale=g_s2, x=g_x, z=g_z)
