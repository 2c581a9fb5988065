"""Softmax interpolation weights from data points onto learned interpolation
points, and the low-rank kernel approximation built from them.

Row i of the weight matrix is a softmax over interpolation points:

    W[i, j] = exp(-||x_i / T - z_j||_2) / sum_k exp(-||x_i / T - z_k||_2)

T is a per-dimension temperature dividing the data coordinates only (the
interpolation points are not divided), so T = 1 recovers the plain scheme.
The approximate cross covariance is  Khat = W K_zz  and the approximate Gram
matrix is  W K_zz W^T.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveTemperature
from .kernel import MaternParams, matern32, scaled_distance


@dataclass
class InterpolationState:
    """Learned interpolation points and per-dimension temperatures."""

    z: np.ndarray              # (m, d)
    temperatures: np.ndarray   # (d,) strictly positive

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z))
        self.temperatures = np.atleast_1d(np.asarray(self.temperatures))
        if self.z.dtype.kind != "f":
            self.z = self.z.astype(float)
        if self.temperatures.dtype.kind != "f":
            self.temperatures = self.temperatures.astype(float)
        if self.temperatures.shape[0] != self.z.shape[1]:
            raise DimensionMismatch(
                f"{self.temperatures.shape[0]} temperatures for d={self.z.shape[1]}"
            )
        if np.any(self.temperatures <= 0) or not np.all(np.isfinite(self.temperatures)):
            raise NonPositiveTemperature("temperatures must be finite and > 0")


def softmax_weights(x: np.ndarray, state: InterpolationState) -> np.ndarray:
    """Row-stochastic (n, m) weight matrix, computed with max-subtraction."""
    w, _ = _weights_and_distance(x, state)
    return w


def _weights_and_distance(x: np.ndarray, state: InterpolationState):
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionMismatch(f"expected (n, d) inputs, got {x.shape}")
    if x.shape[1] != state.z.shape[1]:
        raise DimensionMismatch(f"x has d={x.shape[1]} but z has d={state.z.shape[1]}")
    temps = state.temperatures.astype(x.dtype)
    xt = x / temps
    ones = np.ones(x.shape[1], dtype=x.dtype)
    dist = scaled_distance(xt, state.z.astype(x.dtype), ones)
    logits = -dist
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w, dist


def softmax_weights_backward(
    x: np.ndarray,
    state: InterpolationState,
    upstream: np.ndarray,
):
    """Chain an upstream dL/dW through the softmax onto z and T.

    Returns (g_z, g_temps). Distance gradients at coincident points
    (d_ij = 0) are taken as 0.
    """
    x = np.asarray(x, dtype=float)
    w, dist = _weights_and_distance(x, state)
    if upstream.shape != w.shape:
        raise DimensionMismatch(f"upstream shape {upstream.shape} != {w.shape}")

    # softmax backward: dL/d logits = W * (U - rowsum(U * W))
    rowdot = np.einsum("ij,ij->i", upstream, w)
    v = w * (upstream - rowdot[:, None])

    # logits = -d_ij, d_ij = ||x/T - z_j||; zero distance contributes zero
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(dist > 0, v / dist, 0.0)

    temps = state.temperatures
    xt = x / temps
    arow = a.sum(axis=1)                       # (n,)
    acol = a.sum(axis=0)                       # (m,)

    # d logits_ij / d z_j = (xt_i - z_j) / d_ij
    g_z = a.T @ xt - state.z * acol[:, None]

    # d logits_ij / d T_c = (xt_ic - z_jc) x_ic / (d_ij T_c^2)
    az = a @ state.z                           # (n, d)
    g_t = (x * xt * arow[:, None] - x * az).sum(axis=0) / temps**2
    return g_z, g_t


def softki_cross(x: np.ndarray, state: InterpolationState, params: MaternParams):
    """Weights, interpolation-point Gram matrix, and the product Khat = W K_zz."""
    w = softmax_weights(x, state)
    k_zz = matern32(state.z, state.z, params)
    return w, k_zz, w @ k_zz


def softki_gram(x: np.ndarray, state: InterpolationState, params: MaternParams) -> np.ndarray:
    """Dense (n, n) approximate Gram matrix W K_zz W^T. Test-scale helper."""
    w, k_zz, khat = softki_cross(x, state, params)
    return khat @ w.T
