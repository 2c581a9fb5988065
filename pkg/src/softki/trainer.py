"""Minibatch hyperparameter training.

The loop is Algorithm-style: k-means initializes the interpolation points,
then Adam takes ascent steps on the stabilized objective, one shuffled pass
over the data per epoch (the last short batch is kept and normalized by its
own size). Everything is driven by (seed, config, data) so two identical runs
produce bitwise-identical parameters.

Optimization happens on unconstrained variables: noise, output scale and
temperatures through softplus (plus a small floor), lengthscales through a
sigmoid scaled onto their allowed interval, interpolation points raw.
"""

import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import transforms
from .baselines import SGPRHyperparams, exact_gp_mll, sgpr_elbo
from .data import Dataset
from .errors import TooFewPoints
from .interp import InterpolationState
from .kernel import LENGTHSCALE_MAX, LENGTHSCALE_MIN, MaternParams
from .objective import (
    Gradients,
    ObjectiveConfig,
    SoftKIHyperparams,
    stabilized_objective,
)

NOISE_FLOOR = 1e-4
SCALE_FLOOR = 1e-8
TEMP_FLOOR = 1e-6

# fixed stream tags so each RNG consumer is independent of the others
_KMEANS, _SHUFFLE, _PROBES = 11, 13, 17


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1024
    learning_rate: float = 0.01
    probes: int = 10
    seed: int = 0
    objective_mode: str = "auto"        # auto | exact | pseudoloss
    cg_tol: float = 1e-6
    cg_max_iters: int = 500
    m: int = 512
    noise_init: float = 0.5
    lengthscale_init: float = 1.0
    outputscale_init: float = 1.0
    temperature_init: float = 1.0
    lr_step_epochs: int = 0             # 0 disables step decay
    lr_step_factor: float = 0.5
    dtype: str = "float64"
    scale_trace: bool = True


@dataclass
class TrainTrace:
    epoch_objectives: list = field(default_factory=list)   # mean per-point value
    epoch_seconds: list = field(default_factory=list)
    mode_counts: dict = field(default_factory=lambda: {"exact": 0, "pseudoloss": 0})
    failed_batches: int = 0
    threads: int = 1
    config: dict = field(default_factory=dict)


def blas_threads() -> int:
    for var in ("SOFTKI_THREADS", "OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        val = os.environ.get(var)
        if val:
            try:
                return int(val)
            except ValueError:
                pass
    return os.cpu_count() or 1


class Adam:
    """Ascent-form Adam on a dict of named arrays."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        for key, g in grads.items():
            g = np.asarray(g, dtype=float)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1**self.t)
            vhat = self.v[key] / (1 - self.beta2**self.t)
            self.params[key] = self.params[key] + lr * mhat / (np.sqrt(vhat) + self.eps)


def kmeans(x: np.ndarray, m: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Runs to an assignment fixpoint or max_iters; empty clusters are reseeded
    to the point currently farthest from its nearest centroid.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < m:
        raise TooFewPoints(f"need at least {m} points, got {n}")
    rng = _rng(seed, _KMEANS)

    centroids = np.empty((m, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))

    assign = None
    for _ in range(max_iters):
        d2_all = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ centroids.T
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        new_assign = np.argmin(d2_all, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        nearest = d2_all[np.arange(n), assign]
        for j in range(m):
            mask = assign == j
            if mask.any():
                centroids[j] = x[mask].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                centroids[j] = x[far]
                nearest[far] = 0.0
    return centroids


# --------------------------------------------------------------------------
# raw <-> constrained parameter plumbing


def softki_raw_init(z0: np.ndarray, cfg: TrainConfig, d: int) -> dict:
    return {
        "noise": np.atleast_1d(transforms.softplus_inv(cfg.noise_init - NOISE_FLOOR)),
        "lengthscales": transforms.bounded_sigmoid_inv(
            np.full(d, cfg.lengthscale_init), LENGTHSCALE_MIN, LENGTHSCALE_MAX
        ),
        "outputscale": np.atleast_1d(
            transforms.softplus_inv(cfg.outputscale_init - SCALE_FLOOR)
        ),
        "z": np.array(z0, dtype=float),
        "temperatures": transforms.softplus_inv(
            np.full(d, cfg.temperature_init) - TEMP_FLOOR
        ),
    }


def softki_from_raw(raw: dict) -> SoftKIHyperparams:
    return SoftKIHyperparams(
        noise=float(NOISE_FLOOR + transforms.softplus(raw["noise"])[0]),
        kernel=MaternParams(
            lengthscales=transforms.bounded_sigmoid(
                raw["lengthscales"], LENGTHSCALE_MIN, LENGTHSCALE_MAX
            ),
            outputscale=float(SCALE_FLOOR + transforms.softplus(raw["outputscale"])[0]),
        ),
        interp=InterpolationState(
            z=raw["z"],
            temperatures=TEMP_FLOOR + transforms.softplus(raw["temperatures"]),
        ),
    )


def softki_chain(grads: Gradients, raw: dict) -> dict:
    """Map constrained-space gradients onto the unconstrained variables."""
    return {
        "noise": np.atleast_1d(grads.noise) * transforms.softplus_deriv(raw["noise"]),
        "lengthscales": grads.lengthscales * transforms.bounded_sigmoid_deriv(
            raw["lengthscales"], LENGTHSCALE_MIN, LENGTHSCALE_MAX
        ),
        "outputscale": np.atleast_1d(grads.outputscale)
        * transforms.softplus_deriv(raw["outputscale"]),
        "z": grads.z,
        "temperatures": grads.temperatures
        * transforms.softplus_deriv(raw["temperatures"]),
    }


def sgpr_raw_init(z0: np.ndarray, cfg: TrainConfig, d: int) -> dict:
    raw = softki_raw_init(z0, cfg, d)
    del raw["temperatures"]
    return raw


def sgpr_from_raw(raw: dict) -> SGPRHyperparams:
    return SGPRHyperparams(
        noise=float(NOISE_FLOOR + transforms.softplus(raw["noise"])[0]),
        kernel=MaternParams(
            lengthscales=transforms.bounded_sigmoid(
                raw["lengthscales"], LENGTHSCALE_MIN, LENGTHSCALE_MAX
            ),
            outputscale=float(SCALE_FLOOR + transforms.softplus(raw["outputscale"])[0]),
        ),
        z=raw["z"],
    )


def sgpr_chain(grads: Gradients, raw: dict) -> dict:
    return {
        "noise": np.atleast_1d(grads.noise) * transforms.softplus_deriv(raw["noise"]),
        "lengthscales": grads.lengthscales * transforms.bounded_sigmoid_deriv(
            raw["lengthscales"], LENGTHSCALE_MIN, LENGTHSCALE_MAX
        ),
        "outputscale": np.atleast_1d(grads.outputscale)
        * transforms.softplus_deriv(raw["outputscale"]),
        "z": grads.z,
    }


# --------------------------------------------------------------------------
# training loops


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _run_loop(data: Dataset, cfg: TrainConfig, from_raw, chain, objective, raw):
    x, y = data.x, data.y
    n = y.shape[0]
    adam = Adam(raw, cfg.learning_rate)
    trace = TrainTrace(threads=blas_threads(), config=asdict(cfg))
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.learning_rate
        if cfg.lr_step_epochs > 0:
            lr *= cfg.lr_step_factor ** (epoch // cfg.lr_step_epochs)
        batch_values = []
        for idx in _epoch_batches(n, cfg.batch_size, _rng(cfg.seed, _SHUFFLE, epoch)):
            hp = from_raw(adam.params)
            report = objective(x[idx], y[idx], hp, cfg, step)
            nb = idx.shape[0]
            batch_values.append(report.value / nb)
            trace.mode_counts[report.mode_used] = (
                trace.mode_counts.get(report.mode_used, 0) + 1
            )
            if report.is_finite():
                grads = chain(report.gradients, adam.params)
                adam.step({k: np.asarray(v) / nb for k, v in grads.items()}, lr=lr)
            else:
                trace.failed_batches += 1
            step += 1
        trace.epoch_objectives.append(float(np.mean(batch_values)))
        trace.epoch_seconds.append(time.perf_counter() - t0)
    return from_raw(adam.params), trace


def train(data: Dataset, cfg: TrainConfig):
    """Train interpolation-GP hyperparameters; returns (hyperparams, trace)."""
    z0 = kmeans(data.x, cfg.m, seed=cfg.seed)
    raw = softki_raw_init(z0, cfg, data.x.shape[1])

    def objective(xb, yb, hp, cfg, step):
        ocfg = ObjectiveConfig(
            mode=cfg.objective_mode,
            probes=cfg.probes,
            probe_seed=np.random.SeedSequence([cfg.seed, _PROBES, step]),
            cg_tol=cfg.cg_tol,
            cg_max_iters=cfg.cg_max_iters,
            scale_trace=cfg.scale_trace,
            dtype=cfg.dtype,
        )
        return stabilized_objective(xb, yb, hp, ocfg)

    return _run_loop(data, cfg, softki_from_raw, softki_chain, objective, raw)


def train_sgpr(data: Dataset, cfg: TrainConfig):
    """Full-batch SGPR training with the same loop and optimizer."""
    z0 = kmeans(data.x, cfg.m, seed=cfg.seed)
    raw = sgpr_raw_init(z0, cfg, data.x.shape[1])
    full = TrainConfig(**{**asdict(cfg), "batch_size": len(data)})

    def objective(xb, yb, hp, cfg, step):
        return sgpr_elbo(xb, yb, hp)

    return _run_loop(data, full, sgpr_from_raw, sgpr_chain, objective, raw)


def train_exact(data: Dataset, cfg: TrainConfig):
    """Full-batch exact GP hyperparameter training (dense, small n only)."""
    raw = {
        "noise": np.atleast_1d(transforms.softplus_inv(cfg.noise_init - NOISE_FLOOR)),
        "lengthscales": transforms.bounded_sigmoid_inv(
            np.full(data.x.shape[1], cfg.lengthscale_init),
            LENGTHSCALE_MIN, LENGTHSCALE_MAX,
        ),
        "outputscale": np.atleast_1d(
            transforms.softplus_inv(cfg.outputscale_init - SCALE_FLOOR)
        ),
    }

    def from_raw(raw):
        return {
            "noise": float(NOISE_FLOOR + transforms.softplus(raw["noise"])[0]),
            "kernel": MaternParams(
                lengthscales=transforms.bounded_sigmoid(
                    raw["lengthscales"], LENGTHSCALE_MIN, LENGTHSCALE_MAX
                ),
                outputscale=float(SCALE_FLOOR + transforms.softplus(raw["outputscale"])[0]),
            ),
        }

    def chain(grads, raw):
        out = sgpr_chain(grads, raw)
        del out["z"]
        return out

    def objective(xb, yb, hp, cfg, step):
        return exact_gp_mll(xb, yb, hp["noise"], hp["kernel"])

    full = TrainConfig(**{**asdict(cfg), "batch_size": len(data)})
    return _run_loop(data, full, from_raw, chain, objective, raw)
