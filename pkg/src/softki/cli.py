"""Command-line surface: train, eval, and bench subcommands.

Every flag has a config-file equivalent (``key = value`` lines, flag spelling
without the leading dashes); precedence is defaults < config file < explicit
flags. The resolved config is echoed into each report so a run can be replayed
from its report alone. Reports are key-value text, tables are CSV.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import linalg
from . import report as rpt
from .baselines import ExactGP, sgpr_fit, sgpr_test_metrics
from .data import (
    Dataset,
    apply_stats,
    identity_stats,
    load_csv,
    ricker_dataset,
    ricker_raw,
    split_raw,
    split_standardize,
)
from .errors import DimensionMismatch, SoftKIError
from .kernel import matern32
from .posterior import (
    DEFAULT_STUDY_METHODS,
    FittedPosterior,
    alt_solve,
    fit_qr,
    gaussian_nll,
    near_degenerate_instance,
    solver_study,
    test_metrics,
)
from .trainer import TrainConfig, blas_threads, train, train_exact, train_sgpr


def _to_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _to_solver(text: str) -> str:
    if text in ("qr", "direct", "cholesky"):
        return text
    if text.startswith("cg:"):
        float(text.split(":", 1)[1])  # validates the tolerance
        return text
    raise ValueError(f"expected qr, direct, cholesky, or cg:<tol>, got {text!r}")


@dataclass(frozen=True)
class _Opt:
    convert: object
    default: object
    help: str = ""
    choices: tuple | None = None


TRAIN_OPTS = {
    "model": _Opt(str, "softki", "model family", ("softki", "sgpr", "exact")),
    "data": _Opt(str, "ricker", "csv path or the literal 'ricker'"),
    "m": _Opt(int, 512, "number of interpolation / inducing points"),
    "epochs": _Opt(int, 50),
    "batch-size": _Opt(int, 1024),
    "lr": _Opt(float, 0.01, "Adam step size"),
    "probes": _Opt(int, 10, "Hutchinson probe count"),
    "seed": _Opt(int, 0),
    "objective": _Opt(str, "auto", "objective mode",
                      ("auto", "exact", "pseudoloss")),
    "solver": _Opt(_to_solver, "qr", "posterior solve route"),
    "train-frac": _Opt(float, 0.9, "train fraction for csv datasets"),
    "standardize": _Opt(_to_bool, True,
                        "standardize csv data with train-split statistics"),
    "out": _Opt(str, "run", "output directory"),
    "header": _Opt(_to_bool, False, "csv has a header row"),
    "target-column": _Opt(int, -1, "0-based target column, -1 for last"),
    "noise-init": _Opt(float, 0.5),
    "lengthscale-init": _Opt(float, 1.0),
    "outputscale-init": _Opt(float, 1.0),
    "temperature-init": _Opt(float, 1.0),
    "lr-step-epochs": _Opt(int, 0, "halve the step size this often (0 = off)"),
    "lr-step-factor": _Opt(float, 0.5),
    "cg-tol": _Opt(float, 1e-6),
    "cg-max-iters": _Opt(int, 500),
    "dtype": _Opt(str, "float64", "objective dtype", ("float64", "float32")),
}

EVAL_OPTS = {
    "checkpoint": _Opt(str, None, "checkpoint file to evaluate"),
    "data": _Opt(str, "ricker", "csv path or the literal 'ricker'"),
    "split": _Opt(str, "test", "which side of the split", ("train", "test")),
    "train-frac": _Opt(float, 0.9),
    "seed": _Opt(int, 0, "split / dataset seed"),
    "header": _Opt(_to_bool, False),
    "target-column": _Opt(int, -1),
    "dump-predictions": _Opt(_to_bool, False, "write per-point predictions"),
    "out": _Opt(str, "eval-out", "output directory"),
}

BENCH_OPTS = {
    "suite": _Opt(str, None, "suite definition file (key = value lines)"),
    "out": _Opt(str, "bench-out", "output directory"),
}


def _parse_kv_file(path):
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            pairs.append((key.strip(), value.strip()))
    return pairs


def _resolve(opts: dict, args) -> dict:
    values = {name: opt.default for name, opt in opts.items()}
    sources = [("config", _parse_kv_file(args.config))] if args.config else []
    cli_pairs = [
        (name, getattr(args, name.replace("-", "_")))
        for name in opts
        if getattr(args, name.replace("-", "_")) is not None
    ]
    sources.append(("flag", cli_pairs))
    for label, pairs in sources:
        for key, raw in pairs:
            if key not in opts:
                continue  # lets a report file be replayed as a config
            try:
                values[key] = opts[key].convert(raw)
            except ValueError as err:
                raise ValueError(f"bad {label} value for {key}: {err}") from None
            opt = opts[key]
            if opt.choices and values[key] not in opt.choices:
                raise ValueError(
                    f"{key} must be one of {', '.join(map(str, opt.choices))}"
                )
    for name, value in values.items():
        if value is None:
            raise ValueError(f"--{name} is required")
    return values


def _config_echo(opts: dict, values: dict) -> list:
    return [(name, values[name]) for name in opts]


# --------------------------------------------------------------------------
# shared run plumbing


def _load_split(values: dict):
    if values["data"] == "ricker":
        return ricker_dataset(seed=values["seed"])
    full = load_csv(values["data"], header=values["header"],
                    target_column=values["target-column"])
    if values["standardize"]:
        return split_standardize(full, train_fraction=values["train-frac"],
                                 seed=values["seed"])
    # raw passthrough; identity statistics keep checkpoints and the
    # raw-scale metrics well defined
    raw_tr, raw_te = split_raw(full, train_fraction=values["train-frac"],
                               seed=values["seed"])
    stats = identity_stats(full.x.shape[1])
    return (
        Dataset(x=raw_tr.x, y=raw_tr.y, stats=stats, split="train"),
        Dataset(x=raw_te.x, y=raw_te.y, stats=stats, split="test"),
    )


def _train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch-size"],
        learning_rate=values["lr"],
        probes=values["probes"],
        seed=values["seed"],
        objective_mode=values["objective"],
        cg_tol=values["cg-tol"],
        cg_max_iters=values["cg-max-iters"],
        m=values["m"],
        noise_init=values["noise-init"],
        lengthscale_init=values["lengthscale-init"],
        outputscale_init=values["outputscale-init"],
        temperature_init=values["temperature-init"],
        lr_step_epochs=values["lr-step-epochs"],
        lr_step_factor=values["lr-step-factor"],
        dtype=values["dtype"],
    )


def _fit_softki(data, hp, solver: str) -> FittedPosterior:
    if solver == "qr":
        return fit_qr(data, hp)
    res = alt_solve(data, hp, solver)
    if res.alpha is None or not np.all(np.isfinite(res.alpha)):
        raise SoftKIError(f"{solver} solve failed: {res.error or 'non-finite'}")
    # non-QR routes only produce alpha; rebuild triangular factors densely so
    # variances and the checkpoint stay available
    k_zz = matern32(hp.interp.z, hp.interp.z, hp.kernel)
    u_zz, _ = linalg.cholesky_upper(k_zz)
    khat = _cross(data.x, hp)
    chat = k_zz + (khat.T @ khat) / hp.noise**2
    r, _ = linalg.cholesky_upper(chat)
    return FittedPosterior(hp=hp, u_zz=u_zz, r=r, alpha=res.alpha,
                           projected_rhs=r @ res.alpha)


def _cross(x, hp):
    from .interp import softmax_weights

    return softmax_weights(x, hp.interp) @ matern32(hp.interp.z, hp.interp.z,
                                                    hp.kernel)


def _train_model(values: dict, train_data, test_data) -> dict:
    cfg = _train_config(values)
    stats = train_data.stats
    model = values["model"]
    has_test = len(test_data) > 0

    if model == "softki":
        hp, trace = train(train_data, cfg)
        post = _fit_softki(train_data, hp, values["solver"])
        rmse, nll = (test_metrics(post, test_data.x, test_data.y)
                     if has_test else (float("nan"), float("nan")))
        bundle = ckpt.bundle_softki(post, stats, len(train_data))
    elif model == "sgpr":
        if values["solver"] not in ("qr", "direct"):
            raise ValueError(f"solver {values['solver']!r} not supported for sgpr")
        hp, trace = train_sgpr(train_data, cfg)
        post = sgpr_fit(train_data, hp, solver=values["solver"])
        rmse, nll = (sgpr_test_metrics(post, test_data.x, test_data.y)
                     if has_test else (float("nan"), float("nan")))
        bundle = ckpt.bundle_sgpr(post, stats, len(train_data))
    elif model == "exact":
        params, trace = train_exact(train_data, cfg)
        gp = ExactGP.fit(train_data, params["noise"], params["kernel"])
        rmse, nll = (gp.test_metrics(test_data.x, test_data.y)
                     if has_test else (float("nan"), float("nan")))
        bundle = ckpt.bundle_exact(gp, stats)
    else:
        raise ValueError(f"unknown model {model!r}")

    return {
        "metrics": {
            "rmse": float(rmse),
            "nll": float(nll),
            "rmse_raw": float(rmse) * stats.y_std,
        },
        "trace": trace,
        "checkpoint": bundle,
    }


# --------------------------------------------------------------------------
# subcommands


def cmd_train(values: dict, outdir: Path) -> int:
    train_data, test_data = _load_split(values)
    result = _train_model(values, train_data, test_data)
    trace, bundle = result["trace"], result["checkpoint"]
    ckpt.save_checkpoint(outdir / "checkpoint.bin", bundle)

    objectives = trace.epoch_objectives
    lines = _config_echo(TRAIN_OPTS, values) + [
        ("n_train", len(train_data)),
        ("n_test", len(test_data)),
        ("rmse", result["metrics"]["rmse"]),
        ("nll", result["metrics"]["nll"]),
        ("rmse_raw", result["metrics"]["rmse_raw"]),
        ("noise", bundle.noise),
        ("outputscale", bundle.outputscale),
        ("final_objective", objectives[-1] if objectives else float("nan")),
        ("epochs_run", len(objectives)),
        ("seconds_total", float(sum(trace.epoch_seconds))),
        ("threads", trace.threads),
        ("failed_batches", trace.failed_batches),
    ] + [(f"mode_{mode}", count) for mode, count in sorted(trace.mode_counts.items())]
    rpt.write_kv(outdir / "report.txt", lines)

    rpt.write_csv(
        outdir / "trace.csv",
        ["epoch", "objective", "seconds"],
        [(i, obj, sec) for i, (obj, sec)
         in enumerate(zip(objectives, trace.epoch_seconds))],
    )
    dump_rows = [("lengthscale", i, v)
                 for i, v in enumerate(bundle.lengthscales)]
    dump_rows += [("temperature", i, v)
                  for i, v in enumerate(bundle.temperatures)]
    rpt.write_csv(outdir / "hyperparams.csv", ["kind", "dim", "value"], dump_rows)

    for key in ("rmse", "nll", "rmse_raw"):
        print(f"{key} = {rpt.format_value(result['metrics'][key])}")
    print(f"wrote {outdir / 'checkpoint.bin'}")
    return 0


def _load_raw_split(values: dict):
    if values["data"] == "ricker":
        raw_tr, raw_te = ricker_raw(seed=values["seed"])
    else:
        full = load_csv(values["data"], header=values["header"],
                        target_column=values["target-column"])
        raw_tr, raw_te = split_raw(full, train_fraction=values["train-frac"],
                                   seed=values["seed"])
    return raw_tr if values["split"] == "train" else raw_te


def cmd_eval(values: dict, outdir: Path) -> int:
    bundle = ckpt.load_checkpoint(values["checkpoint"])
    raw = _load_raw_split(values)
    if len(raw) == 0:
        raise ValueError("selected split has no points")
    if raw.x.shape[1] != bundle.d:
        raise DimensionMismatch(
            f"checkpoint expects d={bundle.d}, data has d={raw.x.shape[1]}"
        )
    xs, ys = apply_stats(raw.x, raw.y, bundle.stats)
    mean_fn, var_fn = ckpt.restore(bundle)
    mean = mean_fn(xs)
    var = var_fn(xs)
    rmse = float(np.sqrt(np.mean((mean - ys) ** 2)))
    nll = gaussian_nll(ys, mean, var + bundle.noise**2)
    rmse_raw = rmse * bundle.stats.y_std

    lines = _config_echo(EVAL_OPTS, values) + [
        ("variant", bundle.variant),
        ("n_points", len(raw)),
        ("rmse", rmse),
        ("nll", nll),
        ("rmse_raw", rmse_raw),
    ]
    rpt.write_kv(outdir / "report.txt", lines)
    if values["dump-predictions"]:
        stats = bundle.stats
        rows = [
            (i, mean[i], var[i], ys[i], mean[i] * stats.y_std + stats.y_mean)
            for i in range(len(raw))
        ]
        rpt.write_csv(outdir / "predictions.csv",
                      ["index", "mean", "var", "target", "raw_mean"], rows)
    for key, value in (("rmse", rmse), ("nll", nll), ("rmse_raw", rmse_raw)):
        print(f"{key} = {rpt.format_value(value)}")
    return 0


def _split_list(text: str) -> list:
    return [item.strip() for item in text.split(",") if item.strip()]


def _bench_compare(suite: dict, outdir: Path) -> int:
    datasets = _split_list(suite.pop("data", "ricker"))
    models = _split_list(suite.pop("models", "softki"))
    objectives = _split_list(suite.pop("objectives", "auto"))
    seeds = [int(s) for s in _split_list(suite.pop("seeds", "0"))]

    base: dict = {}
    per_model: dict = {model: {} for model in models}
    for key, raw in suite.items():
        if "." in key:
            model, opt = key.split(".", 1)
            if model not in per_model or opt not in TRAIN_OPTS:
                raise ValueError(f"unknown suite key {key!r}")
            per_model[model][opt] = TRAIN_OPTS[opt].convert(raw)
        elif key in TRAIN_OPTS:
            base[key] = TRAIN_OPTS[key].convert(raw)
        else:
            raise ValueError(f"unknown suite key {key!r}")

    specs = sorted(product(datasets, models, objectives, seeds))

    def run_row(spec):
        data_name, model, objective, seed = spec
        values = {name: opt.default for name, opt in TRAIN_OPTS.items()}
        values.update(base)
        values.update(per_model[model])
        values.update(data=data_name, model=model, objective=objective, seed=seed)
        try:
            train_data, test_data = _load_split(values)
            result = _train_model(values, train_data, test_data)
        except Exception as err:  # noqa: BLE001 -- rows are isolated by design
            return (*spec, float("nan"), float("nan"), float("nan"),
                    f"{type(err).__name__}: {err}")
        metrics = result["metrics"]
        trace = result["trace"]
        seconds = float(sum(trace.epoch_seconds))
        rmse, nll = metrics["rmse"], metrics["nll"]
        if trace.epoch_objectives and not np.isfinite(trace.epoch_objectives[-1]):
            # training never stabilized; mark the row nan but keep it as a
            # completed row rather than a failure
            rmse, nll = float("nan"), float("nan")
        return (*spec, rmse, nll, seconds, "")

    workers = max(1, min(len(specs), blas_threads()))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = sorted(pool.map(run_row, specs), key=lambda row: row[:4])

    rpt.write_csv(
        outdir / "results.csv",
        ["dataset", "model", "objective", "seed", "rmse", "nll", "seconds",
         "error"],
        rows,
    )

    groups: dict = {}
    for row in rows:
        groups.setdefault(row[:3], []).append(row)
    agg = []
    for key in sorted(groups):
        members = groups[key]
        rmses = np.array([row[4] for row in members])
        nlls = np.array([row[5] for row in members])
        secs = np.array([row[6] for row in members])
        ddof = 1 if len(members) > 1 else 0
        agg.append((
            *key, len(members),
            float(rmses.mean()), float(rmses.std(ddof=ddof)),
            float(nlls.mean()), float(nlls.std(ddof=ddof)),
            float(secs.mean()),
        ))
    rpt.write_csv(
        outdir / "aggregate.csv",
        ["dataset", "model", "objective", "seeds", "rmse_mean", "rmse_std",
         "nll_mean", "nll_std", "seconds_mean"],
        agg,
    )

    failed = [row for row in rows if row[7]]
    rpt.write_kv(outdir / "report.txt", [
        ("suite", "compare"),
        ("rows_total", len(rows)),
        ("rows_failed", len(failed)),
        ("workers", workers),
    ])
    for row in rows:
        print(f"{row[0]}/{row[1]}/{row[2]}/seed{row[3]}: "
              f"rmse = {rpt.format_value(row[4])}"
              + (f" error = {row[7]}" if row[7] else ""))
    return 1 if failed else 0


def _bench_solvers(suite: dict, outdir: Path) -> int:
    n = int(suite.pop("n", "400"))
    m = int(suite.pop("m", "24"))
    d = int(suite.pop("d", "2"))
    delta = float(suite.pop("delta", "1e-3"))
    noise = float(suite.pop("noise", "1e-4"))
    seed = int(suite.pop("seed", "0"))
    dtype = suite.pop("dtype", "float32")
    methods = tuple(_split_list(suite.pop("solvers",
                                          ",".join(DEFAULT_STUDY_METHODS))))
    if suite:
        raise ValueError(f"unknown suite key {next(iter(suite))!r}")

    data, hp = near_degenerate_instance(n=n, m=m, d=d, delta=delta,
                                        noise=noise, seed=seed, dtype=dtype)
    rows = solver_study(data, hp, methods)

    rpt.write_csv(
        outdir / "solvers.csv",
        ["solver", "train_rmse", "residual", "iterations", "error"],
        [(res.method, rmse, res.residual, res.iterations, res.error or "")
         for res, rmse in rows],
    )
    curve_rows = []
    for res, _ in rows:
        if res.history:
            curve_rows += [(res.method, i, r)
                           for i, r in enumerate(res.history, start=1)]
        else:
            curve_rows.append((res.method, 0, res.residual))
    rpt.write_csv(outdir / "residuals.csv",
                  ["solver", "iteration", "residual"], curve_rows)
    rpt.write_kv(outdir / "report.txt", [
        ("suite", "solvers"), ("n", n), ("m", m), ("d", d), ("delta", delta),
        ("noise", noise), ("seed", seed), ("dtype", dtype),
        ("solvers", ",".join(methods)),
    ])
    for res, rmse in rows:
        print(f"{res.method}: train_rmse = {rpt.format_value(rmse)}")
    return 0


def cmd_bench(values: dict, outdir: Path) -> int:
    suite = dict(_parse_kv_file(values["suite"]))
    kind = suite.pop("suite", "compare")
    if kind == "compare":
        return _bench_compare(suite, outdir)
    if kind == "solvers":
        return _bench_solvers(suite, outdir)
    raise ValueError(f"unknown suite kind {kind!r}")


# --------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "train": (TRAIN_OPTS, cmd_train, "train a model and write a checkpoint"),
    "eval": (EVAL_OPTS, cmd_eval, "evaluate a checkpoint on a dataset"),
    "bench": (BENCH_OPTS, cmd_bench, "run a benchmark suite"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softki",
        description="Gaussian-process regression with learned softmax "
                    "interpolation points",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, fn, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None,
                        help="key = value file supplying flag defaults")
        for opt_name, opt in opts.items():
            kwargs = {"default": None, "help": opt.help}
            if opt.convert is _to_bool:
                kwargs.update(nargs="?", const="true")
            sp.add_argument(f"--{opt_name}", **kwargs)
        sp.set_defaults(_opts=opts, _fn=fn)
    return parser


def _fail(outdir: Path, err: Exception) -> int:
    if isinstance(err, FileNotFoundError):
        message = f"file not found: {err.filename}"
    else:
        message = str(err)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        rpt.write_kv(outdir / "error.txt",
                     [("error", type(err).__name__), ("message", message)])
    except OSError:
        pass  # the stderr line below still reports the failure
    print(f"error: {message}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        values = _resolve(args._opts, args)
    except (OSError, ValueError, SoftKIError) as err:
        return _fail(Path(getattr(args, "out", None) or "run"), err)
    outdir = Path(values["out"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        return args._fn(values, outdir)
    except (OSError, ValueError, SoftKIError) as err:
        return _fail(outdir, err)


if __name__ == "__main__":
    sys.exit(main())
