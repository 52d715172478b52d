"""Command line experiment runner.

Verbs::

    tsengep deblur     reconstruct one image, write PGMs, a CSV trace and a JSON report
    tsengep bench      classical Tseng vs the single-evaluation scheme under stopping rules
    tsengep reference  compute (or fetch from cache) the long-run reference solution
    tsengep toy        run a small problem with a known zero

Every option may also be set in a ``--config`` file of ``key = value`` lines
whose keys are the long option names without dashes (``gamma-rule = with-error``).
Command line flags override the file.  The primal-dual formulation assumes the
usual qualification condition on the ranges of the linear operators; for the
deblurring problem it holds because every ``g_i`` is finite everywhere.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fbf_solver import (
    ErrorSchedule,
    SolverConfig,
    StepsizeError,
    StopReason,
    StopRule,
    TRACE_COLUMNS,
    run,
    run_classic,
    write_trace_csv,
)
from .imaging import DeblurConfig, DeblurSetup, assemble_deblur, error_schedule, gamma_from_rule, synthetic_phantom
from .metric_algebra import SCALAR_RULES, MetricError
from .pgm import PGMError, read_pgm, write_pgm
from .primal_dual import build_product_inclusion, run_blocks
from .toys import TOYS, make_toy

__all__ = ["main", "build_parser", "load_image", "compute_reference", "reference_key"]

DEBLUR_COLUMNS = ("n", "step_norm", "residual", "fval", "isnr", "elapsed_s")
STOP_KINDS = {"step": StopReason.STEP_NORM, "fval": StopReason.FVAL_GAP, "dist": StopReason.DIST_TO_REF}
ERROR_FLAGS = {"none": "none", "inv-k2": "inv_k2", "inv-k5": "inv_k5", "inv-kk": "inv_kk", "half-k": "half_pow_k"}
GAMMA_FLAGS = {"error-free": "error_free", "with-error": "with_error"}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _stop_arg(text: str) -> tuple[str, float]:
    kind, _, tol = text.partition(":")
    if kind not in STOP_KINDS:
        raise argparse.ArgumentTypeError(f"stop kind must be one of {', '.join(STOP_KINDS)}")
    try:
        value = float(tol)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tolerance in {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("tolerance must be positive")
    return kind, value


def _metric_arg(text: str) -> str:
    if not (text.startswith("const:") or text in SCALAR_RULES):
        raise argparse.ArgumentTypeError(f"metric rule must be one of {', '.join(SCALAR_RULES)}")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file with defaults for any option")
    common.add_argument("--image", default="synthetic:64", help="PGM path or synthetic:<size>")
    common.add_argument("--lambda", dest="lambda_reg", type=float, default=0.003)
    common.add_argument("--kernel-size", type=int, default=9)
    common.add_argument("--kernel-sigma", type=float, default=4.0)
    common.add_argument("--noise-sigma", type=float, default=1e-3)
    common.add_argument("--gamma-rule", choices=sorted(GAMMA_FLAGS), default="error-free")
    common.add_argument("--gamma", type=float, default=None, help="constant stepsize overriding --gamma-rule")
    common.add_argument("--tau", type=_metric_arg, default="const:1")
    common.add_argument("--sigma1", type=_metric_arg, default="const:1")
    common.add_argument("--sigma2", type=_metric_arg, default="const:1")
    common.add_argument("--metric-prox", choices=("exact", "scaled"), default="exact")
    common.add_argument("--errors", choices=sorted(ERROR_FLAGS), default="none")
    common.add_argument("--stop", type=_stop_arg, action="append", default=None,
                        help="{step,fval,dist}:<tol>; bench accepts it repeatedly")
    common.add_argument("--max-iters", type=int, default=1000)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--trace-every", type=int, default=1)
    common.add_argument("--init", type=float, default=0.466, help="constant initial value of the iterates")
    common.add_argument("--reference", type=Path, default=None, help="cached reference .npy to use")
    common.add_argument("--ref-iters", type=int, default=10000)
    common.add_argument("--cache-dir", type=Path, default=None, help="reference cache (default <out>/cache)")
    common.add_argument("--pgm-maxval", type=int, default=255)
    common.add_argument("--allow-unsafe-stepsize", action="store_true")
    common.add_argument("--timing", action="store_true", help="fill the elapsed_s trace column")

    parser = argparse.ArgumentParser(prog="tsengep", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("deblur", parents=[common], help="reconstruct one image")
    sub.add_parser("bench", parents=[common], help="compare classical Tseng with the one-evaluation scheme")
    sub.add_parser("reference", parents=[common], help="compute or fetch the reference solution")
    toy = sub.add_parser("toy", parents=[common], help="run a toy problem with a known zero")
    toy.add_argument("name", choices=sorted(TOYS))
    return parser


def _read_config(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CLIError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.is_file():
        raise CLIError(f"config file not found: {args.config}")
    prefix = []
    for key, value in _read_config(args.config).items():
        flag = "--" + key.replace("_", "-")
        if flag == "--config":
            continue
        if value.lower() in ("true", "yes", "on") and flag in ("--allow-unsafe-stepsize", "--timing"):
            prefix.append(flag)
        elif value.lower() in ("false", "no", "off") and flag in ("--allow-unsafe-stepsize", "--timing"):
            continue
        else:
            prefix.extend([flag, value])
    # options from the file go first so that command line flags override them
    verb_at = argv.index(args.verb)
    return parser.parse_args(argv[:verb_at + 1] + prefix + argv[verb_at + 1:])


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def load_image(spec: str) -> np.ndarray:
    if spec.startswith("synthetic:"):
        try:
            size = int(spec.split(":", 1)[1])
        except ValueError:
            raise CLIError(f"bad synthetic image size in {spec!r}") from None
        try:
            return synthetic_phantom(size)
        except ValueError as exc:
            raise CLIError(str(exc)) from exc
    path = Path(spec)
    if not path.is_file():
        raise CLIError(f"image not found: {spec}")
    try:
        return read_pgm(path)
    except PGMError as exc:
        raise CLIError(f"cannot read {spec}: {exc}") from exc


def _deblur_config(args) -> DeblurConfig:
    if args.noise_sigma > 0 and args.seed is None:
        raise CLIError("--seed is required when --noise-sigma > 0")
    try:
        return DeblurConfig(
            lambda_reg=args.lambda_reg,
            kernel_size=args.kernel_size,
            kernel_sigma=args.kernel_sigma,
            noise_sigma=args.noise_sigma,
            noise_seed=0 if args.seed is None else args.seed,
            tau=args.tau,
            sigma1=args.sigma1,
            sigma2=args.sigma2,
            gamma_rule=GAMMA_FLAGS[args.gamma_rule],
            error_rule=ERROR_FLAGS[args.errors],
            init_scalar=args.init,
            metric_prox=args.metric_prox,
        )
    except (ValueError, MetricError) as exc:
        raise CLIError(str(exc)) from exc


def _solver_config(setup: DeblurSetup, args, stop: StopRule | None, max_iters: int | None = None) -> SolverConfig:
    gamma = setup.gamma if args.gamma is None else args.gamma
    config = SolverConfig(
        gamma=gamma,
        errors=setup.errors,
        max_iters=args.max_iters if max_iters is None else max_iters,
        stop_rule=stop,
        trace_every=args.trace_every,
        allow_unsafe_stepsize=args.allow_unsafe_stepsize,
    )
    if not args.allow_unsafe_stepsize:
        report = setup.stepsize_report(config)
        if not report.ok:
            raise CLIError(f"invalid stepsize ({args.gamma_rule} rule): {report.message}")
    return config


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v))


def _float(v: float):
    return v if math.isfinite(v) else str(v)


def _emit(report: dict) -> None:
    print(json.dumps(report, sort_keys=True, default=_json_default))


# ---------------------------------------------------------------------------
# Reference cache
# ---------------------------------------------------------------------------


# Fields that define the optimization problem; solver settings do not enter x**.
_PROBLEM_FIELDS = ("lambda_reg", "kernel_size", "kernel_sigma", "noise_sigma", "noise_seed", "init_scalar")


def reference_key(original: np.ndarray, cfg: DeblurConfig, iters: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(original, dtype="<f8").tobytes())
    h.update(repr(original.shape).encode())
    meta = {k: getattr(cfg, k) for k in _PROBLEM_FIELDS}
    meta["iters"] = iters
    meta["version"] = __version__
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()[:24]


def reference_config(cfg: DeblurConfig) -> DeblurConfig:
    """The baseline solver settings used for every reference run."""
    return cfg.with_(tau="const:1", sigma1="const:1", sigma2="const:1", gamma_rule="error_free",
                     error_rule="none", metric_prox="exact")


def compute_reference(original: np.ndarray, cfg: DeblurConfig, iters: int, cache_dir: Path) -> tuple[Path, dict]:
    """Run exactly ``iters`` error-free iterations and cache ``x**`` with its objective.

    Returns the ``.npy`` path and the metadata.  A cached result with the same
    key is returned without recomputation.
    """
    cache_dir = Path(cache_dir)
    key = reference_key(original, cfg, iters)
    npy, meta_path = cache_dir / f"ref-{key}.npy", cache_dir / f"ref-{key}.json"
    if npy.is_file() and meta_path.is_file():
        return npy, json.loads(meta_path.read_text(encoding="utf-8"))
    setup = assemble_deblur(original, reference_config(cfg))
    config = SolverConfig(gamma=setup.gamma, max_iters=iters)
    result = run_blocks(setup.problem, config, setup.initial_state())
    x = result.solution
    meta = {
        "key": key,
        "iterations": result.iterations,
        "fval": setup.fval(x),
        "isnr": setup.isnr(x),
        "gamma": setup.gamma,
        "problem": {k: getattr(cfg, k) for k in _PROBLEM_FIELDS},
    }
    cache_dir.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.save(buf, x)
    _atomic_write(npy, buf.getvalue())
    _atomic_write(meta_path, (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode())
    return npy, meta


def _load_reference(args, original, cfg) -> tuple[np.ndarray, float]:
    if args.reference is not None:
        if not args.reference.is_file():
            raise CLIError(f"reference not found: {args.reference}")
        x = np.load(args.reference)
        setup = assemble_deblur(original, cfg)
        return x, setup.fval(x)
    cache = args.cache_dir or args.out / "cache"
    npy, meta = compute_reference(original, cfg, args.ref_iters, cache)
    return np.load(npy), float(meta["fval"])


def _stop_rules(args, original, cfg, default=None) -> list[StopRule]:
    stops = args.stop if args.stop is not None else default or []
    rules = []
    ref = None
    for kind, tol in stops:
        reason = STOP_KINDS[kind]
        if reason is StopReason.STEP_NORM:
            rules.append(StopRule(reason, tol))
            continue
        if ref is None:
            ref = _load_reference(args, original, cfg)
        rules.append(StopRule(reason, tol, ref[1] if reason is StopReason.FVAL_GAP else ref[0]))
    return rules


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_deblur(args) -> dict:
    original = load_image(args.image)
    cfg = _deblur_config(args)
    setup = assemble_deblur(original, cfg)
    rules = _stop_rules(args, original, cfg)
    if len(rules) > 1:
        raise CLIError("deblur takes at most one --stop rule")
    config = _solver_config(setup, args, rules[0] if rules else None)
    args.out.mkdir(parents=True, exist_ok=True)
    cpu0 = time.process_time()
    result = run_blocks(setup.problem, config, setup.initial_state(), objective=setup.fval,
                        extras={"isnr": setup.isnr})
    cpu = time.process_time() - cpu0
    trace_path = args.out / "trace.csv"
    image_path = args.out / "reconstructed.pgm"
    write_trace_csv(trace_path, result.trace, DEBLUR_COLUMNS, timing=args.timing)
    write_pgm(image_path, result.solution, args.pgm_maxval)
    write_pgm(args.out / "observed.pgm", setup.observed, args.pgm_maxval)
    report = {
        "mode": "deblur",
        "iterations": result.iterations,
        "final_isnr": _float(setup.isnr(result.solution)),
        "final_fval": _float(setup.fval(result.solution)),
        "cpu_seconds": cpu,
        "stop_reason": result.reason.value,
        "forward_evals": result.forward_evals,
        "gamma": config.gamma_at(0),
        "beta": setup.beta,
        "trace_path": str(trace_path),
        "output_image_path": str(image_path),
    }
    _emit(report)
    return report


def bench(setup: DeblurSetup, rules: list[StopRule], max_iters: int, gamma: float | None = None,
          allow_unsafe: bool = False) -> list[dict]:
    """Run classical Tseng and the one-evaluation scheme under each stop rule.

    Both run on the product space in the identity metric with the same
    stepsize; ``fval`` and ``dist`` rules look at the primal block only.
    """
    gamma = setup.gamma if gamma is None else gamma
    product = build_product_inclusion(setup.problem)
    x0, p_init = product.pack_state(setup.initial_state())

    def primal(w):
        return product.unpack(w)[0]

    def fval(w):
        return setup.fval(primal(w))

    reports = []
    for rule in rules:
        config = SolverConfig(gamma=gamma, errors=product.product_errors(setup.errors), max_iters=max_iters,
                              stop_rule=rule, allow_unsafe_stepsize=allow_unsafe)
        for method in ("tseng", "tseng-ep"):
            cpu0 = time.process_time()
            if method == "tseng":
                res = run_classic(product, config.with_(errors=ErrorSchedule.none()), x0, fval, primal)
            else:
                res = run(product, config, x0, p_init, fval, estimate_map=primal)
            cpu = time.process_time() - cpu0
            x = primal(res.solution)
            reports.append({
                "method": method,
                "criterion": rule.kind.value,
                "tol": rule.tol,
                "iterations": res.iterations,
                "stop_reason": res.reason.value,
                "final_fval": _float(setup.fval(x)),
                "final_isnr": _float(setup.isnr(x)) if setup.original is not None else None,
                "forward_evals": res.forward_evals,
                "forward_evals_per_iter": res.forward_evals / max(res.iterations, 1),
                "cpu_seconds": cpu,
            })
    return reports


def cmd_bench(args) -> list[dict]:
    original = load_image(args.image)
    cfg = _deblur_config(args)
    setup = assemble_deblur(original, cfg)
    rules = _stop_rules(args, original, cfg, default=[("step", 1e-2), ("fval", 1e-2), ("dist", 1e-2)])
    config = _solver_config(setup, args, None)
    reports = bench(setup, rules, args.max_iters, config.gamma_at(0), args.allow_unsafe_stepsize)
    for rep in reports:
        _emit({"mode": "bench", **rep})
    return reports


def cmd_reference(args) -> Path:
    original = load_image(args.image)
    cfg = _deblur_config(args)
    cache = args.cache_dir or args.out / "cache"
    npy, meta = compute_reference(original, cfg, args.ref_iters, cache)
    _emit({"mode": "reference", "path": str(npy), "iterations": meta["iterations"], "fval": meta["fval"],
           "isnr": meta["isnr"], "key": meta["key"]})
    return npy


def cmd_toy(args) -> dict:
    toy = make_toy(args.name)
    errors = error_schedule(ERROR_FLAGS[args.errors])
    beta = toy.problem.beta
    if args.gamma is not None:
        gamma = args.gamma
    elif args.gamma_rule == "with-error" or not errors.is_zero:
        gamma = gamma_from_rule("with_error", max(beta, 1.0))
    else:
        gamma = toy.gamma
    stop = None
    if args.stop:
        if len(args.stop) > 1:
            raise CLIError("toy takes at most one --stop rule")
        kind, tol = args.stop[0]
        reason = STOP_KINDS[kind]
        stop = StopRule(reason, tol, None if reason is StopReason.STEP_NORM else
                        (toy.solution if reason is StopReason.DIST_TO_REF else 0.0))
        if reason is StopReason.FVAL_GAP:
            raise CLIError("toys have no objective; use step or dist")
    config = SolverConfig(gamma=gamma, errors=errors, max_iters=args.max_iters, stop_rule=stop,
                          trace_every=args.trace_every, allow_unsafe_stepsize=args.allow_unsafe_stepsize)
    try:
        result = run(toy.problem, config, toy.x0)
    except StepsizeError as exc:
        raise CLIError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    trace_path = args.out / f"toy-{toy.name}.csv"
    write_trace_csv(trace_path, result.trace, TRACE_COLUMNS, timing=args.timing)
    moved = sum(1 for rec in result.trace if rec.step_norm > 0)
    report = {
        "mode": "toy",
        "toy": toy.name,
        "iterations": result.iterations,
        "iterations_moved": moved,
        "distance": float(np.linalg.norm(result.solution - toy.solution)),
        "solution": result.solution.tolist(),
        "stop_reason": result.reason.value,
        "forward_evals": result.forward_evals,
        "gamma": gamma,
        "trace_path": str(trace_path),
    }
    _emit(report)
    return report


VERBS = {"deblur": cmd_deblur, "bench": cmd_bench, "reference": cmd_reference, "toy": cmd_toy}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        VERBS[args.verb](args)
    except (CLIError, StepsizeError) as exc:
        print(f"tsengep: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

