"""Command-line entry point.

Subcommands::

    panco run <scenario | config.json> [--set key=value ...] [--out DIR]
    panco fit <signatures.csv> <trace.csv> [--out DIR]
    panco signatures <scenario | config.json> [--set ...] [--out DIR]
    panco scan-bias [<scenario | config.json>] [--min nT] [--max nT] [-n N] [--workers N]
    panco crosstalk [<scenario | config.json>] [--nominal nT] [--offset nT ...]

Every command that simulates writes ``config.json`` (the fully resolved spec)
and ``report.json`` into its output directory. On failure ``report.json``
holds ``{"status": "error", "error": {...}}`` and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import bias_scan, crosstalk, fit_trace, suppression_factor
from .model import ConfigError
from .protocol import DegenerateSignaturesError, SignatureSet, generate_signatures
from .scenarios import (
    SCENARIOS,
    _prepared,
    _tols,
    apply_override,
    build_cell,
    build_schedule,
    default_spec,
    full_spec,
    run_scenario,
    write_json,
    write_run_dir,
    write_table,
)

log = logging.getLogger("panco")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad command-line input (exit code 2)."""


@dataclass
class RunConfig:
    """Resolved command-line options for one simulation command."""

    spec: dict
    out: Path
    overrides: list[str] = field(default_factory=list)
    workers: int = 1
    verbosity: int = 0


def load_spec(target: str) -> dict:
    """Scenario name or path to a JSON spec."""
    if target in SCENARIOS:
        return default_spec(target)
    path = Path(target)
    if not path.exists():
        raise ConfigError(f"'{target}' is neither a scenario ({', '.join(sorted(SCENARIOS))}) "
                          f"nor an existing config file")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return spec


def resolve(args) -> RunConfig:
    """Build the resolved spec from a target, overrides and flags."""
    spec = load_spec(args.target)
    if "scenario" in spec and spec["scenario"] in SCENARIOS:
        # fill any omitted sections so overrides can address every default key
        spec = full_spec(spec)
    for ov in args.set or []:
        apply_override(spec, ov)
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.tol is not None:
        if not args.tol > 0:
            raise ConfigError("--tol must be positive")
        spec["rtol"] = args.tol
        spec["atol"] = args.tol * 1e-3
    spec = full_spec(spec)
    out = Path(args.out) if args.out else Path(f"run_{spec['scenario']}")
    return RunConfig(spec, out, list(args.set or []), args.workers, args.verbose)


def _error_report(out: Path | None, exc: BaseException, kind: str) -> None:
    if out is None:
        return
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", {
            "status": "error",
            "error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)},
        })
    except OSError:
        pass


def _guarded(fn):
    """Run a command body, mapping exceptions to exit codes and error reports."""

    def wrapper(args) -> int:
        out = Path(args.out) if getattr(args, "out", None) else None
        try:
            return fn(args)
        except (ConfigError, UsageError) as exc:
            log.error("%s", exc)
            _error_report(out, exc, "usage")
            return EXIT_USAGE
        except DegenerateSignaturesError as exc:
            log.error("%s", exc)
            _error_report(out, exc, "degenerate")
            return EXIT_FAILURE
        except OSError as exc:
            log.error("I/O failure: %s", exc)
            _error_report(out, exc, "io")
            return EXIT_FAILURE
        except Exception as exc:  # scenario failure
            log.error("%s: %s", type(exc).__name__, exc)
            _error_report(out, exc, "scenario")
            return EXIT_FAILURE

    wrapper.__name__ = fn.__name__
    return wrapper


# ---------------------------------------------------------------------------
# run / signatures

@_guarded
def cmd_run(args) -> int:
    rc = resolve(args)
    args.out = str(rc.out)
    t0 = time.perf_counter()
    result = run_scenario(rc.spec, workers=rc.workers)
    write_run_dir(rc.out, rc.spec, result)
    log.info("wrote %s in %.1f s", rc.out, time.perf_counter() - t0)
    return EXIT_OK


@_guarded
def cmd_signatures(args) -> int:
    rc = resolve(args)
    args.out = str(rc.out)
    cfg, sched = _prepared(rc.spec)
    sig = generate_signatures(cfg, sched, **_tols(rc.spec))
    rc.out.mkdir(parents=True, exist_ok=True)
    write_json(rc.out / "config.json", rc.spec)
    sig.to_csv(rc.out / "signatures.csv")
    write_json(rc.out / "report.json", {"status": "ok", "n_samples": sig.n,
                                        "gram_condition": sig.condition()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# offline fit

def read_trace(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a sample trace CSV.

    Accepts a header row naming a ``signal`` column (and optionally ``t``) or
    a headerless single column of samples. Parse errors name the line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise UsageError(f"{path}: empty trace")
    first_line, first = rows[0]
    try:
        [float(c) for c in first]
        header = None
    except ValueError:
        header = [c.strip() for c in first]
        rows = rows[1:]
    if header is None:
        i_sig, i_t = len(first) - 1, (0 if len(first) > 1 else None)
    else:
        if "signal" not in header:
            raise UsageError(f"{path}: line {first_line}: header has no 'signal' column")
        i_sig = header.index("signal")
        i_t = header.index("t") if "t" in header else None
    if not rows:
        raise UsageError(f"{path}: empty trace")
    sig = np.empty(len(rows))
    tt = np.empty(len(rows)) if i_t is not None else None
    for k, (line, r) in enumerate(rows):
        try:
            sig[k] = float(r[i_sig])
            if tt is not None:
                tt[k] = float(r[i_t])
        except (ValueError, IndexError) as exc:
            raise UsageError(f"{path}: line {line}: cannot parse sample ({exc})") from exc
        if not math.isfinite(sig[k]):
            raise UsageError(f"{path}: line {line}: non-finite sample")
    return sig, tt


@_guarded
def cmd_fit(args) -> int:
    sig = SignatureSet.from_csv(args.signatures)
    samples, t = read_trace(args.trace)
    if samples.size % sig.n:
        raise UsageError(f"trace has {samples.size} samples, not a whole number of "
                         f"{sig.n}-sample cycles")
    fits = fit_trace(samples, sig, with_baseline=args.baseline, noise_sigma=args.noise_sigma)
    n_cyc = len(fits)
    t0 = t[:: sig.n] if t is not None else np.arange(n_cyc, dtype=float)
    ch = {
        "t": t0,
        "Bx_T": np.array([f.Bx for f in fits]),
        "By_T": np.array([f.By for f in fits]),
        "Om_x_Hz": np.array([f.Om_x_hz for f in fits]),
        "Om_y_Hz": np.array([f.Om_y_hz for f in fits]),
        "residual_rms": np.array([f.residual_rms for f in fits]),
    }
    out = Path(args.out) if args.out else Path("fit")
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "channels.csv", ch)
    summary = {"status": "ok", "n_cycles": n_cyc, "samples_per_cycle": sig.n,
               "gram_condition": sig.condition()}
    for k in ("Bx_T", "By_T", "Om_x_Hz", "Om_y_Hz", "residual_rms"):
        summary[k] = {"mean": float(np.mean(ch[k])), "std": float(np.std(ch[k])),
                      "min": float(np.min(ch[k])), "max": float(np.max(ch[k]))}
    if args.noise_sigma > 0:
        sd = np.sqrt(np.diag(fits[0].covariance))
        summary["predicted_std"] = {"Bx_T": sd[0], "By_T": sd[1],
                                    "Om_x_Hz": sd[2] / (2 * math.pi), "Om_y_Hz": sd[3] / (2 * math.pi)}
    write_json(out / "summary.json", summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bias scan and cross-talk

def _scan_spec(args) -> RunConfig:
    if args.target is None:
        args.target = "fig7"
    return resolve(args)


@_guarded
def cmd_scan_bias(args) -> int:
    rc = _scan_spec(args)
    args.out = str(rc.out)
    cfg, sched = build_cell(rc.spec), build_schedule(rc.spec["schedule"])
    if args.n < 2 or not args.max > args.min:
        raise UsageError("need --max > --min and -n >= 2")
    grid = np.linspace(args.min, args.max, args.n)
    # biases oppose the species magnetisation unless the cell says otherwise
    sign = -1.0 if cfg.bias_z <= 0 else 1.0
    scan = bias_scan(cfg, sched, sign * grid * 1e-9, workers=rc.workers, **_tols(rc.spec))
    rc.out.mkdir(parents=True, exist_ok=True)
    write_json(rc.out / "config.json", rc.spec)
    scan.to_csv(rc.out / "scan.csv")
    report = scan.summary()
    report.update(status="ok", grid_nT=[float(args.min), float(args.max), int(args.n)])
    write_json(rc.out / "report.json", report)
    return EXIT_OK


@_guarded
def cmd_crosstalk(args) -> int:
    rc = _scan_spec(args)
    args.out = str(rc.out)
    cfg, sched = build_cell(rc.spec), build_schedule(rc.spec["schedule"])
    tol = _tols(rc.spec)
    sign = -1.0 if cfg.bias_z <= 0 else 1.0
    nominal = args.nominal if args.nominal is not None else abs(cfg.bias_z) / 1e-9
    sig = generate_signatures(cfg.with_bias(sign * nominal * 1e-9), sched, **tol)
    rows = []
    for off in args.offset:
        xt = crosstalk(cfg, sched, sig, sign * (nominal + off) * 1e-9, **tol)
        d = xt.to_dict()
        d["offset_nT"] = off
        d["suppression_factor"] = (suppression_factor(xt.norm, cfg.noble.gamma)
                                   if xt.norm > 0 else math.inf)
        rows.append(d)
    rc.out.mkdir(parents=True, exist_ok=True)
    write_json(rc.out / "config.json", rc.spec)
    sig.to_csv(rc.out / "signatures.csv")
    write_json(rc.out / "report.json", {"status": "ok", "nominal_nT": nominal, "results": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p: argparse.ArgumentParser, target_optional: bool = False) -> None:
    if target_optional:
        p.add_argument("target", nargs="?", default=None,
                       help="scenario name or config.json (default: fig7)")
    else:
        p.add_argument("target", help=f"scenario ({', '.join(sorted(SCENARIOS))}) or config.json")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value by dotted path (value parsed as JSON)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes for scans")
    p.add_argument("--tol", type=float, help="integrator rtol (atol = 1e-3 * rtol)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panco", description="Pulsed alkali-noble comagnetometer simulator")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write a run directory")
    _add_common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("signatures", help="generate and export the four signatures")
    _add_common(s)
    s.set_defaults(func=cmd_signatures)

    f = sub.add_parser("fit", help="fit a recorded trace with exported signatures")
    f.add_argument("signatures", help="signatures CSV")
    f.add_argument("trace", help="trace CSV (column 'signal', optional 't')")
    f.add_argument("--out", help="output directory (default: fit)")
    f.add_argument("--baseline", action="store_true", help="fit a constant offset per window")
    f.add_argument("--noise-sigma", type=float, default=0.0, help="per-sample noise for covariances")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("scan-bias", help="Fisher sensitivities over a bias grid")
    _add_common(b, target_optional=True)
    b.add_argument("--min", type=float, default=95.0, help="lowest |bias| in nT")
    b.add_argument("--max", type=float, default=115.0, help="highest |bias| in nT")
    b.add_argument("-n", type=int, default=41, help="grid points")
    b.set_defaults(func=cmd_scan_bias)

    c = sub.add_parser("crosstalk", help="rotation cross-talk under bias drift")
    _add_common(c, target_optional=True)
    c.add_argument("--nominal", type=float, help="|bias| of the signatures in nT (default: cell bias)")
    c.add_argument("--offset", type=float, nargs="+", default=[0.2], help="bias offsets in nT")
    c.set_defaults(func=cmd_crosstalk)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
