"""``certdispatch`` command line: datagen, train, solve, report, verify.

Exit codes: 0 ok, 1 usage, 2 io, 3 invariant violation, 4 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks
from .ed_model import DispatchModel, EDInstance
from .grid import CaseFormatError, Grid, load_case
from .hybrid import DEFAULT_WORKERS, TimingModel, batch_solve, read_results_csv, speedup_curve
from .lp_solver import SolverError
from .rng import stream
from .training import Checkpoint, SamplerConfig, TrainConfig, sample_pd, train_joint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT, EXIT_SOLVER = 0, 1, 2, 3, 4
DEFAULT_EPS_GRID = (0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)


@dataclass
class CommandResult:
    code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="certdispatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="sample demand instances")
    d.add_argument("--case", default="toy14")
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train primal and dual proxies")
    t.add_argument("--case", default="toy14")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--eps-target", type=float, default=0.0)
    t.add_argument("--n", type=int, default=2048, help="training samples per epoch")
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--val", type=int, default=1024, help="validation samples")
    t.add_argument("--hidden", default="64,64,64,64", help="comma-separated hidden widths")
    t.add_argument("--out", required=True, help="checkpoint path (log written next to it)")

    s = sub.add_parser("solve", help="hybrid solve of an instance file")
    s.add_argument("--model", required=True)
    s.add_argument("--demands", required=True)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")

    r = sub.add_parser("report", help="speedup curve from solve results")
    r.add_argument("--results", required=True)
    r.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    r.add_argument("--epsilon", type=float, action="append",
                   help="extra tolerance for the grid (repeatable)")
    r.add_argument("--out", required=True, help="curve CSV; plot and inverse table use the same stem")
    r.add_argument("--format", choices=("svg",), default="svg")

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--case", default="toy14")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--n", type=int, default=100)
    v.add_argument("--model", help="checkpoint to verify instead of untrained proxies")
    return p


# --------------------------------------------------------------------------- io helpers

def write_demands(path, grid: Grid, pd: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"pd_bus{ld.bus}_{i}" for i, ld in enumerate(grid.loads)])
        for row in pd:
            writer.writerow([repr(float(v)) for v in row])


def read_demands(path, n_load: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise UsageError(f"{path}: no instances")
    try:
        pd = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if pd.ndim != 2 or pd.shape[1] != n_load:
        raise UsageError(f"{path}: expected {n_load} demand columns")
    return pd


def _plot(curve, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in curve.rows if r[0] > 0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([100 * r[0] for r in rows], [r[1] for r in rows], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("optimality tolerance (%)")
    ax.set_ylabel("speedup N")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------- commands

def _datagen(a) -> CommandResult:
    grid = load_case(a.case)
    if a.n < 1:
        raise UsageError("--n must be positive")
    pd = sample_pd(grid, SamplerConfig(), a.n, stream(a.seed, "sampler"))
    write_demands(a.out, grid, pd)
    return CommandResult(EXIT_OK, [a.out], f"wrote {a.n} instances to {a.out}")


def _train(a) -> CommandResult:
    grid = load_case(a.case)
    try:
        hidden = tuple(int(h) for h in a.hidden.split(","))
        cfg = TrainConfig(
            eps_target=a.eps_target, epochs=a.epochs, batch_size=a.batch_size,
            train_samples_per_epoch=a.n, val_samples=a.val, seed=a.seed, hidden=hidden,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log = str(Path(a.out).with_suffix(".log.csv"))
    ck = train_joint(grid, cfg, log_path=log)
    ck.save(a.out)
    code = EXIT_INVARIANT if ck.aborted else EXIT_OK
    return CommandResult(code, [a.out, log],
                         f"best validation gap {ck.best_val_gap:.5f} at epoch {ck.best_epoch}")


def _solve(a) -> CommandResult:
    ck = Checkpoint.load(a.model)
    primal, dual = ck.proxies()
    model = primal.model
    pd = read_demands(a.demands, model.n_load)
    instances = [EDInstance(model, row) for row in pd]
    report = batch_solve(instances, (primal, dual), a.epsilon, TimingModel(workers=a.workers))
    if a.format == "csv":
        report.write_csv(a.out)
    else:
        Path(a.out).write_text(json.dumps(report.rows(), indent=1) + "\n")
    return CommandResult(
        EXIT_OK, [a.out],
        f"{report.size} instances, {report.fallback_count} fallbacks, N={report.speedup:.2f}",
    )


def _report(a) -> CommandResult:
    cert, times, inference = read_results_csv(a.results)
    grid = sorted(set(DEFAULT_EPS_GRID) | set(a.epsilon or ()))
    curve = speedup_curve(cert, times, inference, grid, a.workers)
    out = Path(a.out)
    curve.write_csv(out)
    inverse = out.with_name(out.stem + "_inverse.csv")
    curve.write_inverse_csv(inverse)
    svg = out.with_suffix(".svg")
    _plot(curve, svg)
    best = max(r[1] for r in curve.rows)
    return CommandResult(EXIT_OK, [str(out), str(inverse), str(svg)], f"max N={best:.2f}")


def _verify(a) -> CommandResult:
    grid = load_case(a.case)
    model = DispatchModel.from_grid(grid)
    wide = SamplerConfig(global_scale_range=(0.5, 1.9))
    pd = sample_pd(grid, wide, a.n, stream(a.seed, "verify"))
    if a.model:
        primal, dual = Checkpoint.load(a.model).proxies(model)
    else:
        from .proxies import DualProxy, InputScaler, PrimalProxy

        scaler = InputScaler.fit(model, pd)
        rng = stream(a.seed, "init")
        primal = PrimalProxy.init(model, scaler, rng, (32, 32))
        dual = DualProxy.init(model, scaler, rng, (32, 32))
    problems = []
    sound = checks.certificate_soundness(model, primal, dual, pd)
    if sound.violations:
        problems.append(f"{sound.violations} certificate violations")
    mism = checks.lazy_full_mismatches(model, pd)
    if mism:
        problems.append(f"{mism} lazy/full mismatches")
    p_fail, d_fail = checks.feasibility_failures(model, primal, dual, pd)
    if p_fail or d_fail:
        problems.append(f"{p_fail} primal / {d_fail} dual feasibility failures")
    net_err = checks.network_gradient_error(a.seed)
    p_err, d_err = checks.proxy_gradient_error(model, pd[:8], a.seed)
    if max(net_err, p_err, d_err) > 1e-4:
        problems.append(f"gradient check error {max(net_err, p_err, d_err):.2e}")
    if problems:
        raise InvariantError("; ".join(problems))
    return CommandResult(EXIT_OK, [], f"verify ok on {a.n} instances "
                         f"(max gradient error {max(net_err, p_err, d_err):.1e})")


_COMMANDS = {"datagen": _datagen, "train": _train, "solve": _solve,
             "report": _report, "verify": _verify}


def run(argv: Sequence[str] | None = None) -> CommandResult:
    try:
        args = _parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        return CommandResult(EXIT_USAGE, summary=f"usage error: {exc}")
    except (OSError, CaseFormatError, json.JSONDecodeError, KeyError) as exc:
        return CommandResult(EXIT_IO, summary=f"io error: {exc}")
    except InvariantError as exc:
        return CommandResult(EXIT_INVARIANT, summary=f"invariant violation: {exc}")
    except SolverError as exc:
        return CommandResult(EXIT_SOLVER, summary=f"solver failure: {exc}")
    except ValueError as exc:
        return CommandResult(EXIT_IO, summary=f"invalid input: {exc}")


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    res = run(argv)
    stream_ = sys.stdout if res.code == EXIT_OK else sys.stderr
    print(res.summary, file=stream_)
    return res.code


if __name__ == "__main__":
    sys.exit(main())
