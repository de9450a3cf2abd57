"""Command line entry point: ``nbdkalman {generate,filter,smooth,compare,count}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import kalman_ref as kr
from ..blockmat import STABILIZERS, BlockStructure, NotPositiveDefiniteError
from ..blockmat.structure import NbdError
from ..nbd_filter import NbdModel, run_nbd_filter
from ..nbd_smoother import SMOOTHERS
from .counting import count_table
from .experiment import PSD_RTOL, ExperimentConfig, compare_runs, write_outputs
from .models import FAMILIES, generate_model, simulate_truth

logger = logging.getLogger("nbdkalman")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--eps-grid", type=_floats, help="e.g. 0.2,0.1,0.05")
    common.add_argument("--sizes", type=_ints, help="block sizes, e.g. 2,2,2")
    common.add_argument("--family", choices=sorted(FAMILIES))
    common.add_argument("--steps", type=int, dest="n_steps")
    common.add_argument("--stabilizer", choices=STABILIZERS)
    common.add_argument("--out-dir", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nbdkalman", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a model JSON")
    for name, noun in (("filter", "filter"), ("smooth", "smoother")):
        sp = sub.add_parser(name, parents=[common], help=f"run the N.B.D. {noun}")
        sp.add_argument("--model", type=Path, help="model JSON (default: generate from config)")
        sp.add_argument("--measurements", type=Path, help="JSON list of measurement vectors")
        if name == "smooth":
            sp.add_argument("--method", choices=sorted(SMOOTHERS), default="rts")
            sp.add_argument("--lag", type=int)
    sub.add_parser("compare", parents=[common], help="oracle vs N.B.D. study over the eps grid")
    sp = sub.add_parser("count", parents=[common], help="closed-form vs instrumented counts")
    sp.add_argument("--structures", type=_ints, nargs="*", help="block size lists")
    return p


def _config(args) -> ExperimentConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    cfg = ExperimentConfig.from_dict(data)
    return cfg.updated(seed=args.seed, eps_grid=args.eps_grid, sizes=args.sizes,
                       family=args.family, n_steps=args.n_steps, stabilizer=args.stabilizer,
                       out_dir=None if args.out_dir is None else str(args.out_dir),
                       lag=getattr(args, "lag", None))


def _model(args, cfg: ExperimentConfig) -> NbdModel:
    if getattr(args, "model", None):
        return NbdModel.from_json(json.loads(args.model.read_text()))
    return generate_model(cfg.family, BlockStructure(cfg.sizes), cfg.eps_grid[0], seed=cfg.seed)


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _step_csv(path: Path, P_nbd, P_exact, mults) -> bool:
    """Per-step CSV; returns False if any emitted covariance fails the PSD check."""
    ok = True
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "frob_error_vs_oracle", "min_eig_stabilized", "mult_count"])
        for i, (Pa, Pe) in enumerate(zip(P_nbd, P_exact)):
            lam = np.linalg.eigvalsh(Pa)
            ok &= bool(lam.min() >= -PSD_RTOL * max(np.abs(lam).max(), 1e-300))
            w.writerow([i, f"{np.linalg.norm(Pa - Pe):.17g}", f"{lam.min():.17g}", f"{mults[i]:.17g}"])
    return ok


def _measurements(args, model: NbdModel, cfg: ExperimentConfig):
    if args.measurements:
        return np.asarray(json.loads(args.measurements.read_text()), dtype=float)
    return simulate_truth(model, cfg.seed, cfg.n_steps)[1]


def cmd_generate(args, cfg) -> int:
    model = _model(args, cfg)
    path = _write_json(Path(cfg.out_dir) / "model.json", model.to_json())
    print(path)
    return EXIT_OK


def cmd_filter(args, cfg) -> int:
    model = _model(args, cfg)
    ys = _measurements(args, model, cfg)
    traj = run_nbd_filter(model, ys, cfg.stabilizer)
    exact = kr.run_kalman_filter(model.to_state_space(), ys)
    out = Path(cfg.out_dir)
    _write_json(out / "filter.json", traj.to_json())
    ok = _step_csv(out / "filter_steps.csv", traj.covariances(), exact.P_filt, traj.mults)
    print(out / "filter.json")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_smooth(args, cfg) -> int:
    model = _model(args, cfg)
    ys = _measurements(args, model, cfg)
    ss = model.to_state_space()
    traj = run_nbd_filter(model, ys, cfg.stabilizer)
    ft = kr.run_kalman_filter(ss, ys)
    method = args.method
    if method == "fixedlag":
        lag = cfg.lag if args.lag is None else args.lag
        sm = SMOOTHERS[method](traj, model, lag=lag)
        exact = kr.fixed_lag_smooth(ft, ss, lag)
    else:
        sm = SMOOTHERS[method](traj, model)
        exact = {"rts": kr.rts_smooth, "info": kr.info_rts_smooth, "bf": kr.bf_smooth}[method](ft, ss)
    out = Path(cfg.out_dir)
    _write_json(out / f"smooth_{method}.json", sm.to_json())
    ok = _step_csv(out / f"smooth_{method}_steps.csv", sm.P, exact.P, sm.mults)
    print(out / f"smooth_{method}.json")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_compare(args, cfg) -> int:
    result = compare_runs(cfg)
    for path in write_outputs(result):
        print(path)
    if result.ratios:
        for m, r in result.ratios.items():
            print(f"{m}: covariance ratios {', '.join(f'{v:.3f}' for v in r['cov'])}")
    for v in result.violations:
        print(f"PSD violation: {v}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_INVARIANT


def cmd_count(args, cfg) -> int:
    rows = count_table(args.structures, seed=cfg.seed) if args.structures else count_table(seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "counts.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    bad = [r for r in rows if r["closed_form"] != r["instrumented"]]
    for r in rows:
        print(f"{r['sizes']:>14} {r['profile']:>16} {r['operation']:>15} "
              f"{r['closed_form']:>10g} {r['instrumented']:>10g} dense {r['dense']:g}")
    print(path)
    return EXIT_OK if not bad else EXIT_INVARIANT


COMMANDS = {"generate": cmd_generate, "filter": cmd_filter, "smooth": cmd_smooth,
            "compare": cmd_compare, "count": cmd_count}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (NbdError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"nbdkalman: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except NotPositiveDefiniteError as exc:
        print(f"nbdkalman: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (NbdError, kr.ModelError, OSError, json.JSONDecodeError) as exc:
        print(f"nbdkalman: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
