"""Oracle-vs-N.B.D. comparison runs over an eps grid."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import kalman_ref as kr
from ..blockmat import BlockStructure, STABILIZERS
from ..blockmat import counts
from ..blockmat.structure import NbdError
from ..nbd_filter import NbdModel, dense_step_count, run_nbd_filter
from ..nbd_smoother import nbd_bf, nbd_fixed_lag, nbd_info_rts, nbd_rts
from .models import FAMILIES, generate_model, simulate_truth

logger = logging.getLogger(__name__)

METHODS = ("filter", "rts", "info", "bf", "fixedlag")
CSV_COLUMNS = ("step", "eps", "cov_err", "state_err", "min_eig", "mults_nbd", "mults_dense")
PSD_RTOL = 1e-10
NEGLIGIBLE = 1e-14


@dataclass(frozen=True)
class ExperimentConfig:
    sizes: tuple[int, ...] = (2, 2, 2)
    eps_grid: tuple[float, ...] = (0.2, 0.1, 0.05)
    family: str = "diffusion-modes"
    pixels_per_mode: int = 8
    sigma2: float = 1.0
    n_steps: int = 20
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    lag: int = 3
    stabilizer: str = "t1"
    coupling: float | None = None
    out_dir: str = "results"
    workers: int = 4

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        object.__setattr__(self, "methods", tuple(self.methods))
        grid = np.array(self.eps_grid)
        if grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) >= 0):
            raise NbdError(f"eps grid must be nonnegative and strictly descending, got {self.eps_grid}")
        if self.family not in FAMILIES:
            raise NbdError(f"unknown model family {self.family!r}")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise NbdError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if self.stabilizer not in STABILIZERS:
            raise NbdError(f"unknown stabilizer {self.stabilizer!r}")
        if not 0 <= self.lag <= self.n_steps:
            raise NbdError(f"lag {self.lag} outside [0, {self.n_steps}]")

    @property
    def structure(self) -> BlockStructure:
        return BlockStructure(self.sizes)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise NbdError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def updated(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MethodRun:
    cov_err: np.ndarray
    state_err: np.ndarray
    min_eig: np.ndarray
    mults_nbd: np.ndarray
    mults_dense: np.ndarray


@dataclass
class RunResult:
    config: ExperimentConfig
    runs: dict  # (method, eps) -> MethodRun
    wall_time: dict  # eps -> seconds (not written to files)
    ratios: dict | None
    count_ratio: float
    inferred_eps: float | None
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        c = self.config
        out = {
            "config": c.to_dict(),
            "max_cov_err": {m: {repr(e): float(self.runs[m, e].cov_err.max()) for e in c.eps_grid}
                            for m in c.methods},
            "max_state_err": {m: {repr(e): float(self.runs[m, e].state_err.max()) for e in c.eps_grid}
                              for m in c.methods},
            "count_ratio": self.count_ratio,
            "inferred_eps": self.inferred_eps,
            "violations": self.violations,
        }
        if self.ratios is not None:
            out["ratios"] = self.ratios
        return out


def dense_smoother_step_count(N: int) -> float:
    """``C = P Phi^T P^-1(i+1|i)`` and ``C D C^T`` with dense matrices."""
    return 2 * counts.dense_mul_count(N) + counts.dense_inverse_count(N) + counts.dense_sym_product_count(N)


def _min_rel_eig(P: np.ndarray) -> float:
    w = np.linalg.eigvalsh(0.5 * (P + P.T))
    return float(w.min() / max(np.abs(w).max(), 1e-300))


def _evaluate(config: ExperimentConfig, base: NbdModel, ys: np.ndarray, eps: float) -> dict:
    model = base.with_eps(eps)
    ss = model.to_state_space()
    ex = kr.run_kalman_filter(ss, ys)
    nb = run_nbd_filter(model, ys, config.stabilizer)
    N = model.structure.N
    pairs = {}
    if "filter" in config.methods:
        pairs["filter"] = ((ex.x_filt, ex.P_filt), (nb.x_filt, nb.covariances()), nb.mults,
                           dense_step_count(N))
    exact = {"rts": lambda: kr.rts_smooth(ex, ss), "info": lambda: kr.info_rts_smooth(ex, ss),
             "bf": lambda: kr.bf_smooth(ex, ss),
             "fixedlag": lambda: kr.fixed_lag_smooth(ex, ss, config.lag)}
    approx = {"rts": lambda: nbd_rts(nb, model), "info": lambda: nbd_info_rts(nb, model),
              "bf": lambda: nbd_bf(nb, model),
              "fixedlag": lambda: nbd_fixed_lag(nb, model, lag=config.lag)}
    for m in config.methods:
        if m == "filter":
            continue
        a, b = exact[m](), approx[m]()
        pairs[m] = ((a.x, a.P), (b.x, b.P), b.mults, dense_smoother_step_count(N))
    out = {}
    for m, ((xe, Pe), (xa, Pa), mults, dense) in pairs.items():
        out[m] = MethodRun(
            cov_err=np.linalg.norm(Pa - Pe, axis=(1, 2)),
            state_err=np.linalg.norm(xa - xe, axis=1),
            min_eig=np.array([_min_rel_eig(P) for P in Pa]),
            mults_nbd=np.asarray(mults, dtype=float),
            mults_dense=np.full(len(Pa), float(dense)),
        )
    return out


def convergence_ratios(errs_a: np.ndarray, errs_b: np.ndarray) -> float:
    """Worst per-step error ratio between two eps values; steps where both
    errors are at round-off level carry no information and are skipped."""
    keep = (errs_a > NEGLIGIBLE) | (errs_b > NEGLIGIBLE)
    if not keep.any():
        return float("inf")
    return float(np.min(errs_a[keep] / np.maximum(errs_b[keep], 1e-300)))


def compare_runs(config: ExperimentConfig) -> RunResult:
    """Exact oracle vs N.B.D. pipeline on one measurement record per eps.

    The truth and measurements are simulated once, at the largest eps, and
    reused for every grid point so that errors vary smoothly with eps.
    """
    s = config.structure
    kw = {} if config.coupling is None else {"coupling": config.coupling}
    if config.family == "diffusion-modes":
        kw["pixels_per_mode"] = config.pixels_per_mode
        kw["sigma2"] = config.sigma2
    base = generate_model(config.family, s, config.eps_grid[0], seed=config.seed, **kw)
    _, ys = simulate_truth(base, config.seed, config.n_steps)

    def work(eps):
        t0 = time.perf_counter()
        res = _evaluate(config, base, ys, eps)
        return eps, res, time.perf_counter() - t0

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        done = list(pool.map(work, config.eps_grid))
    runs, wall = {}, {}
    for eps, res, dt in sorted(done, key=lambda t: -t[0]):
        wall[eps] = dt
        for m, r in res.items():
            runs[m, eps] = r

    violations = []
    for (m, eps), r in sorted(runs.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
        bad = np.nonzero(r.min_eig < -PSD_RTOL)[0]
        if bad.size:
            violations.append({"method": m, "eps": eps, "steps": bad.tolist(),
                               "min_eig": float(r.min_eig.min())})
            logger.error("PSD violation: %s eps=%g steps %s", m, eps, bad.tolist())

    ratios = None
    if len(config.eps_grid) >= 2:
        ratios = {}
        for m in config.methods:
            pairs = list(zip(config.eps_grid[:-1], config.eps_grid[1:]))
            ratios[m] = {
                "eps_pairs": [[a, b] for a, b in pairs],
                "expected": [(a / b) ** 2 for a, b in pairs],
                "cov": [convergence_ratios(runs[m, a].cov_err, runs[m, b].cov_err) for a, b in pairs],
                "state": [convergence_ratios(runs[m, a].state_err, runs[m, b].state_err)
                          for a, b in pairs],
            }

    count_ratio = float("nan")
    if "filter" in config.methods and config.n_steps > 0:
        r = runs["filter", config.eps_grid[0]]
        count_ratio = float(r.mults_nbd[1:].mean() / r.mults_dense[1:].mean())
    return RunResult(config, runs, wall, ratios, count_ratio,
                     base.meta.get("inferred_eps"), violations)


def write_outputs(result: RunResult, out_dir: str | Path | None = None) -> list[Path]:
    """Per-method CSV, ``summary.json`` and figures; returns the written paths."""
    from .plotting import plot_convergence, plot_errors

    out = Path(out_dir or result.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m in result.config.methods:
        path = out / f"{m}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for eps in result.config.eps_grid:
                r = result.runs[m, eps]
                for i in range(len(r.cov_err)):
                    w.writerow([i, repr(eps), f"{r.cov_err[i]:.17g}", f"{r.state_err[i]:.17g}",
                                f"{r.min_eig[i]:.17g}", f"{r.mults_nbd[i]:.17g}",
                                f"{r.mults_dense[i]:.17g}"])
        written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    written += plot_errors(result, out)
    if result.ratios is not None:
        written.append(plot_convergence(result, out))
    return written
