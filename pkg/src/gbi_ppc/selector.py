"""Learning-rate selection by posterior predictive checks over a grid.

For every grid rate the tempered posterior is sampled, relabeled and
checked; the selected rate is the one with the smallest p-value that still
exceeds ``alpha``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigError, GbiPpcError
from .evaluation import COLLAPSE_THRESHOLD, evaluate
from .model import Corpus, ModelConfig
from .ppc import PpcResult, run_ppc, write_ppc
from .sampler import McmcConfig, derive_seed, relabel_draws, sample_posterior, write_draws

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(1.0 - 0.1 * i, 1) for i in range(10))
LOCK_NAME = ".select.lock"


@dataclass(frozen=True)
class SelectorConfig:
    grid: tuple[float, ...] = DEFAULT_GRID
    alpha: float = 0.1
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    early_stop: bool = False
    collapse_threshold: float = COLLAPSE_THRESHOLD

    def __post_init__(self) -> None:
        grid = tuple(float(g) for g in self.grid)
        object.__setattr__(self, "grid", grid)
        if not grid:
            raise ConfigError("grid must not be empty")
        if grid[0] != 1.0:
            raise ConfigError(f"grid must start at 1.0, got {grid[0]}")
        if any(not 0.0 < g <= 1.0 for g in grid):
            raise ConfigError(f"grid values must lie in (0, 1], got {list(grid)}")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"grid must be strictly decreasing, got {list(grid)}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.collapse_threshold > 0:
            raise ConfigError(f"collapse_threshold must be positive, got {self.collapse_threshold}")


def lambda_key(lam: float) -> int:
    """Integer key of a grid rate, so per-rate seeds do not depend on grid position."""
    return int(round(float(lam) * 1_000_000))


def choose(pvalues: Mapping[float, float], alpha: float = 0.1) -> float | None:
    """Rate with the smallest p-value above ``alpha``; ties go to the smaller rate."""
    feasible = [(p, lam) for lam, p in pvalues.items() if p is not None and p > alpha]
    if not feasible:
        return None
    return min(feasible)[1]


@dataclass
class LambdaRecord:
    lam: float
    p_mean: float | None = None
    p_paired: float | None = None
    p_avg: float | None = None
    brier: float | None = None
    collapsed: bool | None = None
    draws_file: str | None = None
    ppc_file: str | None = None
    mcmc_seed: int | None = None
    ppc_seed: int | None = None
    accept_rate: float | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out


@dataclass
class LambdaReport:
    records: list[LambdaRecord]
    selected: float | None
    alpha: float

    def pvalues(self) -> dict[float, float]:
        return {r.lam: r.p_mean for r in self.records if r.p_mean is not None}

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "selected": self.selected,
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, doc: dict) -> "LambdaReport":
        records = []
        for rec in doc["records"]:
            rec = dict(rec)
            rec["lam"] = rec.pop("lambda")
            records.append(LambdaRecord(**rec))
        return cls(records, doc["selected"], doc["alpha"])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    return repr(float(value))


def write_report(report: LambdaReport, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "p_mean", "p_paired", "p_avg", "brier", "collapsed", "selected"])
            for r in report.records:
                writer.writerow([_fmt(r.lam), _fmt(r.p_mean), _fmt(r.p_paired), _fmt(r.p_avg),
                                 _fmt(r.brier), _fmt(r.collapsed), _fmt(r.lam == report.selected)])


def read_report(path: str | Path) -> LambdaReport:
    return LambdaReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@contextmanager
def _sweep_lock(out_dir: Path | None):
    if out_dir is None:
        yield
        return
    path = out_dir / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"another sweep holds {path}; remove it if that sweep is dead") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _fit_one(corpus: Corpus, model: ModelConfig, lam: float, mcmc: McmcConfig, ppc_seed: int,
             collapse_threshold: float, out_dir: str | None) -> tuple[LambdaRecord, PpcResult | None]:
    rec = LambdaRecord(lam=lam, mcmc_seed=mcmc.seed, ppc_seed=ppc_seed)
    try:
        draws = relabel_draws(sample_posterior(corpus, model, lam, mcmc))
        result = run_ppc(corpus, draws, ppc_seed)
    except GbiPpcError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        log.error("lambda=%s failed: %s", lam, rec.error)
        return rec, None
    rec.p_mean, rec.p_paired, rec.p_avg = result.p_mean, result.p_paired, result.p_avg
    rec.accept_rate = draws.accept_rate
    rec.warnings = list(draws.warnings)
    if corpus.has_labels and model.num_senses >= corpus.num_true_senses:
        ev = evaluate(corpus, draws, collapse_threshold)
        rec.brier, rec.collapsed = ev.brier, ev.collapsed
    if out_dir is not None:
        stem = f"lambda_{lam:.4f}"
        rec.draws_file = f"{stem}.draws.jsonl"
        rec.ppc_file = f"{stem}.ppc.json"
        write_draws(Path(out_dir) / rec.draws_file, draws, model, mcmc)
        write_ppc(result, Path(out_dir) / rec.ppc_file, Path(out_dir) / f"{stem}.ppc.csv")
    return rec, result


def select_lambda(corpus: Corpus, model: ModelConfig, sel: SelectorConfig,
                  out_dir: str | Path | None = None, jobs: int = 1) -> LambdaReport:
    """Sweep the grid and pick the learning rate.

    Each rate ``lam`` samples with seed ``derive_seed(sel.mcmc.seed, key, 0)``
    and checks with seed ``derive_seed(sel.mcmc.seed, key, 1)`` where
    ``key = lambda_key(lam)``. A failed rate is recorded and the sweep goes on.
    Early stopping runs the grid sequentially.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    base = sel.mcmc.seed
    tasks = []
    for lam in sel.grid:
        key = lambda_key(lam)
        mcmc = dataclasses.replace(sel.mcmc, seed=derive_seed(base, key, 0))
        tasks.append((corpus, model, lam, mcmc, derive_seed(base, key, 1), sel.collapse_threshold,
                      None if out_dir is None else str(out_dir)))

    with _sweep_lock(out_dir):
        if jobs > 1 and not sel.early_stop and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(_fit_one, *zip(*tasks)))
            records = [rec for rec, _ in outcomes]
        else:
            records = []
            stopped = False
            for task in tasks:
                if stopped:
                    records.append(LambdaRecord(lam=task[2], skipped=True))
                    continue
                rec, _ = _fit_one(*task)
                records.append(rec)
                stopped = sel.early_stop and rec.p_mean == 0.0

    pvalues = {r.lam: r.p_mean for r in records if r.p_mean is not None}
    return LambdaReport(records, choose(pvalues, sel.alpha) if pvalues else None, sel.alpha)
