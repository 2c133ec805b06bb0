"""AR(k) sweeps over attack strategies."""

from __future__ import annotations

import csv
import io
import json
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from ..lesion import (DEFAULT_L, FlipPlan, apply, plan_1p_dnl, plan_dnl, plan_from_scores,
                      plan_magnitude_unconstrained, random_plan_over)
from ..nnengine import Dataset, Model, grad_sum_logits
from ..prng import CounterRNG
from ..scoring import ABLATIONS, hessian_vector_product, score_ablation
from ..tensorstore import candidate_set
from .metrics import FlipEvaluator, ar, mar

DETERMINISTIC = ("dnl", "1p_dnl", "magnitude_unconstrained") + ABLATIONS
METHODS = DETERMINISTIC + ("random",)
REPORT_SCHEMA = "signflip-report/1"
DERIVE_STREAM = 0x53454544  # "SEED"


def derive_seed(base: int, index: int) -> int:
    """Independent 64-bit seed for sub-run ``index`` of a base seed."""
    w = CounterRNG(base, DERIVE_STREAM + index).words(2)
    return int(w[0]) | (int(w[1]) << 32)


def default_jobs() -> int:
    return os.cpu_count() or 1


# -- process pool plumbing; workers inherit _STATE through fork

_STATE: dict = {}


def _call(args):
    fn, item = args
    return fn(_STATE, item)


def pmap(fn, items, state: dict, jobs: int = 1) -> list:
    """Ordered ``[fn(state, item) for item in items]``, optionally across processes."""
    items = list(items)
    if jobs <= 1 or len(items) < 2 or "fork" not in mp.get_all_start_methods():
        return [fn(state, it) for it in items]
    _STATE.clear()
    _STATE.update(state)
    try:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
            return list(pool.map(_call, [(fn, it) for it in items], chunksize=max(1, len(items) // (4 * jobs))))
    finally:
        _STATE.clear()


@dataclass
class KPoint:
    k: int
    acc: float
    ar: float


@dataclass
class EvalReport:
    method: str
    L: int | None
    seeds: list[int]
    baseline_acc: float
    per_k: list[KPoint]
    mAR: float | None
    # random: one row per (seed, k); deterministic: empty
    runs: list[tuple[int, int, float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.per_k)

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, "method": self.method, "L": self.L, "seeds": self.seeds,
                "baseline_acc": self.baseline_acc, "N": self.N,
                "per_k": [{"k": p.k, "acc": p.acc, "ar": p.ar} for p in self.per_k],
                "mAR": self.mAR, "extra": self.extra}

    def csv_rows(self) -> list[list]:
        L = "" if self.L is None else self.L
        rows = []
        if self.runs:
            rows += [[self.method, L, k, seed, _f(acc), _f(a)] for seed, k, acc, a in self.runs]
        seed = "mean" if self.runs else (self.seeds[0] if self.seeds else "")
        rows.append([self.method, L, 0, seed, _f(self.baseline_acc), _f(0.0)])
        rows += [[self.method, L, p.k, seed, _f(p.acc), _f(p.ar)] for p in self.per_k]
        if self.mAR is not None:
            rows.append([self.method, L, f"mAR{self.N}", seed, "", _f(self.mAR)])
        return rows


def _f(x: float) -> str:
    return repr(float(x))


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# {REPORT_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "L", "k", "seed", "acc", "ar"])
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2) + "\n"


def top_plan(model: Model, method: str, N: int, L: int | None, seed: int = 0, alpha: float = 1.0,
             beta: float = 1.0) -> FlipPlan:
    """One size-N plan whose prefixes give the k <= N plans of a deterministic method."""
    m, a = model.manifest, model.params
    if method == "dnl":
        return plan_dnl(m, a, N, L if L is not None else DEFAULT_L)
    if method == "1p_dnl":
        return plan_1p_dnl(model, N, L if L is not None else DEFAULT_L, seed, alpha, beta)
    if method == "magnitude_unconstrained":
        return plan_magnitude_unconstrained(m, a, N)
    if method in ABLATIONS:
        cands = candidate_set(m, a, L if L is not None else DEFAULT_L)
        g = grad_sum_logits(model, seed)
        hv = hessian_vector_product(model, g) if method == "grasp" else None
        return plan_from_scores(score_ablation(method, cands, g, hv), N, method, seed=seed)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_prefixes(ev: FlipEvaluator, plan: FlipPlan) -> list[KPoint]:
    """AR(k) for every prefix of ``plan``; restores through apply's involution and checks it."""
    pristine = ev.model.params
    out = []
    for k in range(1, plan.k + 1):
        prefix = plan.prefix(k)
        attacked = apply(prefix, pristine)
        acc = ev.accuracy_of_archive(attacked)
        if not apply(prefix, attacked).bit_equal(pristine):
            raise DataError("restoring the archive after evaluation did not reproduce the baseline")
        out.append(KPoint(k, acc, ar(ev.baseline, acc)))
    return out


def _random_seed_run(state, seed):
    ev, cands, N, sign_only = state["ev"], state["cands"], state["N"], state["sign_only"]
    rows = []
    for k in range(1, N + 1):
        plan = random_plan_over(cands, k, derive_seed(seed, k), sign_only)
        acc = ev.accuracy_after((f.tensor, f.flat_index, f.bit) for f in plan.flips)
        rows.append((seed, k, acc, ar(ev.baseline, acc)))
    return rows


def run_experiment(model: Model, data: Dataset, method: str, N: int, L: int | None = DEFAULT_L,
                   seeds=(0,), alpha: float = 1.0, beta: float = 1.0, jobs: int = 1,
                   sign_only: bool = True, evaluator: FlipEvaluator | None = None) -> EvalReport:
    """AR(1..N) of ``method`` on ``data``.

    Deterministic methods evaluate the prefixes of a single size-N plan.
    ``random`` draws a fresh plan per (seed, k) over all layers and reports
    per-k means, with per-seed rows and percentile bands alongside.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if N < 0:
        raise ConfigError("N must be >= 0")
    seeds = [int(s) for s in seeds]
    ev = evaluator or FlipEvaluator(model, data)
    base = float(ev.baseline)
    if N == 0:
        return EvalReport(method, L, seeds, base, [], None)

    if method != "random":
        seed = seeds[0] if seeds else 0
        plan = top_plan(model, method, N, L, seed, alpha, beta)
        pts = evaluate_prefixes(ev, plan)
        extra = {"plan": [[f.tensor, f.flat_index, f.bit] for f in plan.flips]}
        if method == "1p_dnl":
            extra.update(alpha=alpha, beta=beta)
        pass_free = method in ("dnl", "magnitude_unconstrained")
        return EvalReport(method, None if method == "magnitude_unconstrained" else plan.L,
                          [] if pass_free else [seed], base, pts, mar([p.ar for p in pts]), extra=extra)

    if not seeds:
        raise ConfigError("random method needs at least one seed")
    cands = candidate_set(model.manifest, model.params, None)
    state = {"ev": ev, "cands": cands, "N": N, "sign_only": sign_only}
    runs = [row for rows in pmap(_random_seed_run, seeds, state, jobs) for row in rows]
    acc = np.array([r[2] for r in runs]).reshape(len(seeds), N)
    ars = np.array([r[3] for r in runs]).reshape(len(seeds), N)
    pts = [KPoint(k, float(acc[:, k - 1].mean()), ar(base, float(acc[:, k - 1].mean()))) for k in range(1, N + 1)]
    seed_mar = ars.mean(axis=1)
    extra = {
        "ar_percentiles": {str(q): [float(np.percentile(ars[:, k], q)) for k in range(N)] for q in (5, 50, 95)},
        "mar_percentiles": {str(q): float(np.percentile(seed_mar, q)) for q in (5, 50, 95)},
        "sign_only": sign_only,
    }
    return EvalReport("random", None, seeds, base, pts, mar([p.ar for p in pts]), runs, extra)


def random_seed_mars(report: EvalReport) -> np.ndarray:
    """Per-seed mAR(N) of a random report, in seed order."""
    ars = np.array([r[3] for r in report.runs]).reshape(len(report.seeds), report.N)
    return ars.mean(axis=1)


def random_ar_matrix(report: EvalReport) -> np.ndarray:
    """(seeds, N) AR matrix of a random report."""
    return np.array([r[3] for r in report.runs]).reshape(len(report.seeds), report.N)
