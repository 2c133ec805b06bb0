"""Exhaustive single-sign-flip oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import bitkit
from ..errors import PreconditionError
from ..nnengine import Dataset, Model
from ..scoring import descending_order
from ..tensorstore import CandidateSet, ParamCoord, candidate_set
from .experiment import pmap
from .metrics import FlipEvaluator, ar

EVAL_SUBSAMPLE = 512
MAX_EVALUATIONS = 10 ** 5 * EVAL_SUBSAMPLE


@dataclass
class SingleFlipTable:
    cands: CandidateSet
    ar1: np.ndarray        # AR(1) per candidate, candidate order
    baseline_acc: float

    def ranked(self) -> list[tuple[ParamCoord, float]]:
        return [(self.cands.coord(i), float(self.ar1[i])) for i in descending_order(self.ar1)]

    def strictly_better_fraction(self, coord: ParamCoord) -> float:
        """Share of single flips whose AR(1) is strictly above that of ``coord``."""
        i = self.index_of(coord)
        return float((self.ar1 > self.ar1[i]).sum()) / len(self.ar1)

    def index_of(self, coord: ParamCoord) -> int:
        tid = self.cands.tensor_names.index(coord.tensor)
        hit = np.nonzero((self.cands.tensor_id == tid) & (self.cands.flat_index == coord.flat_index))[0]
        if not hit.size:
            raise KeyError(coord)
        return int(hit[0])


def eval_subsample(test: Dataset, n: int = EVAL_SUBSAMPLE) -> Dataset:
    """The first ``n`` test samples, fixed for determinism."""
    return test.take(slice(0, min(n, len(test))))


def _single_flip_chunk(state, idx: np.ndarray) -> np.ndarray:
    ev, cands = state["ev"], state["cands"]
    out = np.empty(idx.size, dtype=np.float64)
    for j, p in enumerate(idx.tolist()):
        name = cands.tensor_names[cands.tensor_id[p]]
        base = ev.model.params.array(name)
        words = base.view(np.uint32).reshape(-1).copy()
        words[cands.flat_index[p]] ^= np.uint32(1 << bitkit.SIGN_BIT)
        arr = words.view(np.float32).reshape(base.shape)
        acc = float(ev._correct(ev._acts, ev.model.overriding({name: arr}), ev.first_layer_of[name]).mean())
        out[j] = ar(ev.baseline, acc)
    return out


def brute_force_single_flip(model: Model, data: Dataset, L: int | None, subsample: int = EVAL_SUBSAMPLE,
                            jobs: int = 1) -> SingleFlipTable:
    """AR(1) of every single sign flip among the first-L candidates, on a fixed subsample."""
    cands = candidate_set(model.manifest, model.params, L)
    sub = eval_subsample(data, subsample)
    if len(cands) * len(sub) > MAX_EVALUATIONS:
        raise PreconditionError(f"{len(cands)} candidates x {len(sub)} samples exceeds the exhaustive-search guard")
    ev = FlipEvaluator(model, sub)
    if ev.baseline <= 0:
        raise PreconditionError("model has zero accuracy on the evaluation subsample")
    chunks = np.array_split(np.arange(len(cands)), max(1, min(len(cands), 8 * max(1, jobs))))
    parts = pmap(_single_flip_chunk, chunks, {"ev": ev, "cands": cands}, jobs)
    ar1 = np.concatenate(parts) if parts else np.zeros(0)
    return SingleFlipTable(cands, ar1, float(ev.baseline))
