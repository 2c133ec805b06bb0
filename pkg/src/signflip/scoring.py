"""Per-parameter saliency scores over a candidate set.

All formulas are elementwise.  Scores are computed in float64 and stored as
float32.  Ordering uses :func:`descending_order`: score descending, then the
candidate position (layer, tensor name, flat index) ascending.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError, PreconditionError
from .nnengine import GradientSnapshot, Model, gaussian_input
from .tensorstore import CandidateSet, ParamCoord

METHODS = ("magnitude", "hybrid", "grasp", "grasp_gn", "synflow", "obd")
ABLATIONS = ("grasp", "grasp_gn", "synflow", "obd")


@dataclass(frozen=True)
class ScoreTable:
    cands: CandidateSet
    scores: np.ndarray  # float32, aligned with cands
    method: str
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.scores.shape != (len(self.cands),):
            raise DataError("score vector does not match the candidate set")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise DataError(f"{self.method} scores must be finite and non-negative")

    def order(self) -> np.ndarray:
        return descending_order(self.scores)

    def as_dict(self) -> dict[ParamCoord, float]:
        return {self.cands.coord(i): float(self.scores[i]) for i in range(len(self.cands))}

    def to_csv(self, ranked: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tensor", "flat_index", "layer", "kernel", "score", "value"])
        rows = self.order() if ranked else range(len(self.cands))
        c = self.cands
        for i in rows:
            w.writerow([c.tensor_names[c.tensor_id[i]], int(c.flat_index[i]), int(c.layer[i]),
                        int(c.kernel_index[i]), repr(float(self.scores[i])), repr(float(c.values[i]))])
        return buf.getvalue()


def descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on the negated key keeps candidate position as the tie-break;
    # -0.0 and 0.0 compare equal so signed zeros tie as they should
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _finite(values: np.ndarray) -> np.ndarray:
    v = values.astype(np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError("candidate values must be finite to be scored")
    return v


def _grads_for(cands: CandidateSet, g: GradientSnapshot) -> np.ndarray:
    out = np.empty(len(cands), dtype=np.float64)
    for tid, name in enumerate(cands.tensor_names):
        if name not in g:
            raise PreconditionError(f"gradient snapshot has no entry for tensor {name!r}")
        sel = cands.tensor_id == tid
        flat = g.grads[name].reshape(-1)
        if cands.flat_index[sel].size and cands.flat_index[sel].max() >= flat.size:
            raise PreconditionError(f"gradient for {name!r} is smaller than the tensor")
        out[sel] = flat[cands.flat_index[sel]]
    return out


def score_magnitude(cands: CandidateSet) -> ScoreTable:
    return ScoreTable(cands, np.abs(_finite(cands.values)).astype(np.float32), "magnitude", 1.0, 0.0)


def hybrid_formula(theta, grad, alpha: float = 1.0, beta: float = 1.0):
    """alpha*|theta| + beta*|theta*g + 0.5*theta^2*H_ii| with H_ii = g^2."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    return alpha * np.abs(theta) + beta * np.abs(theta * grad + 0.5 * theta ** 2 * grad ** 2)


def score_hybrid(cands: CandidateSet, g: GradientSnapshot, alpha: float = 1.0, beta: float = 1.0) -> ScoreTable:
    theta = _finite(cands.values)
    s = hybrid_formula(theta, _grads_for(cands, g), alpha, beta)
    return ScoreTable(cands, s.astype(np.float32), "hybrid", float(alpha), float(beta))


def score_ablation(kind: str, cands: CandidateSet, g: GradientSnapshot,
                   hv: GradientSnapshot | None = None) -> ScoreTable:
    """Pruning-literature saliencies.

    grasp:     |theta * (Hg)_i|, Hg supplied by ``hv``
    grasp_gn:  |theta * g^2 * g|  (H replaced by the elementwise squared gradient)
    synflow:   |g * theta|
    obd:       0.5 * theta^2 * g^2
    """
    if kind not in ABLATIONS:
        raise PreconditionError(f"unknown ablation score {kind!r}; expected one of {ABLATIONS}")
    theta = _finite(cands.values)
    grad = _grads_for(cands, g)
    if kind == "grasp":
        if hv is None:
            raise PreconditionError("grasp needs a Hessian-vector product (hv)")
        s = np.abs(theta * _grads_for(cands, hv))
    elif kind == "grasp_gn":
        s = np.abs(theta * grad ** 3)
    elif kind == "synflow":
        s = np.abs(grad * theta)
    else:
        s = 0.5 * theta ** 2 * grad ** 2
    return ScoreTable(cands, s.astype(np.float32), kind, 0.0, 1.0)


def hessian_vector_product(model: Model, g: GradientSnapshot, eps: float = 1e-3) -> GradientSnapshot:
    """H·g of R = sum(logits) by central difference of gradients along g.

    Hg ~ (grad R(theta + eps*u) - grad R(theta - eps*u)) / (2 eps / |g|), u = g/|g|.
    Costs two forward and two backward traversals on the same Gaussian input
    as ``g``.  R is piecewise linear in each layer for ReLU nets, so the
    result is a secant estimate across nearby kinks, not an exact product.
    """
    norm = float(np.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in g.grads.values())))
    if norm == 0.0:
        return GradientSnapshot({k: np.zeros_like(v) for k, v in g.grads.items()}, g.seed, g.batch)
    x = gaussian_input(model.manifest.input_shape, g.seed, g.batch).astype(np.float64)
    base = model.astype(np.float64)
    side = []
    for sign in (1.0, -1.0):
        shifted = base.astype(np.float64)
        for name, v in g.grads.items():
            shifted._arrays[name] = base._arrays[name] + sign * eps * v.astype(np.float64) / norm
        logits, cache = shifted.forward_batch(x, keep=True)
        side.append(shifted.backward(cache, np.ones_like(logits)))
    hv = {k: ((side[0][k] - side[1][k]) * (norm / (2 * eps))).astype(np.float32) for k in g.grads}
    return GradientSnapshot(hv, g.seed, g.batch)
