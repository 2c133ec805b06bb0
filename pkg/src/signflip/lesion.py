"""Attack planners and the flip applicator.

A plan is a list of (tensor, flat_index, bit) flips.  Planning never touches
the archive it reads; :func:`apply` produces a new archive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import bitkit
from .errors import DataError, PreconditionError
from .nnengine import Model, grad_sum_logits
from .prng import CounterRNG
from .scoring import ScoreTable, score_hybrid, score_magnitude
from .tensorstore import CandidateSet, ModelManifest, ParamCoord, WeightArchive, candidate_set

DEFAULT_L = 10
RANDOM_PLAN_STREAM = 0x504C414E  # "PLAN"
SIGN_METHODS = ("dnl", "1p_dnl", "magnitude_unconstrained", "random_sign")
KERNEL_METHODS = ("dnl", "1p_dnl")


@dataclass
class Flip:
    tensor: str
    flat_index: int
    bit: int = bitkit.SIGN_BIT

    @property
    def coord(self) -> ParamCoord:
        return ParamCoord(self.tensor, self.flat_index)


@dataclass
class FlipPlan:
    flips: list[Flip]
    k: int
    method: str
    L: int | None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k != len(self.flips):
            raise DataError(f"plan declares k={self.k} but holds {len(self.flips)} flips")
        seen = set()
        for f in self.flips:
            if not 0 <= f.bit <= 31:
                raise DataError(f"bit {f.bit} out of range in plan")
            key = (f.tensor, f.flat_index, f.bit)
            if key in seen:
                raise DataError(f"duplicate flip {key} in plan")
            seen.add(key)

    def prefix(self, k: int) -> "FlipPlan":
        return FlipPlan(self.flips[:k], k, self.method, self.L, self.seed, dict(self.extra))

    def to_json(self) -> dict:
        d = {"method": self.method, "k": self.k, "L": self.L, "seed": self.seed,
             "flips": [{"tensor": f.tensor, "flat_index": f.flat_index, "bit": f.bit} for f in self.flips]}
        if self.extra:
            d["extra"] = self.extra
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "FlipPlan":
        try:
            flips = [Flip(str(f["tensor"]), int(f["flat_index"]), int(f["bit"])) for f in d["flips"]]
            return cls(flips, int(d["k"]), str(d["method"]), d.get("L"), d.get("seed"), dict(d.get("extra", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed plan: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "FlipPlan":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataError(f"plan {path}: {exc}") from exc


def select_top_k(order: np.ndarray, kernel_key: np.ndarray | None, k: int) -> np.ndarray:
    """Walk ``order`` and keep entries whose kernel is not used yet, until ``k`` are kept.

    ``kernel_key=None`` drops the per-kernel constraint.
    """
    if kernel_key is None:
        return order[:k]
    taken: set[int] = set()
    picked = []
    for i in order.tolist():
        kk = int(kernel_key[i])
        if kk in taken:
            continue
        taken.add(kk)
        picked.append(i)
        if len(picked) == k:
            break
    return np.asarray(picked, dtype=np.int64)


def _check_k(k: int, available: int, what: str) -> None:
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    if k > available:
        raise PreconditionError(f"k={k} exceeds the {available} available {what}")


def plan_from_scores(table: ScoreTable, k: int, method: str, one_per_kernel: bool = True,
                     seed: int | None = None) -> FlipPlan:
    c = table.cands
    if one_per_kernel:
        _check_k(k, c.kernel_count, f"kernels in the first {c.L} layers")
    else:
        _check_k(k, len(c), "candidate parameters")
    picked = select_top_k(table.order(), c.kernel_key if one_per_kernel else None, k)
    flips = [Flip(c.tensor_names[c.tensor_id[i]], int(c.flat_index[i])) for i in picked]
    return FlipPlan(flips, k, method, c.L, seed)


def plan_dnl(m: ModelManifest, a: WeightArchive, k: int, L: int = DEFAULT_L) -> FlipPlan:
    """Pass-free: top-|theta| sign flips in the first ``L`` layers, one per kernel."""
    return plan_from_scores(score_magnitude(candidate_set(m, a, L)), k, "dnl")


def plan_1p_dnl(model: Model, k: int, L: int = DEFAULT_L, seed: int = 0, alpha: float = 1.0,
                beta: float = 1.0, batch: int = 1) -> FlipPlan:
    """Single pass: hybrid score from one gradient of summed logits on Gaussian noise."""
    cands = candidate_set(model.manifest, model.params, L)
    # validate before paying for the traversal
    _check_k(k, cands.kernel_count, f"kernels in the first {cands.L} layers")
    g = grad_sum_logits(model, seed, batch)
    plan = plan_from_scores(score_hybrid(cands, g, alpha, beta), k, "1p_dnl", seed=seed)
    plan.extra = {"alpha": alpha, "beta": beta, "batch": batch}
    return plan


def plan_magnitude_unconstrained(m: ModelManifest, a: WeightArchive, k: int) -> FlipPlan:
    """Global top-k by |theta| over every layer, no kernel constraint."""
    return plan_from_scores(score_magnitude(candidate_set(m, a, None)), k, "magnitude_unconstrained",
                            one_per_kernel=False)


def plan_random(m: ModelManifest, a: WeightArchive, k: int, seed: int, sign_only: bool = True,
                restrict_L: int | None = None) -> FlipPlan:
    """Uniform sample of ``k`` distinct candidates; bit 31, or a uniform bit when not ``sign_only``."""
    cands = candidate_set(m, a, restrict_L)
    return random_plan_over(cands, k, seed, sign_only)


def random_plan_over(cands: CandidateSet, k: int, seed: int, sign_only: bool = True) -> FlipPlan:
    if k < 0 or k > len(cands):
        raise PreconditionError(f"k={k} exceeds the population of {len(cands)} candidates")
    rng = CounterRNG(seed, RANDOM_PLAN_STREAM)
    idx = rng.sample(len(cands), k)
    bits = np.full(k, bitkit.SIGN_BIT) if sign_only else rng.below(np.full(k, 32))
    flips = [Flip(cands.tensor_names[cands.tensor_id[i]], int(cands.flat_index[i]), int(b))
             for i, b in zip(idx.tolist(), bits.tolist())]
    return FlipPlan(flips, k, "random_sign" if sign_only else "random_bit", cands.L, seed)


def apply(plan: FlipPlan, a: WeightArchive) -> WeightArchive:
    """New archive with exactly the planned bits toggled.  Applying twice restores ``a``."""
    by_tensor: dict[str, tuple[list[int], list[int]]] = {}
    for f in plan.flips:
        if f.tensor not in a:
            raise PreconditionError(f"plan targets unknown tensor {f.tensor!r}")
        size = a.array(f.tensor).size
        if not 0 <= f.flat_index < size:
            raise PreconditionError(f"flat_index {f.flat_index} out of bounds for {f.tensor!r} ({size} values)")
        idx, pos = by_tensor.setdefault(f.tensor, ([], []))
        idx.append(f.flat_index)
        pos.append(f.bit)
    if not by_tensor:
        return a
    return a.replace({name: bitkit.flip_bits_array(a.array(name), idx, pos) for name, (idx, pos) in by_tensor.items()})
