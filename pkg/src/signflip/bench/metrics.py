"""Accuracy-reduction metrics and a cached evaluator for flipped models."""

from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .. import bitkit
from ..errors import PreconditionError
from ..nnengine import Dataset, Model
from ..tensorstore import WeightArchive


def ar(acc0: float, acc_k: float) -> float:
    """Relative accuracy reduction (acc0 - acc_k) / acc0.

    Evaluated exactly on the given floats and rounded once, so e.g.
    ar(0.8, 0.2) is 0.75 rather than 0.7500000000000001.
    """
    if acc0 <= 0:
        raise PreconditionError("baseline accuracy must be positive for AR")
    a0 = Fraction(float(acc0))
    return float((a0 - Fraction(float(acc_k))) / a0)


def mar(ars: Sequence[float]) -> float:
    """Mean of AR(1..N)."""
    ars = list(ars)
    if not ars:
        raise PreconditionError("mAR needs at least one AR value")
    return float(sum(map(Fraction, map(float, ars))) / len(ars))


class FlipEvaluator:
    """Accuracy of a fixed model under small sets of bit flips.

    The pristine model's per-layer activations are cached once; a flipped
    model is re-run only from the first layer whose parameters change.  The
    recomputation uses the same engine operations on the same cached inputs,
    so results are bit-identical to a full forward pass.
    """

    def __init__(self, model: Model, data: Dataset, chunk: int = 2048):
        if len(data) == 0:
            raise PreconditionError("evaluation set is empty")
        self.model = model
        self.data = data
        self.chunk = chunk
        self._chunks = [slice(i, i + chunk) for i in range(0, len(data), chunk)]
        self._acts = [model.activations(data.x[s]) for s in self._chunks]
        self.first_layer_of = {}
        for pos, layer in enumerate(model.manifest.layers):
            for t in (layer.weight_tensor, layer.bias_tensor):
                if t:
                    self.first_layer_of[t] = pos
        self.baseline_correct = self._correct(self._acts, model, None)
        self.baseline = self.baseline_correct.mean()

    def _correct(self, acts, model: Model, start: int | None) -> np.ndarray:
        out = []
        for s, a in zip(self._chunks, acts):
            logits = a[-1] if start is None else model.forward_from(start, a[start])
            out.append(logits.argmax(axis=1) == self.data.y[s])
        return np.concatenate(out)

    def correct_after(self, flips: Iterable[tuple[str, int, int]]) -> np.ndarray:
        """Per-sample correctness after toggling (tensor, flat_index, bit) flips."""
        grouped: dict[str, tuple[list[int], list[int]]] = {}
        for tensor, idx, bit in flips:
            i, b = grouped.setdefault(tensor, ([], []))
            i.append(idx)
            b.append(bit)
        if not grouped:
            return self.baseline_correct
        arrays = {t: bitkit.flip_bits_array(self.model.params.array(t), i, b) for t, (i, b) in grouped.items()}
        start = min(self.first_layer_of[t] for t in arrays)
        return self._correct(self._acts, self.model.overriding(arrays), start)

    def accuracy_after(self, flips) -> float:
        return float(self.correct_after(flips).mean())

    def accuracy_of_archive(self, archive: WeightArchive) -> float:
        """Accuracy of arbitrary parameters; re-runs from the first layer that differs."""
        changed = {t: archive.array(t) for t in archive
                   if not np.array_equal(archive.array(t).view(np.uint32), self.model.params.array(t).view(np.uint32))}
        if not changed:
            return float(self.baseline)
        start = min(self.first_layer_of[t] for t in changed)
        return float(self._correct(self._acts, self.model.overriding(changed), start).mean())
