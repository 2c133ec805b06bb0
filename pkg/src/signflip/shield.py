"""Selective sign-bit protection: registry, sidecar, repair, stress test.

Hamming sidecars hold full 64-bit codewords of the protected signs as they
were at encode time.  Verification rebuilds each codeword from the archive's
*live* sign bits (data positions) and the sidecar's check bits, so up to one
flipped protected sign per block is corrected and two are detected.
Replicate-3 sidecars are authoritative: each protected sign is reset to the
majority of its three stored copies.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import bitkit, ecc
from .bench.metrics import FlipEvaluator, ar
from .errors import DataError, FormatError, PreconditionError
from .lesion import apply, random_plan_over
from .nnengine import Dataset, Model
from .prng import CounterRNG
from .scoring import ScoreTable, score_magnitude
from .tensorstore import CandidateSet, ParamCoord, WeightArchive, candidate_set

SCHEMES = ("replicate3", "hamming_secded")
SIDECAR_MAGIC = b"NLSB"
SIDECAR_VERSION = 1
SWEEP_FRACTIONS = (0.01, 0.05, 0.10, 0.20)
DEFAULT_STRESS_FRACTION = 0.10
PROTECT_STREAM = 0x50524F54  # "PROT"


@dataclass
class ProtectionRegistry:
    protected: list[ParamCoord]
    fraction: float
    selection: str  # "by_score" | "random"
    seed: int | None = None
    population: int | None = None

    def __post_init__(self):
        if len(set(self.protected)) != len(self.protected):
            raise DataError("protection registry contains duplicate coordinates")
        if self.selection not in ("by_score", "random"):
            raise DataError(f"unknown selection {self.selection!r}")
        self._groups = None

    def __len__(self) -> int:
        return len(self.protected)

    def to_json(self) -> dict:
        return {"selection": self.selection, "fraction": self.fraction, "seed": self.seed,
                "population": self.population,
                "protected": [{"tensor": c.tensor, "flat_index": c.flat_index} for c in self.protected]}

    def dumps(self) -> bytes:
        return (json.dumps(self.to_json(), indent=1) + "\n").encode("utf-8")

    def digest(self) -> bytes:
        return hashlib.sha256(self.dumps()).digest()

    @classmethod
    def from_json(cls, d: dict) -> "ProtectionRegistry":
        try:
            coords = [ParamCoord(str(p["tensor"]), int(p["flat_index"])) for p in d["protected"]]
            return cls(coords, float(d["fraction"]), str(d["selection"]), d.get("seed"), d.get("population"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed registry: {exc!r}") from exc

    @classmethod
    def loads(cls, buf: bytes) -> "ProtectionRegistry":
        try:
            return cls.from_json(json.loads(buf.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed registry: {exc}") from exc

    def groups(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(tensor, positions in registry order, flat indices) per tensor."""
        if self._groups is None:
            by: dict[str, tuple[list[int], list[int]]] = {}
            for pos, c in enumerate(self.protected):
                p, f = by.setdefault(c.tensor, ([], []))
                p.append(pos)
                f.append(c.flat_index)
            self._groups = [(t, np.asarray(p, dtype=np.int64), np.asarray(f, dtype=np.int64))
                            for t, (p, f) in by.items()]
        return self._groups

    def sign_bits(self, a: WeightArchive) -> np.ndarray:
        out = np.zeros(len(self.protected), dtype=np.uint8)
        for tensor, pos, flat in self.groups():
            if tensor not in a:
                raise PreconditionError(f"registry names unknown tensor {tensor!r}")
            words = a.array(tensor).reshape(-1)
            if flat.size and flat.max() >= words.size:
                raise PreconditionError(f"registry index out of bounds for {tensor!r}")
            out[pos] = bitkit.sign_bits_array(words[flat])
        return out


@dataclass
class SignSidecar:
    scheme: str
    payload: np.ndarray  # unpacked bits, uint8
    registry_digest: bytes = field(default=b"\0" * 32)

    def to_bytes(self) -> bytes:
        scheme_id = SCHEMES.index(self.scheme)
        return (SIDECAR_MAGIC + struct.pack("<HB", SIDECAR_VERSION, scheme_id) + self.registry_digest
                + struct.pack("<Q", int(self.payload.size)) + ecc.pack_bits(self.payload))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SignSidecar":
        head = 4 + 2 + 1 + 32 + 8
        if len(buf) < head:
            raise FormatError("truncated sidecar header", len(buf))
        if buf[:4] != SIDECAR_MAGIC:
            raise FormatError("bad sidecar magic", 0)
        version, scheme_id = struct.unpack("<HB", buf[4:7])
        if version != SIDECAR_VERSION:
            raise FormatError(f"unsupported sidecar version {version}", 4)
        if scheme_id >= len(SCHEMES):
            raise FormatError(f"unknown sidecar scheme id {scheme_id}", 6)
        digest = buf[7:39]
        (nbits,) = struct.unpack("<Q", buf[39:47])
        need = -(-nbits // 8)
        if len(buf) - head < need:
            raise FormatError(f"truncated sidecar payload: need {need} bytes", len(buf))
        if len(buf) - head > need:
            raise FormatError("trailing bytes after sidecar payload", head + need)
        return cls(SCHEMES[scheme_id], ecc.unpack_bits(buf[head:], nbits), digest)

    def decoded_signs(self, n: int) -> np.ndarray:
        """Sign bits held by the sidecar (majority / ECC-corrected)."""
        if self.scheme == "replicate3":
            return ecc.replicate3_decode(self.payload)[:n]
        return ecc.hamming_decode(self.payload)[0][:n]


def _check_fraction(fraction: float) -> None:
    if not 0 < fraction <= 1:
        raise PreconditionError(f"protection fraction must be in (0, 1], got {fraction}")


def protected_count(fraction: float, population: int) -> int:
    # the small epsilon keeps e.g. 0.07 * 100 from rounding up to 8
    return min(population, math.ceil(fraction * population - 1e-9))


def select_protected(scores: ScoreTable, fraction: float) -> ProtectionRegistry:
    """Top ceil(fraction * N) candidates by score (standard tie-break)."""
    _check_fraction(fraction)
    c = scores.cands
    n = protected_count(fraction, len(c))
    coords = [c.coord(i) for i in scores.order()[:n].tolist()]
    return ProtectionRegistry(coords, fraction, "by_score", None, len(c))


def select_protected_random(population: CandidateSet, fraction: float, seed: int) -> ProtectionRegistry:
    _check_fraction(fraction)
    n = protected_count(fraction, len(population))
    idx = np.sort(CounterRNG(seed, PROTECT_STREAM).sample(len(population), n))
    return ProtectionRegistry([population.coord(i) for i in idx.tolist()], fraction, "random", seed, len(population))


def encode(a: WeightArchive, r: ProtectionRegistry, scheme: str = "replicate3") -> SignSidecar:
    if scheme not in SCHEMES:
        raise PreconditionError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    signs = r.sign_bits(a)
    payload = ecc.replicate3_encode(signs) if scheme == "replicate3" else ecc.hamming_encode(signs)
    return SignSidecar(scheme, payload, r.digest())


@dataclass
class RepairResult:
    repaired: WeightArchive
    corrected: list[ParamCoord]
    alarms: list[int]  # uncorrectable hamming block indices


def _expected_payload(scheme: str, n: int) -> int:
    return 3 * n if scheme == "replicate3" else ecc.hamming_blocks(n) * ecc.BLOCK_BITS


def verify_and_repair(a: WeightArchive, r: ProtectionRegistry, s: SignSidecar) -> RepairResult:
    n = len(r)
    if s.registry_digest != r.digest():
        raise DataError("sidecar was not produced for this registry (digest mismatch)")
    if s.payload.size != _expected_payload(s.scheme, n):
        raise DataError(f"sidecar payload has {s.payload.size} bits, registry needs "
                        f"{_expected_payload(s.scheme, n)}")
    live = r.sign_bits(a)
    alarms: list[int] = []
    if s.scheme == "replicate3":
        target = ecc.replicate3_decode(s.payload)
    else:
        code = s.payload.reshape(-1, ecc.BLOCK_BITS).copy()
        data = np.zeros(code.shape[0] * ecc.DATA_BITS, dtype=np.uint8)
        data[:n] = live
        code[:, ecc.DATA_POSITIONS] = data.reshape(-1, ecc.DATA_BITS)
        decoded, _, double = ecc.hamming_decode(code)
        alarms = np.nonzero(double)[0].tolist()
        target = decoded[:n].copy()
        for b in alarms:
            # detected but uncorrectable: leave the block as it is
            lo, hi = b * ecc.DATA_BITS, min(n, (b + 1) * ecc.DATA_BITS)
            target[lo:hi] = live[lo:hi]
    wrong = np.nonzero(target != live)[0]
    if not wrong.size:
        return RepairResult(a, [], alarms)
    flips = [(r.protected[i].tensor, r.protected[i].flat_index) for i in wrong.tolist()]
    by: dict[str, list[int]] = {}
    for t, f in flips:
        by.setdefault(t, []).append(f)
    repaired = a.replace({t: bitkit.flip_bits_array(a.array(t), idx, [bitkit.SIGN_BIT] * len(idx))
                          for t, idx in by.items()})
    return RepairResult(repaired, [r.protected[i] for i in wrong.tolist()], alarms)


def save_sidecar(s: SignSidecar, path) -> None:
    with open(path, "wb") as fh:
        fh.write(s.to_bytes())


def load_sidecar(path) -> SignSidecar:
    with open(path, "rb") as fh:
        return SignSidecar.from_bytes(fh.read())


def save_registry(r: ProtectionRegistry, path) -> None:
    with open(path, "wb") as fh:
        fh.write(r.dumps())


def load_registry(path) -> ProtectionRegistry:
    with open(path, "rb") as fh:
        return ProtectionRegistry.loads(fh.read())


# ---------------------------------------------------------------- stress test

@dataclass
class StressOutcome:
    seed: int
    n_flips: int
    baseline_acc: float
    acc: float
    ar: float
    corrected: int = 0
    alarms: int = 0


def stress(model: Model, data: Dataset, r: ProtectionRegistry | None, s: SignSidecar | None, n_flips: int,
           seed: int, sign_only: bool = True, evaluator: FlipEvaluator | None = None,
           population: CandidateSet | None = None) -> StressOutcome:
    """Random flip barrage over all candidate weights, optional repair, then accuracy."""
    if (r is None) != (s is None):
        raise PreconditionError("registry and sidecar must be given together")
    ev = evaluator or FlipEvaluator(model, data)
    cands = population if population is not None else candidate_set(model.manifest, model.params, None)
    if not 0 <= n_flips <= len(cands):
        raise PreconditionError(f"n_flips={n_flips} exceeds the population of {len(cands)} candidates")
    plan = random_plan_over(cands, n_flips, seed, sign_only)
    attacked = apply(plan, model.params)
    corrected = alarms = 0
    if r is not None:
        res = verify_and_repair(attacked, r, s)
        attacked, corrected, alarms = res.repaired, len(res.corrected), len(res.alarms)
    acc = ev.accuracy_of_archive(attacked)
    return StressOutcome(seed, n_flips, float(ev.baseline), acc, ar(ev.baseline, acc), corrected, alarms)


@dataclass
class SweepRow:
    selection: str
    fraction: float
    seed: int
    n_flips: int
    acc: float
    ar: float
    corrected: int
    alarms: int


def stress_sweep(model: Model, data: Dataset, fractions=(0.0,) + SWEEP_FRACTIONS, seeds=range(20),
                 selection: str = "by_score", scheme: str = "replicate3",
                 flip_fraction: float = DEFAULT_STRESS_FRACTION, score_L: int | None = None,
                 sign_only: bool = True, evaluator: FlipEvaluator | None = None) -> list[SweepRow]:
    """AR under a seeded barrage for each protection fraction (0 = unprotected).

    Every fraction sees the same flips for a given seed.  ``by_score`` ranks
    by |theta| over the layers up to ``score_L`` (None = all); ``random``
    protection draws its subset from the same seed.
    """
    ev = evaluator or FlipEvaluator(model, data)
    pop = candidate_set(model.manifest, model.params, None)
    n_flips = int(round(flip_fraction * len(pop)))
    ranked = score_magnitude(candidate_set(model.manifest, model.params, score_L))
    static: dict[float, tuple] = {}
    rows = []
    for seed in seeds:
        for frac in fractions:
            if frac == 0:
                reg = side = None
            elif selection == "by_score":
                if frac not in static:
                    reg = select_protected(ranked, frac)
                    static[frac] = (reg, encode(model.params, reg, scheme))
                reg, side = static[frac]
            elif selection == "random":
                reg = select_protected_random(pop, frac, seed)
                side = encode(model.params, reg, scheme)
            else:
                raise PreconditionError(f"unknown selection {selection!r}")
            out = stress(model, data, reg, side, n_flips, seed, sign_only, ev, pop)
            rows.append(SweepRow(selection, frac, int(seed), n_flips, out.acc, out.ar, out.corrected, out.alarms))
    return rows


def sweep_means(rows: list[SweepRow]) -> dict[float, float]:
    by: dict[float, list[float]] = {}
    for row in rows:
        by.setdefault(row.fraction, []).append(row.ar)
    return {f: float(np.mean(v)) for f, v in by.items()}
