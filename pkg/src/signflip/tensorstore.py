"""Weight archives (safetensors layout, F32 only) and model manifests.

An archive keeps the header bytes and the full data region it was parsed
from.  Serialising an archive whose layout is unchanged writes those bytes
back with only the tensor spans refreshed, so a single flipped sign bit shows
up as a single changed byte in the output.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, FormatError, PreconditionError

METADATA_KEY = "__metadata__"
LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "flatten")
PARAM_KINDS = ("conv2d", "linear")
# refuse absurd headers before allocating them
MAX_HEADER_BYTES = 100 * 1024 * 1024


class ParamCoord(NamedTuple):
    tensor: str
    flat_index: int


class KernelId(NamedTuple):
    param_layer_index: int
    kernel_index: int


class TensorRecord(NamedTuple):
    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray  # float32, read-only, C-contiguous, shaped


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


class WeightArchive(Mapping[str, TensorRecord]):
    """Ordered, immutable map of tensor name to FP32 record."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 metadata: Mapping[str, str] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            arr = np.asarray(arr)
            if arr.dtype != np.float32:
                raise DataError(f"tensor {name!r} must be float32, got {arr.dtype}")
            if any(d < 1 for d in arr.shape):
                raise DataError(f"tensor {name!r} has a zero-length dimension: {arr.shape}")
            self._tensors[name] = _frozen(arr)
        self.metadata: dict[str, str] | None = dict(metadata) if metadata is not None else None
        # set by read_archive; reused by write_archive while the layout is unchanged
        self._header: bytes | None = None
        self._data_region: bytes | None = None
        self._spans: dict[str, tuple[int, int]] | None = None

    def __getitem__(self, name: str) -> TensorRecord:
        a = self._tensors[name]
        return TensorRecord("F32", tuple(a.shape), a)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def array(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "WeightArchive":
        """Copy with some tensors' values replaced (shapes must not change)."""
        new = WeightArchive.__new__(WeightArchive)
        new._tensors = dict(self._tensors)
        for name, arr in updates.items():
            if name not in self._tensors:
                raise DataError(f"unknown tensor {name!r}")
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != self._tensors[name].shape:
                raise DataError(f"shape change for {name!r}: {self._tensors[name].shape} -> {arr.shape}")
            new._tensors[name] = _frozen(arr.copy())
        new.metadata = self.metadata
        new._header, new._data_region, new._spans = self._header, self._data_region, self._spans
        return new

    def bit_equal(self, other: "WeightArchive") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self._tensors[n].shape == other._tensors[n].shape
            and np.array_equal(self._tensors[n].view(np.uint32), other._tensors[n].view(np.uint32))
            for n in self
        )

    def num_values(self) -> int:
        return sum(a.size for a in self._tensors.values())


def _fail(msg: str, offset: int | None = None):
    raise FormatError(msg, offset)


def read_archive(buf: bytes) -> WeightArchive:
    buf = bytes(buf)
    if len(buf) < 8:
        _fail(f"truncated stream: {len(buf)} bytes, need 8 for the header length", len(buf))
    (n,) = struct.unpack("<Q", buf[:8])
    if n > MAX_HEADER_BYTES:
        _fail(f"header length {n} exceeds limit", 0)
    if 8 + n > len(buf):
        _fail(f"truncated stream: header declares {n} bytes, only {len(buf) - 8} present", len(buf))
    header_bytes = buf[8:8 + n]
    try:
        header = json.loads(header_bytes.decode("utf-8"), object_pairs_hook=dict)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        _fail(f"malformed header: {exc}", 8 + pos)
    if not isinstance(header, dict):
        _fail("malformed header: top level is not an object", 8)

    data = buf[8 + n:]
    base = 8 + n
    metadata = None
    entries = []
    for name, info in header.items():
        if name == METADATA_KEY:
            if not isinstance(info, dict) or not all(
                    isinstance(k, str) and isinstance(v, str) for k, v in info.items()):
                _fail("__metadata__ must be a string-to-string map", 8)
            metadata = info
            continue
        if not isinstance(info, dict) or set(info) - {"dtype", "shape", "data_offsets"} \
                or not {"dtype", "shape", "data_offsets"} <= set(info):
            _fail(f"malformed header entry for {name!r}", 8)
        if info["dtype"] != "F32":
            _fail(f"tensor {name!r}: unsupported dtype {info['dtype']!r} (only F32)", 8)
        shape = info["shape"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1
                                                  for d in shape):
            _fail(f"tensor {name!r}: shape must be a list of positive integers, got {shape!r}", 8)
        offs = info["data_offsets"]
        if not (isinstance(offs, list) and len(offs) == 2 and all(isinstance(o, int) and o >= 0 for o in offs)
                and offs[0] <= offs[1]):
            _fail(f"tensor {name!r}: bad data_offsets {offs!r}", 8)
        begin, end = offs
        if end - begin != math.prod(shape) * 4:
            _fail(f"tensor {name!r}: span of {end - begin} bytes does not match shape {shape}", base + begin)
        if end > len(data):
            _fail(f"truncated stream: tensor {name!r} ends at data byte {end}, only {len(data)} present",
                  base + len(data))
        entries.append((begin, end, name, tuple(shape)))

    entries.sort()
    for (b0, e0, n0, _), (b1, _, n1, _) in zip(entries, entries[1:]):
        if b1 < e0:
            _fail(f"tensors {n0!r} and {n1!r} overlap", base + b1)

    tensors = {}
    spans = {}
    for begin, end, name, shape in entries:
        tensors[name] = np.frombuffer(data, dtype="<f4", count=(end - begin) // 4, offset=begin).reshape(shape)
        spans[name] = (begin, end)
    arch = WeightArchive(tensors, metadata)
    arch._header = buf[:8 + n]
    arch._data_region = data
    arch._spans = spans
    return arch


def _fresh_header(a: WeightArchive) -> tuple[bytes, dict[str, tuple[int, int]], int]:
    header: dict = {}
    if a.metadata is not None:
        header[METADATA_KEY] = a.metadata
    spans = {}
    pos = 0
    for name in a:
        arr = a.array(name)
        spans[name] = (pos, pos + arr.size * 4)
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [pos, pos + arr.size * 4]}
        pos += arr.size * 4
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)  # 8-byte alignment of the data region
    return struct.pack("<Q", len(text)) + text, spans, pos


def write_archive(a: WeightArchive) -> bytes:
    layout_intact = (
        a._header is not None and a._spans is not None
        and set(a._spans) == set(a)
        and all(a._spans[n][1] - a._spans[n][0] == a.array(n).size * 4 for n in a)
    )
    if layout_intact:
        header, spans, region = a._header, a._spans, bytearray(a._data_region)
    else:
        header, spans, size = _fresh_header(a)
        region = bytearray(size)
    for name, (begin, end) in spans.items():
        region[begin:end] = a.array(name).astype("<f4", copy=False).tobytes()
    return bytes(header) + bytes(region)


def load_archive(path: str | os.PathLike) -> WeightArchive:
    with open(path, "rb") as fh:
        return read_archive(fh.read())


def save_archive(a: WeightArchive, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(write_archive(a))


# ---------------------------------------------------------------- manifests

@dataclass
class LayerSpec:
    name: str
    kind: str
    weight_tensor: str | None = None
    bias_tensor: str | None = None
    hyperparams: dict = field(default_factory=dict)
    param_layer_index: int | None = None

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.weight_tensor is not None:
            d["weight_tensor"] = self.weight_tensor
        if self.bias_tensor is not None:
            d["bias_tensor"] = self.bias_tensor
        if self.hyperparams:
            d["hyperparams"] = dict(self.hyperparams)
        if self.param_layer_index is not None:
            d["param_layer_index"] = self.param_layer_index
        return d


@dataclass
class ModelManifest:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        idx = 0
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise DataError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.kind in PARAM_KINDS:
                idx += 1
                if layer.weight_tensor is None:
                    raise DataError(f"layer {layer.name!r}: {layer.kind} needs a weight_tensor")
                if layer.param_layer_index is None:
                    layer.param_layer_index = idx
                elif layer.param_layer_index != idx:
                    raise DataError(f"layer {layer.name!r}: param_layer_index {layer.param_layer_index}, "
                                    f"expected {idx} (consecutive in forward order)")
            else:
                if layer.weight_tensor or layer.bias_tensor or layer.param_layer_index is not None:
                    raise DataError(f"layer {layer.name!r}: {layer.kind} takes no parameters")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise DataError("layer names must be unique")

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in PARAM_KINDS]

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "class_count": self.class_count,
                "layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelManifest":
        try:
            layers = [LayerSpec(name=l["name"], kind=l["kind"], weight_tensor=l.get("weight_tensor"),
                                bias_tensor=l.get("bias_tensor"), hyperparams=dict(l.get("hyperparams", {})),
                                param_layer_index=l.get("param_layer_index"))
                      for l in d["layers"]]
            return cls(layers=layers, input_shape=tuple(d["input_shape"]), class_count=int(d["class_count"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc!r}") from exc

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected shape of every weight/bias tensor, from hyperparameters and shape propagation."""
        shapes: dict[str, tuple[int, ...]] = {}
        cur = self.input_shape
        for layer in self.layers:
            hp = layer.hyperparams
            if layer.kind == "conv2d":
                if len(cur) != 3:
                    raise DataError(f"layer {layer.name!r}: conv2d needs a CHW input, got {cur}")
                k = hp.get("kernel_size")
                kh, kw = (k, k) if isinstance(k, int) else tuple(k)
                o = int(hp["out_channels"])
                s, p = int(hp.get("stride", 1)), int(hp.get("padding", 0))
                shapes[layer.weight_tensor] = (o, cur[0], kh, kw)
                if layer.bias_tensor:
                    shapes[layer.bias_tensor] = (o,)
                oh, ow = (cur[1] + 2 * p - kh) // s + 1, (cur[2] + 2 * p - kw) // s + 1
                if oh < 1 or ow < 1:
                    raise DataError(f"layer {layer.name!r}: output would be empty")
                cur = (o, oh, ow)
            elif layer.kind == "linear":
                if len(cur) != 1:
                    raise DataError(f"layer {layer.name!r}: linear needs a flat input, got {cur}")
                o = int(hp["out_features"])
                shapes[layer.weight_tensor] = (o, cur[0])
                if layer.bias_tensor:
                    shapes[layer.bias_tensor] = (o,)
                cur = (o,)
            elif layer.kind == "maxpool2d":
                pool = int(hp.get("pool", 2))
                s = int(hp.get("stride", pool))
                cur = (cur[0], (cur[1] - pool) // s + 1, (cur[2] - pool) // s + 1)
            elif layer.kind == "flatten":
                cur = (math.prod(cur),)
        if cur != (self.class_count,):
            raise DataError(f"network output shape {cur} does not match class_count {self.class_count}")
        return shapes

    def validate(self, a: WeightArchive) -> None:
        """Check every referenced tensor exists with the shape the topology implies."""
        # fill hyperparameters that can be read off the weights
        for layer in self.param_layers:
            if layer.weight_tensor not in a:
                raise DataError(f"layer {layer.name!r}: tensor {layer.weight_tensor!r} missing from archive")
            w = a[layer.weight_tensor].shape
            if layer.kind == "conv2d":
                if len(w) != 4:
                    raise DataError(f"conv2d weight {layer.weight_tensor!r} must be 4-D, got {w}")
                layer.hyperparams.setdefault("out_channels", w[0])
                layer.hyperparams.setdefault("kernel_size", [w[2], w[3]])
            else:
                if len(w) != 2:
                    raise DataError(f"linear weight {layer.weight_tensor!r} must be 2-D, got {w}")
                layer.hyperparams.setdefault("out_features", w[0])
            if layer.bias_tensor and layer.bias_tensor not in a:
                raise DataError(f"layer {layer.name!r}: tensor {layer.bias_tensor!r} missing from archive")
        try:
            expected = self.param_shapes()
        except KeyError as exc:
            raise DataError(f"manifest is missing hyperparameter {exc}") from exc
        for name, shape in expected.items():
            if a[name].shape != shape:
                raise DataError(f"tensor {name!r} has shape {a[name].shape}, topology needs {shape}")


def load_manifest(path: str | os.PathLike) -> ModelManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            return ModelManifest.from_json(json.load(fh))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path}: {exc}") from exc


def save_manifest(m: ModelManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(m.to_json(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------- candidates

def kernel_size_of(layer: LayerSpec, shape: Sequence[int]) -> int:
    """Number of weights per kernel: kh*kw for conv (one (out, in) slice), in_features for linear."""
    return shape[2] * shape[3] if layer.kind == "conv2d" else shape[1]


@dataclass(frozen=True)
class CandidateSet:
    """Attackable weights of the first L parameterised layers, in (layer, flat_index) order.

    Position in this order is also the score tie-break rank: layer ascending,
    then tensor name (one weight tensor per layer), then flat index.
    """

    tensor_names: tuple[str, ...]   # indexed by tensor_id
    tensor_id: np.ndarray           # int32 per candidate
    layer: np.ndarray               # param_layer_index per candidate
    flat_index: np.ndarray          # int64
    kernel_index: np.ndarray        # int64, within its layer
    kernel_key: np.ndarray          # int64, globally unique per KernelId
    values: np.ndarray              # float32
    L: int

    def __len__(self) -> int:
        return int(self.values.size)

    def coord(self, i: int) -> ParamCoord:
        return ParamCoord(self.tensor_names[self.tensor_id[i]], int(self.flat_index[i]))

    def kernel(self, i: int) -> KernelId:
        return KernelId(int(self.layer[i]), int(self.kernel_index[i]))

    def entries(self) -> list[tuple[ParamCoord, KernelId, float]]:
        return [(self.coord(i), self.kernel(i), float(self.values[i])) for i in range(len(self))]

    @property
    def kernel_count(self) -> int:
        return int(np.unique(self.kernel_key).size)

    def subset(self, mask: np.ndarray) -> "CandidateSet":
        return CandidateSet(self.tensor_names, self.tensor_id[mask], self.layer[mask], self.flat_index[mask],
                            self.kernel_index[mask], self.kernel_key[mask], self.values[mask], self.L)


def candidate_set(m: ModelManifest, a: WeightArchive, L: int | None = None) -> CandidateSet:
    """``L=None`` means every parameterised layer."""
    if L is not None and L < 1:
        raise PreconditionError(f"L must be >= 1, got {L}")
    m.validate(a)
    names, tid, lay, flat, kern, key, vals = [], [], [], [], [], [], []
    key_base = 0
    for layer in m.param_layers:
        if L is not None and layer.param_layer_index > L:
            break
        w = a.array(layer.weight_tensor)
        per_kernel = kernel_size_of(layer, w.shape)
        n = w.size
        idx = np.arange(n, dtype=np.int64)
        names.append(layer.weight_tensor)
        tid.append(np.full(n, len(names) - 1, dtype=np.int32))
        lay.append(np.full(n, layer.param_layer_index, dtype=np.int32))
        flat.append(idx)
        kern.append(idx // per_kernel)
        key.append(key_base + idx // per_kernel)
        vals.append(w.reshape(-1))
        key_base += n // per_kernel
    if not names:
        empty_i = np.zeros(0, dtype=np.int64)
        return CandidateSet((), np.zeros(0, np.int32), np.zeros(0, np.int32), empty_i, empty_i, empty_i,
                            np.zeros(0, np.float32), L or 0)
    n_layers = len(m.param_layers)
    return CandidateSet(tuple(names), np.concatenate(tid), np.concatenate(lay), np.concatenate(flat),
                        np.concatenate(kern), np.concatenate(key), np.concatenate(vals).astype(np.float32),
                        min(L, n_layers) if L is not None else n_layers)


def candidate_params(m: ModelManifest, a: WeightArchive, L: int) -> list[tuple[ParamCoord, KernelId, float]]:
    return candidate_set(m, a, L).entries()
