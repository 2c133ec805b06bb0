"""Small deterministic CNN engine: batched forward, reverse-mode backward.

Layout is NCHW.  conv2d lowers to im2col followed by one matrix product per
layer, so each output element is reduced over (in_channel, kh, kw) by the
platform BLAS; linear layers are ``x @ W.T + b``.  Results are bit-identical
across runs on a fixed platform.  maxpool routes gradient to the first
maximum in row-major window order.

Every call to :meth:`Model.forward` / :meth:`Model.forward_from` counts one
forward traversal and every :meth:`Model.backward` one backward traversal in
the process-wide :data:`COUNTERS`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, PreconditionError
from .prng import CounterRNG
from .tensorstore import ModelManifest, WeightArchive

GAUSSIAN_STREAM = 0
EVAL_CHUNK = 1024


class PassCounters:
    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.backward = 0

    def bump(self, forward: int = 0, backward: int = 0) -> None:
        with self._lock:
            self.forward += forward
            self.backward += backward

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.forward, self.backward


COUNTERS = PassCounters()


class count_passes:
    """Context manager measuring traversals made inside the block.

    >>> with count_passes() as c:
    ...     pass
    >>> (c.forward, c.backward)
    (0, 0)
    """

    def __enter__(self):
        self._start = COUNTERS.snapshot()
        self.forward = self.backward = 0
        return self

    def __exit__(self, *exc):
        f, b = COUNTERS.snapshot()
        self.forward, self.backward = f - self._start[0], b - self._start[1]
        return False


@dataclass
class Dataset:
    x: np.ndarray  # (N, *input_shape) float32
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw) with (c, i, j) column order."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    n, c, h, w = xshape
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


class Model:
    """A manifest bound to an archive.  Parameters are read once at construction."""

    def __init__(self, manifest: ModelManifest, params: WeightArchive, dtype=np.float32):
        manifest.validate(params)
        self.manifest = manifest
        self.params = params
        self.dtype = np.dtype(dtype)
        self._arrays = {name: params.array(name).astype(self.dtype) for name in params}

    def with_params(self, params: WeightArchive) -> "Model":
        return Model(self.manifest, params, self.dtype)

    def astype(self, dtype) -> "Model":
        return Model(self.manifest, self.params, dtype)

    def overriding(self, arrays: dict[str, np.ndarray]) -> "Model":
        """Shallow copy evaluating with some parameter arrays swapped (no revalidation).

        ``params`` still refers to the original archive.
        """
        m = Model.__new__(Model)
        m.manifest, m.params, m.dtype = self.manifest, self.params, self.dtype
        m._arrays = {**self._arrays, **{k: v.astype(self.dtype, copy=False) for k, v in arrays.items()}}
        return m

    # -- forward

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != self.manifest.input_shape:
            raise DataError(f"input shape {x.shape[1:]} does not match manifest {self.manifest.input_shape}")
        return x.astype(self.dtype, copy=False)

    def _layer_forward(self, layer, x):
        hp = layer.hyperparams
        if layer.kind == "conv2d":
            w = self._arrays[layer.weight_tensor]
            o, c, kh, kw = w.shape
            s, p = int(hp.get("stride", 1)), int(hp.get("padding", 0))
            cols, oh, ow = _im2col(x, kh, kw, s, p)
            out = cols @ w.reshape(o, -1).T
            if layer.bias_tensor:
                out += self._arrays[layer.bias_tensor]
            out = out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(out), (cols, x.shape, oh, ow)
        if layer.kind == "linear":
            out = x @ self._arrays[layer.weight_tensor].T
            if layer.bias_tensor:
                out += self._arrays[layer.bias_tensor]
            return out, x
        if layer.kind == "relu":
            return np.maximum(x, 0).astype(self.dtype, copy=False), x
        if layer.kind == "maxpool2d":
            pool = int(hp.get("pool", 2))
            s = int(hp.get("stride", pool))
            win = sliding_window_view(x, (pool, pool), axis=(2, 3))[:, :, ::s, ::s]
            n, c, oh, ow = win.shape[:4]
            flat = win.reshape(n, c, oh, ow, pool * pool)
            arg = flat.argmax(axis=-1)
            out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            return out, (x.shape, arg, pool, s)
        if layer.kind == "flatten":
            return x.reshape(x.shape[0], -1), x.shape
        raise AssertionError(layer.kind)

    def forward_batch(self, x: np.ndarray, keep: bool = False):
        """Logits for a batch; with ``keep`` also returns the backward cache."""
        return self.forward_from(0, self._check_input(x), keep=keep)

    def forward_from(self, start: int, h: np.ndarray, keep: bool = False, stop: int | None = None):
        """Run layers ``start .. stop-1`` on activation ``h`` (input of layer ``start``)."""
        COUNTERS.bump(forward=1)
        cache = []
        layers = self.manifest.layers[start:stop]
        for layer in layers:
            h, c = self._layer_forward(layer, h)
            if keep:
                cache.append(c)
        return (h, cache) if keep else h

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits of a single input of ``input_shape``."""
        x = np.asarray(x)
        if x.shape != self.manifest.input_shape:
            raise DataError(f"input shape {x.shape} does not match manifest {self.manifest.input_shape}")
        return self.forward_batch(x[None])[0]

    def activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Input of every layer plus the final logits (one traversal)."""
        COUNTERS.bump(forward=1)
        acts = [self._check_input(x)]
        for layer in self.manifest.layers:
            acts.append(self._layer_forward(layer, acts[-1])[0])
        return acts

    # -- backward

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter tensor given d(objective)/d(logits)."""
        COUNTERS.bump(backward=1)
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(dout, dtype=self.dtype)
        for layer, c in zip(reversed(self.manifest.layers), reversed(cache)):
            if layer.kind == "conv2d":
                cols, xshape, oh, ow = c
                w = self._arrays[layer.weight_tensor]
                o, _, kh, kw = w.shape
                g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
                grads[layer.weight_tensor] = (g2.T @ cols).reshape(w.shape)
                if layer.bias_tensor:
                    grads[layer.bias_tensor] = g2.sum(axis=0)
                hp = layer.hyperparams
                g = _col2im(g2 @ w.reshape(o, -1), xshape, kh, kw,
                            int(hp.get("stride", 1)), int(hp.get("padding", 0)), oh, ow)
            elif layer.kind == "linear":
                x = c
                w = self._arrays[layer.weight_tensor]
                grads[layer.weight_tensor] = g.T @ x
                if layer.bias_tensor:
                    grads[layer.bias_tensor] = g.sum(axis=0)
                g = g @ w
            elif layer.kind == "relu":
                g = np.where(c > 0, g, 0).astype(self.dtype, copy=False)
            elif layer.kind == "maxpool2d":
                xshape, arg, pool, s = c
                n, ch, oh, ow = arg.shape
                dx = np.zeros(xshape, dtype=self.dtype)
                ii, jj = np.divmod(arg, pool)
                rows = np.arange(oh)[None, None, :, None] * s + ii
                colz = np.arange(ow)[None, None, None, :] * s + jj
                nn = np.arange(n)[:, None, None, None]
                cc = np.arange(ch)[None, :, None, None]
                np.add.at(dx, (nn, cc, rows, colz), g)
                g = dx
            elif layer.kind == "flatten":
                g = g.reshape(c)
        return grads


@dataclass
class GradientSnapshot:
    """dR/dtheta per parameter tensor (weights and biases), keyed by tensor name."""

    grads: dict[str, np.ndarray]
    seed: int
    batch: int

    def of(self, tensor: str, flat_index) -> np.ndarray:
        return self.grads[tensor].reshape(-1)[flat_index]

    def __contains__(self, tensor: str) -> bool:
        return tensor in self.grads


def gaussian_input(input_shape, seed: int, batch: int = 1, dtype=np.float32) -> np.ndarray:
    n = batch * int(np.prod(input_shape))
    z = CounterRNG(seed, GAUSSIAN_STREAM).normal(n)
    return z.astype(dtype).reshape((batch, *input_shape))


def sum_logits(model: Model, x: np.ndarray) -> float:
    return float(model.forward_batch(x).sum(dtype=np.float64))


def grad_sum_logits(model: Model, seed: int, batch: int = 1) -> GradientSnapshot:
    """Gradient of R = sum of all logits on standard-normal input(s) from ``seed``.

    Exactly one forward and one backward traversal.
    """
    if batch < 1:
        raise PreconditionError("batch must be >= 1")
    x = gaussian_input(model.manifest.input_shape, seed, batch, model.dtype)
    logits, cache = model.forward_batch(x, keep=True)
    grads = model.backward(cache, np.ones_like(logits))
    return GradientSnapshot({k: v.astype(np.float32) for k, v in grads.items()}, seed, batch)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax class per sample; ties go to the smallest class index."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], EVAL_CHUNK):
        out[i:i + EVAL_CHUNK] = model.forward_batch(x[i:i + EVAL_CHUNK]).argmax(axis=1)
    return out


def accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise PreconditionError("accuracy of an empty dataset is undefined")
    return int((predict(model, data.x) == data.y).sum()) / len(data)
