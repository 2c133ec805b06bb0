"""Victim production: architecture templates, seeded init, SGD with momentum."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import PreconditionError, SignflipError
from ..nnengine import Dataset, Model
from ..prng import CounterRNG
from ..tensorstore import LayerSpec, ModelManifest, WeightArchive

log = logging.getLogger(__name__)

INIT_STREAM = 0x494E4954  # "INIT"
ORDER_STREAM = 0x4F524452  # "ORDR"


class TrainingDiverged(SignflipError):
    exit_code = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 32
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def desk_cnn_manifest(image_size: int = 16, classes: int = 8, channels=(8, 16), hidden: int = 192) -> ModelManifest:
    """conv3x3-relu-pool, conv3x3-relu-pool, linear-relu, linear.  About 52K parameters at the defaults."""
    c1, c2 = channels
    side = image_size // 4
    layers = [
        LayerSpec("conv1", "conv2d", "conv1.weight", "conv1.bias",
                  {"out_channels": c1, "kernel_size": [3, 3], "stride": 1, "padding": 1}),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool2d", hyperparams={"pool": 2, "stride": 2}),
        LayerSpec("conv2", "conv2d", "conv2.weight", "conv2.bias",
                  {"out_channels": c2, "kernel_size": [3, 3], "stride": 1, "padding": 1}),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool2d", hyperparams={"pool": 2, "stride": 2}),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "linear", "fc1.weight", "fc1.bias", {"out_features": hidden}),
        LayerSpec("relu3", "relu"),
        LayerSpec("fc2", "linear", "fc2.weight", "fc2.bias", {"out_features": classes}),
    ]
    m = ModelManifest(layers, (1, image_size, image_size), classes)
    assert side * side * c2 > 0
    return m


def init_params(m: ModelManifest, seed: int) -> WeightArchive:
    """He-normal hidden weights, small output layer so initial logits are near uniform, zero biases."""
    shapes = m.param_shapes()
    rng = CounterRNG(seed, INIT_STREAM)
    last = m.param_layers[-1].weight_tensor
    tensors = {}
    for layer in m.param_layers:
        shape = shapes[layer.weight_tensor]
        fan_in = int(np.prod(shape[1:]))
        std = math.sqrt(2.0 / fan_in) if layer.weight_tensor != last else 0.01
        tensors[layer.weight_tensor] = (std * rng.normal(int(np.prod(shape)))).astype(np.float32).reshape(shape)
        if layer.bias_tensor:
            tensors[layer.bias_tensor] = np.zeros(shapes[layer.bias_tensor], dtype=np.float32)
    return WeightArchive(tensors)


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = y.shape[0]
    loss = float(-np.log(p[np.arange(n), y] + 1e-30).mean())
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, (d / n).astype(logits.dtype)


def train(arch: ModelManifest, data: Dataset, hyper: TrainConfig = TrainConfig(),
          init: WeightArchive | None = None) -> tuple[Model, list[float]]:
    """Minibatch SGD with momentum on softmax cross-entropy.

    Returns the trained model and the per-step losses.  Deterministic for a
    given ``hyper.seed``.
    """
    if hyper.batch < 1 or hyper.epochs < 0:
        raise PreconditionError("batch must be >= 1 and epochs >= 0")
    params = init if init is not None else init_params(arch, hyper.seed)
    model = Model(arch, params)
    weights = {name: params.array(name).copy() for name in params}
    velocity = {name: np.zeros_like(w) for name, w in weights.items()}
    n = len(data)
    losses: list[float] = []
    order_rng = CounterRNG(hyper.seed, ORDER_STREAM)
    for epoch in range(hyper.epochs):
        order = order_rng.permutation(n)
        for step, start in enumerate(range(0, n, hyper.batch)):
            idx = order[start:start + hyper.batch]
            model._arrays = weights
            logits, cache = model.forward_batch(data.x[idx], keep=True)
            loss, dlogits = softmax_xent(logits, data.y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            losses.append(loss)
            grads = model.backward(cache, dlogits)
            for name, g in grads.items():
                v = velocity[name]
                v *= np.float32(hyper.momentum)
                v += g
                weights[name] = (weights[name] - np.float32(hyper.lr) * v).astype(np.float32)
        log.info("epoch %d: mean loss %.4f", epoch, float(np.mean(losses[-(n // hyper.batch or 1):])))
    trained = params.replace({name: w for name, w in weights.items()})
    return Model(arch, trained), losses
