"""Function-preserving rescalings of a trained victim used as attack fixtures.

ReLU and max-pooling commute with positive scaling, so multiplying a conv
output channel (weights and bias) by ``c`` and the matching input channel of
the next conv by ``1/c`` leaves the network function unchanged up to
rounding.  Scaling the output layer by ``c`` scales every logit by ``c`` and
leaves every prediction unchanged.  Both moves relocate the largest weights
without changing what the network computes.
"""

from __future__ import annotations

import numpy as np

from ..nnengine import Model

# conv1 output channel boosted in the same-kernel fixture, and its factor
SAME_KERNEL_CHANNEL = 5
SAME_KERNEL_SCALE = 4.0
# output-layer factor in the late-layer fixture
LATE_LAYER_SCALE = 16.0


def boost_conv_channel(model: Model, channel: int = SAME_KERNEL_CHANNEL, scale: float = SAME_KERNEL_SCALE) -> Model:
    """Scale one output channel of the first conv and compensate in the second.

    The boosted kernel then holds the globally largest weights, so the
    unconstrained top-2 lands inside one kernel.
    """
    convs = [l for l in model.manifest.param_layers if l.kind == "conv2d"]
    first, second = convs[0], convs[1]
    p = model.params
    c = np.float32(scale)
    w1 = p.array(first.weight_tensor).copy()
    w2 = p.array(second.weight_tensor).copy()
    w1[channel] *= c
    w2[:, channel] /= c
    updates = {first.weight_tensor: w1, second.weight_tensor: w2}
    if first.bias_tensor:
        b1 = p.array(first.bias_tensor).copy()
        b1[channel] *= c
        updates[first.bias_tensor] = b1
    return model.with_params(p.replace(updates))


def boost_output_layer(model: Model, scale: float = LATE_LAYER_SCALE) -> Model:
    """Scale the last linear layer so its weights dominate every magnitude ranking."""
    last = model.manifest.param_layers[-1]
    p = model.params
    c = np.float32(scale)
    updates = {last.weight_tensor: p.array(last.weight_tensor) * c}
    if last.bias_tensor:
        updates[last.bias_tensor] = p.array(last.bias_tensor) * c
    return model.with_params(p.replace(updates))
