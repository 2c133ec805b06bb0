"""Small hand-built models shared by the unit tests."""

import numpy as np

from signflip.nnengine import Model
from signflip.tensorstore import LayerSpec, ModelManifest, WeightArchive


def f32(x):
    return np.asarray(x, dtype=np.float32)


def linear_model(weight, bias=None) -> Model:
    w = f32(weight)
    out, inp = w.shape
    tensors = {"fc.weight": w}
    if bias is not None:
        tensors["fc.bias"] = f32(bias)
    layers = [LayerSpec("fc", "linear", "fc.weight", "fc.bias" if bias is not None else None,
                        {"out_features": out})]
    return Model(ModelManifest(layers, (inp,), out), WeightArchive(tensors))


def conv_manifest(n_convs: int, channels: int = 2, side: int = 4, classes: int = 3) -> ModelManifest:
    """n 3x3 same-padding convs, flatten, one linear head."""
    layers = []
    for i in range(n_convs):
        layers += [LayerSpec(f"conv{i}", "conv2d", f"conv{i}.weight", f"conv{i}.bias",
                             {"out_channels": channels, "kernel_size": 3, "padding": 1}),
                   LayerSpec(f"relu{i}", "relu")]
    layers += [LayerSpec("flat", "flatten"),
               LayerSpec("head", "linear", "head.weight", "head.bias", {"out_features": classes})]
    return ModelManifest(layers, (1, side, side), classes)


def random_archive(m: ModelManifest, seed: int = 0) -> WeightArchive:
    rng = np.random.default_rng(seed)
    return WeightArchive({n: rng.standard_normal(s).astype(np.float32) for n, s in m.param_shapes().items()})


def kernel_model(values_by_kernel) -> tuple[ModelManifest, WeightArchive]:
    """One linear layer whose output rows are the given kernels (rows zero-padded)."""
    width = max(len(v) for v in values_by_kernel)
    w = np.zeros((len(values_by_kernel), width), dtype=np.float32)
    for r, v in enumerate(values_by_kernel):
        w[r, :len(v)] = v
    m = ModelManifest([LayerSpec("fc", "linear", "fc.weight", None, {"out_features": w.shape[0]})],
                      (width,), w.shape[0])
    return m, WeightArchive({"fc.weight": w})


def fd_gradient_check(model: Model, seed: int, n_coords: int = 100):
    """Analytic dR/dtheta (FP32 engine) vs float64 central differences on sampled coordinates.

    Returns the max relative error and the number of coordinates checked.
    """
    from signflip.nnengine import gaussian_input, grad_sum_logits
    from signflip.prng import CounterRNG

    g = grad_sum_logits(model, seed)
    m64 = model.astype(np.float64)
    x = gaussian_input(model.manifest.input_shape, seed).astype(np.float64)
    names = list(model.params)
    sizes = np.array([model.params[n].data.size for n in names])
    starts = np.concatenate([[0], np.cumsum(sizes)])
    picks = CounterRNG(7, 1).sample(int(sizes.sum()), n_coords)
    worst = 0.0
    for p in picks.tolist():
        t = int(np.searchsorted(starts, p, side="right") - 1)
        name, idx = names[t], p - int(starts[t])
        base = model.params.array(name).astype(np.float64)
        h = 1e-3 * max(1.0, abs(float(base.reshape(-1)[idx])))
        vals = []
        for sgn in (1, -1):
            w = base.copy().reshape(-1)
            w[idx] += sgn * h
            vals.append(float(m64.overriding({name: w.reshape(base.shape)}).forward_batch(x).sum()))
        fd = (vals[0] - vals[1]) / (2 * h)
        analytic = float(g.of(name, idx))
        worst = max(worst, abs(analytic - fd) / max(1e-6, abs(fd)))
    return worst, len(picks)
