import json
import math

import numpy as np
import pytest

from signflip.bench import fixtures
from signflip.bench.data import RECIPES, SyntheticDatasetSpec, class_templates, gen_dataset, split
from signflip.bench.experiment import (derive_seed, reports_to_csv, reports_to_json,
                                       run_experiment)
from signflip.bench.metrics import FlipEvaluator, ar, mar
from signflip.bench.oracle import brute_force_single_flip
from signflip.bench.train import TrainConfig, desk_cnn_manifest, init_params, softmax_xent, train
from signflip.bench.victim import load_victim, save_victim
from signflip.errors import ConfigError, PreconditionError
from signflip.lesion import apply, plan_dnl, plan_magnitude_unconstrained
from signflip.nnengine import Dataset, Model, accuracy
from signflip.tensorstore import LayerSpec, ModelManifest, WeightArchive, candidate_set, write_archive

from util import conv_manifest, random_archive


# ---------------------------------------------------------------- metrics

def test_ar_examples():
    assert ar(0.80, 0.20) == 0.75
    assert ar(0.5, 0.5) == 0.0
    assert abs(ar(0.76, 0.000152 * 7.6) - 0.998) < 1e-3
    with pytest.raises(PreconditionError):
        ar(0.0, 0.0)


def test_mar_examples():
    assert mar([0.5, 1.0]) == 0.75
    assert mar([0.3] * 7) == 0.3
    assert mar([0.0] * 4) == 0.0
    with pytest.raises(PreconditionError):
        mar([])


# ---------------------------------------------------------------- data

def test_noise_free_classes_are_constant():
    d = gen_dataset(SyntheticDatasetSpec(classes=3, samples_per_class=4, noise_sigma=0.0))
    for c in range(3):
        xs = d.x[d.y == c]
        assert all(np.array_equal(xs[0], x) for x in xs)
    assert not np.array_equal(d.x[0], d.x[4])


def test_dataset_deterministic():
    spec = SyntheticDatasetSpec(samples_per_class=20)
    a, b = gen_dataset(spec), gen_dataset(spec)
    assert np.array_equal(a.x.view(np.uint32), b.x.view(np.uint32)) and np.array_equal(a.y, b.y)
    other = gen_dataset(SyntheticDatasetSpec(samples_per_class=20, seed=1))
    assert not np.array_equal(a.x, other.x)


def test_split_by_parity():
    d = gen_dataset(SyntheticDatasetSpec(classes=2, samples_per_class=5))
    tr, te = split(d)
    assert np.array_equal(tr.x, d.x[0::2]) and np.array_equal(te.x, d.x[1::2])
    assert len(tr) + len(te) == len(d)


def test_recipe_limits():
    assert len(RECIPES) >= 8
    with pytest.raises(ConfigError):
        class_templates(SyntheticDatasetSpec(classes=len(RECIPES) + 1))
    with pytest.raises(PreconditionError):
        class_templates(SyntheticDatasetSpec(classes=1))
    t = class_templates(SyntheticDatasetSpec(classes=len(RECIPES), amplitude=1.0))
    assert t.min() >= -1 and t.max() <= 1
    flat = t.reshape(len(t), -1)
    assert len({row.tobytes() for row in flat}) == len(t)


# ---------------------------------------------------------------- training

def _tiny_problem():
    spec = SyntheticDatasetSpec(classes=4, samples_per_class=40, image_size=8)
    tr, te = split(gen_dataset(spec))
    return desk_cnn_manifest(8, 4, channels=(4, 4), hidden=16), tr, te


def test_lr_zero_leaves_params():
    arch, tr, _ = _tiny_problem()
    init = init_params(arch, 3)
    model, losses = train(arch, tr, TrainConfig(epochs=2, lr=0.0, batch=16, seed=3), init)
    assert model.params.bit_equal(init)
    assert len(losses) == 2 * math.ceil(len(tr) / 16)


def test_first_loss_near_log_c():
    arch, tr, _ = _tiny_problem()
    _, losses = train(arch, tr, TrainConfig(epochs=1, lr=0.0, batch=32, seed=0))
    assert abs(losses[0] - math.log(4)) / math.log(4) < 0.2


def test_training_deterministic_and_learns():
    arch, tr, te = _tiny_problem()
    h = TrainConfig(epochs=5, lr=0.05, batch=16, seed=1)
    m1, l1 = train(arch, tr, h)
    m2, l2 = train(arch, tr, h)
    assert m1.params.bit_equal(m2.params) and l1 == l2
    assert accuracy(m1, te) > 0.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    from signflip.bench.train import TrainingDiverged
    arch, tr, _ = _tiny_problem()
    with pytest.raises(TrainingDiverged, match="epoch 0, step"):
        train(arch, tr, TrainConfig(epochs=3, lr=1e6, momentum=0.9, batch=8, seed=0))


def test_softmax_xent_gradient():
    logits = np.array([[1.0, 2.0, 0.5]], np.float32)
    loss, d = softmax_xent(logits, np.array([1]))
    p = np.exp(logits) / np.exp(logits).sum()
    assert abs(loss + np.log(p[0, 1])) < 1e-6
    np.testing.assert_allclose(d, p - np.eye(3)[1], rtol=1e-5)


def test_desk_victim(victim):
    m = victim.model.manifest
    assert sum(a.data.size for a in victim.model.params.values()) == 52136
    assert [l.kind for l in m.param_layers] == ["conv2d", "conv2d", "linear", "linear"]
    assert victim.test_acc >= 0.90


def test_victim_dir_round_trip(victim, tmp_path):
    save_victim(victim, tmp_path / "v")
    back = load_victim(tmp_path / "v")
    assert back.model.params.bit_equal(victim.model.params)
    assert np.array_equal(back.test.x, victim.test.x)
    assert (tmp_path / "v" / "model.safetensors").read_bytes() == write_archive(victim.model.params)


# ---------------------------------------------------------------- evaluator / experiment

def test_flip_evaluator_matches_full_forward(victim):
    sub = victim.test.take(slice(0, 300))
    ev = FlipEvaluator(victim.model, sub, chunk=128)
    assert ev.baseline == accuracy(victim.model, sub)
    plan = plan_dnl(victim.model.manifest, victim.model.params, 6)
    for k in (1, 3, 6):
        attacked = apply(plan.prefix(k), victim.model.params)
        full = accuracy(victim.model.with_params(attacked), sub)
        assert ev.accuracy_of_archive(attacked) == full
        assert ev.accuracy_after((f.tensor, f.flat_index, f.bit) for f in plan.prefix(k).flips) == full


def test_run_experiment_zero_and_determinism(victim):
    sub = victim.test.take(slice(0, 200))
    r0 = run_experiment(victim.model, sub, "dnl", 0)
    assert r0.per_k == [] and r0.mAR is None and r0.baseline_acc == accuracy(victim.model, sub)
    a = run_experiment(victim.model, sub, "dnl", 4)
    b = run_experiment(victim.model, sub, "dnl", 4)
    assert reports_to_csv([a]) == reports_to_csv([b])
    assert a.mAR == mar([p.ar for p in a.per_k])
    for p in a.per_k:
        assert p.ar == ar(a.baseline_acc, p.acc)
    with pytest.raises(ConfigError):
        run_experiment(victim.model, sub, "bogus", 2)


def test_run_experiment_all_methods(victim):
    sub = victim.test.take(slice(0, 200))
    for method in ("1p_dnl", "magnitude_unconstrained", "grasp", "grasp_gn", "synflow", "obd"):
        r = run_experiment(victim.model, sub, method, 3, seeds=[42])
        assert r.N == 3 and r.mAR == mar([p.ar for p in r.per_k])


def test_random_experiment_jobs_invariant(victim):
    sub = victim.test.take(slice(0, 200))
    r1 = run_experiment(victim.model, sub, "random", 3, seeds=range(6), jobs=1)
    r2 = run_experiment(victim.model, sub, "random", 3, seeds=range(6), jobs=3)
    assert reports_to_csv([r1]) == reports_to_csv([r2])
    assert len(r1.runs) == 18 and set(r1.extra["ar_percentiles"]) == {"5", "50", "95"}


def test_report_csv_and_json(victim):
    sub = victim.test.take(slice(0, 100))
    r = run_experiment(victim.model, sub, "dnl", 2)
    lines = reports_to_csv([r]).splitlines()
    assert lines[0] == "# signflip-report/1"
    assert lines[1] == "method,L,k,seed,acc,ar"
    # L is the effective layer count: the desk CNN has 4 parameterised layers
    assert lines[2].startswith("dnl,4,0,")
    assert lines[-1].startswith("dnl,4,mAR2,")
    doc = json.loads(reports_to_json([r]))
    assert doc[0]["schema"] == "signflip-report/1" and doc[0]["N"] == 2


def test_derive_seed_distinct():
    seeds = {derive_seed(0, k) for k in range(100)} | {derive_seed(1, k) for k in range(100)}
    assert len(seeds) == 200


# ---------------------------------------------------------------- oracle

def test_oracle_single_weight():
    man1 = ModelManifest([LayerSpec("fc", "linear", "w", None, {"out_features": 1})], (1,), 1)
    m1 = Model(man1, WeightArchive({"w": np.array([[2.0]], np.float32)}))
    data1 = Dataset(np.ones((4, 1), np.float32), np.zeros(4, np.int64))
    t = brute_force_single_flip(m1, data1, None)
    assert len(t.ranked()) == 1
    man = ModelManifest([LayerSpec("fc", "linear", "w", None, {"out_features": 2})], (1,), 2)
    model = Model(man, WeightArchive({"w": np.array([[0.5], [1.0]], np.float32)}))
    data = Dataset(np.ones((4, 1), np.float32), np.ones(4, np.int64))
    t2 = brute_force_single_flip(model, data, None)
    # flipping the class-1 weight makes class 0 win on every sample
    assert t2.ranked()[0][0].flat_index == 1 and t2.ranked()[0][1] == 1.0


def test_oracle_zero_layer_all_equal():
    man = conv_manifest(1)
    a = random_archive(man)
    a = a.replace({"conv0.weight": np.zeros_like(a.array("conv0.weight"))})
    model = Model(man, a)
    x = np.random.default_rng(0).standard_normal((32, *man.input_shape)).astype(np.float32)
    from signflip.nnengine import predict
    t = brute_force_single_flip(model, Dataset(x, predict(model, x)), 1)
    assert len(set(t.ar1.tolist())) == 1


def test_oracle_guard():
    man = conv_manifest(1)
    model = Model(man, random_archive(man))
    data = Dataset(np.zeros((4, *man.input_shape), np.float32), np.zeros(4, np.int64))
    import signflip.bench.oracle as oracle
    old = oracle.MAX_EVALUATIONS
    try:
        oracle.MAX_EVALUATIONS = 10
        with pytest.raises(PreconditionError):
            brute_force_single_flip(model, data, None)
    finally:
        oracle.MAX_EVALUATIONS = old


# ---------------------------------------------------------------- fixtures

def test_fixtures_preserve_function(victim):
    sub = victim.test.take(slice(0, 400))
    base = accuracy(victim.model, sub)
    for fx in (fixtures.boost_conv_channel(victim.model), fixtures.boost_output_layer(victim.model)):
        assert accuracy(fx, sub) == base


def test_same_kernel_fixture_shape(victim):
    fx = fixtures.boost_conv_channel(victim.model)
    top2 = plan_magnitude_unconstrained(fx.manifest, fx.params, 2)
    c = candidate_set(fx.manifest, fx.params)
    pos = {c.coord(i): i for i in range(len(c))}
    keys = {int(c.kernel_key[pos[f.coord]]) for f in top2.flips}
    assert len(keys) == 1  # both global maxima sit in one kernel


@pytest.mark.xfail(strict=True, reason="on the desk CNN the large output-layer gradients dominate the hybrid "
                                       "score, so 1P-DNL's first flips land in fc2 and do little damage")
def test_1p_dnl_at_least_dnl_on_desk_cnn(victim):
    one = run_experiment(victim.model, victim.test, "1p_dnl", 2, seeds=[42]).per_k[1].ar
    dnl = run_experiment(victim.model, victim.test, "dnl", 2).per_k[1].ar
    assert one >= dnl
