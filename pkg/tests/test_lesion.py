import json

import numpy as np
import pytest

from signflip.errors import DataError, PreconditionError
from signflip.lesion import (Flip, FlipPlan, apply, plan_1p_dnl, plan_dnl, plan_magnitude_unconstrained,
                             plan_random)
from signflip.nnengine import Model, count_passes
from signflip.scoring import score_magnitude
from signflip.tensorstore import candidate_set, write_archive

from util import conv_manifest, kernel_model, random_archive


def coords(plan):
    return [(f.tensor, f.flat_index) for f in plan.flips]


def test_dnl_one_per_kernel_example():
    m, a = kernel_model([[9.0, 8.0], [7.0]])
    plan = plan_dnl(m, a, 2, L=1)
    assert coords(plan) == [("fc.weight", 0), ("fc.weight", 2)]
    assert all(f.bit == 31 for f in plan.flips)


def test_dnl_argmax_example():
    m, a = kernel_model([[3.0], [-5.0], [1.0]])
    assert coords(plan_dnl(m, a, 1)) == [("fc.weight", 1)]


def test_dnl_k_exceeds_kernels():
    m, a = kernel_model([[1.0, 2.0], [3.0]])
    with pytest.raises(PreconditionError, match="2 available"):
        plan_dnl(m, a, 3)
    with pytest.raises(PreconditionError):
        plan_dnl(m, a, 0)


def test_dnl_is_pass_free():
    man = conv_manifest(3)
    a = random_archive(man)
    with count_passes() as c:
        plan_dnl(man, a, 5, L=10)
    assert (c.forward, c.backward) == (0, 0)


def test_1p_dnl_single_pass_and_beta_zero():
    man = conv_manifest(3)
    model = Model(man, random_archive(man))
    with count_passes() as c:
        p1 = plan_1p_dnl(model, 5, L=10, seed=42)
    assert (c.forward, c.backward) == (1, 1)
    assert p1.method == "1p_dnl" and p1.seed == 42
    p0 = plan_1p_dnl(model, 5, L=10, seed=42, beta=0.0)
    assert coords(p0) == coords(plan_dnl(man, model.params, 5, L=10))


def test_1p_dnl_rejects_k_before_traversal():
    man = conv_manifest(1)
    model = Model(man, random_archive(man))
    with count_passes() as c, pytest.raises(PreconditionError):
        plan_1p_dnl(model, 10 ** 6)
    assert (c.forward, c.backward) == (0, 0)


def test_1p_dnl_formula_example():
    # a: theta 1.0, g 10 -> 61; b: theta 1.5, g 0 -> 1.5.  With R = sum(W x) the
    # gradient of row r is x, so choose the input dimension and a linear layer to pin g.
    from signflip.nnengine import GradientSnapshot
    from signflip.lesion import plan_from_scores
    from signflip.scoring import score_hybrid
    m, a = kernel_model([[1.0], [1.5]])
    g = GradientSnapshot({"fc.weight": np.array([[10.0], [0.0]], np.float32)}, 0, 1)
    table = score_hybrid(candidate_set(m, a), g)
    assert table.scores.tolist() == [61.0, 1.5]
    assert coords(plan_from_scores(table, 1, "1p_dnl")) == [("fc.weight", 0)]


def test_monotone_selection_within_kernel():
    man = conv_manifest(3)
    a = random_archive(man, 5)
    plan = plan_dnl(man, a, 8, L=3)
    c = candidate_set(man, a, 3)
    rank = np.empty(len(c), np.int64)
    rank[score_magnitude(c).order()] = np.arange(len(c))
    pos = {c.coord(i): i for i in range(len(c))}
    kernels = [c.kernel(pos[f.coord]) for f in plan.flips]
    assert len(set(kernels)) == len(kernels)
    for f in plan.flips:
        i = pos[f.coord]
        same = np.nonzero(c.kernel_key == c.kernel_key[i])[0]
        assert rank[i] == rank[same].min()


def test_layer_restriction_changes_selection():
    man = conv_manifest(3)
    a = random_archive(man, 2)
    boosted = a.replace({"head.weight": a.array("head.weight") * np.float32(100)})
    small = plan_dnl(man, boosted, 3, L=2)
    full = plan_dnl(man, boosted, 3, L=100)
    assert {f.tensor for f in full.flips} == {"head.weight"}
    assert "head.weight" not in {f.tensor for f in small.flips}


def test_magnitude_unconstrained_ignores_kernels():
    m, a = kernel_model([[9.0, 8.0], [7.0]])
    assert coords(plan_magnitude_unconstrained(m, a, 2)) == [("fc.weight", 0), ("fc.weight", 1)]


def test_random_exhaustive_and_deterministic():
    man = conv_manifest(1)
    a = random_archive(man)
    n = len(candidate_set(man, a))
    full = plan_random(man, a, n, seed=3)
    assert sorted(coords(full)) == sorted(candidate_set(man, a).coord(i) for i in range(n))
    assert coords(plan_random(man, a, 10, seed=7)) == coords(plan_random(man, a, 10, seed=7))
    assert coords(plan_random(man, a, 10, seed=7)) != coords(plan_random(man, a, 10, seed=8))
    with pytest.raises(PreconditionError):
        plan_random(man, a, n + 1, seed=0)


def test_random_restrict_and_bits():
    man = conv_manifest(2)
    a = random_archive(man)
    p = plan_random(man, a, 15, seed=1, restrict_L=1)
    assert {f.tensor for f in p.flips} == {"conv0.weight"}
    assert all(f.bit == 31 for f in p.flips)
    anyb = plan_random(man, a, 30, seed=1, sign_only=False)
    bits = [f.bit for f in anyb.flips]
    assert all(0 <= b <= 31 for b in bits) and len(set(bits)) > 5


def test_apply_examples():
    m, a = kernel_model([[2.75], [1.0]])
    empty = FlipPlan([], 0, "dnl", 1)
    assert write_archive(apply(empty, a)) == write_archive(a)
    one = FlipPlan([Flip("fc.weight", 0)], 1, "dnl", 1)
    out = apply(one, a)
    assert out.array("fc.weight").reshape(-1).tolist() == [-2.75, 1.0]
    assert a.array("fc.weight").reshape(-1).tolist() == [2.75, 1.0]
    assert write_archive(apply(one, out)) == write_archive(a)


def test_apply_touches_only_planned_bits():
    man = conv_manifest(2)
    a = random_archive(man)
    plan = plan_random(man, a, 25, seed=4, sign_only=False)
    out = apply(plan, a)
    diff = 0
    for n in a:
        x = a.array(n).view(np.uint32) ^ out.array(n).view(np.uint32)
        diff += sum(bin(int(v)).count("1") for v in x.reshape(-1))
    assert diff == 25
    assert apply(plan, out).bit_equal(a)


def test_apply_bounds():
    m, a = kernel_model([[1.0]])
    with pytest.raises(PreconditionError):
        apply(FlipPlan([Flip("fc.weight", 5)], 1, "dnl", 1), a)
    with pytest.raises(PreconditionError):
        apply(FlipPlan([Flip("nope", 0)], 1, "dnl", 1), a)


def test_plan_validation_and_json(tmp_path):
    with pytest.raises(DataError):
        FlipPlan([Flip("w", 0), Flip("w", 0)], 2, "dnl", 1)
    with pytest.raises(DataError):
        FlipPlan([Flip("w", 0)], 2, "dnl", 1)
    with pytest.raises(DataError):
        FlipPlan([Flip("w", 0, 40)], 1, "dnl", 1)
    plan = FlipPlan([Flip("a", 3), Flip("b", 1, 7)], 2, "random_bit", None, seed=9)
    text = plan.dumps()
    assert list(json.loads(text)) == ["method", "k", "L", "seed", "flips"]
    (tmp_path / "p.json").write_text(text)
    back = FlipPlan.load(tmp_path / "p.json")
    assert back == plan
    (tmp_path / "bad.json").write_text('{"k": 1}')
    with pytest.raises(DataError):
        FlipPlan.load(tmp_path / "bad.json")
