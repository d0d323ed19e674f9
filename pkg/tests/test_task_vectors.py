import numpy as np
import pytest
from conftest import random_instance
from oracles import brute_force_disjoint_mean

from tvmerge.errors import CoefficientArityMismatch, InvalidArgument, InvalidFraction
from tvmerge.params import ParamSet, elementwise_axpy, loads, dumps
from tvmerge.task_vectors import (
    LAYER_WISE,
    PHI,
    RAW,
    TASK_WISE,
    MergeCoefficients,
    TaskVector,
    compose,
    fixed_task_arithmetic,
    make_task_vector,
    phi,
    trim_count,
    weight_average,
)


def vec(values, task=""):
    return TaskVector(ParamSet([("w", 0, np.asarray(values, np.float64))]), task)


def test_make_task_vector_examples():
    pre = ParamSet([("w", 0, np.array([1.0, 1.0], np.float32))])
    ft = ParamSet([("w", 0, np.array([3.0, 0.0], np.float32))])
    np.testing.assert_array_equal(make_task_vector(ft, pre).delta["w"], [2.0, -1.0])
    assert not make_task_vector(pre, pre).delta.flat().any()


def test_task_vector_added_back_is_exact():
    rng = np.random.default_rng(0)
    _, pre, finetuned, vectors = random_instance(rng, scale=5.0)
    for ft, v in zip(finetuned, vectors):
        assert elementwise_axpy(pre, 1.0, v.delta) == ft


def test_task_vector_paramset_round_trip():
    v = phi([vec([1.0, -2.0], "a")], 1.0)[0]
    back = TaskVector.from_paramset(loads(dumps(v.to_paramset())))
    assert back.processed == PHI and back.source_task == "a"
    assert back.delta.flat().tolist() == v.delta.flat().tolist()


def test_phi_single_vector_no_trim_is_identity():
    v = vec([0.5, -1.0, 0.0, 3.0])
    (out,) = phi([v], 1.0)
    assert out.processed == PHI
    np.testing.assert_array_equal(out.delta["w"], v.delta["w"])


def test_phi_hand_example():
    a, b = phi([vec([2.0, 1.0]), vec([-2.0, 3.0])], 1.0)
    np.testing.assert_array_equal(a.delta["w"], [0.0, 0.5])
    np.testing.assert_array_equal(b.delta["w"], [0.0, 1.5])


def test_phi_rejects_bad_input():
    with pytest.raises(InvalidFraction):
        phi([vec([1.0])], 0.0)
    with pytest.raises(InvalidFraction):
        phi([vec([1.0])], 1.5)
    with pytest.raises(InvalidArgument):
        phi([], 0.5)
    with pytest.raises(InvalidArgument):
        phi(phi([vec([1.0])], 1.0), 1.0)


def test_trim_tie_break_prefers_lower_index():
    (out,) = phi([vec([1.0, -1.0, 1.0, 0.5])], 0.5)
    np.testing.assert_array_equal(out.delta["w"], [1.0, -1.0, 0.0, 0.0])


def test_trim_count():
    assert trim_count(0.7, 10) == 7
    assert trim_count(0.2, 11) == 3
    assert trim_count(1e-9, 5) == 1


@pytest.mark.parametrize("seed", range(20))
def test_phi_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k, d = 3, 20
    rows = rng.standard_normal((k, d))
    rows[rng.random((k, d)) < 0.1] = 0.0
    keep = [0.2, 0.5, 1.0][seed % 3]
    out = phi([vec(r) for r in rows], keep)
    total = np.zeros(d)
    for v in out:
        total = total + v.delta["w"]
    assert total.tolist() == brute_force_disjoint_mean(rows.tolist(), keep)


@pytest.mark.parametrize("seed", range(10))
def test_phi_invariants(seed):
    rng = np.random.default_rng(100 + seed)
    k, d, keep = int(rng.integers(1, 6)), int(rng.integers(1, 40)), float(rng.choice([0.2, 0.5, 1.0]))
    out = phi([vec(r) for r in rng.standard_normal((k, d))], keep)
    stacked = np.stack([v.delta["w"] for v in out])
    for row in stacked:
        assert np.count_nonzero(row) <= trim_count(keep, d)
    for col in stacked.T:
        assert len({np.sign(x) for x in col if x != 0}) <= 1
    again = phi([vec(r) for r in stacked], 1.0)
    for before, after in zip(stacked, again):
        nz = before != 0
        assert np.all(np.sign(after.delta["w"][nz]) == np.sign(before[nz]))


def test_coefficients_validation():
    with pytest.raises(CoefficientArityMismatch):
        MergeCoefficients(TASK_WISE, np.ones(2), ("a",))
    with pytest.raises(CoefficientArityMismatch):
        MergeCoefficients(LAYER_WISE, np.ones(2), ("a", "b"))
    c = MergeCoefficients(LAYER_WISE, np.ones((2, 3)), ("a", "b"))
    with pytest.raises(CoefficientArityMismatch):
        c.as_matrix(2)
    assert MergeCoefficients(TASK_WISE, [-1.5, 2.0], ("a", "b")).k == 2


def test_compose_single_vector_recovers_finetuned():
    rng = np.random.default_rng(3)
    _, pre, finetuned, vectors = random_instance(rng, k_max=1, scale=2.0)
    merged = compose(pre, vectors[:1], MergeCoefficients.constant(TASK_WISE, ["t0"], 1.0))
    assert merged == finetuned[0]


def test_uniform_coefficients_equal_weight_average():
    rng = np.random.default_rng(4)
    _, pre, finetuned, vectors = random_instance(rng, k_max=4)
    merged = weight_average(pre, vectors)
    mean = np.mean([ft.flat() for ft in finetuned], axis=0)
    np.testing.assert_allclose(merged.flat(), mean, rtol=1e-6, atol=1e-7)


def test_layer_wise_constant_rows_equal_task_wise():
    rng = np.random.default_rng(5)
    _, pre, _, vectors = random_instance(rng)
    lam = rng.uniform(-1, 1, size=len(vectors))
    ids = [v.source_task for v in vectors]
    tw = compose(pre, vectors, MergeCoefficients(TASK_WISE, lam, ids))
    lw = compose(pre, vectors, MergeCoefficients(LAYER_WISE, np.repeat(lam[:, None], pre.layer_count, 1), ids))
    assert tw == lw


def test_fixed_task_arithmetic():
    rng = np.random.default_rng(6)
    _, pre, _, vectors = random_instance(rng, k_max=2)
    assert fixed_task_arithmetic(pre, vectors, 0.0) == pre
    ids = [v.source_task for v in vectors]
    assert fixed_task_arithmetic(pre, vectors) == compose(pre, vectors, MergeCoefficients.constant(TASK_WISE, ids, 0.3))


def test_ties_variant_is_task_arithmetic_over_phi():
    rng = np.random.default_rng(7)
    _, pre, _, vectors = random_instance(rng, k_max=3)
    processed = phi(vectors, 0.2)
    merged = fixed_task_arithmetic(pre, processed, 0.3)
    acc = pre.flat()
    for v in processed:
        acc = acc + 0.3 * v.delta.flat()
    assert merged.flat().tolist() == acc.astype(np.float32).astype(np.float64).tolist()


def test_compose_is_linear_in_coefficients():
    rng = np.random.default_rng(8)
    _, pre, _, vectors = random_instance(rng)
    ids = [v.source_task for v in vectors]
    shape = (len(vectors), pre.layer_count)
    c1, c2 = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)
    a, b = 0.7, -1.3

    def delta(c):
        return compose(pre, vectors, MergeCoefficients(LAYER_WISE, c, ids)).flat() - pre.flat()

    lhs = delta(a * c1 + b * c2)
    rhs = a * delta(c1) + b * delta(c2)
    scale = np.abs(pre.flat()).max()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * scale)


def test_compose_arity_errors():
    rng = np.random.default_rng(9)
    _, pre, _, vectors = random_instance(rng, k_max=1)
    with pytest.raises(CoefficientArityMismatch):
        compose(pre, vectors, MergeCoefficients.constant(TASK_WISE, ["a", "b"], 0.3))
    with pytest.raises(CoefficientArityMismatch):
        compose(pre, vectors, MergeCoefficients.constant(LAYER_WISE, ["a"], 0.3, pre.layer_count + 1))


def test_raw_flag_default():
    assert vec([1.0]).processed == RAW
