"""
Tests for the differentiation engine, gradient checking and the optimizer
"""

import inspect
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import diffcore as dc
from errors import NonFiniteError, ShapeError
from grad_check import CheckResult, _op_checks, grad_check, run_verification_suite, verification_checks
from param_store import ParamStore, global_grad_norm, lr_schedule, optimizer_step, truncated_normal

OP_CHECKS = _op_checks(np.random.default_rng(0))
SUITE_CHECKS = verification_checks(np.random.default_rng(0))
# graph plumbing rather than differentiable ops; custom_op is covered by the renderer check
NOT_OPS = {"lift", "variable", "constant", "unbroadcast", "custom_op"}
EXPORTED_OPS = sorted(
    {
        fn.__name__.rstrip("_")
        for fn in vars(dc).values()
        if inspect.isfunction(fn) and fn.__module__ == dc.__name__ and not fn.__name__.startswith("_")
    }
    - NOT_OPS
)


class TestForward:
    def test_softmax_uniform(self):
        assert_allclose(dc.softmax(np.zeros(2)).data, [0.5, 0.5])

    def test_softmax_temperature(self):
        out = dc.softmax(np.array([1.0, 0.0]), temperature=1e4).data
        assert np.max(np.abs(out - 0.5)) < 1e-3

    def test_sigmoid_slope(self):
        x = dc.variable(np.array(0.0))
        dc.sigmoid(x).backward()
        assert x.grad == pytest.approx(0.25)

    def test_layernorm_statistics(self, rng):
        out = dc.layernorm(rng.normal(size=(4, 16)) * 3 + 2, axis=-1).data
        assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError) as err:
            dc.add(np.zeros((3, 4)), np.zeros((2, 5)))
        assert "(3, 4)" in str(err.value) and "(2, 5)" in str(err.value)


class TestBackward:
    def test_shared_node_accumulates(self):
        x = dc.variable(np.array(3.0))
        y = x * x + x
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_stop_gradient_one_sided(self, rng):
        values = rng.normal(size=5)
        x = dc.variable(values)
        dc.sum(dc.stop_gradient(x) * x).backward()
        assert_allclose(x.grad, values)

    def test_stopped_branch_gets_nothing(self, rng):
        x = dc.variable(rng.normal(size=4))
        stopped = dc.stop_gradient(x * 2.0)
        dc.sum(stopped * stopped).backward()
        assert np.all(x.grad == 0.0)

    def test_fancy_index_scatter_adds(self):
        x = dc.variable(np.arange(4.0))
        dc.sum(x[np.array([0, 0, 2])]).backward()
        assert_allclose(x.grad, [2.0, 0.0, 1.0, 0.0])

    def test_broadcast_unbroadcasts(self, rng):
        bias = dc.variable(np.zeros(3))
        dc.sum(dc.constant(rng.normal(size=(5, 3))) + bias).backward()
        assert_allclose(bias.grad, [5.0, 5.0, 5.0])

    def test_custom_op(self):
        x = dc.variable(np.array([1.0, 2.0]))
        y = dc.custom_op([x], x.data * 3.0, lambda g: (g * 3.0,), "triple")
        dc.sum(y).backward()
        assert_allclose(x.grad, [3.0, 3.0])

    def test_backward_is_deterministic(self, rng):
        values = rng.normal(size=(3, 3))

        def run():
            x = dc.variable(values)
            dc.sum(dc.softmax(x @ x, axis=0) * dc.exp(x)).backward()
            return x.grad

        assert np.array_equal(run(), run())

    def test_implicit_seed_needs_scalar(self):
        with pytest.raises(ShapeError):
            dc.variable(np.zeros(3)).backward()


class TestGradCheck:
    def test_square(self):
        assert grad_check(lambda x: dc.sum(x * x), np.array([3.0]), eps=1e-5) < 1e-8

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("name", sorted(OP_CHECKS))
    def test_op(self, name, seed):
        fn, point = _op_checks(np.random.default_rng(seed))[name]
        assert grad_check(fn, point, eps=1e-6) < 1e-6

    @pytest.mark.parametrize("op", EXPORTED_OPS)
    def test_every_op_is_checked(self, op):
        assert op in OP_CHECKS

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("name", sorted(n for n in SUITE_CHECKS if not n.startswith("op.")))
    def test_composite(self, name, seed):
        fn, point, tol, coords = verification_checks(np.random.default_rng([0, seed]))[name]
        assert grad_check(fn, point, eps=1e-6, coords_per_array=coords, seed=seed) < tol

    def test_suite_reports_worst_point(self):
        results = run_verification_suite(seed=3, points=2)
        assert {r.name for r in results} == set(SUITE_CHECKS)
        assert all(r.points == 2 and r.passed for r in results)

    @pytest.mark.parametrize("seed", range(10))
    def test_layernorm_random_points(self, seed):
        point = np.random.default_rng(seed).normal(size=(2, 6))
        weights = np.random.default_rng(seed + 100).normal(size=(2, 6))
        assert grad_check(lambda x: dc.sum(dc.layernorm(x) * weights), point) < 1e-6

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda x: dc.sum(x), np.array([np.nan]))

    def test_vector_output_rejected(self):
        with pytest.raises(ShapeError, match="scalar"):
            grad_check(lambda x: x * 2.0, np.array([1.0, 2.0]))

    def test_detects_a_wrong_adjoint(self):
        def wrong(x):
            return dc.sum(dc.custom_op([x], x.data ** 2, lambda g: (g * x.data,), "half_square"))

        assert grad_check(wrong, np.array([2.0])) > 0.1

    def test_check_result(self):
        assert CheckResult("a", 1e-8, 1e-6).passed
        assert not CheckResult("b", 1e-3, 1e-6).passed


class TestParamStore:
    def test_duplicate_name(self):
        store = ParamStore()
        store.register("w", np.zeros(2))
        with pytest.raises(KeyError):
            store.register("w", np.zeros(2))

    def test_shape_is_fixed(self):
        store = ParamStore()
        store.register("w", np.zeros(2))
        with pytest.raises(ShapeError):
            store.assign("w", np.zeros(3))

    def test_leaf_shared_within_step(self):
        store = ParamStore()
        store.register("w", np.ones(2))
        assert store.param("w") is store.param("w")
        dc.sum(store.param("w") * 3.0).backward()
        assert_allclose(store.gradients()["w"], [3.0, 3.0])

    def test_truncated_normal_bounds(self, rng):
        values = truncated_normal(rng, (2000,), std=0.02)
        assert np.all(np.abs(values) <= 0.04 + 1e-12)
        assert values.std() == pytest.approx(0.02 * 0.88, rel=0.1)


class TestOptimizer:
    def _store(self, value=1.0):
        store = ParamStore()
        store.register("w", np.array([value]))
        return store

    def test_zero_gradient_no_decay(self):
        store = self._store()
        optimizer_step(store, {"w": np.zeros(1)}, lr=0.1, weight_decay=0.0)
        assert_allclose(store.params["w"], [1.0])

    def test_clipping_scales_gradient(self):
        store = ParamStore()
        store.register("w", np.zeros(2))
        _, norm = optimizer_step(store, {"w": np.array([6.0, 8.0])}, lr=0.0, clip_norm=1.0, beta1=0.0)
        assert norm == pytest.approx(10.0)
        assert_allclose(store.first_moment["w"], [0.6, 0.8])

    def test_hand_evaluated_update(self):
        store = self._store(2.0)
        store.first_moment["w"] = np.array([0.1])
        store.second_moment["w"] = np.array([0.04])
        lr, wd, b1, b2, eps, g, t = 0.01, 0.1, 0.9, 0.999, 1e-8, 0.5, 3
        optimizer_step(store, {"w": np.array([g])}, lr, wd, b1, b2, eps, clip_norm=None, step=t)
        m = b1 * 0.1 + (1 - b1) * g
        v = b2 * 0.04 + (1 - b2) * g * g
        expected = 2.0 - lr * wd * 2.0 - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert store.params["w"][0] == pytest.approx(expected, abs=1e-15)
        assert store.step_count == t

    def test_non_finite_gradient_names_parameter(self):
        store = self._store()
        with pytest.raises(NonFiniteError, match="'w'"):
            optimizer_step(store, {"w": np.array([np.inf])}, lr=0.1)

    def test_global_norm(self):
        assert global_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == pytest.approx(5.0)


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 1000, 100, 5e-4) == 0.0
        assert lr_schedule(100, 1000, 100, 5e-4) == pytest.approx(5e-4)
        assert lr_schedule(1000, 1000, 100, 5e-4) == 0.0

    def test_cosine_midpoint(self):
        assert lr_schedule(550, 1000, 100, 5e-4) == pytest.approx(2.5e-4)

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 0, 1.0) == pytest.approx(1.0)
