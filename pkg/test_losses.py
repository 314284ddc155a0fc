"""
Tests for the rendering, consistency, frustum and regularizer objectives
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import diffcore as dc
from decoder import SH_COEFFS, GaussianScene
from errors import ConfigError, GeometryError, ShapeError
from geometry import CameraPose, Intrinsics
from grad_check import _loss_checks, grad_check
from losses import (
    LossReport,
    LossWeights,
    branch_objective,
    consistency_loss,
    decoder_regularizers,
    frustum_loss,
    gradient_proxy_loss,
    rendering_loss,
    total_objective,
)
from renderer import RenderOutput

INTR = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)


def output(acc, depth=None):
    acc = dc.lift(acc)
    depth = dc.lift(np.ones(acc.shape) if depth is None else depth)
    return RenderOutput(color=dc.constant(np.zeros(acc.shape + (3,))), depth=depth, accumulation=acc)


def flat_scene(n=4, opacity=1e-3, scale=0.1, sh=0.0):
    return GaussianScene.from_arrays(
        np.tile([0.0, 0.0, 2.0], (n, 1)),
        np.full((n, 3), scale),
        np.tile(np.eye(3), (n, 1, 1)),
        np.full(n, opacity),
        np.full((n, 3, SH_COEFFS), sh),
    )


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.mse, w.perceptual, w.frustum, w.decoder) == (2.0, 1.0, 1e-2, 1e-2)
        assert (w.consistency_alpha, w.consistency_depth) == (1e-3, 1e-2)

    def test_opacity_hinge(self):
        assert LossWeights().opacity_hinge == pytest.approx(-1.386294, abs=1e-6)

    def test_negative_rejected(self):
        with pytest.raises(ConfigError, match="frustum"):
            LossWeights(frustum=-1.0)


class TestRenderingLoss:
    def test_identical_images(self, rng):
        image = rng.uniform(size=(8, 8, 3))
        assert float(rendering_loss(image, image).total.data) == 0.0

    def test_constant_images(self):
        rep = rendering_loss(np.ones((8, 8, 3)), np.zeros((8, 8, 3)))
        assert float(rep.total.data) == pytest.approx(2.0)
        assert float(rep.terms["perceptual"].data) == 0.0

    def test_mse_symmetric(self, rng):
        a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
        assert float(rendering_loss(a, b).terms["mse"].data) == pytest.approx(float(rendering_loss(b, a).terms["mse"].data))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rendering_loss(np.zeros((8, 8, 3)), np.zeros((4, 8, 3)))

    def test_custom_perceptual(self, rng):
        calls = []

        def perceptual(a, b):
            calls.append(a.shape)
            return dc.constant(0.25)

        rep = rendering_loss(rng.uniform(size=(4, 4, 3)), np.zeros((4, 4, 3)), perceptual=perceptual)
        assert calls == [(4, 4, 3)]
        assert float(rep.terms["perceptual"].data) == 0.25

    def test_gradient_proxy_sees_edges(self):
        edge = np.zeros((8, 8, 1))
        edge[:, 4:] = 1.0
        assert float(gradient_proxy_loss(edge, np.zeros((8, 8, 1))).data) > 0.0


class TestConsistencyLoss:
    def test_identical_branches(self, rng):
        acc = rng.uniform(size=(6, 6))
        rep = consistency_loss(output(acc), output(acc))
        assert float(rep.total.data) == 0.0

    def test_full_against_empty(self):
        rep = consistency_loss(output(np.ones((4, 4))), output(np.zeros((4, 4))))
        assert float(rep.terms["con_alpha"].data) == pytest.approx(1.0)
        assert float(rep.terms["con_depth"].data) == 0.0
        assert float(rep.total.data) == pytest.approx(1e-3)

    def test_symmetric(self, rng):
        a, b = output(rng.uniform(size=(5, 5))), output(rng.uniform(size=(5, 5)))
        assert float(consistency_loss(a, b).total.data) == pytest.approx(float(consistency_loss(b, a).total.data), abs=1e-15)

    def test_stop_gradient_halves(self, rng):
        a_vals, b_vals = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        a, b = dc.variable(a_vals), dc.variable(b_vals)
        consistency_loss(output(a), output(b)).terms["con_alpha"].backward()
        # each operand only receives its own half
        assert_allclose(a.grad, 0.5 * np.sign(a_vals - b_vals) / 16.0)
        assert_allclose(b.grad, 0.5 * np.sign(b_vals - a_vals) / 16.0)

    def test_depth_restricted_to_support(self):
        acc_a = np.array([[0.9, 0.9], [0.1, 0.9]])
        acc_b = np.array([[0.9, 0.2], [0.9, 0.9]])
        depth_a = np.array([[1.0, 5.0], [5.0, 2.0]])
        depth_b = np.array([[1.5, 0.0], [0.0, 2.0]])
        rep = consistency_loss(output(acc_a, depth_a), output(acc_b, depth_b))
        assert float(rep.terms["con_depth"].data) == pytest.approx(0.5 / 2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            consistency_loss(output(np.zeros((4, 4))), output(np.zeros((2, 4))))


class TestFrustumLoss:
    def test_centered_point(self):
        assert float(frustum_loss(np.array([[0.0, 0.0, 1.0]]), [(CameraPose.identity(), INTR)]).data) == 0.0

    def test_min_over_views(self):
        other = CameraPose(np.eye(3), np.array([10.0, 0.0, 0.0]))
        loss = frustum_loss(np.array([[0.0, 0.0, 1.0]]), [(CameraPose.identity(), INTR), (other, INTR)])
        assert float(loss.data) == 0.0

    def test_lateral_violation(self):
        loss = frustum_loss(np.array([[0.75, 0.0, 1.0]]), [(CameraPose.identity(), INTR)], tau=0.1)
        assert float(loss.data) == pytest.approx(math.log(6.0))

    def test_behind_camera(self):
        loss = frustum_loss(np.array([[0.0, 0.0, -1.0]]), [(CameraPose.identity(), INTR)], tau=0.1, z_near=0.01)
        assert float(loss.data) == pytest.approx(math.log(1.0 + (1.01 + 2.0) / 0.1))

    def test_monotone_toward_frustum(self):
        values = [
            float(frustum_loss(np.array([[x, 0.0, 1.0]]), [(CameraPose.identity(), INTR)]).data)
            for x in np.linspace(3.0, 0.5, 12)
        ]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[-1] == 0.0

    def test_no_cameras(self):
        with pytest.raises(GeometryError):
            frustum_loss(np.zeros((1, 3)), [])

    def test_empty_scene(self):
        assert float(frustum_loss(np.zeros((0, 3)), [(CameraPose.identity(), INTR)]).data) == 0.0


class TestDecoderRegularizers:
    def test_inactive_hinges(self):
        rep = decoder_regularizers(flat_scene(opacity=1e-3))
        assert float(rep.terms["opacity_reg"].data) == pytest.approx(1e-3, rel=1e-6)
        assert float(rep.terms["scale_reg"].data) == 0.0
        assert float(rep.terms["rot_reg"].data) == 0.0

    def test_scale_hinge(self):
        rep = decoder_regularizers(flat_scene(scale=math.e * 0.5))
        assert float(rep.terms["scale_reg"].data) == pytest.approx(1.0)

    def test_sh_soft_cap(self):
        small = float(decoder_regularizers(flat_scene(sh=0.0)).terms["sh_reg"].data)
        large = float(decoder_regularizers(flat_scene(sh=6.0)).terms["sh_reg"].data)
        assert small == pytest.approx(math.log1p(math.exp(-3.0)) ** 2)
        assert large > 9.0

    def test_total_is_sum(self, rng):
        rep = decoder_regularizers(flat_scene(opacity=0.6, scale=0.8, sh=1.0))
        assert float(rep.total.data) == pytest.approx(sum(float(v.data) for v in rep.terms.values()))


class TestComposition:
    def _report(self, total, **terms):
        return LossReport(total=dc.constant(total), terms={k: dc.constant(v) for k, v in terms.items()})

    def test_single_branch(self):
        a = self._report(3.0, mse=1.0)
        assert float(total_objective(a).total.data) == 3.0

    def test_equal_branches(self):
        a, b = self._report(2.5, mse=1.0), self._report(2.5, mse=1.0)
        con = self._report(0.0, con_alpha=0.0)
        assert float(total_objective(a, b, con).total.data) == 2.5

    def test_hand_computed(self):
        a, b = self._report(1.0, mse=0.2), self._report(3.0, mse=0.6)
        con = self._report(0.125, con_alpha=0.5)
        rep = total_objective(a, b, con)
        assert float(rep.total.data) == 2.125
        assert float(rep.terms["mse"].data) == pytest.approx(0.4)
        assert float(rep.terms["con_alpha"].data) == 0.5

    def test_branch_weighting(self, rng):
        scene = flat_scene(opacity=0.3)
        target = rng.uniform(size=(8, 8, 3))
        render = RenderOutput(color=dc.constant(rng.uniform(size=(8, 8, 3))), depth=dc.constant(np.ones((8, 8))), accumulation=dc.constant(np.ones((8, 8))))
        rep = branch_objective([render], [target], scene, [(CameraPose.identity(), INTR)])
        t = {k: float(v.data) for k, v in rep.terms.items()}
        assert float(rep.total.data) == pytest.approx(2.0 * t["mse"] + t["perceptual"] + 1e-2 * t["frustum"] + 1e-2 * t["decoder"])

    def test_branch_needs_matching_targets(self):
        with pytest.raises(ShapeError):
            branch_objective([], [], flat_scene(), [(CameraPose.identity(), INTR)])


class TestLossGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_instances(self, seed):
        for name, (fn, point) in _loss_checks(np.random.default_rng(seed)).items():
            assert grad_check(fn, point) < 1e-5, name

    def test_nonnegative(self, rng):
        for _ in range(5):
            a, b = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
            assert float(rendering_loss(a, b).total.data) >= 0.0
            means = rng.normal(size=(5, 3)) * 3
            assert float(frustum_loss(means, [(CameraPose.identity(), INTR)]).data) >= 0.0
