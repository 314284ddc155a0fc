"""
Tests for the candidate heads, rotation parameterization, merge/split algebra and stage decoding
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

import diffcore as dc
from decoder import (
    APP_WIDTH,
    GEO_WIDTH,
    NUM_CANDIDATES,
    CandidateSet,
    DecoderConfig,
    GaussianScene,
    StagePoint,
    decode_candidates,
    decode_stage,
    gate_weights,
    init_head_params,
    merge_demo_rows,
    merge_group,
    quaternion_to_rotation_matrix,
    rot6d_to_matrix,
    rotation_matrix_to_quaternion,
    split_parent,
)
from encoder import LatentState
from errors import ConfigError, GeometryError, SplatError
from param_store import ParamStore


def random_candidates(rng, m: int = 3) -> CandidateSet:
    def const(shape, scale=1.0, offset=0.0):
        return dc.constant(offset + scale * rng.normal(size=shape))

    rot = rng.normal(scale=0.2, size=(m, NUM_CANDIDATES, 6))
    return CandidateSet(
        positions=const((m, NUM_CANDIDATES, 3)),
        log_scales=const((m, NUM_CANDIDATES, 3), 0.3, -2.0),
        rot6d=dc.constant(rot + np.array([1.0, 0, 0, 0, 1.0, 0])),
        rot_residual=dc.constant(rot),
        opacity_logits=const((m, NUM_CANDIDATES, 1)),
        gate_logits=const((m, NUM_CANDIDATES, 1)),
        sh=const((m, NUM_CANDIDATES, APP_WIDTH), 0.3),
    )


def merge_rows(scale, alphas, weights=None):
    b = len(alphas)
    weights = np.full(b, 1.0 / b) if weights is None else np.asarray(weights)
    return merge_group(
        np.zeros((b, 3)),
        np.full((b, 3), math.log(scale)),
        np.tile([1.0, 0, 0, 0, 1.0, 0], (b, 1)),
        np.asarray(alphas, dtype=float),
        np.zeros((b, 3, 16)),
        weights,
    )


class TestHeads:
    def test_zero_output_hits_offsets(self):
        store = ParamStore()
        init_head_params(store, np.random.default_rng(0), dim=8)
        for name in store:
            store.assign(name, np.zeros_like(store.params[name]))
        zeros = dc.constant(np.zeros((2, 8)))
        cands = decode_candidates(LatentState(zeros, zeros, zeros, zeros), store)

        assert cands.positions.shape == (2, NUM_CANDIDATES, 3)
        assert cands.sh.shape == (2, NUM_CANDIDATES, APP_WIDTH)
        assert cands.gate_logits.shape == (2, NUM_CANDIDATES, 1)
        assert_allclose(cands.positions.data, np.broadcast_to([0.0, 0.0, 1.5], (2, 16, 3)))
        assert_allclose(np.exp(cands.log_scales.data), math.exp(-2.0))
        assert_allclose(1.0 / (1.0 + np.exp(-cands.opacity_logits.data)), 0.006693, atol=1e-6)
        matrices = rot6d_to_matrix(cands.rot6d).data
        assert_allclose(matrices, np.broadcast_to(np.eye(3), matrices.shape), atol=1e-12)

    def test_head_widths(self):
        assert GEO_WIDTH == 14
        assert APP_WIDTH == 48

    def test_candidate_count_is_fixed(self):
        with pytest.raises(ConfigError):
            DecoderConfig(num_candidates=8)


class TestRotations:
    def test_offset_is_identity(self):
        assert_allclose(rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1.0, 0])).data, np.eye(3), atol=1e-15)

    def test_scale_invariant(self):
        assert_allclose(rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3.0, 0])).data, np.eye(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert_allclose(rot6d_to_matrix(np.array([0.0, 1.0, 0.0, -1.0, 0.0, 0.0])).data, expected, atol=1e-15)

    def test_degenerate_first_column(self):
        with pytest.raises(GeometryError):
            rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1.0, 0]))

    def test_orthonormal(self, rng):
        mats = rot6d_to_matrix(rng.normal(size=(50, 6))).data
        assert_allclose(mats @ np.swapaxes(mats, -1, -2), np.broadcast_to(np.eye(3), mats.shape), atol=1e-6)
        assert_allclose(np.linalg.det(mats), 1.0, atol=1e-6)

    def test_quaternion_roundtrip(self, rng):
        mats = rot6d_to_matrix(rng.normal(size=(20, 6))).data
        quats = rotation_matrix_to_quaternion(mats)
        assert np.all(quats[:, 0] >= 0)
        assert_allclose(np.linalg.norm(quats, axis=1), 1.0, atol=1e-12)
        assert_allclose(quaternion_to_rotation_matrix(quats), mats, atol=1e-12)

    def test_identity_quaternion(self):
        assert_allclose(rotation_matrix_to_quaternion(np.eye(3)[None]), [[1.0, 0.0, 0.0, 0.0]])


class TestGates:
    def test_equal_logits(self):
        assert_allclose(gate_weights(np.zeros(4)).data, 0.25)

    def test_two_logits(self):
        assert_allclose(gate_weights(np.array([1.0, 0.0])).data, [0.7311, 0.2689], atol=1e-4)

    def test_large_temperature(self):
        assert np.max(np.abs(gate_weights(np.array([3.0, -1.0, 0.5]), tau=1e4).data - 1 / 3)) < 1e-3

    def test_simplex(self, rng):
        for _ in range(1000):
            b = int(rng.choice([1, 2, 4, 8, 16]))
            w = gate_weights(rng.normal(scale=3.0, size=b), tau=float(rng.uniform(0.1, 5.0))).data
            assert np.all(w >= 0.0)
            assert abs(w.sum() - 1.0) < 1e-12

    def test_raising_a_logit_raises_its_weight(self, rng):
        logits = rng.normal(size=8)
        bumped = logits.copy()
        bumped[3] += 0.1
        assert gate_weights(bumped).data[3] > gate_weights(logits).data[3]


class TestMergeSplit:
    def test_single_candidate_identity(self):
        merged = merge_rows(0.3, [0.4])
        assert_allclose(np.exp(merged["log_scales"].data), 0.3, rtol=1e-14)
        assert merged["alpha"].data == pytest.approx(0.4, abs=1e-12)

    def test_eight_equal_scales_double(self):
        merged = merge_rows(0.5, [0.5] * 8)
        assert_allclose(np.exp(merged["log_scales"].data), 1.0, atol=1e-12)

    def test_equal_opacities(self):
        assert merge_rows(0.5, [0.5, 0.5])["alpha"].data == pytest.approx(0.5, abs=1e-12)

    def test_opacity_at_one_is_rejected(self):
        with pytest.raises(GeometryError):
            merge_rows(0.5, [0.5, 1.0])

    @pytest.mark.parametrize("alpha", [1.0, 1.25])
    def test_saturated_opacity_is_a_pipeline_error(self, alpha):
        with pytest.raises(SplatError, match="log-transmittance"):
            merge_rows(0.5, [0.3, alpha])

    def test_split_values(self):
        parent = {"log_scales": dc.constant(np.zeros(3)), "log_transmittance": dc.constant(np.log([0.25]))}
        child, twin = split_parent(parent)
        assert child["alpha"].data[0] == pytest.approx(0.5, abs=1e-12)
        assert_allclose(np.exp(child["log_scales"].data), 0.793700526, atol=1e-9)
        composite = 1.0 - (1.0 - child["alpha"].data[0]) * (1.0 - twin["alpha"].data[0])
        assert composite == pytest.approx(0.75, abs=1e-12)

    def test_split_then_merge_recovers_scale(self, rng):
        log_scale = rng.normal(size=3)
        child, twin = split_parent({"log_scales": dc.constant(log_scale), "log_transmittance": dc.constant([-0.7])})
        scales = np.stack([child["log_scales"].data, twin["log_scales"].data])
        merged = merge_group(np.zeros((2, 3)), scales, np.tile([1.0, 0, 0, 0, 1.0, 0], (2, 1)), [0.3, 0.3], np.zeros((2, 48)), [0.5, 0.5])
        assert np.max(np.abs(merged["log_scales"].data - log_scale)) < 1e-12

    def test_merged_opacity_is_monotone(self, rng):
        weights = gate_weights(rng.normal(size=4)).data
        alphas = rng.uniform(0.1, 0.8, size=4)
        base = merge_rows(0.5, alphas, weights)["alpha"].data
        for i in range(4):
            raised = alphas.copy()
            raised[i] += 0.1
            assert merge_rows(0.5, raised, weights)["alpha"].data >= base


class TestDecodeStage:
    @pytest.mark.parametrize("stage", range(5))
    def test_count(self, rng, stage):
        scene = decode_stage(random_candidates(rng, 3), StagePoint(stage, 1.0))
        assert scene.count == 3 * 2 ** stage
        assert np.all(np.exp(scene.log_scales.data) > 0)
        alphas = scene.opacities.data
        assert np.all((alphas > 0) & (alphas < 1))

    def test_full_size_count(self, rng):
        assert decode_stage(random_candidates(rng, 2048), StagePoint(3, 1.0)).count == 16_384

    def test_stage_matches_group_merge(self, rng):
        cands = random_candidates(rng, 2)
        scene = decode_stage(cands, StagePoint(2, 1.0), tau=0.7)
        b = 4
        for token in range(2):
            for group in range(4):
                rows = slice(group * b, (group + 1) * b)
                alphas = 1.0 / (1.0 + np.exp(-cands.opacity_logits.data[token, rows, 0]))
                merged = merge_group(
                    cands.positions.data[token, rows],
                    cands.log_scales.data[token, rows],
                    cands.rot6d.data[token, rows],
                    alphas,
                    cands.sh.data[token, rows],
                    gate_weights(cands.gate_logits.data[token, rows, 0], tau=0.7),
                )
                n = token * 4 + group
                assert_allclose(scene.means.data[n], merged["positions"].data, atol=1e-12)
                assert_allclose(scene.log_scales.data[n], merged["log_scales"].data, atol=1e-12)
                assert_allclose(scene.log_transmittance.data[n], merged["log_transmittance"].data, atol=1e-12)

    def test_lambda_zero_is_split_previous_stage(self, rng):
        cands = random_candidates(rng, 2)
        previous = decode_stage(cands, StagePoint(1, 1.0))
        blended = decode_stage(cands, StagePoint(2, 0.0))
        assert np.array_equal(blended.log_scales.data, np.repeat(previous.log_scales.data, 2, axis=0) - math.log(2.0) / 3.0)
        assert np.array_equal(blended.log_transmittance.data, np.repeat(previous.log_transmittance.data, 2, axis=0) * 0.5)
        assert np.array_equal(blended.means.data, np.repeat(previous.means.data, 2, axis=0))

    def test_lambda_one_is_current_stage(self, rng):
        cands = random_candidates(rng, 2)
        a = decode_stage(cands, StagePoint(3, 1.0))
        b = decode_stage(cands, StagePoint(3, 1.0))
        assert np.array_equal(a.means.data, b.means.data)

    def test_interpolates_in_parameter_domains(self, rng):
        cands = random_candidates(rng, 1)
        lo = decode_stage(cands, StagePoint(1, 0.0))
        hi = decode_stage(cands, StagePoint(1, 1.0))
        mid = decode_stage(cands, StagePoint(1, 0.25))
        assert_allclose(mid.log_scales.data, 0.75 * lo.log_scales.data + 0.25 * hi.log_scales.data, atol=1e-12)
        assert_allclose(mid.log_transmittance.data, 0.75 * lo.log_transmittance.data + 0.25 * hi.log_transmittance.data, atol=1e-12)

    def test_invalid_points(self, rng):
        with pytest.raises(ConfigError):
            StagePoint(1, 1.5)
        with pytest.raises(ConfigError):
            decode_stage(random_candidates(rng, 1), StagePoint(0, 0.5))

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range_lambda_is_a_pipeline_error(self, rng, lam):
        with pytest.raises(SplatError):
            StagePoint(1, lam)
        # decode_stage guards points that bypass StagePoint validation
        with pytest.raises(SplatError, match="outside"):
            decode_stage(random_candidates(rng, 1), SimpleNamespace(stage=1, lam=lam))


class TestScene:
    def test_from_arrays_roundtrip(self, rng):
        mats = rot6d_to_matrix(rng.normal(size=(4, 6))).data
        scene = GaussianScene.from_arrays(rng.normal(size=(4, 3)), rng.uniform(0.1, 1, (4, 3)), mats, rng.uniform(0.1, 0.9, 4), rng.normal(size=(4, 3, 16)))
        arrays = scene.arrays()
        assert_allclose(arrays["rotations"], mats, atol=1e-12)
        assert_allclose(scene.opacities.data[:, 0], arrays["opacities"], atol=1e-15)

    def test_opacity_logit_of_half(self):
        scene = GaussianScene.from_arrays(np.zeros(3), np.ones(3), np.eye(3), [0.5], np.zeros((1, 3, 16)))
        assert scene.opacity_logits.data[0, 0] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("alpha", [1e-7, 1e-12, 1e-15])
    def test_small_opacity_precision(self, alpha):
        scene = GaussianScene(
            dc.constant(np.zeros((1, 3))),
            dc.constant(np.zeros((1, 3))),
            dc.constant(np.array([[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]])),
            dc.constant(np.array([[math.log1p(-alpha)]])),
            dc.constant(np.zeros((1, 3, 16))),
        )
        assert scene.opacities.data[0, 0] == pytest.approx(alpha, rel=1e-12)
        assert scene.arrays()["opacities"][0] == pytest.approx(alpha, rel=1e-12)
        assert scene.opacity_logits.data[0, 0] == pytest.approx(math.log(alpha), abs=1e-9)

    def test_merged_small_opacities_keep_precision(self):
        merged = merge_rows(0.5, [1e-7, 1e-7])
        assert merged["alpha"].data.item() == pytest.approx(1e-7, rel=1e-12)


class TestMergeDemo:
    def test_stage_three_rows(self):
        rows = merge_demo_rows(StagePoint(3, 1.0))
        exposed = [r for r in rows if r["gaussian"].startswith("exposed")]
        assert len(exposed) == 8
        # two candidates of scale 0.5 merge to 0.5 * 2^(1/3)
        assert exposed[0]["scale"] == pytest.approx(0.5 * 2 ** (1 / 3), rel=1e-12)
        assert exposed[0]["alpha"] == pytest.approx(0.5, abs=1e-9)
        assert rows[-1]["alpha"] == pytest.approx(0.5, abs=1e-9)
