import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.strategies import integers, sampled_from

from core.errors import InsufficientRank, InvalidInput
from core.spectral_core import (
    SchemeVariant,
    SegmentScheme,
    build_expert,
    extract_segment,
    kaiming_uniform_bound,
    residual_compensation,
    segment_starts,
    single_lora_init,
    svd_decompose,
    zero_init_expert,
)


@given(integers(1, 20), integers(1, 20), integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_svd_reconstructs_with_orthonormal_factors(m, n, seed):
    w = np.random.default_rng(seed).standard_normal((m, n))
    f = svd_decompose(w)
    assert f.h == min(m, n)
    assert np.linalg.norm(f.reconstruct() - w) <= 1e-10 * np.linalg.norm(w)
    assert np.allclose(f.u.T @ f.u, np.eye(f.h), atol=1e-10, rtol=0)
    assert np.allclose(f.v.T @ f.v, np.eye(f.h), atol=1e-10, rtol=0)
    assert np.all(np.diff(f.s) <= 0)
    assert np.all(f.s >= 0)


def test_svd_of_identity_and_rank_one():
    f = svd_decompose(np.eye(3))
    assert np.allclose(f.s, [1.0, 1.0, 1.0])

    u = np.array([1.0, 2.0, 2.0]) / 3.0
    v = np.array([0.6, 0.8])
    f = svd_decompose(5.0 * np.outer(u, v))
    assert f.s[0] == pytest.approx(5.0)
    assert f.s[1] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("bad", [np.array([[1.0, np.nan]]), np.array([[np.inf]]), np.zeros((0, 3)), np.ones(4)])
def test_svd_rejects_invalid_input(bad):
    with pytest.raises(InvalidInput):
        svd_decompose(bad)


def test_segment_schemes_match_constructions():
    assert segment_starts(SegmentScheme("original"), 32, 4, 4) == [0, 8, 16, 24]
    assert segment_starts(SegmentScheme("principal"), 32, 4, 4) == [0, 4, 8, 12]
    assert segment_starts(SegmentScheme("minor"), 32, 4, 4) == [28, 24, 20, 16]
    assert segment_starts(SegmentScheme("principal"), 8, 1, 8) == [0]


@given(sampled_from(list(SchemeVariant)), integers(1, 8), integers(1, 4), integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_segments_are_disjoint_and_in_range(variant, n_experts, d, seed):
    h = n_experts * d * 2
    starts = segment_starts(SegmentScheme(variant, seed), h, n_experts, d)
    covered = np.zeros(h, dtype=int)
    for start in starts:
        assert 0 <= start and start + d <= h
        covered[start:start + d] += 1
    assert covered.max() <= 1
    assert len(starts) == n_experts


def test_random_scheme_is_seeded():
    first = segment_starts(SegmentScheme("random", 7), 64, 4, 4)
    assert first == segment_starts(SegmentScheme("random", 7), 64, 4, 4)


def test_segment_scheme_errors():
    with pytest.raises(InsufficientRank):
        segment_starts(SegmentScheme("principal"), 8, 4, 4)
    with pytest.raises(InvalidInput):
        segment_starts(SegmentScheme("original"), 10, 4, 2)
    with pytest.raises(ValueError):
        SegmentScheme("sideways")


def test_extract_segment_bounds(rng):
    f = svd_decompose(rng.standard_normal((10, 6)))
    segment = extract_segment(f, 2, 3)
    assert segment.u_seg.shape == (10, 3)
    assert segment.spectral_mass == pytest.approx(f.s[2:5].sum())
    with pytest.raises(InvalidInput):
        extract_segment(f, 4, 3)


@pytest.mark.parametrize("s, rho", [(1.0, 1.0), (2.0, 10.0), (16.0, 0.5)])
def test_damped_expert_product(rng, s, rho):
    f = svd_decompose(rng.standard_normal((12, 9)))
    segment = extract_segment(f, 3, 3)
    expert = build_expert(segment, s, rho)
    assert expert.b.shape == (12, 3) and expert.a.shape == (3, 9)
    expected = segment.product()
    assert np.linalg.norm(s * rho * expert.product() - expected) <= 1e-12 * np.linalg.norm(expected)


def test_expert_delta_does_not_depend_on_scale(rng):
    segment = extract_segment(svd_decompose(rng.standard_normal((8, 8))), 0, 2)
    deltas = [build_expert(segment, s, 10.0).delta() for s in (1.0, 4.0, 16.0)]
    assert np.allclose(deltas[0], deltas[1], atol=1e-14)
    assert np.allclose(deltas[0], deltas[2], atol=1e-14)


def test_build_expert_rejects_bad_scale(rng):
    segment = extract_segment(svd_decompose(rng.standard_normal((4, 4))), 0, 2)
    with pytest.raises(InvalidInput):
        build_expert(segment, 0.0, 1.0)
    with pytest.raises(InvalidInput):
        build_expert(segment, 1.0, -1.0)


def test_single_lora_init_is_undamped(rng):
    f = svd_decompose(rng.standard_normal((10, 7)))
    adapter = single_lora_init(f, 0, 4, s=2.0)
    top = (f.u[:, :4] * f.s[:4]) @ f.v[:, :4].T
    assert np.allclose(adapter.delta(), top, atol=1e-12)


def test_zero_init_expert(rng):
    expert = zero_init_expert(6, 100, 3, 2.0, rng)
    assert not np.any(expert.b)
    assert expert.is_zero_init
    assert np.max(np.abs(expert.a)) <= 1.0 / math.sqrt(100)
    assert kaiming_uniform_bound(100) == pytest.approx(0.1)


def test_residual_compensation_mean_of_deltas(rng):
    f = svd_decompose(rng.standard_normal((8, 8)))
    experts = [build_expert(extract_segment(f, 2 * i, 2), 3.0, 2.0) for i in range(4)]
    residual = residual_compensation(experts, 3.0, 4)
    assert np.allclose(residual, sum(e.delta() for e in experts) / 4)
    # per-expert scales enter each term separately
    scales = [1.0, 2.0, 3.0, 4.0]
    residual = residual_compensation(experts, scales, 4)
    expected = sum(s * e.product() for s, e in zip(scales, experts)) / 4
    assert np.allclose(residual, expected)


def test_residual_compensation_single_expert_is_full_delta(rng):
    f = svd_decompose(rng.standard_normal((5, 5)))
    expert = build_expert(extract_segment(f, 0, 5), 1.0, 1.0)
    assert np.allclose(residual_compensation([expert], 1.0, 1), f.reconstruct(), atol=1e-12)


def test_residual_compensation_requires_experts():
    with pytest.raises(InvalidInput):
        residual_compensation([], 1.0, 1)
