import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreo.errors import ConfigError
from choreo.metrics import (
    GEOMETRIC_TEMPLATES,
    EvalConfig,
    GaussianStats,
    beat_align_score,
    diversity,
    evaluate_suite,
    extract_dance_beats,
    frechet_distance,
    geometric_features,
    kinetic_features,
    sqrtm_psd,
)
from choreo.motion import JOINT, SMPL_REST_POSE, MotionSequence, SyntheticCorpusSpec, generate_synthetic


def stats_1d(mean, var):
    return GaussianStats(np.array([mean], float), np.array([[var]], float))


def test_frechet_analytic_values():
    assert frechet_distance(stats_1d(0, 1), stats_1d(1, 1)) == pytest.approx(1.0, abs=1e-12)
    assert frechet_distance(stats_1d(0, 1), stats_1d(0, 4)) == pytest.approx(1.0, abs=1e-12)
    assert frechet_distance(stats_1d(2, 3), stats_1d(2, 3)) == pytest.approx(0.0, abs=1e-6)


def random_stats(seed, k=4):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(k, k))
    return GaussianStats(rng.normal(size=k), a @ a.T + 0.1 * np.eye(k))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_frechet_symmetric_nonnegative(s1, s2):
    a, b = random_stats(s1), random_stats(s2)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-8)
    assert frechet_distance(a, a) < 1e-6


def test_frechet_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    a, b = random_stats(1), random_stats(2)
    cross = np.real(sqrtm(a.cov @ b.cov))
    want = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * cross)
    assert frechet_distance(a, b) == pytest.approx(want, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_sqrtm_squares_back(seed, n, rank):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, min(rank, n)))
    sigma = a @ a.T
    root = sqrtm_psd(sigma)
    err = np.linalg.norm(root @ root - sigma) / max(np.linalg.norm(sigma), 1e-12)
    assert err < 1e-5


def test_sqrtm_rejects_indefinite():
    with pytest.raises(ValueError):
        sqrtm_psd(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        sqrtm_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_diversity_examples():
    assert diversity([np.ones(3), np.ones(3)]) == 0.0
    assert diversity([np.zeros(2), np.array([2.0, 0.0])]) == pytest.approx(2.0)
    assert diversity(np.array([0.0, 1.0, 2.0])) == pytest.approx(4 / 3)
    with pytest.raises(ConfigError):
        diversity([np.zeros(2)])


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))))
def test_diversity_order_invariant(perm):
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert diversity(x[perm]) == pytest.approx(diversity(x), rel=1e-12)


def test_bas_examples():
    assert beat_align_score([10, 40], [10, 40]) == 1.0
    assert beat_align_score([13], [10], sigma=3) == pytest.approx(math.exp(-0.5))
    assert beat_align_score([], [10]) == 0.0
    # sigma is rescaled from 60 fps frames
    assert beat_align_score([16], [10], sigma=3, fps=120) == pytest.approx(math.exp(-0.5))


@pytest.mark.parametrize("base", [0, 1, 3])
def test_bas_monotone_in_offset(base):
    music = [20, 50, 80]
    scores = [beat_align_score([b + base + k for b in music], music) for k in range(8)]
    assert all(x >= y for x, y in zip(scores, scores[1:]))


def static_pose(T=20):
    return np.repeat(SMPL_REST_POSE[None] + [0, 0.92, 0], T, axis=0)


def test_kinetic_static_and_translation():
    assert not kinetic_features(static_pose()).any()
    frames = static_pose(10) + np.arange(10)[:, None, None] * np.array([0.3, 0.0, 0.4])
    k = kinetic_features(frames).reshape(3, 24)
    np.testing.assert_allclose(k[0], 0.5)
    np.testing.assert_allclose(k[1], 0.25)
    np.testing.assert_allclose(k[2], 0.0, atol=1e-12)


def test_kinetic_reversal_and_translation_invariance():
    frames = generate_synthetic(SyntheticCorpusSpec(num_sequences=1, T=90))[0].motion.frames
    k = kinetic_features(frames)
    np.testing.assert_allclose(kinetic_features(frames[::-1]), k, rtol=1e-9)
    np.testing.assert_allclose(kinetic_features(frames + [5.0, -2.0, 1.0]), k, rtol=1e-6, atol=1e-9)


def test_geometric_range_and_symmetry():
    g = geometric_features(static_pose())
    assert g.shape == (len(GEOMETRIC_TEMPLATES),) and len(GEOMETRIC_TEMPLATES) == 16
    assert np.all((g >= 0) & (g <= 1))
    names = list(GEOMETRIC_TEMPLATES)
    for left in [n for n in names if n.startswith("left_")]:
        assert g[names.index(left)] == g[names.index("right_" + left[5:])]
    assert g[names.index("left_hand_above_head")] == 0.0
    assert g[names.index("right_hand_above_head")] == 0.0


def test_geometric_hand_above_head():
    frames = static_pose(4)
    frames[:2, JOINT["left_wrist"], 1] = 2.0
    g = geometric_features(frames)
    assert g[GEOMETRIC_TEMPLATES.index("left_hand_above_head")] == 0.5
    with pytest.raises(ConfigError):
        geometric_features(np.zeros((4, 8, 3)))


def test_dance_beats_single_sinusoid():
    period = 60
    t = np.arange(240)
    frames = np.zeros((240, 2, 3))
    frames[:, 1, 0] = np.sin(2 * np.pi * t / period)
    beats = extract_dance_beats(frames, smooth_window=1, min_gap=5)
    want = np.arange(15, 240 - 1, 30)  # direction reversals
    assert len(beats) == len(want)
    assert np.abs(beats - want).max() <= 1


def test_dance_beats_constant_velocity_empty():
    frames = np.arange(50)[:, None, None] * np.ones((1, 3, 3))
    assert extract_dance_beats(frames).size == 0


def test_dance_beats_recover_corpus():
    hits = total = 0
    for s in generate_synthetic(SyntheticCorpusSpec(num_sequences=16, T=240, seed=11)):
        found = extract_dance_beats(s.motion)
        for b in s.beats:
            total += 1
            hits += found.size > 0 and np.abs(found - b).min() <= 1
    assert hits / total >= 0.95


def test_suite_reference_against_itself():
    ref = [s.motion for s in generate_synthetic(SyntheticCorpusSpec(num_sequences=6, T=120, seed=4))]
    report = evaluate_suite(ref, ref)
    assert report.fid_k < 1e-4 and report.fid_g < 1e-4
    assert math.isnan(report.bas)
    dup = evaluate_suite([ref[0], ref[0]], ref)
    assert dup.div_k == 0.0 and dup.div_g == 0.0
    again = evaluate_suite(ref, ref)
    assert again.to_json() == report.to_json()


def test_suite_bas_and_csv():
    samples = generate_synthetic(SyntheticCorpusSpec(num_sequences=3, T=240, seed=2))
    motions = [s.motion for s in samples]
    report = evaluate_suite(motions, motions, [s.beats for s in samples], EvalConfig())
    assert report.bas > 0.9
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("index,bas") and len(lines) == 4
