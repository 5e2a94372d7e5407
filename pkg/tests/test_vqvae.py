import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreo import numerics as nx
from choreo.errors import ConfigError
from choreo.motion import SyntheticCorpusSpec, generate_synthetic, toy_split
from choreo.numerics import ops
from choreo.numerics.tensor import Tensor
from choreo.vqvae import (
    CodeSequence,
    VqLossWeights,
    VqTrainer,
    VqTrainSchedule,
    VqVaeConfig,
    VqVaeModel,
    decode_codes,
    encode_corpus_to_codes,
    half_body_data,
    nearest_codes,
    quantize,
    rec_loss,
    vq_loss,
)

SMALL = VqVaeConfig(num_codes=8, code_dim=6, downsample=8, width=8)


def small_model(half="lower", joints=3, seed=0):
    with nx.precision(np.float64):
        return VqVaeModel(half, joints, SMALL, seed)


def check(f, wrt, **kw):
    with nx.precision(np.float64):
        report = nx.gradient_check(f, wrt, **kw)
    assert report.passed, str(report)
    return report


# ---------------------------------------------------------------------------
# quantizer
# ---------------------------------------------------------------------------


def test_quantize_examples():
    book = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    q = quantize(Tensor(np.array([[0.9, 0.1], [0.0, 1.0], [0.5, 0.5]])), book)
    np.testing.assert_array_equal(q.indices, [0, 1, 0])
    np.testing.assert_array_equal(q.e_q.data, [[1, 0], [0, 1], [1, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 5))
def test_nearest_is_brute_force_argmin(seed, n, c):
    rng = np.random.default_rng(seed)
    book = rng.integers(-2, 3, size=(n, c)).astype(float)  # small integers produce ties
    e = rng.integers(-2, 3, size=(40, c)).astype(float)
    got = nearest_codes(e, book)
    for i, row in enumerate(e):
        dist = [np.linalg.norm(row - z) for z in book]
        best = min(dist)
        assert dist[got[i]] == best
        assert got[i] == next(j for j, dj in enumerate(dist) if dj == best)


def test_straight_through_identity_gradient():
    book = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    e = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
    quantize(e, book).e_q.sum().backward()
    np.testing.assert_array_equal(e.grad, 1.0)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def test_encode_decode_shapes():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(2, 16, 9))
    e = m.encode(x)
    assert e.shape == (2, 2, 6)
    assert m.decode_pose(e).shape == (2, 16, 9)
    assert m.decode_velocity(e).shape == (2, 15, 3)
    assert m.decode_pose(m.encode(x[:, :8])).shape == (2, 8, 9)
    assert m.encode(np.zeros((1, 21, 9))).shape == (1, 2, 6)  # trailing frames cropped
    with pytest.raises(ConfigError):
        m.encode(np.zeros((1, 7, 9)))
    with pytest.raises(ConfigError):
        small_model("upper").decode_velocity(e)


def test_batch_rows_do_not_leak():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(1, 16, 9))
    one = m.encode(x).data
    two = m.encode(np.concatenate([x, x + 1.0])).data
    np.testing.assert_allclose(two[0], one[0], atol=1e-12)


def test_constant_codes_give_constant_interior():
    m = small_model()
    z = np.repeat(np.random.default_rng(3).normal(size=(1, 1, 6)), 16, axis=1)
    out = m.decode_pose(Tensor(z)).data[0]
    margin = m.boundary_frames()
    assert margin == 39
    interior = out[margin:-margin]
    assert np.abs(interior - interior[0]).max() < 1e-5
    assert np.abs(out[0] - interior[0]).max() > 1e-5


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


def test_vq_loss_zero_and_offset():
    P = Tensor(np.random.default_rng(0).normal(size=(1, 6, 3)))
    e = Tensor(np.ones((1, 2, 4)))
    assert float(vq_loss(P, P.data, e, e).total.data) == 0.0
    assert float(rec_loss(P + 1.0, P.data).data) == pytest.approx(1.0)


def test_codebook_and_commit_gradients_are_isolated():
    with nx.precision(np.float64):
        e = Tensor(np.array([[[1.0, 2.0]]]), requires_grad=True)
        z = Tensor(np.array([[[0.0, 0.0]]]), requires_grad=True)
        P = Tensor(np.zeros((1, 3, 1)))
        vq_loss(P, P.data, e, z, VqLossWeights(beta=0.25)).total.backward()
    # mse means over 2 entries: d/de [beta * mean((e - z)^2)] = beta * (e - z)
    np.testing.assert_allclose(e.grad, 0.25 * np.array([[[1.0, 2.0]]]))
    np.testing.assert_allclose(z.grad, -np.array([[[1.0, 2.0]]]))


def test_gradient_of_encode():
    m = small_model()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 16, 9)))
    check(lambda: m.encode(x).sum(), m.encoder.parameters(), max_entries=8)


def test_gradient_through_quantizer():
    m = small_model()
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 16, 9)))
    target = rng.normal(size=(1, 16, 9))
    m.codebook.data[:] = rng.normal(size=m.codebook.shape)

    def f():
        e = m.encode(x)
        q = m.quantize(e)
        return vq_loss(m.decode_pose(q.e_q), target, e, q.z).total

    params = {k: v for k, v in m.main_parameters().items() if k in ("codebook", "encoder.conv_in.weight", "decoder.conv_out.weight")}
    report = check(f, params, max_entries=12)
    assert report.straight_through


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def tiny_corpus(n=4, T=32, J=6, seed=0):
    return [s.motion for s in generate_synthetic(SyntheticCorpusSpec(num_sequences=n, T=T, J=J, seed=seed))]


def test_trainer_deterministic_and_updates_jointly():
    motions = tiny_corpus()
    split = toy_split(6)
    poses, vels = half_body_data(motions, split, "lower")
    sched = VqTrainSchedule(steps=5, batch_size=4, crop=16, lr=1e-3, velocity_steps=0)
    runs = []
    for _ in range(2):
        m = VqVaeModel("lower", 3, SMALL, 0)
        before = {k: v.data.copy() for k, v in m.main_parameters().items()}
        VqTrainer(m, poses, vels, VqLossWeights(), sched).run()
        runs.append(m.state_dict())
        for k, v in m.main_parameters().items():
            assert not np.array_equal(before[k], v.data), k
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def test_velocity_phase_leaves_main_parameters_bit_identical():
    motions = tiny_corpus()
    poses, vels = half_body_data(motions, toy_split(6), "lower")
    m = VqVaeModel("lower", 3, SMALL, 0)
    trainer = VqTrainer(m, poses, vels, VqLossWeights(), VqTrainSchedule(steps=2, batch_size=4, crop=16, velocity_steps=0))
    trainer.run()
    main = {k: v.data.tobytes() for k, v in m.main_parameters().items()}
    vel = {k: v.data.copy() for k, v in m.velocity_parameters().items()}
    for _ in range(3):
        trainer.velocity_step_once()
    assert main == {k: v.data.tobytes() for k, v in m.main_parameters().items()}
    assert any(not np.array_equal(vel[k], v.data) for k, v in m.velocity_parameters().items())


def test_velocity_decoder_learns_zero_velocity():
    poses = np.random.default_rng(0).normal(size=(4, 16, 9)).astype(np.float32)
    vels = np.zeros((4, 15, 3), np.float32)
    m = VqVaeModel("lower", 3, SMALL, 0)
    t = VqTrainer(m, poses, vels, VqLossWeights(), VqTrainSchedule(steps=1, batch_size=4, crop=16, lr=3e-3, velocity_steps=0))
    t.run()
    first = t.velocity_step_once()
    for _ in range(150):
        last = t.velocity_step_once()
    assert last < 0.05 * first and last < 1e-2


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        VqTrainer(small_model(), np.zeros((0, 16, 9)), None, VqLossWeights(), VqTrainSchedule())


def test_corpus_codes_roundtrip():
    motions = tiny_corpus(J=6)
    split = toy_split(6)
    up, lo = VqVaeModel("upper", 3, SMALL, 1), VqVaeModel("lower", 3, SMALL, 2)
    codes = encode_corpus_to_codes(up, lo, motions[0], split)
    again = encode_corpus_to_codes(up, lo, motions[0], split)
    assert len(codes) == 4 and codes.d == 8
    np.testing.assert_array_equal(codes.upper, again.upper)
    assert codes.upper.min() >= 0 and codes.upper.max() < SMALL.num_codes
    back = decode_codes(up, lo, codes, split)
    assert back.frames.shape == (32, 6, 3)
    assert np.isfinite(np.abs(back.frames - motions[0].frames).mean())
    with pytest.raises(ConfigError):
        encode_corpus_to_codes(lo, up, motions[0], split)


def test_code_sequence_validation():
    with pytest.raises(ConfigError):
        CodeSequence([1, 2], [1])
    with pytest.raises(ConfigError):
        CodeSequence([1, 9], [1, 2]).validate(8)
