import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from v2s import dsp, metrics, synthesis
from v2s.data import speech_like
from v2s.synthesis import PredictionSet

P = dsp.DspParams()


# ------------------------------------------------------ gaussian averaging


def test_identical_predictions_unchanged(rng):
    v = rng.random(6)
    np.testing.assert_allclose(synthesis.gaussian_average(np.tile(v, (4, 1)), [-1.5, -0.5, 0.5, 1.5], 0.7), v)


def test_huge_sigma_is_plain_mean(rng):
    v = rng.random((5, 3))
    np.testing.assert_allclose(synthesis.gaussian_average(v, np.arange(5) - 2.0, 1e6), v.mean(axis=0), atol=1e-6)


def test_symmetric_three_predictions():
    assert synthesis.gaussian_average(np.array([0.0, 1.0, 2.0]), [-1.0, 0.0, 1.0], 1.0) == pytest.approx(1.0)


def test_empty_predictions_raise():
    with pytest.raises(ValueError):
        synthesis.gaussian_average(np.zeros((0, 3)), [], 1.0)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=st.floats(-5, 5)),
    st.floats(0.1, 10.0),
)
def test_average_bounded_by_contributors(vals, sigma):
    offs = np.arange(len(vals)) - (len(vals) - 1) / 2
    out = synthesis.gaussian_average(vals, offs, sigma)
    assert np.all(out >= vals.min(axis=0) - 1e-12) and np.all(out <= vals.max(axis=0) + 1e-12)


def test_default_sigma():
    assert synthesis.default_sigma(8, 4) == 8.0


def sliding(n_frames, T, l, d, rng):
    starts = np.arange(n_frames - T + 1)
    return PredictionSet(rng.random((len(starts), T * l, d)), starts, n_frames, l)


def test_prediction_counts_seventy_five_frames(rng):
    ps = sliding(75, 8, 2, 3, rng)
    c = ps.counts()
    assert len(ps.starts) == 68
    assert np.all(c[7:68] == 8)
    assert c.min() == 1 and c.max() == 8
    np.testing.assert_array_equal(c[:7], np.arange(1, 8))


def test_overlap_average_constant_set_idempotent():
    ps = PredictionSet(np.full((5, 8, 2), 0.3), np.arange(5), 8, 2)
    np.testing.assert_allclose(ps.average(), 0.3)


def test_overlap_average_matches_per_frame_formula(rng):
    ps = sliding(10, 4, 2, 3, rng)
    out = ps.average(sigma=1.5)
    offs = ps.offsets()
    row = 9  # spectrogram row of video frame 4
    vals, o = [], []
    for j, s in enumerate(ps.starts):
        k = row - s * 2
        if 0 <= k < 8:
            vals.append(ps.windows[j, k])
            o.append(offs[k])
    np.testing.assert_allclose(out[row], synthesis.gaussian_average(np.array(vals), o, 1.5))


def test_uncovered_frame_raises(rng):
    ps = PredictionSet(rng.random((1, 4, 2)), np.array([0]), 4, 2)
    with pytest.raises(ValueError, match="video frame 2"):
        ps.average()


# ------------------------------------------------------------- lin synth


@pytest.fixture(scope="module")
def speech():
    x = speech_like(2.0, seed=0)
    n = (len(x.samples) - P.win_length) // P.hop_length * P.hop_length + P.win_length
    return dsp.Waveform(x.samples[:n], x.sample_rate)


def test_lin_synth_oracle_magnitude_intelligible(speech):
    _, lin = dsp.featurize(speech, P)
    y = synthesis.lin_synth(lin.frames, P)
    assert np.max(np.abs(y.samples)) == pytest.approx(synthesis.OUTPUT_PEAK)
    assert metrics.stoi(speech, y) > 0.9
    assert metrics.estoi(speech, y) > 0.8


def test_lin_synth_zero_is_silence():
    y = synthesis.lin_synth(np.zeros((12, 513)), P)
    assert not np.any(y.samples)


@pytest.mark.parametrize("frames", [4, 32, 97])
def test_lin_synth_length(frames, rng):
    y = synthesis.lin_synth(rng.random((frames, 513)), P, iterations=2)
    assert abs(len(y.samples) - frames * P.hop_length) <= P.hop_length + P.win_length


def test_lin_synth_shape_check():
    with pytest.raises(ValueError):
        synthesis.lin_synth(np.zeros((5, 80)), P)


def test_lin_synth_deterministic(rng):
    f = rng.random((10, 513))
    a = synthesis.lin_synth(f, P, iterations=3).samples
    np.testing.assert_array_equal(a, synthesis.lin_synth(f, P, iterations=3).samples)


def test_mel_to_linear_shape(rng):
    assert synthesis.mel_to_linear(rng.random((6, 80)), P).shape == (6, 513)


# ------------------------------------------------------------- exemplars


@pytest.fixture(scope="module")
def index():
    return synthesis.build_exemplar_index([speech_like(1.0, seed=s) for s in range(2)], P)


def test_index_size(index):
    assert len(index) == 2 * dsp.n_frames(16000, 640, 160)


def test_index_pairs_obey_filterbank(index):
    fb = dsp.filterbank_for(P)
    mel = dsp.decompress(index.mel) * index.mel_peak[:, None]
    lin = dsp.decompress(index.lin) * index.lin_peak[:, None]
    want = lin @ fb.T
    assert np.max(np.abs(mel - want)) <= 1e-5 * want.max()


def test_empty_index_raises():
    with pytest.raises(ValueError):
        synthesis.build_exemplar_index([], P)


def test_self_query_returns_entry(index):
    idx = synthesis.nearest(index.mel[[0, 17, 150]], index.mel)
    for q, i in zip([0, 17, 150], idx):
        assert np.sum((index.mel[i] - index.mel[q]) ** 2) == 0.0


def test_own_utterance_reproduces_linear_exactly():
    x = speech_like(1.0, seed=5)
    index = synthesis.build_exemplar_index([x], P)
    mel, lin = dsp.featurize(x, P)
    np.testing.assert_array_equal(synthesis.exemplar_frames(mel.frames, index), lin.frames)
    np.testing.assert_array_equal(synthesis.exemplar_frames(lin.frames, index, query_linear=True), lin.frames)


def test_nearest_matches_brute_force(index, rng):
    q = rng.random((100, 80))
    # add exact duplicates so ties are exercised
    q[:5] = index.mel[[3, 3, 40, 41, 42]]
    got = synthesis.nearest(q, index.mel, chunk=17)
    for i in range(100):
        d = [float(np.sum((e - q[i]) ** 2)) for e in index.mel]
        assert got[i] == int(np.argmin(d))


def test_ties_go_to_lowest_index():
    entries = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert synthesis.nearest(np.array([[1.0, 0.0], [0.5, 0.5]]), entries).tolist() == [0, 0]


def test_single_entry_index_repeats(rng):
    idx = synthesis.ExemplarIndex(rng.random((1, 4)), rng.random((1, 6)), np.ones(1), np.ones(1))
    out = synthesis.exemplar_frames(rng.random((7, 4)), idx)
    np.testing.assert_array_equal(out, np.tile(idx.lin, (7, 1)))


def test_output_frames_are_index_members(index, rng):
    out = synthesis.exemplar_frames(rng.random((20, 80)), index)
    members = {r.tobytes() for r in index.lin}
    assert all(r.tobytes() in members for r in out)


def test_nearest_dimension_mismatch():
    with pytest.raises(ValueError):
        synthesis.nearest(np.zeros((2, 3)), np.zeros((4, 5)))


def test_mel_exemplar_synth_runs(index):
    mel, _ = dsp.featurize(speech_like(0.5, seed=9), P)
    y = synthesis.mel_exemplar_synth(mel.frames, index, P)
    assert y.sample_rate == 16000 and np.max(np.abs(y.samples)) == pytest.approx(0.95)
