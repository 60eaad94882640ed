"""End-to-end acceptance checks, one block per criterion.

Each check is wrapped in the ``criterion`` recorder so the run ends with a
PASS/FAIL line per criterion in the terminal summary. The slow checks
(overfit, learnability) are timed against their stated budgets.
"""

import csv
import time
from dataclasses import replace

import numpy as np
import pytest

from v2s import ablation, cli, data, dsp, gradcheck, inference, metrics, synthesis
from v2s.config import RunConfig
from v2s.data import speech_like
from v2s.model import Model, ModelConfig, save_checkpoint
from v2s.training import FrameSet, TrainConfig, evaluate_mel, prepare_all, train_prepared
from v2s.vision import build_clip, build_flow_clip

P = dsp.DspParams()


def W(x, sr=16000):
    return dsp.Waveform(np.asarray(x, dtype=np.float64), sr)


def noisy(x, snr_db, seed=0):
    n = np.random.default_rng(seed).standard_normal(len(x.samples))
    n *= np.sqrt(np.mean(x.samples**2) / np.mean(n**2) / 10 ** (snr_db / 10))
    return W(x.samples + n, x.sample_rate)


# ------------------------------------------------------------ 2. gradients


def test_gradient_integrity(criterion):
    with criterion(2, "finite-difference suite, float64, seed 0") as c:
        t0 = time.perf_counter()
        rows = gradcheck.run_suite(0)
        took = time.perf_counter() - t0
        worst = max(r[1] for r in rows)
        c.detail = f"{len(rows)} checks, worst rel err {worst:.2e}, {took:.0f}s"
        layer_kinds = ("dense", "conv2d", "conv1d", "batch_norm", "activation", "gru", "highway", "postnet", "model_end_to_end")
        assert all(any(r[0].startswith(k) for r in rows) for k in layer_kinds), [r[0] for r in rows]
        assert all(r[3] for r in rows), [r for r in rows if not r[3]]
        assert worst < 1e-3
        assert took < 300


# -------------------------------------------------------------- 3. overfit

OVERFIT_TRAIN = TrainConfig(
    conv_dropout=0.0,
    dense_dropout=0.0,
    max_epochs=500,
    phases=(1,),
    plateau_patience=500,
    early_stop_patience=500,
    target_loss=1e-3,
)


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    data.gen_synthetic_corpus(4, 11, root / "corpus")
    utts = data.load_corpus(root / "corpus")
    run = replace(RunConfig.preset("tiny"), train=OVERFIT_TRAIN)
    t0 = time.perf_counter()
    frames = FrameSet.from_prepared(prepare_all(utts, run.model, run.dsp, run.flow_iterations), run.model)
    result = train_prepared(frames, frames, run.model, run.train)
    took = time.perf_counter() - t0
    (root / "run").mkdir()
    save_checkpoint(root / "run" / cli.CHECKPOINT_NAME, result.model, cli.RUN_MARKER + run.to_text())
    return root, result, evaluate_mel(result.model, frames), took


def test_overfit_four_utterances(overfit, criterion):
    _, result, mse, took = overfit
    with criterion(3, "tiny config, 4 utterances, training mel MSE") as c:
        c.detail = f"mse {mse:.2e} after {len(result.history)} epochs, {took:.0f}s"
        assert mse < 1e-3
        assert len(result.history) <= 500
        assert took < 600


def test_overfit_checkpoint_through_cli(overfit, criterion, tmp_path, capsys):
    root, *_ = overfit
    with criterion(3, "overfit checkpoint through `v2s infer`") as c:
        code = cli.main(
            ["infer", "--model", str(root / "run"), "--utterance", str(root / "corpus" / "utt00002"), "--out", str(tmp_path)]
        )
        assert code == 0
        mse = float(capsys.readouterr().out.split("mel_mse=")[1].split()[0])
        c.detail = f"overlap-averaged mel MSE {mse:.2e}"
        assert mse < 1e-2


# --------------------------------------------------------- 4. learnability


def test_learnability_above_baseline(criterion):
    with criterion(4, "mini model, 64 utterances, held-out mel MSE vs predict-the-mean") as c:
        run = RunConfig.preset("mini")
        cfg = replace(run.train, phases=(1,), max_epochs=12)
        t0 = time.perf_counter()
        utts = [data.synth_utterance(f"u{i:02d}", seed=i) for i in range(64)]
        tr, va = data.split_utterances(utts, run.train_fraction, seed=0)
        trs = FrameSet.from_prepared(prepare_all(tr, run.model, run.dsp, run.flow_iterations), run.model)
        vas = FrameSet.from_prepared(prepare_all(va, run.model, run.dsp, run.flow_iterations), run.model)
        result = train_prepared(trs, vas, run.model, cfg)
        mse = evaluate_mel(result.model, vas)
        took = time.perf_counter() - t0
        # per-bin variance of the held-out targets: the error of the best constant
        # predictor in hindsight, which is stricter than the training-set mean
        baseline = float(np.mean(vas.mel.reshape(-1, vas.mel.shape[-1]).var(axis=0)))
        c.detail = (
            f"held-out {mse:.4f}, baseline {baseline:.4f}, ratio {mse / baseline:.3f}, "
            f"{len(result.history)} epochs, {took / 60:.1f} min"
        )
        assert mse < 0.5 * baseline
        assert took < 3600


# ------------------------------------------------------ 5. vocoder fidelity


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lin_synth_oracle_magnitudes(seed, criterion):
    with criterion(5, f"lin_synth on oracle magnitudes, speech-like seed {seed}") as c:
        x = speech_like(2.0, seed=seed)
        _, lin = dsp.featurize(x, P)
        y = synthesis.lin_synth(lin.frames, P)
        n = min(len(x.samples), len(y.samples))
        clean, rec = W(x.samples[:n]), W(y.samples[:n])
        s, e = metrics.stoi(clean, rec), metrics.estoi(clean, rec)
        c.detail = f"stoi {s:.3f}, estoi {e:.3f}"
        assert s > 0.9 and e > 0.8


def test_griffin_lim_monotone_on_random_inputs(criterion):
    with criterion(5, "Griffin-Lim error non-increasing on 100 random inputs") as c:
        q = dsp.DspParams(sample_rate=8000, win_length=32, hop_length=8, n_fft=64)
        worst = -np.inf
        for seed in range(100):
            r = np.random.default_rng(seed)
            mag = np.abs(r.standard_normal((int(r.integers(4, 30)), 33)))
            _, errors = dsp.griffin_lim_magnitude(mag, q, 25, rng=r)
            worst = max(worst, float(np.max(np.diff(errors))))
        c.detail = f"largest step {worst:.1e}"
        # float64 rounding only
        assert worst <= 1e-12


# ------------------------------------------------------- 6. metric oracles


@pytest.fixture(scope="module")
def clean():
    return speech_like(2.0, seed=0)


@pytest.mark.parametrize("fn", [metrics.stoi, metrics.estoi], ids=["stoi", "estoi"])
def test_metric_oracles(clean, fn, criterion):
    with criterion(6, f"{fn.__name__}: identity, gain, noise ordering") as c:
        self_score = fn(clean, clean)
        y = noisy(clean, 5.0)
        gain_gap = max(abs(fn(clean, W(g * y.samples)) - fn(clean, y)) for g in (0.25, 4.0))
        scores = [fn(clean, noisy(clean, snr)) for snr in (20, 10, 0)]
        c.detail = f"self {self_score:.7f}, gain gap {gain_gap:.1e}, 20/10/0 dB {scores[0]:.3f}/{scores[1]:.3f}/{scores[2]:.3f}"
        assert abs(self_score - 1.0) <= 1e-6
        assert gain_gap <= 1e-6
        assert scores[0] >= scores[1] >= scores[2]


# ---------------------------------------------------- 7. exemplar exactness


def test_exemplar_exactness(criterion):
    with criterion(7, "self-query reproduction and brute-force agreement") as c:
        x = speech_like(1.5, seed=21)
        index = synthesis.build_exemplar_index([x, speech_like(1.0, seed=22)], P)
        mel, lin = dsp.featurize(x, P)
        np.testing.assert_array_equal(synthesis.exemplar_frames(mel.frames, index), lin.frames)
        r = np.random.default_rng(7)
        q = r.random((100, P.n_mels))
        got = synthesis.nearest(q, index.mel)
        want = [int(np.argmin([np.sum((e - qi) ** 2) for e in index.mel])) for qi in q]
        c.detail = f"{len(lin.frames)} frames reproduced, {int(np.sum(got == want))}/100 queries agree"
        assert got.tolist() == want


# ------------------------------------------------------- 8. shape contracts


def test_shape_contracts(criterion):
    with criterion(8, "embedding, pre-pool map, decoder block, flow volume") as c:
        model = Model(ModelConfig())
        emb, maps = model.encoder_forward(
            np.zeros((1, 9, 160, 128)), np.zeros((1, 16, 160, 128)), "infer", return_maps=True
        )
        mel = model.decoder_forward(emb, "infer")
        u = data.synth_utterance("shape", 5, n_frames=12)
        clip = build_clip([u.frame(i) for i in range(u.n_frames)], u.landmarks, 6)
        flow = build_flow_clip(clip, iterations=10)
        c.detail = (
            f"embedding {emb.shape[1]}, pre-pool {maps['pix'].shape[2:]}, "
            f"decoder {mel.shape[1]}x{mel.shape[2]}, flow {flow.fields.shape}"
        )
        assert emb.shape == (1, 1024)
        assert maps["pix"].shape[2:] == maps["flow"].shape[2:] == (5, 4)
        assert mel.shape[1:] == (4, 80) and mel.shape[1] * mel.shape[2] == 320
        assert flow.fields.shape == (8, 160, 128, 2)
        assert clip.frames.shape == (9, 160, 128)


# ------------------------------------------------------ 9. ablation harness


def test_ablation_harness(criterion, tmp_path):
    with criterion(9, "six configurations train, infer, and land in one CSV") as c:
        corpus = tmp_path / "corpus"
        data.gen_synthetic_corpus(6, 4, corpus)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("preset=tiny\nmax_epochs=5\n")
        out = tmp_path / "ablation.csv"
        assert cli.main(["ablate", "--data", str(corpus), "--config", str(cfg), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        c.detail = ", ".join(f"{r['run']} {float(r['val_mel_mse']):.3f}" for r in rows)
        want = {(p, f, n) for p, f in ablation.STREAMS.values() for n in (True, False)}
        got = {(r["use_pixels"] == "true", r["use_flow"] == "true", r["use_postnet"] == "true") for r in rows}
        assert got == want
        for r in rows:
            assert r["status"] == "ok"
            assert np.isfinite(float(r["val_mel_mse"])) and np.isfinite(float(r["infer_mel_mse"]))


# ------------------------------------------------------ 10. overlap protocol


def test_overlap_protocol(criterion):
    with criterion(10, "75-frame utterance, T=8") as c:
        run = RunConfig.preset("tiny")
        m = replace(run.model, T=8)
        prep = data.prepare_utterance(data.synth_utterance("ov", 3, n_frames=75), m, run.dsp, flow_iterations=5)
        samples = data.windows(prep, 8)
        starts = [s.start for s in samples]
        overlaps = {len(set(range(a, a + 8)) & set(range(b, b + 8))) for a, b in zip(starts, starts[1:])}
        for a, b in zip(samples, samples[1:]):
            np.testing.assert_array_equal(a.clip[1:], b.clip[:-1])
            np.testing.assert_array_equal(a.target_mel[m.l :], b.target_mel[: -m.l])
        mel_set, _ = inference.predict_windows(Model(m, seed=0), prep)
        counts = mel_set.counts()
        c.detail = f"{len(samples)} windows, overlaps {sorted(overlaps)}, interior counts {sorted(set(counts[7:68].tolist()))}"
        assert len(samples) == 68 and starts == list(range(68))
        assert overlaps == {7}
        assert np.all(counts[7:68] == 8)
        assert np.all(counts[:7] < 8) and np.all(counts[68:] < 8)
