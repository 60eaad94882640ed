"""Corpus handling: synthetic talking faces, directory ingestion and sample assembly."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dsp, fileio
from .vision import Landmarks, build_clip, build_flow_clip

log = logging.getLogger(__name__)

FACE_H, FACE_W = 160, 128


def worker_count() -> int:
    env = os.environ.get("V2S_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # N×H×W uint8
    landmarks: list[Landmarks]
    audio: dsp.Waveform
    fps: float
    opening: Optional[np.ndarray] = None  # per-frame mouth opening, synthetic corpora only

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        return self.frames[i].astype(np.float64) / 255.0


# ---------------------------------------------------------------- synthesis


def articulation(n_frames: int, fps: float, rng: np.random.Generator):
    """Random syllable schedule; returns ``opening(t)`` with closures lasting whole frames."""
    starts, ends, peaks = [], [], []
    i = int(rng.integers(1, 3))
    while i < n_frames:
        length = int(rng.integers(3, 7))
        starts.append(i / fps)
        ends.append(min(i + length, n_frames) / fps)
        peaks.append(rng.uniform(0.5, 1.0))
        i += length + int(rng.integers(2, 5))
    starts, ends, peaks = map(np.asarray, (starts, ends, peaks))

    def opening(t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        for s, e, p in zip(starts, ends, peaks):
            m = (t > s) & (t < e)
            out[m] = p * np.sin(np.pi * (t[m] - s) / (e - s)) ** 2
        return out

    return opening


def render_voice(opening_t: np.ndarray, sample_rate: int, rng: np.random.Generator, n_harmonics: int = 60) -> np.ndarray:
    """Harmonic source whose level and formants follow the mouth opening."""
    n = len(opening_t)
    t = np.arange(n) / sample_rate
    base = rng.uniform(100.0, 140.0)
    f0 = base * (1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.8, 1.6) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    f1 = 300.0 + 500.0 * opening_t
    f2 = 1700.0 - 500.0 * opening_t
    gains = []
    for k in range(1, n_harmonics + 1):
        fk = k * f0
        g = np.exp(-(((fk - f1) / 150.0) ** 2)) + 0.6 * np.exp(-(((fk - f2) / 200.0) ** 2)) + 0.02
        gains.append(np.where(fk < sample_rate / 2, g, 0.0))
    gains = np.asarray(gains)
    gains /= np.sqrt((gains**2).sum(axis=0, keepdims=True))
    x = np.zeros(n)
    for k in range(n_harmonics):
        x += gains[k] * np.sin((k + 1) * phase)
    return 0.5 * opening_t * x


def speech_like(duration: float = 2.0, sample_rate: int = 16000, seed: int = 0) -> dsp.Waveform:
    """A speech-like test signal: syllabic harmonic bursts with moving formants."""
    rng = np.random.default_rng(seed)
    fps = 25.0
    opening = articulation(int(math.ceil(duration * fps)), fps, rng)
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return dsp.Waveform(render_voice(opening(t), sample_rate, rng), sample_rate)


def _soft_ellipse(xs, ys, cx, cy, ax, ay, softness=0.7):
    r = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    d = (r - 1.0) * min(ax, ay)
    return 1.0 / (1.0 + np.exp(np.clip(d / softness, -50, 50)))


def render_face(opening: float, dx: float, dy: float, h: int = FACE_H, w: int = FACE_W):
    """Grayscale face in [0,1] plus its five landmarks."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.15 + 0.1 * ys / h
    cx = w / 2 + dx
    eye_y = 0.3 * h + dy
    head = _soft_ellipse(xs, ys, cx, 0.525 * h + dy, 0.41 * w, 0.44 * h, 1.2)
    skin = 0.62 + 0.08 * np.cos(2 * np.pi * (xs - dx) / 23.0) * np.cos(2 * np.pi * (ys - dy) / 19.0)
    img = img * (1 - head) + skin * head
    left = (0.35 * w + dx, eye_y)
    right = (0.65 * w + dx, eye_y)
    for ex, ey in (left, right):
        img = img * (1 - _soft_ellipse(xs, ys, ex, ey, 6.0, 4.0)) + 0.12 * _soft_ellipse(xs, ys, ex, ey, 6.0, 4.0)
    nose = (cx, 0.5 * h + dy)
    nm = _soft_ellipse(xs, ys, nose[0], nose[1], 4.0, 5.0)
    img = img * (1 - nm) + 0.42 * nm
    mouth_y = 0.7 * h + dy
    half_w = 0.16 * w
    lips = _soft_ellipse(xs, ys, cx, mouth_y, half_w + 2.0, 3.0 + 12.0 * opening)
    img = img * (1 - lips) + 0.35 * lips
    inner = _soft_ellipse(xs, ys, cx, mouth_y, half_w, 1.0 + 11.0 * opening)
    img = img * (1 - inner) + 0.05 * inner
    pts = np.array([left, right, nose, (cx - half_w, mouth_y), (cx + half_w, mouth_y)])
    return np.clip(img, 0.0, 1.0), Landmarks(pts)


def synth_utterance(
    uid: str,
    seed: int,
    n_frames: int = 75,
    fps: float = 25.0,
    sample_rate: int = 16000,
) -> Utterance:
    rng = np.random.default_rng(seed)
    opening = articulation(n_frames, fps, rng)
    centers = (np.arange(n_frames) + 0.5) / fps
    frame_open = opening(centers)
    # head drift: bounded smooth translation, at most 3 px per axis
    amp = rng.uniform(1.0, 3.0, size=2)
    freq = rng.uniform(0.2, 0.7, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    drift = amp[None, :] * np.sin(2 * np.pi * freq[None, :] * centers[:, None] + ph[None, :])
    frames, marks = [], []
    for i in range(n_frames):
        img, lm = render_face(frame_open[i], drift[i, 0], drift[i, 1])
        frames.append(np.round(img * 255.0).astype(np.uint8))
        marks.append(lm)
    n_samples = int(round(n_frames / fps * sample_rate))
    t = np.arange(n_samples) / sample_rate
    audio = render_voice(opening(t), sample_rate, rng)
    audio *= 0.9 / max(np.max(np.abs(audio)), 1e-12)
    audio = np.round(audio * 32767.0) / 32767.0  # PCM16-exact so disk round trips are lossless
    return Utterance(uid, np.stack(frames), marks, dsp.Waveform(audio, sample_rate), fps, frame_open)


def write_utterance(u: Utterance, out_dir) -> None:
    out = Path(out_dir)
    fileio.ensure_dir(out)
    for i, fr in enumerate(u.frames):
        fileio.write_pgm(out / f"frame-{i:05d}.pgm", fr)
    with open(out / "landmarks.txt", "w") as fh:
        for lm in u.landmarks:
            fh.write(" ".join(repr(float(v)) for v in lm.points.ravel()) + "\n")
    fileio.write_wav(out / "audio.wav", u.audio.samples, u.audio.sample_rate)
    with open(out / "meta.txt", "w") as fh:
        fh.write(f"fps={u.fps!r}\nsample_rate={u.audio.sample_rate}\n")
    if u.opening is not None:
        np.savetxt(out / "opening.txt", u.opening, fmt="%.9f")


def gen_synthetic_corpus(
    count: int,
    seed: int,
    out_dir,
    fps: float = 25.0,
    sample_rate: int = 16000,
    n_frames: int = 75,
) -> list[Path]:
    """Write ``count`` synthetic utterances under ``out_dir``; returns their directories."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    fileio.ensure_dir(out_dir)
    seeds = np.random.SeedSequence(seed).generate_state(count)
    paths = []
    for i in range(count):
        uid = f"utt{i:05d}"
        u = synth_utterance(uid, int(seeds[i]), n_frames, fps, sample_rate)
        write_utterance(u, Path(out_dir) / uid)
        paths.append(Path(out_dir) / uid)
    return paths


# ---------------------------------------------------------------- ingestion


def _read_meta(path: Path) -> dict:
    meta = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    for key in ("fps", "sample_rate"):
        if key not in meta:
            raise ValueError(f"{path}: missing {key}")
    return meta


def load_utterance(path) -> Utterance:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    meta = _read_meta(d / "meta.txt")
    fps = float(meta["fps"])
    frame_files = sorted(d.glob("frame-*.pgm"))
    if not frame_files:
        raise ValueError(f"{d}: no frame-*.pgm images")
    frames = np.stack([fileio.read_pgm(f) for f in frame_files])
    lm_path = d / "landmarks.txt"
    if not lm_path.exists():
        raise FileNotFoundError(f"{lm_path}: landmark sidecar missing")
    marks = []
    with open(lm_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 10:
                raise ValueError(f"{lm_path}:{n}: expected 10 values, got {len(vals)}")
            marks.append(Landmarks(np.array(vals, dtype=np.float64)))
    if len(marks) != len(frames):
        raise ValueError(f"{d}: {len(frames)} frames but {len(marks)} landmark lines")
    samples, sr = fileio.read_wav(d / "audio.wav")
    if sr != int(meta["sample_rate"]):
        raise ValueError(f"{d}: meta.txt says {meta['sample_rate']} Hz, audio.wav is {sr} Hz")
    expected = len(frames) / fps * sr
    if abs(len(samples) - expected) > sr / fps:
        raise ValueError(f"{d}: audio has {len(samples)} samples, expected about {expected:.0f}")
    opening = np.loadtxt(d / "opening.txt", ndmin=1) if (d / "opening.txt").exists() else None
    return Utterance(d.name, frames, marks, dsp.Waveform(samples, sr), fps, opening)


def load_corpus(root) -> list[Utterance]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: corpus directory not found")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.txt").exists())
    if not dirs:
        raise ValueError(f"{root}: no utterance directories")
    return [load_utterance(p) for p in dirs]


# --------------------------------------------------------- sample assembly


@dataclass
class PreparedUtterance:
    """Every per-frame model input and target of one utterance."""

    id: str
    pixels: np.ndarray  # N×K×H×W
    flows: Optional[np.ndarray]  # N×2(K-1)×H×W, None when flow is unused
    mel: np.ndarray  # (N·l)×n
    lin: np.ndarray  # (N·l)×d
    mel_peak: float
    lin_peak: float
    l: int

    @property
    def n_frames(self) -> int:
        return len(self.pixels)

    def mel_block(self, i: int) -> np.ndarray:
        return self.mel[i * self.l : (i + 1) * self.l]


@dataclass
class TrainingSample:
    utterance: str
    start: int
    clip: np.ndarray  # T×K×H×W
    flow: Optional[np.ndarray]  # T×2(K-1)×H×W
    target_mel: np.ndarray  # (T·l)×n
    target_lin: np.ndarray  # (T·l)×d


def align_audio(w: dsp.Waveform, n_frames: int, l: int, params: dsp.DspParams) -> dsp.Waveform:
    """Zero-pad or trim so the STFT yields exactly ``n_frames·l`` frames."""
    w = dsp.resample(w, params.sample_rate) if w.sample_rate != params.sample_rate else w
    need = (n_frames * l - 1) * params.hop_length + params.win_length
    x = w.samples[:need]
    if len(x) < need:
        x = np.pad(x, (0, need - len(x)))
    return dsp.Waveform(x, params.sample_rate)


def audio_targets(u: Utterance, l: int, params: dsp.DspParams):
    mel, lin = dsp.featurize(align_audio(u.audio, u.n_frames, l, params), params)
    return mel, lin


def prepare_utterance(u: Utterance, cfg, params: dsp.DspParams, flow_iterations: Optional[int] = None) -> PreparedUtterance:
    """Clips, flows and aligned targets for every frame of ``u``; ``cfg`` is a ModelConfig."""
    frames = [u.frame(i) for i in range(u.n_frames)]

    def one(i):
        clip = build_clip(frames, u.landmarks, i, cfg.K, cfg.H, cfg.W)
        flow = None
        if cfg.use_flow:
            kw = {} if flow_iterations is None else {"iterations": flow_iterations}
            flow = build_flow_clip(clip, **kw).as_channels()
        return clip.frames.astype(np.float32), flow

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, range(u.n_frames)))
    else:
        parts = [one(i) for i in range(u.n_frames)]
    pixels = np.stack([p[0] for p in parts])
    flows = np.stack([p[1] for p in parts]).astype(np.float32) if cfg.use_flow else None
    mel, lin = audio_targets(u, cfg.l, params)
    return PreparedUtterance(
        u.id, pixels, flows, mel.frames.astype(np.float32), lin.frames.astype(np.float32), mel.peak, lin.peak, cfg.l
    )


def windows(prep: PreparedUtterance, T: int) -> list[TrainingSample]:
    n, l = prep.n_frames, prep.l
    if n < T:
        log.warning("utterance %s has %d frames, fewer than T=%d; no samples", prep.id, n, T)
        return []
    return [
        TrainingSample(
            prep.id,
            s,
            prep.pixels[s : s + T],
            None if prep.flows is None else prep.flows[s : s + T],
            prep.mel[s * l : (s + T) * l],
            prep.lin[s * l : (s + T) * l],
        )
        for s in range(n - T + 1)
    ]


def make_samples(u: Utterance, cfg, params: dsp.DspParams) -> list[TrainingSample]:
    """Sliding windows of ``cfg.T`` consecutive frames, consecutive windows overlapping by T-1."""
    if u.n_frames < cfg.T:
        log.warning("utterance %s has %d frames, fewer than T=%d; no samples", u.id, u.n_frames, cfg.T)
        return []
    return windows(prepare_utterance(u, cfg, params), cfg.T)


def split_utterances(utts: Sequence, train_fraction: float = 0.8, seed: int = 0):
    """Utterance-level split so no clip of a validation utterance is seen in training."""
    order = np.random.default_rng(seed).permutation(len(utts))
    n_train = max(1, int(round(train_fraction * len(utts))))
    if n_train >= len(utts) and len(utts) > 1:
        n_train = len(utts) - 1
    train = [utts[i] for i in sorted(order[:n_train])]
    val = [utts[i] for i in sorted(order[n_train:])]
    return train, val
