"""Short-time objective intelligibility (STOI) and its extended variant (ESTOI)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dsp import Waveform, resample

log = logging.getLogger(__name__)

FS = 10000
FRAME_LEN = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30  # frames per 384 ms analysis segment
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
EPS = np.finfo(np.float64).eps


def third_octave_matrix(fs: int = FS, nfft: int = NFFT, num_bands: int = NUM_BANDS, min_freq: float = MIN_FREQ):
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    centers = min_freq * 2.0 ** (k / 3.0)
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, len(freqs)))
    for i in range(num_bands):
        lo = int(np.argmin((freqs - lows[i]) ** 2))
        hi = int(np.argmin((freqs - highs[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, centers


_OBM, _ = third_octave_matrix()


def _analysis_window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    starts = np.arange(0, len(x) - n, hop)
    return x[starts[:, None] + np.arange(n)[None, :]] * _analysis_window(n)[None, :]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    if len(frames) == 0:
        return np.zeros(0)
    n = frames.shape[1]
    out = np.zeros((len(frames) - 1) * hop + n)
    for i, fr in enumerate(frames):
        out[i * hop : i * hop + n] += fr
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = DYN_RANGE_DB, n: int = FRAME_LEN, hop: int = FRAME_LEN // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame."""
    xf, yf = _frames(x, n, hop), _frames(y, n, hop)
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energies > energies.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, FRAME_LEN, FRAME_LEN // 2), n=NFFT, axis=1).T
    return np.sqrt(_OBM @ np.abs(spec) ** 2)


def _prepare(clean: Waveform, degraded: Waveform):
    if clean.sample_rate != degraded.sample_rate:
        raise ValueError(f"sample rates differ: {clean.sample_rate} vs {degraded.sample_rate}")
    x, y = clean.samples, degraded.samples
    if len(x) != len(y):
        log.warning("length mismatch (%d vs %d samples); trimming to the shorter", len(x), len(y))
        m = min(len(x), len(y))
        x, y = x[:m], y[:m]
    if len(x) / clean.sample_rate < SEGMENT * (FRAME_LEN // 2) / FS:
        raise ValueError(f"signal of {len(x) / clean.sample_rate * 1000:.0f} ms is shorter than the 384 ms minimum")
    if clean.sample_rate != FS:
        x = resample(Waveform(x, clean.sample_rate), FS).samples
        y = resample(Waveform(y, clean.sample_rate), FS).samples
    x, y = remove_silent_frames(x, y)
    xe, ye = _band_envelopes(x), _band_envelopes(y)
    if xe.shape[1] < SEGMENT:
        raise ValueError(f"only {xe.shape[1]} non-silent frames; {SEGMENT} needed")
    idx = np.arange(SEGMENT, xe.shape[1] + 1)
    xs = np.stack([xe[:, m - SEGMENT : m] for m in idx])
    ys = np.stack([ye[:, m - SEGMENT : m] for m in idx])
    return xs, ys


def _unit(a: np.ndarray, axis: int) -> np.ndarray:
    a = a - a.mean(axis=axis, keepdims=True)
    return a / (np.linalg.norm(a, axis=axis, keepdims=True) + EPS)


def stoi(clean: Waveform, degraded: Waveform) -> float:
    xs, ys = _prepare(clean, degraded)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    yp = np.minimum(ys * alpha, xs * (1 + 10 ** (-BETA_DB / 20)))
    corr = _unit(yp, 2) * _unit(xs, 2)
    return float(corr.sum() / (xs.shape[0] * xs.shape[1]))


def estoi(clean: Waveform, degraded: Waveform) -> float:
    xs, ys = _prepare(clean, degraded)
    xn = _unit(_unit(xs, 2), 1)
    yn = _unit(_unit(ys, 2), 1)
    return float(np.sum(xn * yn) / (SEGMENT * xs.shape[0]))


@dataclass
class ScoreReport:
    ids: list[str] = field(default_factory=list)
    stoi: list[Optional[float]] = field(default_factory=list)
    estoi: list[Optional[float]] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def mean_stoi(self) -> float:
        return float(np.mean([s for s in self.stoi if s is not None]))

    @property
    def mean_estoi(self) -> float:
        return float(np.mean([s for s in self.estoi if s is not None]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utterance_id", "stoi", "estoi"])
            for uid, s, e in zip(self.ids, self.stoi, self.estoi):
                if s is None:
                    w.writerow([uid, "missing", self.errors.get(uid, "")])
                else:
                    w.writerow([uid, f"{s:.6f}", f"{e:.6f}"])
            w.writerow(["mean", f"{self.mean_stoi:.6f}", f"{self.mean_estoi:.6f}"])


def eval_report(pairs: Sequence[tuple[str, Waveform, Waveform]] | Iterable) -> ScoreReport:
    """Score ``(utterance_id, clean, reconstructed)`` triples; failures are kept out of the means."""
    report = ScoreReport()
    for uid, clean, recon in pairs:
        report.ids.append(uid)
        try:
            scores = stoi(clean, recon), estoi(clean, recon)
            report.stoi.append(scores[0])
            report.estoi.append(scores[1])
        except ValueError as exc:
            report.stoi.append(None)
            report.estoi.append(None)
            report.errors[uid] = str(exc)
    if not any(s is not None for s in report.stoi):
        raise ValueError("no utterance pair could be scored")
    return report
