"""From per-window model outputs to an utterance waveform.

Overlapping windows are merged with Gaussian weights over each prediction's
offset from its window centre. The merged linear spectrogram is inverted
with Griffin-Lim, or mel frames are swapped for their nearest training
exemplar first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import dsp

OUTPUT_PEAK = 0.95


def gaussian_weights(offsets, sigma: float) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    return np.exp(-0.5 * (offsets / sigma) ** 2)


def gaussian_average(values: np.ndarray, offsets, sigma: float) -> np.ndarray:
    """Weighted mean of ``P`` predictions (first axis) of one frame, weights renormalized."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("no predictions to average")
    w = gaussian_weights(offsets, sigma)
    return np.tensordot(w / w.sum(), values, axes=1)


def default_sigma(T: int, l: int) -> float:
    return T * l / 4.0


@dataclass
class PredictionSet:
    """Outputs of every sliding window over one utterance.

    ``windows[j]`` covers spectrogram frames ``starts[j]·l`` up to
    ``(starts[j]+T)·l``.
    """

    windows: np.ndarray  # J×(T·l)×d
    starts: np.ndarray  # J video-frame starts
    n_frames: int
    l: int

    @property
    def window_frames(self) -> int:
        return self.windows.shape[1] // self.l

    def counts(self) -> np.ndarray:
        """How many windows cover each video frame."""
        c = np.zeros(self.n_frames, dtype=int)
        for s in self.starts:
            c[s : s + self.window_frames] += 1
        return c

    def offsets(self) -> np.ndarray:
        """Offset of each spectrogram row of a window from the window centre, in spectrogram frames."""
        L = self.windows.shape[1]
        return np.arange(L) - (L - 1) / 2.0

    def average(self, sigma: Optional[float] = None) -> np.ndarray:
        """Gaussian overlap average, ``(n_frames·l)×d``."""
        L = self.windows.shape[1]
        sigma = default_sigma(self.window_frames, self.l) if sigma is None else sigma
        w = gaussian_weights(self.offsets(), sigma)
        acc = np.zeros((self.n_frames * self.l, self.windows.shape[2]))
        wsum = np.zeros(self.n_frames * self.l)
        for s, win in zip(self.starts, self.windows):
            a = s * self.l
            acc[a : a + L] += w[:, None] * win
            wsum[a : a + L] += w
        if np.any(wsum == 0):
            missing = np.flatnonzero(wsum == 0)[0] // self.l
            raise ValueError(f"video frame {missing} has no prediction")
        return acc / wsum[:, None]


def lin_synth(features: np.ndarray, params: dsp.DspParams, peak: float = 1.0, iterations: Optional[int] = None) -> dsp.Waveform:
    """Griffin-Lim on ``F×d`` linear features in [0,1]; output peak-normalized to 0.95.

    ``peak`` only sets a global gain before normalization.
    """
    features = np.clip(np.asarray(features, dtype=np.float64), 0.0, 1.0)
    if features.ndim != 2 or features.shape[1] != params.n_bins:
        raise ValueError(f"expected F×{params.n_bins} linear features, got {features.shape}")
    mag = dsp.decompress(features) * peak
    length = (len(mag) - 1) * params.hop_length + params.win_length
    if not np.any(mag > 0):
        return dsp.Waveform(np.zeros(length), params.sample_rate)
    wav, _ = dsp.griffin_lim_magnitude(mag, params, iterations, length)
    return dsp.Waveform(dsp.peak_normalize(wav.samples, OUTPUT_PEAK), params.sample_rate)


def mel_to_linear(mel_features: np.ndarray, params: dsp.DspParams) -> np.ndarray:
    """Least-squares linear features from mel features via the filterbank pseudo-inverse."""
    fb = dsp.filterbank_for(params)
    mel_mag = dsp.decompress(np.clip(mel_features, 0.0, 1.0))
    lin_mag = np.maximum(mel_mag @ np.linalg.pinv(fb).T, 0.0)
    return dsp.normalize_log(lin_mag, "linear").frames


# ------------------------------------------------------------------ exemplars


@dataclass(frozen=True)
class ExemplarIndex:
    """Training spectrogram frames: mel and linear features, row-aligned."""

    mel: np.ndarray  # M×n
    lin: np.ndarray  # M×d
    mel_peak: np.ndarray  # M, peak of each entry's source utterance
    lin_peak: np.ndarray  # M

    def __post_init__(self):
        if len(self.mel) == 0:
            raise ValueError("exemplar index is empty")
        if len(self.mel) != len(self.lin):
            raise ValueError(f"{len(self.mel)} mel entries but {len(self.lin)} linear entries")

    def __len__(self) -> int:
        return len(self.mel)


def build_exemplar_index(waveforms: Sequence[dsp.Waveform], params: dsp.DspParams) -> ExemplarIndex:
    """One entry per spectrogram frame of every training waveform."""
    if not waveforms:
        raise ValueError("cannot build an exemplar index from an empty corpus")
    mels, lins, mp, lp = [], [], [], []
    for w in waveforms:
        if w.sample_rate != params.sample_rate:
            w = dsp.resample(w, params.sample_rate)
        mel, lin = dsp.featurize(w, params)
        mels.append(mel.frames)
        lins.append(lin.frames)
        mp.append(np.full(len(mel.frames), mel.peak))
        lp.append(np.full(len(lin.frames), lin.peak))
    return ExemplarIndex(np.concatenate(mels), np.concatenate(lins), np.concatenate(mp), np.concatenate(lp))


def nearest(queries: np.ndarray, entries: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the L2-nearest entry for each query; ties go to the lowest index.

    Candidates are shortlisted with the expanded distance and then rescored
    with exact squared differences, so the answer matches a plain scan.
    """
    q = np.asarray(queries, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    if q.ndim != 2 or e.ndim != 2 or q.shape[1] != e.shape[1]:
        raise ValueError(f"query {q.shape} and entry {e.shape} dimensions differ")
    e2 = np.sum(e * e, axis=1)
    out = np.empty(len(q), dtype=int)
    for a in range(0, len(q), chunk):
        qc = q[a : a + chunk]
        q2 = np.sum(qc * qc, axis=1)
        approx = e2[None, :] - 2.0 * qc @ e.T
        slack = 1e-9 * (q2 + e2.max()) + 1e-300
        for r in range(len(qc)):
            cand = np.flatnonzero(approx[r] <= approx[r].min() + slack[r])
            exact = np.sum((e[cand] - qc[r]) ** 2, axis=1)
            out[a + r] = cand[np.argmin(exact)]
    return out


def exemplar_frames(features: np.ndarray, index: ExemplarIndex, query_linear: bool = False) -> np.ndarray:
    """Replace each frame by the linear frame of its nearest index entry."""
    keys = index.lin if query_linear else index.mel
    return index.lin[nearest(features, keys)]


def mel_exemplar_synth(
    mels: np.ndarray, index: ExemplarIndex, params: dsp.DspParams, query_linear: bool = False
) -> dsp.Waveform:
    return lin_synth(exemplar_frames(mels, index, query_linear), params)
