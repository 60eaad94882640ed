"""Audio features: STFT/ISTFT, mel filterbank, log-magnitude features, Griffin-Lim."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import get_window, resample_poly

LOG_SCALE = 10000.0


@dataclass(frozen=True)
class DspParams:
    """Analysis settings. ``win_length``/``hop_length``/``n_fft`` are in samples."""

    sample_rate: int = 16000
    win_length: int = 640
    hop_length: int = 160
    n_fft: int = 1024
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    gl_iterations: int = 60

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def mel_f_max(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max

    @classmethod
    def for_video(cls, fps: float, sample_rate: int, window_ms: float = 40.0, hop_ms: float = 10.0, **kw):
        """Parameters from millisecond window/hop, e.g. 16 kHz/40 ms/10 ms or 14985 Hz/33.3 ms/8.3 ms."""
        win = int(round(sample_rate * window_ms / 1000.0))
        hop = int(round(sample_rate * hop_ms / 1000.0))
        n_fft = kw.pop("n_fft", 1 << (win - 1).bit_length())
        return cls(sample_rate=sample_rate, win_length=win, hop_length=hop, n_fft=n_fft, **kw)

    def frames_per_video_frame(self, fps: float) -> int:
        return int(round(self.sample_rate / fps / self.hop_length))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # F×B complex
    win_length: int
    hop_length: int
    n_fft: int
    length: int  # source signal length in samples

    def __post_init__(self):
        if self.frames.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(f"{self.frames.shape[1]} bins inconsistent with n_fft={self.n_fft}")
        if self.hop_length > self.win_length:
            raise ValueError("hop must not exceed window length")


@dataclass
class LogMagSpectrogram:
    frames: np.ndarray  # F×B reals in [0, 1]
    scale: str  # "linear" | "mel"
    peak: float  # magnitude mapped to 1.0; 0 marks silence

    @property
    def magnitude(self) -> np.ndarray:
        return decompress(self.frames) * self.peak


def hann(win_length: int) -> np.ndarray:
    return get_window("hann", win_length, fftbins=True)


def n_frames(length: int, win_length: int, hop_length: int) -> int:
    return (length - win_length) // hop_length + 1


def stft(w: Waveform | np.ndarray, win_length: int, hop_length: int, n_fft: int) -> ComplexSpectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if win_length <= 0 or hop_length <= 0 or n_fft < win_length:
        raise ValueError(f"invalid STFT geometry: window {win_length}, hop {hop_length}, fft {n_fft}")
    if len(x) < win_length:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {win_length}-sample window")
    f = n_frames(len(x), win_length, hop_length)
    idx = np.arange(win_length)[None, :] + hop_length * np.arange(f)[:, None]
    frames = x[idx] * hann(win_length)[None, :]
    return ComplexSpectrogram(np.fft.rfft(frames, n=n_fft, axis=1), win_length, hop_length, n_fft, len(x))


def istft(s: ComplexSpectrogram, sample_rate: int = 16000) -> Waveform:
    """Least-squares inverse: windowed overlap-add divided by the summed squared window."""
    win = hann(s.win_length)
    f = s.frames.shape[0]
    length = max(s.length, (f - 1) * s.hop_length + s.win_length)
    frames = np.fft.irfft(s.frames, n=s.n_fft, axis=1)[:, : s.win_length] * win[None, :]
    out = np.zeros(length)
    norm = np.zeros(length)
    idx = np.arange(s.win_length)[None, :] + s.hop_length * np.arange(f)[:, None]
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(win * win, frames.shape))
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return Waveform(out, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """The ``n_mels + 2`` filter edge frequencies in Hz, uniform on the mel axis."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular filters as an ``n_mels × (n_fft/2+1)`` matrix.

    Each weight is the triangle averaged over its FFT bin's width, so bins that
    sit exactly on the outer band edges still get a nonzero weight.
    """
    f_max = sample_rate / 2 if f_max is None else f_max
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got {f_min}, {f_max}")
    edges = mel_edges(n_mels, f_min, f_max)
    df = sample_rate / n_fft
    bins = np.arange(n_fft // 2 + 1) * df
    sub = (np.arange(16) + 0.5) / 16 - 0.5
    fine = bins[:, None] + sub[None, :] * df  # B × 16 sample points
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        inside = (bins > lo) & (bins < hi)
        if not inside.any():
            raise ValueError(
                f"mel filter {m} ({lo:.1f}-{hi:.1f} Hz) contains no FFT bin; "
                f"n_mels={n_mels} is too large for n_fft={n_fft}"
            )
        tri = np.minimum((fine - lo) / (c - lo), (hi - fine) / (hi - c))
        fb[m] = np.clip(tri, 0.0, None).mean(axis=1)
    return fb


def compress(mag_normalized: np.ndarray) -> np.ndarray:
    """Map peak-normalized magnitude in [0,1] to log features in [0,1]."""
    return np.log1p(mag_normalized * LOG_SCALE) / math.log1p(LOG_SCALE)


def decompress(features: np.ndarray) -> np.ndarray:
    return np.expm1(np.asarray(features, dtype=np.float64) * math.log1p(LOG_SCALE)) / LOG_SCALE


def normalize_log(mag: np.ndarray, scale: str) -> LogMagSpectrogram:
    peak = float(mag.max()) if mag.size else 0.0
    if peak <= 0.0:
        return LogMagSpectrogram(np.zeros_like(mag), scale, 0.0)
    return LogMagSpectrogram(compress(mag / peak), scale, peak)


_FB_CACHE: dict = {}


def filterbank_for(params: DspParams) -> np.ndarray:
    key = (params.n_mels, params.n_fft, params.sample_rate, params.f_min, params.mel_f_max)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def featurize(w: Waveform, params: DspParams) -> tuple[LogMagSpectrogram, LogMagSpectrogram]:
    """Return ``(mel, linear)`` log-magnitude features, each peak-normalized to [0,1]."""
    if w.sample_rate != params.sample_rate:
        raise ValueError(f"waveform at {w.sample_rate} Hz, params expect {params.sample_rate} Hz")
    mag = np.abs(stft(w, params.win_length, params.hop_length, params.n_fft).frames)
    mel_mag = mag @ filterbank_for(params).T
    return normalize_log(mel_mag, "mel"), normalize_log(mag, "linear")


def spectral_convergence(mag_est: np.ndarray, target: np.ndarray) -> float:
    """``‖|X|−M‖/‖M‖`` over the two-sided spectrum (interior bins counted twice)."""
    weights = np.full(target.shape[1], 2.0)
    weights[0] = 1.0
    if target.shape[1] % 2 == 1:
        weights[-1] = 1.0
    den = np.sqrt(np.sum(weights * target**2))
    if den == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(weights * (mag_est - target) ** 2)) / den)


def griffin_lim_magnitude(
    magnitude: np.ndarray,
    params: DspParams,
    iterations: int | None = None,
    length: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Waveform, list[float]]:
    """Phase retrieval for an ``F×B`` magnitude; returns waveform and error per iteration.

    Zero initial phase unless ``rng`` is given. The inverse is the
    least-squares ISTFT, so the error sequence cannot increase.
    """
    iterations = params.gl_iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("griffin-lim needs at least one iteration")
    f = magnitude.shape[0]
    length = (f - 1) * params.hop_length + params.win_length if length is None else length
    phase = np.ones_like(magnitude, dtype=np.complex128)
    if rng is not None:
        phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    spec = ComplexSpectrogram(magnitude * phase, params.win_length, params.hop_length, params.n_fft, length)
    errors = []
    for _ in range(iterations):
        x = istft(spec, params.sample_rate)
        est = stft(x, params.win_length, params.hop_length, params.n_fft).frames
        errors.append(spectral_convergence(np.abs(est), magnitude))
        ang = np.ones_like(est)
        nz = np.abs(est) > 0
        ang[nz] = est[nz] / np.abs(est[nz])
        spec = ComplexSpectrogram(magnitude * ang, params.win_length, params.hop_length, params.n_fft, length)
    return istft(spec, params.sample_rate), errors


def griffin_lim(mag: LogMagSpectrogram, params: DspParams, iterations: int | None = None) -> tuple[Waveform, list[float]]:
    if mag.scale != "linear":
        raise ValueError("griffin_lim expects a linear-scale spectrogram")
    peak = mag.peak if mag.peak > 0 else 1.0
    return griffin_lim_magnitude(decompress(mag.frames) * peak, params, iterations)


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, int(target_rate))


def peak_normalize(x: np.ndarray, peak: float = 0.95) -> np.ndarray:
    m = np.max(np.abs(x)) if len(x) else 0.0
    return x if m == 0 else x * (peak / m)
