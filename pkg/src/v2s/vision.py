"""Face registration, clip assembly and Horn-Schunck optical flow."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import convolve, gaussian_filter, map_coordinates

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")

# Canonical eye positions as fractions of (W, H) in the output crop.
CANONICAL_LEFT_EYE = (0.35, 0.3)
CANONICAL_RIGHT_EYE = (0.65, 0.3)

HS_ALPHA = 15.0
HS_ITERATIONS = 100
# Neighbour weights of the smoothness term (edges 1/6, corners 1/12).
HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


class GeometryError(ValueError):
    pass


@dataclass
class Landmarks:
    points: np.ndarray  # 5×2 (x, y)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(5, 2)

    @property
    def eyes(self) -> np.ndarray:
        return self.points[:2]

    def validate(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if np.any(self.points < 0) or np.any(self.points[:, 0] > w - 1) or np.any(self.points[:, 1] > h - 1):
            raise GeometryError(f"landmarks {self.points.tolist()} fall outside a {h}x{w} image")
        if self.points[0, 0] >= self.points[1, 0]:
            raise GeometryError("left eye must be left of right eye")

    def transformed(self, t: np.ndarray) -> "Landmarks":
        return Landmarks(apply_transform(t, self.points))


@dataclass
class VideoClip:
    frames: np.ndarray  # K×H×W registered, mean-subtracted
    center_index: int
    mean_subtracted: bool = True
    registered: Optional[np.ndarray] = None  # K×H×W before mean subtraction

    @property
    def K(self) -> int:
        return self.frames.shape[0]


@dataclass
class FlowClip:
    fields: np.ndarray  # (K-1)×H×W×2, (u, v) in pixels/frame

    def as_channels(self) -> np.ndarray:
        """``2(K-1)×H×W`` layout, u and v of each field adjacent."""
        k1, h, w, _ = self.fields.shape
        return self.fields.transpose(0, 3, 1, 2).reshape(2 * k1, h, w)


def estimate_similarity(eyes: np.ndarray, reference_eyes: np.ndarray) -> np.ndarray:
    """2×3 rotation+scale+translation taking ``eyes`` exactly onto ``reference_eyes``."""
    s = np.asarray(eyes, dtype=np.float64)
    r = np.asarray(reference_eyes, dtype=np.float64)
    s0, s1 = complex(*s[0]), complex(*s[1])
    r0, r1 = complex(*r[0]), complex(*r[1])
    if abs(s1 - s0) < 1e-12 or abs(r1 - r0) < 1e-12:
        raise GeometryError("eye points coincide; similarity transform is undefined")
    a = (r1 - r0) / (s1 - s0)
    b = r0 - a * s0
    return np.array([[a.real, -a.imag, b.real], [a.imag, a.real, b.imag]])


def compose(t2: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Transform applying ``t1`` then ``t2``."""
    m2 = np.vstack([t2, [0, 0, 1]])
    m1 = np.vstack([t1, [0, 0, 1]])
    return (m2 @ m1)[:2]


def invert(t: np.ndarray) -> np.ndarray:
    return np.linalg.inv(np.vstack([t, [0, 0, 1]]))[:2]


def apply_transform(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ t[:, :2].T + t[:, 2]


def warp_frame(frame: np.ndarray, t: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resample ``frame`` so that output pixel ``p`` shows source pixel ``t⁻¹ p``.

    Bilinear; outside the source is zero. Shrinking transforms pre-blur the
    source to limit aliasing.
    """
    h, w = out_size
    scale = float(np.sqrt(abs(np.linalg.det(t[:, :2]))))
    src = np.asarray(frame, dtype=np.float64)
    if scale < 0.99:
        src = gaussian_filter(src, sigma=0.5 * (1.0 / scale - 1.0) + 0.3)
    inv = invert(t)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return map_coordinates(src, [sy, sx], order=1, mode="constant", cval=0.0)


def canonical_eyes(h: int, w: int) -> np.ndarray:
    return np.array(
        [[CANONICAL_LEFT_EYE[0] * w, CANONICAL_LEFT_EYE[1] * h], [CANONICAL_RIGHT_EYE[0] * w, CANONICAL_RIGHT_EYE[1] * h]]
    )


def clip_indices(center: int, k: int, n_frames: int) -> list[int]:
    half = k // 2
    return [min(max(center - half + i, 0), n_frames - 1) for i in range(k)]


def clip_transforms(landmarks: Sequence[Landmarks], center: int, k: int, h: int, w: int) -> list[np.ndarray]:
    """Per-frame transforms: register to the centre frame, then crop by centre-frame eyes."""
    idx = clip_indices(center, k, len(landmarks))
    crop = estimate_similarity(landmarks[center].eyes, canonical_eyes(h, w))
    return [compose(crop, estimate_similarity(landmarks[i].eyes, landmarks[center].eyes)) for i in idx]


def build_clip(
    frames: Sequence[np.ndarray],
    landmarks: Sequence[Optional[Landmarks]],
    center_index: int,
    K: int = 9,
    H: int = 160,
    W: int = 128,
) -> VideoClip:
    idx = clip_indices(center_index, K, len(frames))
    for i in set(idx) | {center_index}:
        if i >= len(landmarks) or landmarks[i] is None:
            raise ValueError(f"no landmarks for frame {i}")
    transforms = clip_transforms(landmarks, center_index, K, H, W)
    reg = np.stack([warp_frame(frames[i], t, (H, W)) for i, t in zip(idx, transforms)])
    return VideoClip(reg - reg.mean(), center_index, True, reg)


def _derivatives(a: np.ndarray, b: np.ndarray):
    avg = 0.5 * (a + b)
    ix = np.zeros_like(avg)
    iy = np.zeros_like(avg)
    ix[:, 1:-1] = 0.5 * (avg[:, 2:] - avg[:, :-2])
    iy[1:-1, :] = 0.5 * (avg[2:, :] - avg[:-2, :])
    return ix, iy, b - a


def horn_schunck_energy(ix, iy, it, u, v, alpha: float) -> float:
    """Data term plus ``alpha²`` times the weighted neighbour-difference smoothness term."""
    data = np.sum((ix * u + iy * v + it) ** 2)
    smooth = 0.0
    for dy, dx, wgt in ((0, 1, 1 / 6), (1, 0, 1 / 6), (1, 1, 1 / 12), (1, -1, 1 / 12)):
        for f in (u, v):
            a = f[max(dy, 0) :, max(dx, 0) : f.shape[1] + min(dx, 0)]
            b = f[: f.shape[0] - dy, max(-dx, 0) : f.shape[1] - max(dx, 0)]
            smooth += wgt * np.sum((a - b) ** 2)
    return float(data + alpha**2 * smooth)


def optical_flow(
    a: np.ndarray,
    b: np.ndarray,
    alpha: float = HS_ALPHA,
    iterations: int = HS_ITERATIONS,
    intensity_scale: float = 255.0,
    return_energy: bool = False,
):
    """Dense Horn-Schunck flow from ``a`` to ``b`` as an ``H×W×2`` array of (u, v).

    Frames in [0,1] are scaled by ``intensity_scale`` so ``alpha`` keeps its
    usual 8-bit meaning. Each sweep solves every pixel's 2×2 system with its
    neighbours fixed, which never increases the energy.
    """
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    ix, iy, it = (d * intensity_scale for d in _derivatives(np.asarray(a, float), np.asarray(b, float)))
    u = np.zeros_like(ix)
    v = np.zeros_like(ix)
    deg = convolve(np.ones_like(ix), HS_KERNEL, mode="constant")
    a2 = alpha**2
    denom = a2 * deg + ix**2 + iy**2
    safe = np.where(denom > 0, denom, 1.0)
    energies = [horn_schunck_energy(ix, iy, it, u, v, alpha)] if return_energy else None
    for _ in range(iterations):
        ubar = convolve(u, HS_KERNEL, mode="constant") / deg
        vbar = convolve(v, HS_KERNEL, mode="constant") / deg
        common = (ix * ubar + iy * vbar + it) / safe
        u = ubar - ix * common
        v = vbar - iy * common
        if energies is not None:
            energies.append(horn_schunck_energy(ix, iy, it, u, v, alpha))
    flow = np.stack([u, v], axis=-1)
    return (flow, energies) if return_energy else flow


def build_flow_clip(clip: VideoClip, alpha: float = HS_ALPHA, iterations: int = HS_ITERATIONS) -> FlowClip:
    if clip.K < 2:
        raise ValueError("a flow clip needs at least two frames")
    frames = clip.registered if clip.registered is not None else clip.frames
    fields = [optical_flow(frames[i], frames[i + 1], alpha, iterations) for i in range(clip.K - 1)]
    return FlowClip(np.stack(fields))
