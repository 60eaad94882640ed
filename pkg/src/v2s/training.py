"""Two-phase optimization: encoder+decoder on mel blocks, then decoder+post-net on frame sequences."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Node
from .data import PreparedUtterance, Utterance, prepare_utterance
from .model import Model, ModelConfig, to_feature

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_delta: float = 1e-4
    early_stop_patience: int = 10
    max_epochs: int = 150
    mel_weight: float = 1.0
    lin_weight: float = 1.0
    seed: int = 0
    phases: tuple = (1, 2)
    # Stop a phase as soon as the validation loss drops below this.
    target_loss: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mel_weight < 0 or self.lin_weight < 0 or self.mel_weight + self.lin_weight <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")
        if not set(self.phases) <= {1, 2} or not self.phases:
            raise ValueError(f"phases must be drawn from (1, 2), got {self.phases}")
        if not 0 < self.plateau_factor <= 1:
            raise ValueError("plateau_factor must lie in (0, 1]")


def two_term_loss(mel_pred: Node, mel_true, lin_pred: Optional[Node] = None, lin_true=None, weights=(1.0, 1.0)) -> Node:
    """``w1·MSE(mel) + w2·MSE(lin)``; the linear term is dropped when there is no post-net output."""
    loss = ad.mse(mel_pred, mel_true) * weights[0]
    if lin_pred is None:
        return loss
    return loss + ad.mse(lin_pred, lin_true) * weights[1]


# ------------------------------------------------------------------ optimizer


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Node], state: AdamState, lr: float, frozen: Sequence[str] = ()) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``; names in ``frozen`` are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    skip = set(frozen)
    for name, p in params.items():
        if name in skip:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.value = p.value - step.astype(p.value.dtype)


# ------------------------------------------------------------------ datasets


@dataclass
class FrameSet:
    """Per-frame inputs and mel-block targets, concatenated over utterances."""

    pixels: Optional[np.ndarray]  # N×K×H×W
    flows: Optional[np.ndarray]  # N×2(K-1)×H×W
    mel: np.ndarray  # N×l×n
    lin: np.ndarray  # N×l×d
    offsets: list  # start row of each utterance, plus the total

    def __len__(self) -> int:
        return len(self.mel)

    @classmethod
    def from_prepared(cls, preps: Sequence[PreparedUtterance], cfg: ModelConfig) -> "FrameSet":
        if not preps:
            raise ValueError("no utterances to train on")
        l = cfg.l
        mel = np.concatenate([p.mel.reshape(p.n_frames, l, -1) for p in preps])
        lin = np.concatenate([p.lin.reshape(p.n_frames, l, -1) for p in preps])
        pixels = np.concatenate([p.pixels for p in preps]) if cfg.use_pixels else None
        flows = np.concatenate([p.flows for p in preps]) if cfg.use_flow else None
        offsets = list(np.cumsum([0] + [p.n_frames for p in preps]))
        return cls(pixels, flows, mel, lin, offsets)

    def inputs(self, idx) -> tuple:
        return (
            None if self.pixels is None else self.pixels[idx],
            None if self.flows is None else self.flows[idx],
        )

    def window_starts(self, T: int) -> np.ndarray:
        """Row of the first frame of every length-``T`` window that stays inside one utterance."""
        starts = [np.arange(a, b - T + 1) for a, b in zip(self.offsets[:-1], self.offsets[1:]) if b - a >= T]
        return np.concatenate(starts) if starts else np.zeros(0, dtype=int)


def minibatches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one joins its predecessor so batch norm sees >1 sample."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    best_val: dict = field(default_factory=dict)  # phase -> best validation loss

    def write_history(self, path) -> None:
        write_history_csv(path, self.history)


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "phase", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, r.phase, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


# ------------------------------------------------------------------ phases


def evaluate_mel(model: Model, frames: FrameSet, batch_size: int = 64) -> float:
    """Infer-mode mel-block MSE over every frame."""
    total = 0.0
    for idx in minibatches(len(frames), batch_size, None):
        pred = model.predict_frames(*frames.inputs(idx), mode="infer")
        total += float(np.sum((pred.value - frames.mel[idx]) ** 2))
    return total / frames.mel.size


def embed_frames(model: Model, frames: FrameSet, batch_size: int = 64) -> np.ndarray:
    out = [model.encoder_forward(*frames.inputs(idx), mode="infer").value for idx in minibatches(len(frames), batch_size, None)]
    return np.concatenate(out)


def _sequence_forward(model: Model, emb: np.ndarray, starts: np.ndarray, T: int, mode: str, rng, dropout: float):
    """Decoder over each window's T embeddings, then the post-net over the joined mel frames."""
    c = model.config
    rows = (starts[:, None] + np.arange(T)).ravel()
    e = ad.constant(emb[rows])
    mel = to_feature(model.decoder_forward(e, mode, rng, dropout))
    mel = ad.reshape(mel, (len(starts), T * c.l, c.n_mels))
    lin = to_feature(model.postnet_forward(mel, mode)) if c.use_postnet else None
    return mel, lin, rows


def _sequence_targets(frames: FrameSet, rows: np.ndarray, b: int, T: int):
    c_l, n = frames.mel.shape[1:]
    mel = frames.mel[rows].reshape(b, T * c_l, n)
    lin = frames.lin[rows].reshape(b, T * c_l, -1)
    return mel, lin


def evaluate_sequences(model: Model, emb: np.ndarray, frames: FrameSet, weights, batch_size: int = 64) -> float:
    T = model.config.T
    starts = frames.window_starts(T)
    total, count = 0.0, 0
    for idx in minibatches(len(starts), batch_size, None):
        mel, lin, rows = _sequence_forward(model, emb, starts[idx], T, "infer", None, 0.0)
        mt, lt = _sequence_targets(frames, rows, len(idx), T)
        total += float(two_term_loss(mel, mt, lin, lt, weights).value) * len(idx)
        count += len(idx)
    return total / count


class _Schedule:
    """Plateau learning-rate decay, early stopping and best-state tracking for one phase."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.best = np.inf
        self.best_state = None
        self.stale = 0
        self.since_decay = 0
        self.adam = AdamState()

    def update(self, val: float, model: Model) -> bool:
        """Record one epoch; returns True when the phase should stop."""
        cfg = self.cfg
        if val < self.best - cfg.min_delta or self.best_state is None:
            self.best = min(val, self.best)
            self.best_state = model.snapshot()
            self.stale = self.since_decay = 0
        else:
            if val < self.best:
                # improvement below min_delta still yields a better checkpoint
                self.best = val
                self.best_state = model.snapshot()
            self.stale += 1
            self.since_decay += 1
            if self.since_decay >= cfg.plateau_patience:
                self.lr *= cfg.plateau_factor
                self.since_decay = 0
                log.info("validation plateau; learning rate now %.3g", self.lr)
        return self.stale >= cfg.early_stop_patience or val < cfg.target_loss


def _check_finite(value: float, what: str, epoch: int, phase: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} loss is {value} at epoch {epoch} (phase {phase}); aborting")


def train_phase1(model: Model, train: FrameSet, val: FrameSet, cfg: TrainConfig, rng, history: list) -> float:
    """Encoder and decoder on the per-frame mel loss."""
    sched = _Schedule(cfg)
    params = model.trainable()
    drop = (cfg.conv_dropout, cfg.dense_dropout)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for idx in minibatches(len(train), cfg.batch_size, rng):
            model.zero_grad()
            pred = model.predict_frames(*train.inputs(idx), mode="train", rng=rng, dropout=drop)
            loss = ad.mse(pred, train.mel[idx]) * cfg.mel_weight
            ad.backward(loss)
            adam_step(params, sched.adam, sched.lr, model.frozen)
            total += float(loss.value) * len(idx)
        tr = total / len(train)
        _check_finite(tr, "training", epoch, 1)
        vl = evaluate_mel(model, val) * cfg.mel_weight
        _check_finite(vl, "validation", epoch, 1)
        history.append(EpochRecord(epoch, 1, tr, vl, sched.lr))
        log.info("phase 1 epoch %d train %.5f val %.5f lr %.2g (%.1fs)", epoch, tr, vl, sched.lr, time.perf_counter() - t0)
        if sched.update(vl, model):
            break
    model.load_state_arrays(sched.best_state)
    return sched.best


def freeze_towers(model: Model) -> None:
    model.frozen |= set(model.tower_names())


def train_phase2(model: Model, train: FrameSet, val: FrameSet, cfg: TrainConfig, rng, history: list) -> float:
    """Decoder and post-net on windows of T frames with the two-term loss; conv towers frozen.

    Frozen towers run in infer mode, so their embeddings are computed once.
    """
    freeze_towers(model)
    T = model.config.T
    weights = (cfg.mel_weight, cfg.lin_weight)
    emb_train, emb_val = embed_frames(model, train), embed_frames(model, val)
    starts = train.window_starts(T)
    if len(starts) == 0 or len(val.window_starts(T)) == 0:
        raise ValueError(f"no utterance has at least T={T} frames; phase 2 needs full windows")
    sched = _Schedule(cfg)
    params = model.trainable()
    epoch0 = history[-1].epoch if history else 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for idx in minibatches(len(starts), cfg.batch_size, rng):
            model.zero_grad()
            mel, lin, rows = _sequence_forward(model, emb_train, starts[idx], T, "train", rng, cfg.dense_dropout)
            mt, lt = _sequence_targets(train, rows, len(idx), T)
            loss = two_term_loss(mel, mt, lin, lt, weights)
            ad.backward(loss)
            adam_step(params, sched.adam, sched.lr, model.frozen)
            total += float(loss.value) * len(idx)
        tr = total / len(starts)
        _check_finite(tr, "training", epoch0 + epoch, 2)
        vl = evaluate_sequences(model, emb_val, val, weights)
        _check_finite(vl, "validation", epoch0 + epoch, 2)
        history.append(EpochRecord(epoch0 + epoch, 2, tr, vl, sched.lr))
        log.info("phase 2 epoch %d train %.5f val %.5f lr %.2g", epoch0 + epoch, tr, vl, sched.lr)
        if sched.update(vl, model):
            break
    model.load_state_arrays(sched.best_state)
    return sched.best


def prepare_all(utts: Sequence[Utterance], cfg: ModelConfig, params: dsp.DspParams, flow_iterations=None):
    return [prepare_utterance(u, cfg, params, flow_iterations) for u in utts]


def check_compatible(model_cfg: ModelConfig, params: dsp.DspParams, fps: float) -> None:
    l = params.frames_per_video_frame(fps)
    problems = []
    if l != model_cfg.l:
        problems.append(f"audio gives {l} spectrogram frames per video frame, model expects l={model_cfg.l}")
    if params.n_mels != model_cfg.n_mels:
        problems.append(f"n_mels {params.n_mels} vs model {model_cfg.n_mels}")
    if params.n_bins != model_cfg.d_lin:
        problems.append(f"{params.n_bins} linear bins vs model d_lin={model_cfg.d_lin}")
    if problems:
        raise ValueError("; ".join(problems))


def train(
    train_utts: Sequence[Utterance],
    val_utts: Sequence[Utterance],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: dsp.DspParams,
    model: Optional[Model] = None,
    flow_iterations: Optional[int] = None,
) -> TrainResult:
    """Run the configured phases; returns the best-validation model and per-epoch history."""
    if not train_utts or not val_utts:
        raise ValueError("training needs nonempty train and validation splits")
    for u in list(train_utts) + list(val_utts):
        check_compatible(model_cfg, params, u.fps)
    t0 = time.perf_counter()
    train_set = FrameSet.from_prepared(prepare_all(train_utts, model_cfg, params, flow_iterations), model_cfg)
    val_set = FrameSet.from_prepared(prepare_all(val_utts, model_cfg, params, flow_iterations), model_cfg)
    log.info("prepared %d train / %d val frames in %.1fs", len(train_set), len(val_set), time.perf_counter() - t0)
    return train_prepared(train_set, val_set, model_cfg, train_cfg, model)


def train_prepared(
    train_set: FrameSet, val_set: FrameSet, model_cfg: ModelConfig, train_cfg: TrainConfig, model: Optional[Model] = None
) -> TrainResult:
    model = model or Model(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(model)
    if 1 in train_cfg.phases:
        result.best_val[1] = train_phase1(model, train_set, val_set, train_cfg, rng, result.history)
    if 2 in train_cfg.phases:
        if model_cfg.use_postnet:
            result.best_val[2] = train_phase2(model, train_set, val_set, train_cfg, rng, result.history)
        else:
            log.info("no post-net configured; skipping phase 2")
    return result
