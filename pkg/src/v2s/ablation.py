"""Input-stream and post-net ablations on one corpus split.

Every run trains from the same seed on the same prepared frames, so the
differences in the comparison table come from the configuration alone.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import Utterance
from .inference import reconstruct
from .training import FrameSet, check_compatible, evaluate_mel, prepare_all, train_prepared

log = logging.getLogger(__name__)

STREAMS = {"pixels+flow": (True, True), "pixels-only": (True, False), "flow-only": (False, True)}
COLUMNS = (
    "run",
    "use_pixels",
    "use_flow",
    "use_postnet",
    "epochs",
    "best_val_phase1",
    "best_val_phase2",
    "val_mel_mse",
    "infer_utterance",
    "infer_mel_mse",
    "infer_seconds",
    "train_seconds",
    "status",
)


@dataclass
class AblationRow:
    run: str
    use_pixels: bool
    use_flow: bool
    use_postnet: bool
    epochs: int = 0
    best_val_phase1: Optional[float] = None
    best_val_phase2: Optional[float] = None
    val_mel_mse: Optional[float] = None
    infer_utterance: str = ""
    infer_mel_mse: Optional[float] = None
    infer_seconds: Optional[float] = None
    train_seconds: Optional[float] = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def cells(self) -> list[str]:
        out = []
        for name in COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.6g}")
            elif isinstance(v, bool):
                out.append(str(v).lower())
            else:
                out.append(str(v))
        return out


def ablation_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """The three input configurations, each with and without the post-net."""
    grid = []
    for stream, (pix, flow) in STREAMS.items():
        for post in (True, False):
            name = f"{stream}/{'postnet' if post else 'no-postnet'}"
            grid.append((name, replace(base, model=replace(base.model, use_pixels=pix, use_flow=flow, use_postnet=post))))
    return grid


def run_ablations(
    train_utts: Sequence[Utterance], val_utts: Sequence[Utterance], base: RunConfig
) -> list[AblationRow]:
    """Train every grid entry, then reconstruct the first validation utterance with lin synthesis.

    Failures are recorded in the row's status rather than raised.
    """
    if not train_utts or not val_utts:
        raise ValueError("ablations need nonempty train and validation splits")
    for u in list(train_utts) + list(val_utts):
        check_compatible(base.model, base.dsp, u.fps)
    # both streams are prepared once and every run picks what it uses
    both = replace(base.model, use_pixels=True, use_flow=True)
    train_prep = prepare_all(train_utts, both, base.dsp, base.flow_iterations)
    val_prep = prepare_all(val_utts, both, base.dsp, base.flow_iterations)
    rows = []
    for name, cfg in ablation_grid(base):
        m = cfg.model
        row = AblationRow(name, m.use_pixels, m.use_flow, m.use_postnet, infer_utterance=val_prep[0].id)
        try:
            t0 = time.perf_counter()
            val_set = FrameSet.from_prepared(val_prep, m)
            result = train_prepared(FrameSet.from_prepared(train_prep, m), val_set, m, cfg.train)
            row.train_seconds = time.perf_counter() - t0
            row.epochs = len(result.history)
            row.best_val_phase1 = result.best_val.get(1)
            row.best_val_phase2 = result.best_val.get(2)
            row.val_mel_mse = evaluate_mel(result.model, val_set)
            t0 = time.perf_counter()
            rec = reconstruct(result.model, val_prep[0], cfg.dsp, "lin")
            row.infer_seconds = time.perf_counter() - t0
            row.infer_mel_mse = float(np.mean((rec.mel - val_prep[0].mel) ** 2))
            if not np.all(np.isfinite(rec.waveform.samples)):
                raise FloatingPointError("reconstructed waveform is not finite")
        except (ArithmeticError, ValueError) as exc:
            row.status = f"failed: {exc}"
            log.error("%s failed: %s", name, exc)
        log.info("%s: %s", name, dict(zip(COLUMNS, row.cells())))
        rows.append(row)
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.cells())
