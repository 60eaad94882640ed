"""Run a trained model over a whole utterance and synthesize its audio."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import dsp
from .data import PreparedUtterance
from .model import Model, to_feature
from .synthesis import ExemplarIndex, PredictionSet, exemplar_frames, lin_synth, mel_to_linear

SYNTH_MODES = ("lin", "mel-exemplar")


@dataclass
class Reconstruction:
    mel: np.ndarray  # (N·l)×n averaged mel features
    lin: np.ndarray  # (N·l)×d linear features handed to Griffin-Lim
    waveform: dsp.Waveform
    predictions: PredictionSet  # mel windows


def predict_windows(model: Model, prep: PreparedUtterance, batch_size: int = 32):
    """Mel and (with a post-net) linear predictions for every window of ``T`` frames.

    Utterances shorter than ``T`` get one window spanning all their frames.
    """
    c = model.config
    n = prep.n_frames
    emb = []
    for a in range(0, n, 64):
        pix = prep.pixels[a : a + 64] if c.use_pixels else None
        flo = prep.flows[a : a + 64] if c.use_flow else None
        emb.append(model.encoder_forward(pix, flo, "infer").value)
    emb = np.concatenate(emb)
    mel_frames = to_feature(model.decoder_forward(ad.constant(emb), "infer")).value  # N×l×n
    T = min(c.T, n)
    starts = np.arange(n - T + 1)
    rows = starts[:, None] + np.arange(T)
    mel_win = mel_frames[rows].reshape(len(starts), T * c.l, c.n_mels)
    mel_set = PredictionSet(mel_win, starts, n, c.l)
    lin_set = None
    if c.use_postnet:
        outs = []
        for a in range(0, len(starts), batch_size):
            x = ad.constant(mel_win[a : a + batch_size])
            outs.append(to_feature(model.postnet_forward(x, "infer")).value)
        lin_set = PredictionSet(np.concatenate(outs), starts, n, c.l)
    return mel_set, lin_set


def reconstruct(
    model: Model,
    prep: PreparedUtterance,
    params: dsp.DspParams,
    synth: str = "lin",
    index: Optional[ExemplarIndex] = None,
    query_linear: bool = False,
    sigma: Optional[float] = None,
) -> Reconstruction:
    if synth not in SYNTH_MODES:
        raise ValueError(f"unknown synthesis mode {synth!r}; choose from {SYNTH_MODES}")
    mel_set, lin_set = predict_windows(model, prep)
    mel = mel_set.average(sigma)
    if synth == "mel-exemplar":
        if index is None:
            raise ValueError("mel-exemplar synthesis needs an exemplar index")
        query = lin_set.average(sigma) if (query_linear and lin_set is not None) else mel
        lin = exemplar_frames(query, index, query_linear and lin_set is not None)
    elif lin_set is not None:
        lin = lin_set.average(sigma)
    else:
        lin = mel_to_linear(mel, params)
    return Reconstruction(mel, lin, lin_synth(lin, params), mel_set)
