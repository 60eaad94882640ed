"""Central finite-difference checks of the autodiff engine, layer by layer and end to end."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node


DEFAULT_TOLERANCE = 1e-4
TOLERANCES = {
    "dense": 1e-5,
    "activation_leaky-relu": 1e-6,
    "activation_tanh": 1e-6,
    "activation_relu": 1e-6,
    "sigmoid": 1e-6,
    "mse": 1e-6,
    "two_term_loss": 1e-6,
    "postnet": 1e-3,
    "model_end_to_end": 1e-3,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise ``|a-n| / max(|a|+|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(loss_fn, flat: np.ndarray, i: int, eps: float, base: list, shrink: int = 3) -> Optional[float]:
    """Central difference at entry ``i``, shrinking the step until both sides stay on the base branches."""
    orig = flat[i]
    try:
        for step in eps * 0.1 ** np.arange(shrink):
            flat[i] = orig + step
            with ad.record_branches() as br_up:
                up = float(loss_fn().value)
            flat[i] = orig - step
            with ad.record_branches() as br_down:
                down = float(loss_fn().value)
            if _same_branches(base, br_up) and _same_branches(base, br_down):
                return (up - down) / (2 * step)
    finally:
        flat[i] = orig
    return None


def check(
    loss_fn: Callable[[], Node],
    nodes: Sequence[Node],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences over ``nodes``.

    ``loss_fn`` must rebuild the graph from the current node values. With
    ``max_entries`` only that many entries of each tensor are probed. A probe
    whose ``±eps`` evaluations send any relu, leaky relu or max-pool down a
    different branch than the base point is retried with steps of ``eps/10``
    and ``eps/100``, then discarded, since the difference quotient would
    measure a kink rather than the derivative.
    """
    for n in nodes:
        n.zero_grad()
    with ad.record_branches() as base:
        loss = loss_fn()
    ad.backward(loss)
    analytic = [n.grad.copy() for n in nodes]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for node, grad in zip(nodes, analytic):
        flat = node.value.reshape(-1)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        probed, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(probed) == want:
                break
            slope = _probe(loss_fn, flat, i, eps, base)
            if slope is None:
                continue
            probed.append(i)
            numeric.append(slope)
        if not probed:
            raise RuntimeError(f"every probe of a {node.shape} tensor straddles a kink")
        worst = max(worst, relative_error(grad.reshape(-1)[probed], np.array(numeric)))
    return worst


def _projection(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _projected(out: Node, proj: np.ndarray) -> Node:
    return ad.sum_(ad.mul(out, proj))


def _p(rng, *shape) -> Node:
    return ad.parameter(rng.standard_normal(shape), np.float64)


def suite(seed: int = 0) -> dict[str, float]:
    """Run every layer check; returns ``{name: max relative error}``."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    x, w, b = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    pr = _projection((3, 2), rng)
    results["dense"] = check(lambda: _projected(ad.dense(x, w, b), pr), [x, w, b])

    x, k = _p(rng, 2, 2, 6, 6), _p(rng, 3, 2, 3, 3)
    for stride, pad in (((1, 1), "same"), ((2, 2), "same"), ((1, 1), "valid")):
        out_shape = ad.conv2d(x, k, stride, pad).shape
        pr = _projection(out_shape, rng)
        results[f"conv2d_s{stride[0]}_{pad}"] = check(lambda: _projected(ad.conv2d(x, k, stride, pad), pr), [x, k])

    x, k = _p(rng, 2, 3, 7), _p(rng, 4, 3, 4)
    pr = _projection((2, 4, 7), rng)
    results["conv1d"] = check(lambda: _projected(ad.conv1d(x, k), pr), [x, k])

    x, g, be = _p(rng, 4, 3, 2, 2), _p(rng, 3), _p(rng, 3)
    st = ad.BatchNormState(3, np.float64)
    pr = _projection((4, 3, 2, 2), rng)
    results["batch_norm_train"] = check(lambda: _projected(ad.batch_norm(x, g, be, st, "train"), pr), [x, g, be])
    results["batch_norm_infer"] = check(lambda: _projected(ad.batch_norm(x, g, be, st, "infer"), pr), [x, g, be])

    x = _p(rng, 2, 5)
    pr = _projection((2, 5), rng)
    for kind in ("leaky-relu", "tanh", "relu"):
        results[f"activation_{kind}"] = check(lambda: _projected(ad.activation(x, kind), pr), [x])
    results["sigmoid"] = check(lambda: _projected(ad.sigmoid(x), pr), [x])

    x = _p(rng, 3, 6)
    pr = _projection((3, 6), rng)

    def dropped():
        return _projected(ad.dropout(x, 0.5, "train", np.random.default_rng(7)), pr)

    results["dropout"] = check(dropped, [x])

    x = _p(rng, 2, 3, 6)
    pr = _projection((2, 3, 6), rng)
    results["max_pool_time"] = check(lambda: _projected(ad.max_pool_time(x, 2), pr), [x])

    hid, din = 3, 2
    gp = {"W": _p(rng, din, 3 * hid), "U": _p(rng, hid, 3 * hid), "b": _p(rng, 3 * hid)}
    seq = _p(rng, 2, 3, din)
    pr = _projection((2, 3, hid), rng)
    results["gru_3step"] = check(lambda: _projected(ad.gru_sequence(seq, gp), pr), [seq, *gp.values()])
    gb = {"W": _p(rng, din, 3 * hid), "U": _p(rng, hid, 3 * hid), "b": _p(rng, 3 * hid)}
    pr2 = _projection((2, 3, 2 * hid), rng)
    results["bigru"] = check(lambda: _projected(ad.bidirectional_gru(seq, gp, gb), pr2), [seq, *gp.values(), *gb.values()])

    x = _p(rng, 2, 8)
    hp = {"W_h": _p(rng, 8, 8), "b_h": _p(rng, 8), "W_t": _p(rng, 8, 8), "b_t": _p(rng, 8)}
    pr = _projection((2, 8), rng)
    results["highway"] = check(lambda: _projected(ad.highway(x, hp), pr), [x, *hp.values()])

    a, t = _p(rng, 3, 4), rng.random((3, 4))
    results["mse"] = check(lambda: ad.mse(a, t), [a])

    from .training import two_term_loss

    m, mt = _p(rng, 2, 4, 3), rng.random((2, 4, 3))
    s, stt = _p(rng, 2, 4, 5), rng.random((2, 4, 5))
    results["two_term_loss"] = check(lambda: two_term_loss(m, mt, s, stt, (0.7, 1.3)), [m, s])

    results.update(network_checks(seed))
    return results


def network_checks(seed: int = 0) -> dict[str, float]:
    """Decoder and post-net on their own, then the whole miniature model."""
    from .model import Model, ModelConfig

    cfg = ModelConfig.tiny()
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 2)
    out: dict[str, float] = {}

    emb = ad.parameter(rng.standard_normal((4, cfg.embedding_size)), np.float64)
    pr = _projection((4, cfg.l, cfg.n_mels), rng)
    dec = [emb] + [v for k, v in model.params.items() if k.startswith("dec/")]
    out["decoder"] = check(lambda: _projected(model.decoder_forward(emb, "train"), pr), dec)

    mels = ad.parameter(rng.random((2, cfg.T * cfg.l, cfg.n_mels)), np.float64)
    pr = _projection((2, cfg.T * cfg.l, cfg.d_lin), rng)
    post = [mels] + [model.params[k] for k in model.postnet_names()]
    out["postnet"] = check(lambda: _projected(model.postnet_forward(mels, "train"), pr), post)

    out["model_end_to_end"] = model_check(seed)
    return out


def model_check(seed: int = 0, max_entries: int = 6) -> float:
    """Gradient check of the miniature model: encoder, decoder, post-net and two-term loss."""
    from .model import Model, ModelConfig, to_feature

    cfg = ModelConfig.tiny()
    model = Model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    b = 2
    pixels = rng.standard_normal((b * cfg.T, cfg.K, cfg.H, cfg.W))
    flows = rng.standard_normal((b * cfg.T, 2 * (cfg.K - 1), cfg.H, cfg.W))
    mel_t = rng.random((b, cfg.T * cfg.l, cfg.n_mels))
    lin_t = rng.random((b, cfg.T * cfg.l, cfg.d_lin))

    def loss_fn():
        mel = model.predict_frames(pixels, flows, "train")
        mel = ad.reshape(mel, (b, cfg.T * cfg.l, cfg.n_mels))
        lin = to_feature(model.postnet_forward(mel, "train"))
        return ad.mse(mel, mel_t) + ad.mse(lin, lin_t)

    return check(loss_fn, list(model.params.values()), max_entries=max_entries, seed=seed)


def run_suite(seed: int = 0) -> list[tuple[str, float, float, bool]]:
    """``(name, error, tolerance, passed)`` for every check."""
    rows = []
    for name, err in suite(seed).items():
        tol = TOLERANCES.get(name, DEFAULT_TOLERANCE)
        rows.append((name, err, tol, bool(np.isfinite(err) and err < tol)))
    return rows
