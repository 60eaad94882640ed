"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 missing or malformed input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, dsp, gradcheck, metrics
from .ablation import run_ablations, write_ablation_csv
from .config import RunConfig
from .fileio import FormatError, ensure_dir, read_wav, write_tensor, write_wav
from .inference import reconstruct
from .model import load_checkpoint, save_checkpoint
from .synthesis import build_exemplar_index
from .training import TrainingDiverged, train

log = logging.getLogger("v2s")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_MARKER = "#run-config\n"
CHECKPOINT_NAME = "model.v2sm"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be at least 1, got {args.count}")
    dirs = data.gen_synthetic_corpus(args.count, args.seed, args.out, fps=args.fps, sample_rate=args.sr)
    log.info("wrote %d utterances under %s", len(dirs), args.out)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    base = RunConfig.preset(args.preset) if args.preset else None
    if args.config:
        return RunConfig.load(args.config, base)
    return base or RunConfig()


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"data directory {args.data} does not exist")
    utts = data.load_corpus(args.data)
    if len(utts) < 2:
        raise ValueError(f"need at least two utterances to split into train/validation, found {len(utts)}")
    train_utts, val_utts = data.split_utterances(utts, cfg.train_fraction, cfg.train.seed)
    result = train(train_utts, val_utts, cfg.model, cfg.train, cfg.dsp, flow_iterations=cfg.flow_iterations)
    ensure_dir(args.out)
    out = Path(args.out)
    save_checkpoint(out / CHECKPOINT_NAME, result.model, RUN_MARKER + cfg.to_text())
    result.write_history(out / "history.csv")
    cfg.save(out / "config.txt")
    (out / "split.txt").write_text(
        "".join(f"train {u.id}\n" for u in train_utts) + "".join(f"val {u.id}\n" for u in val_utts)
    )
    log.info("best validation loss per phase: %s", result.best_val)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"data directory {args.data} does not exist")
    utts = data.load_corpus(args.data)
    if len(utts) < 2:
        raise ValueError(f"need at least two utterances to split into train/validation, found {len(utts)}")
    train_utts, val_utts = data.split_utterances(utts, cfg.train_fraction, cfg.train.seed)
    rows = run_ablations(train_utts, val_utts, cfg)
    out = Path(args.out)
    ensure_dir(out.parent if str(out.parent) else ".")
    write_ablation_csv(out, rows)
    for r in rows:
        print(f"{r.run:24s} val_mel_mse={r.val_mel_mse if r.val_mel_mse is not None else float('nan'):.5g}\t{r.status}")
    return EXIT_OK if all(r.ok for r in rows) else EXIT_NUMERIC


def load_run(model_path):
    """Model and run config from a checkpoint file or a training output directory."""
    path = Path(model_path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    model, text = load_checkpoint(path)
    if RUN_MARKER in text:
        cfg = RunConfig.from_text(text.split(RUN_MARKER, 1)[1])
    else:
        cfg = RunConfig(model=model.config)
    return model, cfg


def cmd_infer(args) -> int:
    model, cfg = load_run(args.model)
    synth = args.synth or cfg.synth
    if synth == "mel-exemplar" and not args.index_data:
        raise UsageError("mel-exemplar synthesis requires --index-data")
    utt = data.load_utterance(args.utterance)
    prep = data.prepare_utterance(utt, model.config, cfg.dsp, cfg.flow_iterations)
    index = None
    if synth == "mel-exemplar":
        corpus = data.load_corpus(args.index_data)
        index = build_exemplar_index([u.audio for u in corpus], cfg.dsp)
    rec = reconstruct(model, prep, cfg.dsp, synth, index, cfg.query_linear)
    out = Path(args.out)
    if out.suffix.lower() != ".wav":
        ensure_dir(out)
        out = out / f"{utt.id}.wav"
    else:
        ensure_dir(out.parent if str(out.parent) else ".")
    write_wav(out, rec.waveform.samples, rec.waveform.sample_rate)
    mse = float(np.mean((rec.mel - prep.mel) ** 2))
    log.info("wrote %s; mel MSE against the utterance's own audio %.5f", out, mse)
    print(f"{utt.id}\tmel_mse={mse:.6g}\t{out}")
    return EXIT_OK


def _wav_map(path: Path) -> dict[str, Path]:
    """Utterance id -> WAV path for a file, a directory of WAVs, or a corpus of utterance directories."""
    if path.is_file():
        return {path.parent.name if path.name == "audio.wav" else path.stem: path}
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    found = {p.stem: p for p in sorted(path.glob("*.wav"))}
    found.update({p.parent.name: p for p in sorted(path.glob("*/audio.wav"))})
    if not found:
        raise FileNotFoundError(f"no WAV files under {path}")
    return found


def _load_wave(path: Path) -> dsp.Waveform:
    samples, rate = read_wav(path)
    return dsp.Waveform(samples, rate)


def cmd_eval(args) -> int:
    clean = _wav_map(Path(args.clean))
    recon = _wav_map(Path(args.reconstructed))
    if len(clean) == 1 and len(recon) == 1:
        pairs = [(next(iter(recon)), next(iter(clean.values())), next(iter(recon.values())))]
    else:
        pairs = [(uid, clean[uid], p) for uid, p in recon.items() if uid in clean]
        for uid in sorted(set(recon) - set(clean)):
            log.warning("no clean audio for %s; skipped", uid)
    if not pairs:
        raise FileNotFoundError("no reconstructed file matches a clean utterance id")
    triples = []
    for uid, c, r in pairs:
        cw, rw = _load_wave(c), _load_wave(r)
        if rw.sample_rate != cw.sample_rate:
            log.info("%s: resampling reconstruction from %d to %d Hz", uid, rw.sample_rate, cw.sample_rate)
            rw = dsp.resample(rw, cw.sample_rate)
        triples.append((uid, cw, rw))
    report = metrics.eval_report(triples)
    for uid, err in report.errors.items():
        log.warning("%s not scored: %s", uid, err)
    out = Path(args.out)
    ensure_dir(out.parent if str(out.parent) else ".")
    report.write_csv(out)
    print(f"mean stoi={report.mean_stoi:.4f} estoi={report.mean_estoi:.4f} over {len(report.ids)} utterances")
    return EXIT_DATA if report.errors else EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, err, tol, ok in gradcheck.run_suite(args.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max rel err {err:.3e} (tol {tol:.0e})")
        failed += not ok
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_features(args) -> int:
    params = RunConfig.preset(args.preset).dsp
    w = _load_wave(Path(args.wav))
    if w.sample_rate != params.sample_rate:
        w = dsp.resample(w, params.sample_rate)
    mel, lin = dsp.featurize(w, params)
    ensure_dir(args.out)
    write_tensor(Path(args.out) / "mel.v2st", mel.frames)
    write_tensor(Path(args.out) / "linear.v2st", lin.frames)
    print(f"mel {mel.frames.shape[0]}x{mel.frames.shape[1]} linear {lin.frames.shape[0]}x{lin.frames.shape[1]}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="v2s", description="Reconstruct speech from silent video of a speaker's face.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a procedural talking-face corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fps", type=float, default=25.0)
    g.add_argument("--sr", type=int, default=16000)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train on a corpus directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key=value run configuration")
    t.add_argument("--preset", choices=("default", "mini", "tiny"), help="base settings the config file overrides")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train every input-stream and post-net combination and compare")
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="key=value run configuration shared by every run")
    a.add_argument("--preset", choices=("default", "mini", "tiny"), help="base settings the config file overrides")
    a.add_argument("--out", required=True, help="comparison CSV path")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("infer", help="synthesize speech for one utterance directory")
    i.add_argument("--model", required=True, help="checkpoint file or training output directory")
    i.add_argument("--utterance", required=True)
    i.add_argument("--synth", choices=("lin", "mel-exemplar"), help="default: the run config's synth setting")
    i.add_argument("--index-data", help="corpus whose audio forms the exemplar index")
    i.add_argument("--out", required=True, help="output .wav file or directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="STOI/ESTOI of reconstructions against clean audio")
    e.add_argument("--clean", required=True)
    e.add_argument("--reconstructed", required=True)
    e.add_argument("--out", required=True, help="CSV report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer and the miniature model")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("features", help="dump mel and linear features of a WAV as tensors")
    f.add_argument("--wav", required=True)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--preset", choices=("default", "mini", "tiny"), default="default")
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"v2s {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"v2s {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"v2s {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ValueError, KeyError) as exc:
        print(f"v2s {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
