"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Every subcommand writes its results as CSV (plus JSON manifests) under
``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from affect_e2e import postprocess, synth, trainer
from affect_e2e.analysis import gate_correlation
from affect_e2e.autodiff.serialization import write_atomic
from affect_e2e.errors import AffectError, ConfigurationError, DataError, ParameterError
from affect_e2e.metrics import ccc
from affect_e2e.speech import SpeechNetConfig
from affect_e2e.visual import VisualNetConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(path, text.encode())


def _write_json(path: Path, body) -> None:
    _write_text(path, json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_predictions(path, pred: np.ndarray) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time_s", "arousal", "valence"])
    for i, (a, v) in enumerate(pred):
        writer.writerow([repr(round(i * synth.FRAME_SECONDS, 6)), repr(float(a)), repr(float(v))])
    _write_text(Path(path), buf.getvalue())


def read_predictions(directory, ids) -> dict[str, np.ndarray]:
    root = Path(directory)
    return {i: synth.read_labels(root / f"{i}.csv") for i in ids}


def _configs(scale: str):
    if scale == "full":
        return SpeechNetConfig(), VisualNetConfig.full()
    return SpeechNetConfig.tiny(), VisualNetConfig.tiny()


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=args.lr,
        audio_batch=args.audio_batch,
        video_batch=args.video_batch,
        epochs=args.epochs,
        sequence_length=args.seq_len,
        objective=args.objective,
        seed=args.seed,
        max_steps=args.max_steps,
        target_rho=args.target_rho,
        augment=not args.no_augment,
        freeze_extractors=args.freeze_extractors,
        eval_every=args.eval_every,
        hidden_size=args.hidden_size,
    )


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    ds = synth.generate_dataset(args.seed, args.train, args.validation, args.test, args.duration)
    synth.write_dataset(ds, args.out)
    print(f"wrote {len(ds.ids)} recordings to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = synth.read_dataset(args.data)
    cfg = _train_config(args)
    speech_cfg, visual_cfg = _configs(args.scale)
    out = Path(args.out)
    if args.modality == "speech":
        result = trainer.pretrain_speech(ds, cfg, speech_cfg)
    elif args.modality == "visual":
        result = trainer.pretrain_visual(ds, cfg, visual_cfg)
    else:
        speech = _extractor(args.speech_model, "speech") or trainer.pretrain_speech(ds, cfg, speech_cfg).model.speech
        visual = _extractor(args.visual_model, "visual") or trainer.pretrain_visual(ds, cfg, visual_cfg).model.visual
        result = trainer.train_multimodal(ds, speech, visual, cfg)
    meta = {"seed": cfg.seed, "epoch": result.epochs, "steps": result.steps, "objective": cfg.objective, "train_config": cfg.to_dict()}
    trainer.save_checkpoint(result.model, out / "checkpoint", meta)
    _write_text(out / "metrics.csv", result.metrics_csv())
    _write_json(out / "run.json", {"command": "train", "modality": args.modality, "scale": args.scale, **meta})
    final = result.last("validation") or result.last("train")
    print(" ".join(f"{k}={v:.4f}" for k, v in final.items()))
    return EXIT_OK


def _extractor(path, which: str):
    if path is None:
        return None
    model, _ = trainer.load_checkpoint(path)
    net = getattr(model, which)
    if net is None:
        raise DataError(f"checkpoint has no {which} network", Path(path))
    return net


def _split_predictions(args, ds, split: str) -> dict[str, np.ndarray]:
    recs = ds.split_recordings(split)
    if args.predictions:
        return read_predictions(args.predictions, [r.id for r in recs])
    model, _ = trainer.load_checkpoint(args.model)
    return {r.id: trainer.predict(model, r) for r in recs}


def _by_dimension(preds: dict[str, np.ndarray], ids) -> dict[str, list[np.ndarray]]:
    return {dim: [preds[i][:, k] for i in ids] for k, dim in enumerate(trainer.DIMENSIONS)}


def _gold(ds, ids) -> dict[str, list[np.ndarray]]:
    return {dim: [ds[i].trajectory.gold[:, k] for i in ids] for k, dim in enumerate(trainer.DIMENSIONS)}


def cmd_eval(args) -> int:
    if not args.model and not args.predictions:
        raise UsageError("eval needs --model or --predictions")
    ds = synth.read_dataset(args.data)
    ids = ds.split[args.split]
    preds = _split_predictions(args, ds, args.split)
    if args.chains:
        chains = postprocess.load_chains(args.chains)
    else:
        val_ids = ds.split["validation"]
        val = preds if args.split == "validation" else _split_predictions(args, ds, "validation")
        chains = postprocess.fit_chains(_by_dimension(val, val_ids), _gold(ds, val_ids))
    pred_dims, gold_dims = _by_dimension(preds, ids), _gold(ds, ids)
    rows = []
    for dim in trainer.DIMENSIONS:
        raw = ccc(np.concatenate(pred_dims[dim]), np.concatenate(gold_dims[dim]))
        post = ccc(np.concatenate(postprocess.apply_chain(chains[dim], pred_dims[dim])), np.concatenate(gold_dims[dim]))
        rows.append((dim, raw, post))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dimension", "split", "rho_c", "rho_c_postprocessed"])
    for dim, raw, post in rows:
        writer.writerow([dim, args.split, repr(float(raw)), repr(float(post))])
        print(f"{dim}: rho_c={raw:.4f} post={post:.4f}")
    out = Path(args.out)
    _write_text(out / "eval.csv", buf.getvalue())
    if args.model:
        for i in ids:
            write_predictions(out / "predictions" / f"{i}.csv", preds[i])
    return EXIT_OK


def cmd_postprocess_fit(args) -> int:
    ds = synth.read_dataset(args.data)
    ids = ds.split[args.split]
    preds = read_predictions(args.predictions, ids)
    chains = postprocess.fit_chains(_by_dimension(preds, ids), _gold(ds, ids))
    postprocess.save_chains(args.out, chains)
    for dim, chain in chains.items():
        kept = ", ".join(f"{s.name}={s.parameter}" for s in chain.kept()) or "none"
        print(f"{dim}: {kept} (rho_c {chain.trace[0]:.4f} -> {chain.trace[-1]:.4f})")
    return EXIT_OK


def cmd_postprocess_apply(args) -> int:
    chains = postprocess.load_chains(args.chains)
    src = Path(args.predictions)
    files = sorted(src.glob("*.csv"))
    if not files:
        raise DataError("no prediction CSVs found", src)
    for f in files:
        pred = synth.read_labels(f)
        out = np.stack([postprocess.apply_chain(chains[d], pred[:, k]) for k, d in enumerate(trainer.DIMENSIONS)], axis=1)
        write_predictions(Path(args.out) / f.name, out)
    print(f"post-processed {len(files)} prediction files into {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = synth.read_dataset(args.data)
    cfg = replace(_train_config(args), target_rho=None)
    speech_cfg, visual_cfg = _configs(args.scale)
    rows = trainer.ablate_sequence_length(ds, cfg, args.lengths, ("visual", "speech"), speech_cfg, visual_cfg)
    out = Path(args.out)
    _write_text(out / "ablation.csv", trainer.ablation_csv(rows))
    _write_json(out / "run.json", {"command": "ablate-seq-len", "lengths": list(args.lengths), "train_config": cfg.to_dict()})
    for r in rows:
        print(f"{r['modality']:>6} L={r['sequence_length']:<4} arousal={r['arousal']:.4f} valence={r['valence']:.4f}")
    return EXIT_OK


def cmd_analyze_gates(args) -> int:
    ds = synth.read_dataset(args.data)
    model, _ = trainer.load_checkpoint(args.model)
    rec_id = args.recording or ds.split_recordings("test")[0].id
    report = gate_correlation(model, ds[rec_id])
    report.write(args.out, k=args.top)
    for name in ("rms_energy", "rms_range", "loudness", "f0"):
        best = report.top(name, 1)
        if best:
            b = best[0]
            print(f"{name}: layer {b.layer} cell {b.cell} rho={b.rho:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def _add_training_flags(p, default_len: int = 150) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by synth-data")
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=trainer.OBJECTIVES, default="ccc")
    p.add_argument("--seq-len", type=int, default=default_len)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--audio-batch", type=int, default=25)
    p.add_argument("--video-batch", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--target-rho", type=float, default=None, help="stop once training rho_c reaches this")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--hidden-size", type=int, default=256, help="cells per recurrent layer")
    p.add_argument("--scale", choices=("tiny", "full"), default="tiny")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--freeze-extractors", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affect-e2e", description="End-to-end multimodal affect recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=16)
    p.add_argument("--validation", type=int, default=15)
    p.add_argument("--test", type=int, default=15)
    p.add_argument("--duration", type=float, default=60.0, help="seconds per recording (multiple of 6)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a speech, visual or fusion model")
    p.add_argument("--modality", choices=trainer.MODALITIES, required=True)
    _add_training_flags(p)
    p.add_argument("--speech-model", help="pretrained speech checkpoint (fusion only)")
    p.add_argument("--visual-model", help="pretrained visual checkpoint (fusion only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rho_c per dimension before and after post-processing")
    p.add_argument("--model")
    p.add_argument("--predictions", help="directory of <id>.csv predictions instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="validation")
    p.add_argument("--chains", help="fitted chain file; fitted on validation when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("postprocess-fit", help="fit post-processing chains on a split")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="validation")
    p.add_argument("--out", required=True, help="chain file to write")
    p.set_defaults(func=cmd_postprocess_fit)

    p = sub.add_parser("postprocess-apply", help="apply fitted chains to prediction files")
    p.add_argument("--chains", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess_apply)

    p = sub.add_parser("ablate-seq-len", help="validation rho_c per sequence length and modality")
    _add_training_flags(p)
    p.add_argument("--lengths", type=int, nargs="+", default=[75, 150, 300])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-gates", help="correlate recurrent cells with acoustic descriptors")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--recording", help="recording id (default: first test recording)")
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_gates)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AffectError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
