"""Command-line entry point: ``vtn <subcommand> [options]``.

Every subcommand writes ``config.resolved.ini`` into its output directory.
While a subcommand runs, an ``INCOMPLETE`` marker sits next to its outputs;
it is removed only on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import dsp
from .config import ConfigError, RunConfig, describe_defaults, load_config
from .corpus import Manifest, ingest_wav_corpus
from .evaluation import evaluate_pairs
from .experiments import build_setup, run_ablation
from .inference import convert
from .model import Checkpoint
from .training import (TrainLog, autoencoder_pairs, finetune_vc, pretrain_decoder, pretrain_encoder,
                       tts_pairs, vc_pairs)

log = logging.getLogger("vtn")
MARKER = "INCOMPLETE"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtn", description="Voice Transformer Network toolkit",
                                     epilog=describe_defaults(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic TTS and parallel VC corpora")
    _common(p)

    p = sub.add_parser("features", help="extract log-mel features from a WAV directory")
    _common(p)
    p.add_argument("--wav-dir", type=Path, required=True)
    p.add_argument("--transcript", type=Path, required=True, help="lines of '<utterance id> <text>'")
    p.add_argument("--speaker", default="spk")

    p = sub.add_parser("pretrain-tts", help="stage 1: train a TTS model (decoder pretraining)")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path)

    p = sub.add_parser("pretrain-encoder", help="stage 2: autoencoder with the TTS decoder frozen")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")

    p = sub.add_parser("train-vc", help="stage 3: train the VC model on parallel data")
    _common(p)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--val-source", type=Path)
    p.add_argument("--val-target", type=Path)
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (not needed for scratch)")
    p.add_argument("--init", choices=("scratch", "decoder", "encoder+decoder"), default="encoder+decoder")
    p.add_argument("--n-train", type=int, help="use only the first N training pairs")

    p = sub.add_parser("convert", help="convert every utterance of a source manifest")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--wav", action="store_true", help="also write Griffin-Lim waveforms")
    p.add_argument("--griffin-lim-iters", type=int, default=60)

    p = sub.add_parser("evaluate", help="MCD report of converted features against references")
    _common(p)
    p.add_argument("--converted", type=Path, required=True, help="directory of <id>.feat files or a manifest")
    p.add_argument("--reference", type=Path, required=True, help="reference manifest")

    p = sub.add_parser("ablate", help="scratch / decoder-only / encoder+decoder across training sizes")
    _common(p)
    return parser


# ------------------------------------------------------------------ commands

def cmd_gen_corpus(args, cfg: RunConfig) -> None:
    setup = build_setup(cfg.experiment, args.out)
    log.info("wrote %d TTS and %d+%d parallel utterances under %s", len(setup.tts), len(setup.source),
             len(setup.val_source), args.out)


def cmd_features(args, cfg: RunConfig) -> None:
    man = ingest_wav_corpus(args.wav_dir, args.transcript, args.out, cfg.features, speaker=args.speaker)
    man.write(args.out / f"{args.speaker}.jsonl")
    log.info("ingested %d utterances", len(man))


def _ckpt_meta(args) -> dict:
    return {"config_file": str(args.config) if args.config else None, "overrides": list(args.overrides)}


def cmd_pretrain_tts(args, cfg: RunConfig) -> None:
    pairs = tts_pairs(Manifest.read(args.manifest))
    val = tts_pairs(Manifest.read(args.val_manifest)) if args.val_manifest else None
    out = pretrain_decoder(pairs, cfg.model, cfg.train, cfg.loss, val=val,
                           log_to=TrainLog(args.out / "train.log.jsonl"))
    out.checkpoint.meta.update(_ckpt_meta(args))
    out.checkpoint.save(args.out / "tts.ckpt")


def cmd_pretrain_encoder(args, cfg: RunConfig) -> None:
    pairs = autoencoder_pairs(Manifest.read(args.manifest))
    out = pretrain_encoder(pairs, Checkpoint.load(args.checkpoint), cfg.train, cfg.loss,
                           log_to=TrainLog(args.out / "train.log.jsonl"))
    out.checkpoint.meta.update(_ckpt_meta(args))
    out.checkpoint.save(args.out / "encoder.ckpt")


def cmd_train_vc(args, cfg: RunConfig) -> None:
    src, trg = Manifest.read(args.source), Manifest.read(args.target)
    if args.n_train:
        src, trg = src.subset(src.ids[:args.n_train]), trg.subset(trg.ids[:args.n_train])
    val = None
    if args.val_source and args.val_target:
        val = vc_pairs(Manifest.read(args.val_source), Manifest.read(args.val_target))
    ckpt = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    if args.init != "scratch" and ckpt is None:
        raise ValueError(f"--init {args.init} needs --checkpoint")
    out = finetune_vc(vc_pairs(src, trg), ckpt, cfg.train, cfg.loss, init=args.init, model_cfg=cfg.model,
                      val=val, log_to=TrainLog(args.out / "train.log.jsonl"))
    out.checkpoint.meta.update(_ckpt_meta(args))
    out.checkpoint.save(args.out / "vc.ckpt")


def cmd_convert(args, cfg: RunConfig) -> None:
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.stage != "vc":
        raise ValueError(f"convert needs a stage 'vc' checkpoint, got {ckpt.stage!r}")
    model = ckpt.build_model()
    man = Manifest.read(args.manifest)
    digest = cfg.features.digest()
    (args.out / "attention").mkdir(parents=True, exist_ok=True)
    records = []
    for utt in man.entries:
        res = convert(model, man.features(utt), cfg.decode)
        dsp.write_matrix(args.out / f"{utt.id}.feat", res.mel, digest)
        dsp.write_matrix(args.out / "attention" / f"{utt.id}.attn", res.attention.as_array())
        if args.wav:
            wav = dsp.griffin_lim(res.mel, args.griffin_lim_iters, cfg.features, seed=cfg.decode.seed)
            dsp.write_wav(args.out / f"{utt.id}.wav", wav, cfg.features.sample_rate)
        records.append({"id": utt.id, "frames": res.frames, "stop_step": res.stop_step,
                        "truncated": res.truncated})
    with open(args.out / "convert.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_converted(path: Path, ids, digest: str) -> list[np.ndarray]:
    if path.is_dir():
        return [dsp.read_matrix(path / f"{uid}.feat", digest) for uid in ids]
    man = Manifest.read(path)
    by_id = {u.id: u for u in man.entries}
    missing = [uid for uid in ids if uid not in by_id]
    if missing:
        raise ValueError(f"converted set lacks utterances {missing[:5]}")
    return [man.features(by_id[uid]) for uid in ids]


def cmd_evaluate(args, cfg: RunConfig) -> None:
    ref = Manifest.read(args.reference)
    refs = ref.load_all()
    conv = _load_converted(args.converted, ref.ids, ref.meta.get("feature_digest", cfg.features.digest()))
    report = evaluate_pairs(ref.ids, conv, refs, cfg.features)
    report.write(args.out)
    print(report.table(), end="")


def cmd_ablate(args, cfg: RunConfig) -> None:
    result = run_ablation(cfg.experiment, cfg.model, cfg.loss, out_dir=args.out)
    print(result.table(), end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "features": cmd_features,
    "pretrain-tts": cmd_pretrain_tts,
    "pretrain-encoder": cmd_pretrain_encoder,
    "train-vc": cmd_train_vc,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"vtn: error: {exc}", file=sys.stderr)
        return 2
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    marker = out / MARKER
    marker.write_text(f"{args.command} started; outputs here are partial\n", encoding="utf-8")
    cfg.snapshot(out)
    try:
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001  (reported, exit status carries it)
        marker.write_text(f"{args.command} failed: {exc}\n{traceback.format_exc()}", encoding="utf-8")
        print(f"vtn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    marker.unlink()
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
