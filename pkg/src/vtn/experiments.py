"""Synthetic transfer-learning experiments: TTS pretraining, encoder
pretraining and the three VC initialisations across training-set sizes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Language, Manifest, SyntheticSpeaker, generate_corpus
from .dsp import FeatureConfig
from .evaluation import EvalReport, evaluate_pairs
from .inference import DecodeOptions, convert
from .losses import LossConfig
from .model import Checkpoint, ModelConfig, VTN
from .training import (INIT_MODES, PairSet, StageOutput, TrainConfig, TrainLog, autoencoder_pairs,
                       finetune_vc, pretrain_decoder, pretrain_encoder, tts_pairs, vc_pairs)

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    alphabet_size: int = 6
    length_min: int = 3
    length_max: int = 6
    language_seed: int = 0
    tts_utts: int = 200
    tts_steps: int = 3000
    tts_lr_scale: float = 0.5
    encoder_steps: int = 1500
    encoder_lr_scale: float = 0.5
    vc_steps: int = 600
    vc_lr_scale: float = 0.3
    vc_keep_best: bool = False
    model_dropout: float = 0.1
    warmup: int = 200
    batch_size: int = 8
    sizes: tuple[int, ...] = (20, 8)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_val: int = 10
    val_interval: int = 25
    threshold: float = 0.8
    pretrain_seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("training sizes must be >= 1")
        if self.length_min < 1 or self.length_max < self.length_min:
            raise ValueError("bad symbols-per-utterance range")


@dataclass
class SyntheticSetup:
    language: Language
    tts: Manifest
    source: Manifest
    target: Manifest
    val_source: Manifest
    val_target: Manifest


def speakers(lang: Language) -> tuple[SyntheticSpeaker, SyntheticSpeaker, SyntheticSpeaker]:
    """The TTS speaker and the VC source/target pair; all three differ."""
    return (SyntheticSpeaker.create("tts", 101, lang, formant_shift=0.0, duration_scale=1.0),
            SyntheticSpeaker.create("src", 202, lang, formant_shift=-2.0, duration_scale=0.9),
            SyntheticSpeaker.create("trg", 303, lang, formant_shift=3.0, duration_scale=1.25))


def build_setup(cfg: ExperimentConfig, out_dir=None) -> SyntheticSetup:
    """TTS corpus plus a parallel source/target corpus sharing one language.

    The VC sentences are drawn independently of the TTS sentences.  With
    ``out_dir`` the features go to ``tts/`` and ``vc/`` below it, with
    ``<speaker>.train.jsonl`` / ``<speaker>.val.jsonl`` split manifests.
    """
    lang = Language.create(cfg.alphabet_size, seed=cfg.language_seed)
    span = (cfg.length_min, cfg.length_max)
    tts_spk, src, trg = speakers(lang)
    out_dir = Path(out_dir) if out_dir is not None else None
    tts = generate_corpus([tts_spk], cfg.tts_utts, span, seed=cfg.language_seed * 7 + 1,
                          out_dir=out_dir / "tts" if out_dir else None)["tts"]
    n_train = max(cfg.sizes)
    vc = generate_corpus([src, trg], n_train + cfg.n_val, span, seed=cfg.language_seed * 7 + 2,
                         out_dir=out_dir / "vc" if out_dir else None)
    train_ids = vc["src"].ids[:n_train]
    val_ids = vc["src"].ids[n_train:]
    parts = {spk: (vc[spk].subset(train_ids), vc[spk].subset(val_ids)) for spk in ("src", "trg")}
    if out_dir is not None:
        for spk, (tr, va) in parts.items():
            tr.write(out_dir / "vc" / f"{spk}.train.jsonl")
            va.write(out_dir / "vc" / f"{spk}.val.jsonl")
    return SyntheticSetup(lang, tts, parts["src"][0], parts["trg"][0], parts["src"][1], parts["trg"][1])


def stage_config(cfg: ExperimentConfig, steps: int, lr_scale: float, seed: int, stage: str) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, max_steps=steps, warmup=cfg.warmup, lr_scale=lr_scale,
                       seed=seed, val_interval=cfg.val_interval, stage=stage,
                       keep_best=cfg.vc_keep_best and stage == "vc")


@dataclass
class Pretrained:
    tts: StageOutput
    encoder: StageOutput


def run_pretraining(setup: SyntheticSetup, cfg: ExperimentConfig, model_cfg: ModelConfig = ModelConfig(),
                    loss_cfg: LossConfig = LossConfig(), out_dir=None) -> Pretrained:
    out_dir = Path(out_dir) if out_dir is not None else None
    logs = (lambda n: TrainLog(out_dir / f"{n}.log.jsonl")) if out_dir else (lambda n: None)
    # the experiment's dropout applies to every stage; VC runs inherit it from the TTS checkpoint
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "dropout": cfg.model_dropout,
                                       "vocab_size": max(model_cfg.vocab_size, cfg.alphabet_size)})
    tts = pretrain_decoder(tts_pairs(setup.tts), model_cfg,
                           stage_config(cfg, cfg.tts_steps, cfg.tts_lr_scale, cfg.pretrain_seed, "tts"),
                           loss_cfg, log_to=logs("tts"))
    enc = pretrain_encoder(autoencoder_pairs(setup.tts), tts.checkpoint,
                           stage_config(cfg, cfg.encoder_steps, cfg.encoder_lr_scale, cfg.pretrain_seed,
                                        "encoder-pretrain"),
                           loss_cfg, log_to=logs("encoder"))
    if out_dir is not None:
        tts.checkpoint.save(out_dir / "tts.ckpt")
        enc.checkpoint.save(out_dir / "encoder.ckpt")
    return Pretrained(tts, enc)


def validation_mcd(model: VTN, val: PairSet, opts: DecodeOptions = DecodeOptions(),
                   feat_cfg: FeatureConfig = FeatureConfig()) -> EvalReport:
    converted, attn = [], []
    for src in val.inputs:
        res = convert(model, src, opts)
        converted.append(res.mel)
        attn.append(res.attention)
    return evaluate_pairs(val.ids, converted, val.targets, feat_cfg, attn)


@dataclass
class RunResult:
    init: str
    size: int
    seed: int
    mcd: float
    steps_to_threshold: float
    final_val_l1: float
    diagonality: float
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    checkpoint: Checkpoint = field(repr=False, default=None)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("checkpoint")
        d["val_curve"] = [list(p) for p in self.val_curve]
        if math.isinf(d["steps_to_threshold"]):
            d["steps_to_threshold"] = None
        return d


def run_vc(setup: SyntheticSetup, pre: Pretrained, cfg: ExperimentConfig, init: str, size: int, seed: int,
           loss_cfg: LossConfig = LossConfig(), log_to: TrainLog | None = None) -> RunResult:
    train = vc_pairs(setup.source.subset(setup.source.ids[:size]), setup.target.subset(setup.target.ids[:size]))
    val = vc_pairs(setup.val_source, setup.val_target)
    ckpt = {"scratch": None, "decoder": pre.tts.checkpoint, "encoder+decoder": pre.encoder.checkpoint}[init]
    out = finetune_vc(train, ckpt, stage_config(cfg, cfg.vc_steps, cfg.vc_lr_scale, seed, "vc"), loss_cfg,
                      init=init, model_cfg=pre.tts.checkpoint.config, val=val, log_to=log_to)
    report = validation_mcd(out.model, val)
    diag = float(np.mean([u.diagonality for u in report.utterances]))
    curve = [(v["step"], v["val_l1"]) for v in out.result.validations]
    final = curve[-1][1] if curve else math.nan
    return RunResult(init, size, seed, report.mean, out.result.steps_to_threshold(cfg.threshold), final, diag,
                     curve, out.checkpoint)


@dataclass
class AblationResult:
    runs: list[RunResult]
    config: ExperimentConfig

    def get(self, init: str, size: int, seed: int) -> RunResult:
        for r in self.runs:
            if (r.init, r.size, r.seed) == (init, size, seed):
                return r
        raise KeyError((init, size, seed))

    def mean_mcd(self, init: str, size: int) -> float:
        return float(np.mean([r.mcd for r in self.runs if r.init == init and r.size == size]))

    def table(self) -> str:
        sizes = self.config.sizes
        head = f"{'initialisation':<18}" + "".join(f"{f'MCD@{s}':>12}" for s in sizes)
        lines = ["# validation MCD (dB), mean over seeds " + ",".join(map(str, self.config.seeds)), head]
        for init in INIT_MODES:
            lines.append(f"{init:<18}" + "".join(f"{self.mean_mcd(init, s):12.3f}" for s in sizes))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.txt").write_text(self.table(), encoding="utf-8")
        with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as f:
            for r in self.runs:
                f.write(json.dumps(r.record(), sort_keys=True) + "\n")


def run_ablation(cfg: ExperimentConfig, model_cfg: ModelConfig = ModelConfig(),
                 loss_cfg: LossConfig = LossConfig(), out_dir=None, pre: Pretrained | None = None,
                 setup: SyntheticSetup | None = None, inits=INIT_MODES) -> AblationResult:
    setup = setup or build_setup(cfg)
    pre = pre or run_pretraining(setup, cfg, model_cfg, loss_cfg, out_dir)
    runs = []
    for size in cfg.sizes:
        for seed in cfg.seeds:
            for init in inits:
                log_to = TrainLog(Path(out_dir) / f"vc-{init}-{size}-{seed}.log.jsonl") if out_dir else None
                r = run_vc(setup, pre, cfg, init, size, seed, loss_cfg, log_to)
                log.info("%s size=%d seed=%d mcd=%.3f steps=%s", init, size, seed, r.mcd, r.steps_to_threshold)
                runs.append(r)
    result = AblationResult(runs, cfg)
    if out_dir is not None:
        result.write(out_dir)
    return result
