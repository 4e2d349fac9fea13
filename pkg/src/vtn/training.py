"""Optimisation and the three-stage pretraining pipeline.

Stage 1 trains a Transformer-TTS model (decoder pretraining).  Stage 2
trains a speech encoder as an autoencoder against the frozen stage-1
decoder.  Stage 3 fine-tunes the whole VC model on parallel data.
"""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MaskSource, Tensor
from .corpus import Manifest, check_parallel
from .losses import LossConfig, compute_losses, masked_l1
from .model import Checkpoint, ModelConfig, VTN

log = logging.getLogger(__name__)

INIT_MODES = ("scratch", "decoder", "encoder+decoder")
VALID_LINEAGES = {("tts",): "decoder", ("tts", "encoder-pretrain"): "encoder+decoder"}
VAL_MASK_SEED = 0x7A1


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 2000
    warmup: int = 200
    lr_scale: float = 1.0
    clip_norm: float = 1.0
    accum_steps: int = 1
    seed: int = 0
    val_interval: int = 100
    patience: int = 10
    early_stopping: bool = False
    keep_best: bool = False
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    stage: str = "vc"

    def __post_init__(self):
        if self.stage not in ("tts", "encoder-pretrain", "vc"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.batch_size < 1 or self.accum_steps < 1 or self.max_steps < 0:
            raise ValueError("batch_size and accum_steps must be >= 1, max_steps >= 0")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")


def noam_lr(step: int, warmup: int, d_model: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("noam_lr is defined for step >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam with global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def step(self, lr: float, clip_norm: float | None = None) -> float | None:
        """Apply one update; returns the pre-clip global norm, or None when
        the gradient holds NaN/inf (the update is then skipped)."""
        grads = self.grads()
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            log.warning("non-finite gradient at optimizer step %d; update skipped", self.t + 1)
            self.zero_grad()
            return None
        factor = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * factor if factor != 1.0 else grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.zero_grad()
        return norm


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    return {k: g * (clip_norm / norm) for k, g in grads.items()}


# ---------------------------------------------------------------------- data

@dataclass
class PairSet:
    """Training pairs: ``inputs`` are symbol-id lists or mel arrays."""

    inputs: list
    targets: list[np.ndarray]
    ids: list[str]
    kind: str  # "tts" or "vc"

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, n: int) -> "PairSet":
        return PairSet(self.inputs[:n], self.targets[:n], self.ids[:n], self.kind)


def tts_pairs(manifest: Manifest) -> PairSet:
    mels = manifest.load_all()
    return PairSet([list(u.symbols) for u in manifest.entries], mels, manifest.ids, "tts")


def autoencoder_pairs(manifest: Manifest) -> PairSet:
    mels = manifest.load_all()
    return PairSet(mels, mels, manifest.ids, "vc")


def vc_pairs(source: Manifest, target: Manifest) -> PairSet:
    check_parallel(source, target)
    return PairSet(source.load_all(), target.load_all(), source.ids, "vc")


def make_batch(pairs: PairSet, idx: Sequence[int]):
    """Zero-padded inputs, input lengths, targets and target lengths."""
    tgt = [pairs.targets[i] for i in idx]
    lengths = np.array([t.shape[0] for t in tgt])
    targets = np.zeros((len(idx), lengths.max(), tgt[0].shape[1]))
    for j, t in enumerate(tgt):
        targets[j, :t.shape[0]] = t
    src = [pairs.inputs[i] for i in idx]
    if pairs.kind == "tts":
        in_lengths = np.array([len(s) for s in src])
        inputs = np.zeros((len(idx), in_lengths.max()), dtype=np.int64)
        for j, s in enumerate(src):
            inputs[j, :len(s)] = s
    else:
        in_lengths = np.array([s.shape[0] for s in src])
        inputs = np.zeros((len(idx), in_lengths.max(), src[0].shape[1]))
        for j, s in enumerate(src):
            inputs[j, :s.shape[0]] = s
    return inputs, in_lengths, targets, lengths


def batch_indices(n: int, batch_size: int, position: int, seed: int) -> list[int]:
    """Indices for the batch starting at global sample ``position``.

    Epoch ``e`` uses a permutation keyed by (seed, e), so the schedule is a
    pure function of the position and resuming needs no RNG state.
    """
    out = []
    perms: dict[int, np.ndarray] = {}
    for p in range(position, position + min(batch_size, n)):
        epoch, k = divmod(p, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch, 0xBA]).permutation(n)
        out.append(int(perms[epoch][k]))
    return out


# --------------------------------------------------------------------- state

@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    best_val: float = math.inf
    bad_validations: int = 0
    seed: int = 0
    best_step: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        arrays.update({f"best/{k}": v for k, v in self.best_params.items()})
        meta = json.dumps({"step": self.step, "adam_t": self.adam_t, "best_val": repr(self.best_val),
                           "bad_validations": self.bad_validations, "seed": self.seed,
                           "best_step": self.best_step})
        arrays["__meta__"] = np.frombuffer(meta.encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainState":
        with np.load(io.BytesIO(data)) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
            v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}
            best = {k[5:]: z[k].copy() for k in z.files if k.startswith("best/")}
        return cls(meta["step"], m, v, meta["adam_t"], float(meta["best_val"]), meta["bad_validations"],
                   meta["seed"], meta.get("best_step", 0), best)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class TrainResult:
    state: TrainState
    records: list[dict]
    validations: list[dict]
    stopped_early: bool = False

    def steps_to_threshold(self, threshold: float) -> float:
        """First validated step whose loss is <= threshold (inf if never)."""
        for rec in self.validations:
            if rec["val_l1"] <= threshold:
                return rec["step"]
        return math.inf


class TrainLog:
    """Line-delimited JSON training log."""

    def __init__(self, path=None, wall_time: bool = True):
        self.path = Path(path) if path is not None else None
        self.wall_time = wall_time
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        rec = dict(record)
        if self.wall_time:
            rec["wall_time"] = round(time.perf_counter() - self._t0, 3)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def validation_loss(model: VTN, pairs: PairSet, batch_size: int = 16) -> float:
    """Teacher-forced masked L1 of the refined output, frame-weighted."""
    total, frames = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(pairs), batch_size):
            idx = list(range(start, min(start + batch_size, len(pairs))))
            inputs, in_len, targets, lengths = make_batch(pairs, idx)
            out = model.forward(inputs, in_len, targets, lengths, MaskSource(VAL_MASK_SEED, start))
            n = int(lengths.sum())
            total += masked_l1(out.fine, targets, lengths).item() * n
            frames += n
    return total / frames


def train(model: VTN, pairs: PairSet, loss_cfg: LossConfig, cfg: TrainConfig,
          trainable: Sequence[str] | None = None, val_pairs: PairSet | None = None,
          state: TrainState | None = None, log_to: TrainLog | None = None,
          stop_at: int | None = None, on_validate: Callable | None = None) -> TrainResult:
    """Run (or resume) the optimisation loop.

    ``trainable`` lists parameter names to optimise; every other parameter
    gets ``requires_grad=False`` for the duration.  ``stop_at`` ends the run
    early at that step (resume testing) without altering the schedule.
    With ``cfg.keep_best`` the parameters of the best validation are restored
    once the run completes; the step budget itself is unchanged.
    """
    if len(pairs) == 0:
        raise ValueError("training corpus is empty")
    named = model.named_parameters()
    names = list(named) if trainable is None else list(trainable)
    frozen = [k for k in named if k not in set(names)]
    for k, p in named.items():
        p.requires_grad = k in set(names)
        p.grad = None
    opt = Adam({k: named[k] for k in names}, (cfg.beta1, cfg.beta2), cfg.eps)
    state = state or TrainState(seed=cfg.seed)
    if state.m:
        opt.m = {k: v.copy() for k, v in state.m.items()}
        opt.v = {k: v.copy() for k, v in state.v.items()}
        opt.t = state.adam_t
    log_to = log_to or TrainLog(None)
    records, validations = [], []
    stopped = False
    end = cfg.max_steps if stop_at is None else min(stop_at, cfg.max_steps)
    step = state.step
    try:
        while step < end:
            step += 1
            sums: dict[str, float] = {}
            for micro in range(cfg.accum_steps):
                position = ((step - 1) * cfg.accum_steps + micro) * cfg.batch_size
                idx = batch_indices(len(pairs), cfg.batch_size, position, cfg.seed)
                inputs, in_len, targets, lengths = make_batch(pairs, idx)
                masks = MaskSource(cfg.seed, stream=(step - 1) * cfg.accum_steps + micro + 1)
                out = model.forward(inputs, in_len, targets, lengths, masks)
                losses = compute_losses(out, targets, lengths, loss_cfg, model.config.heads, model.config.r_d)
                ad.backward(ad.scale(losses.total, 1.0 / cfg.accum_steps))
                for k, v in losses.values().items():
                    sums[k] = sums.get(k, 0.0) + v / cfg.accum_steps
            lr = noam_lr(step, cfg.warmup, model.config.d_model, cfg.lr_scale)
            norm = opt.step(lr, cfg.clip_norm)
            rec = {"step": step, "lr": lr, "grad_norm": norm, **sums}
            if norm is None:
                rec["event"] = "nan-gradient-skipped"
            records.append(rec)
            log_to.write(rec)
            if val_pairs is not None and len(val_pairs) and step % cfg.val_interval == 0:
                val = validation_loss(model, val_pairs)
                vrec = {"step": step, "val_l1": val}
                if on_validate is not None:
                    vrec.update(on_validate(model, step) or {})
                validations.append(vrec)
                log_to.write(vrec)
                if val < state.best_val:
                    state.best_val, state.bad_validations, state.best_step = val, 0, step
                    if cfg.keep_best:
                        state.best_params = model.state_dict()
                else:
                    state.bad_validations += 1
                if cfg.early_stopping and state.bad_validations >= cfg.patience:
                    stopped = True
                    break
    finally:
        for p in named.values():
            p.requires_grad = True
            p.grad = None
    finished = stopped or step >= cfg.max_steps
    if cfg.keep_best and finished and state.best_params:
        model.load_params(state.best_params)
    state.step = step
    state.m = {k: v.copy() for k, v in opt.m.items()}
    state.v = {k: v.copy() for k, v in opt.v.items()}
    state.adam_t = opt.t
    if frozen:
        log.debug("trained %d tensors with %d frozen", len(names), len(frozen))
    return TrainResult(state, records, validations, stopped)


# -------------------------------------------------------------------- stages

@dataclass
class StageOutput:
    checkpoint: Checkpoint
    result: TrainResult
    model: VTN


def _is_input_layer(key: str) -> bool:
    return key.startswith(("encoder.embed.", "encoder.input_proj."))


def pretrain_decoder(tts_corpus: PairSet, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     loss_cfg: LossConfig = LossConfig(), val: PairSet | None = None,
                     log_to: TrainLog | None = None, model: VTN | None = None,
                     state: TrainState | None = None, stop_at: int | None = None) -> StageOutput:
    """Stage 1: ordinary TTS training on a single-speaker corpus."""
    if len(tts_corpus) == 0:
        raise ValueError("TTS corpus is empty")
    if tts_corpus.kind != "tts":
        raise ValueError("decoder pretraining needs (symbols, mel) pairs")
    model = model or VTN(model_cfg, "tts", train_cfg.seed)
    result = train(model, tts_corpus, loss_cfg, train_cfg, val_pairs=val, log_to=log_to, state=state,
                   stop_at=stop_at)
    ckpt = Checkpoint.from_model(model, "tts", result.state.step, ["tts"], {"seed": train_cfg.seed})
    return StageOutput(ckpt, result, model)


def pretrain_encoder(tts_corpus: PairSet | Manifest, decoder_ckpt: Checkpoint, train_cfg: TrainConfig,
                     loss_cfg: LossConfig = LossConfig(), val: PairSet | None = None,
                     log_to: TrainLog | None = None, warm_start: bool = True) -> StageOutput:
    """Stage 2: autoencoder on the TTS speaker's speech, decoder frozen.

    The new speech encoder gets a fresh input projection; with
    ``warm_start`` its transformer layers start from the text encoder's.
    """
    if decoder_ckpt.stage != "tts" or decoder_ckpt.lineage != ["tts"]:
        raise ValueError(f"encoder pretraining needs a stage 'tts' checkpoint, got {decoder_ckpt.stage!r} "
                         f"with lineage {decoder_ckpt.lineage}")
    pairs = tts_corpus if isinstance(tts_corpus, PairSet) else autoencoder_pairs(tts_corpus)
    if pairs.kind == "tts":
        pairs = PairSet(pairs.targets, pairs.targets, pairs.ids, "vc")
    model = VTN(decoder_ckpt.config, "vc", train_cfg.seed)
    if warm_start:
        model.load_params(decoder_ckpt.params, allow_missing_input=True)
    else:
        fresh = model.state_dict()
        model.load_params({k: (v if k.startswith("encoder.") else decoder_ckpt.params[k])
                           for k, v in fresh.items()})
    trainable = [k for k in model.named_parameters() if k.startswith("encoder.")]
    result = train(model, pairs, loss_cfg, train_cfg, trainable=trainable, val_pairs=val, log_to=log_to)
    ckpt = Checkpoint.from_model(model, "encoder-pretrain", result.state.step, ["tts", "encoder-pretrain"],
                                 {"seed": train_cfg.seed, "warm_start": warm_start})
    return StageOutput(ckpt, result, model)


def init_vc_model(pretrain_ckpt: Checkpoint | None, init: str, model_cfg: ModelConfig | None,
                  seed: int) -> tuple[VTN, list[str]]:
    """Build the stage-3 model for one of the three initialisation modes."""
    if init not in INIT_MODES:
        raise ValueError(f"unknown init mode {init!r}; expected one of {INIT_MODES}")
    if init == "scratch":
        cfg = model_cfg or (pretrain_ckpt.config if pretrain_ckpt else None)
        if cfg is None:
            raise ValueError("scratch training needs a model config")
        return VTN(cfg, "vc", seed), ["vc"]
    if pretrain_ckpt is None:
        raise ValueError(f"init mode {init!r} needs a pretrained checkpoint")
    lineage = tuple(pretrain_ckpt.lineage)
    if lineage not in VALID_LINEAGES:
        raise ValueError(f"refusing checkpoint with undocumented lineage {list(lineage)}")
    if init == "encoder+decoder" and VALID_LINEAGES[lineage] != "encoder+decoder":
        raise ValueError("encoder+decoder init needs an encoder-pretrain checkpoint")
    model = VTN(pretrain_ckpt.config, "vc", seed)
    fresh = model.state_dict()
    if init == "decoder":
        params = {k: (v if k.startswith("encoder.") else pretrain_ckpt.params[k]) for k, v in fresh.items()}
    else:
        params = pretrain_ckpt.params
    model.load_params(params)
    return model, list(pretrain_ckpt.lineage) + ["vc"]


def finetune_vc(vc_corpus: PairSet, pretrain_ckpt: Checkpoint | None, train_cfg: TrainConfig,
                loss_cfg: LossConfig = LossConfig(), init: str = "encoder+decoder",
                model_cfg: ModelConfig | None = None, val: PairSet | None = None,
                log_to: TrainLog | None = None, on_validate: Callable | None = None) -> StageOutput:
    """Stage 3: end-to-end VC training, every parameter trainable."""
    if vc_corpus.kind != "vc" or len(vc_corpus) == 0:
        raise ValueError("VC training needs a non-empty parallel (source mel, target mel) corpus")
    model, lineage = init_vc_model(pretrain_ckpt, init, model_cfg, train_cfg.seed)
    result = train(model, vc_corpus, loss_cfg, train_cfg, val_pairs=val, log_to=log_to,
                   on_validate=on_validate)
    ckpt = Checkpoint.from_model(model, "vc", result.state.step, lineage,
                                 {"seed": train_cfg.seed, "init": init, "best_step": result.state.best_step,
                                  "kept_best": train_cfg.keep_best})
    return StageOutput(ckpt, result, model)


def config_snapshot(**sections) -> dict:
    return {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in sections.items()}
