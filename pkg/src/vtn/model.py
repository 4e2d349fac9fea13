"""Voice Transformer Network and Transformer-TTS assembly.

Both modes share one decoder stack; they differ only in the encoder's input
layer: a symbol embedding (``tts``) or a linear projection of
reduction-stacked mel frames (``vc``).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MaskSource, Tensor
from .nn import (AttentionWeights, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear,
                 Module, Postnet, Prenet, ScaledPositionalEncoding, causal_mask, length_mask,
                 prenet_masks)

MODES = ("tts", "vc")
STAGES = ("tts", "encoder-pretrain", "vc")
INPUT_LAYER_PREFIXES = ("encoder.embed.", "encoder.input_proj.")


@dataclass
class ModelConfig:
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    r_e: int = 2
    r_d: int = 2
    n_mels: int = 80
    vocab_size: int = 32
    prenet_units: int = 64
    prenet_dropout: float = 0.5
    postnet_channels: int = 64
    postnet_layers: int = 5
    postnet_kernel: int = 5
    dropout: float = 0.0
    layernorm: bool = True
    max_len: int = 2048

    def __post_init__(self):
        if self.r_e < 1:
            raise ValueError(f"r_e must be >= 1, got {self.r_e}")
        if self.r_d < 1:
            raise ValueError(f"r_d must be >= 1, got {self.r_d}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if not 0.0 <= self.prenet_dropout < 1.0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.postnet_kernel % 2 == 0:
            raise ValueError("postnet_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------ frame stacking

def stack_frames(mel: np.ndarray, r: int) -> np.ndarray:
    """[..., T, D] -> [..., ceil(T/r), r*D]; the last group is zero-padded."""
    mel = np.asarray(mel, dtype=np.float64)
    if r < 1:
        raise ValueError(f"reduction factor must be >= 1, got {r}")
    t, d = mel.shape[-2], mel.shape[-1]
    if t == 0:
        raise ValueError("cannot stack an empty sequence")
    steps = -(-t // r)
    pad = steps * r - t
    if pad:
        widths = [(0, 0)] * (mel.ndim - 2) + [(0, pad), (0, 0)]
        mel = np.pad(mel, widths)
    return mel.reshape(mel.shape[:-2] + (steps, r * d))


def unstack_frames(stacked: np.ndarray, r: int, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stack_frames`; optionally truncate to ``length`` frames."""
    stacked = np.asarray(stacked)
    steps, rd = stacked.shape[-2], stacked.shape[-1]
    if rd % r:
        raise ValueError(f"feature width {rd} not divisible by r={r}")
    out = stacked.reshape(stacked.shape[:-2] + (steps * r, rd // r))
    return out if length is None else out[..., :length, :]


def stacked_length(t, r: int):
    return -(-np.asarray(t) // r)


def stop_labels(lengths, r_d: int, steps: int) -> np.ndarray:
    """1 at the stacked step holding each utterance's final frame."""
    lengths = np.asarray(lengths)
    labels = np.zeros((len(lengths), steps))
    labels[np.arange(len(lengths)), (lengths - 1) // r_d] = 1.0
    return labels


# -------------------------------------------------------------------- modules

class Encoder(Module):
    def __init__(self, cfg: ModelConfig, mode: str, input_rng: np.random.Generator,
                 rng: np.random.Generator):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self._mode = mode
        self._cfg = cfg
        if mode == "tts":
            self.embed = Embedding(cfg.vocab_size, cfg.d_model, input_rng)
        else:
            self.input_proj = Linear(cfg.r_e * cfg.n_mels, cfg.d_model, input_rng)
        self.pos = ScaledPositionalEncoding(cfg.d_model, cfg.max_len)
        self.layers = [EncoderLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.dropout, cfg.layernorm)
                       for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.d_model) if cfg.layernorm else None

    def embed_inputs(self, inputs, lengths) -> tuple[Tensor, np.ndarray]:
        cfg = self._cfg
        if self._mode == "tts":
            ids = np.asarray(inputs)
            if not np.issubdtype(ids.dtype, np.integer):
                raise TypeError("TTS-mode encoder expects integer symbol ids, got acoustic input")
            if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
                raise ValueError(f"symbol id out of vocabulary (size {cfg.vocab_size})")
            return self.embed(ids), np.asarray(lengths)
        x = np.asarray(inputs)
        if not np.issubdtype(x.dtype, np.floating) or x.ndim != 3 or x.shape[-1] != cfg.n_mels:
            raise TypeError(f"VC-mode encoder expects float mel [B, T, {cfg.n_mels}], got {x.dtype} {x.shape}")
        stacked = stack_frames(x, cfg.r_e)
        return self.input_proj(Tensor(stacked)), stacked_length(lengths, cfg.r_e)

    def __call__(self, inputs, lengths, masks: MaskSource | None = None):
        x, enc_lengths = self.embed_inputs(inputs, lengths)
        x = self.pos(x)
        valid = length_mask(enc_lengths, x.shape[1])
        mask = valid[:, None, :]
        weights = []
        for layer in self.layers:
            x, w = layer(x, mask, masks)
            weights.append(w)
        if self.norm is not None:
            x = self.norm(x)
        return x, enc_lengths, weights


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.prenet = Prenet(cfg.r_d * cfg.n_mels, cfg.prenet_units, rng, cfg.prenet_dropout)
        self.input_proj = Linear(cfg.prenet_units, cfg.d_model, rng)
        self.pos = ScaledPositionalEncoding(cfg.d_model, cfg.max_len)
        self.layers = [DecoderLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.dropout, cfg.layernorm)
                       for _ in range(cfg.dec_layers)]
        self.norm = LayerNorm(cfg.d_model) if cfg.layernorm else None
        self.feat_out = Linear(cfg.d_model, cfg.r_d * cfg.n_mels, rng)
        self.stop_out = Linear(cfg.d_model, 1, rng)

    def embed_inputs(self, stacked_in: np.ndarray, prenet_keep, offset: int = 0) -> Tensor:
        h = self.prenet(Tensor(stacked_in), prenet_keep)
        return self.pos(self.input_proj(h), offset)

    def memory_kv(self, memory: Tensor) -> list[tuple[Tensor, Tensor]]:
        return [layer.src_attn.project_kv(memory) for layer in self.layers]

    def outputs(self, z: Tensor) -> tuple[Tensor, Tensor]:
        if self.norm is not None:
            z = self.norm(z)
        return self.feat_out(z), self.stop_out(z)


@dataclass
class DecoderOutput:
    coarse: Tensor          # [B, T, n_mels]
    fine: Tensor            # [B, T, n_mels]
    stop_logits: Tensor     # [B, S]
    src_attn: list[Tensor]  # per layer [B, H, S, N]
    self_attn: list[Tensor]
    lengths: np.ndarray
    steps: np.ndarray
    enc_lengths: np.ndarray

    def attention(self) -> AttentionWeights:
        return AttentionWeights([w.data for w in self.src_attn])


class VTN(Module):
    """Transformer-TTS (``mode='tts'``) or VTN (``mode='vc'``)."""

    def __init__(self, cfg: ModelConfig, mode: str = "vc", seed: int = 0):
        self.config = cfg
        self.mode = mode
        input_seq, enc_seq, dec_seq, post_seq = np.random.SeedSequence(seed).spawn(4)
        self.encoder = Encoder(cfg, mode, np.random.default_rng(input_seq), np.random.default_rng(enc_seq))
        self.decoder = Decoder(cfg, np.random.default_rng(dec_seq))
        self.postnet = Postnet(cfg.n_mels, cfg.postnet_channels, np.random.default_rng(post_seq),
                               cfg.postnet_kernel, cfg.postnet_layers)

    # --- single-utterance conveniences
    def encode_vc(self, source_mel: np.ndarray, masks: MaskSource | None = None) -> Tensor:
        if self.mode != "vc":
            raise ValueError("encode_vc called on a TTS-mode model")
        mel = np.asarray(source_mel, dtype=np.float64)
        h, _, _ = self.encoder(mel[None], [mel.shape[0]], masks)
        return h

    def encode_tts(self, symbols, masks: MaskSource | None = None) -> Tensor:
        if self.mode != "tts":
            raise ValueError("encode_tts called on a VC-mode model")
        ids = np.asarray(symbols)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("symbol sequence must be a non-empty 1-D sequence")
        h, _, _ = self.encoder(ids[None], [ids.size], masks)
        return h

    def encode(self, inputs, lengths, masks: MaskSource | None = None):
        return self.encoder(inputs, lengths, masks)

    # --- teacher forcing
    def decode_teacher_forced(self, memory: Tensor, enc_lengths, targets: np.ndarray, lengths,
                              masks: MaskSource | None = None, prenet_keep=None) -> DecoderOutput:
        """Teacher-forced decoding of padded targets [B, T, n_mels].

        ``prenet_keep`` is the pair of prenet keep masks [B, S, units]; when
        omitted they are drawn from ``masks`` (or dropout is skipped if
        ``masks`` is None too).
        """
        cfg = self.config
        targets = np.asarray(targets, dtype=np.float64)
        lengths = np.asarray(lengths)
        enc_lengths = np.asarray(enc_lengths)
        if targets.ndim != 3 or targets.shape[0] != memory.shape[0] or len(lengths) != targets.shape[0]:
            raise ValueError(f"batch mismatch: memory {memory.shape}, targets {targets.shape}, "
                             f"{len(lengths)} lengths")
        b, t, _ = targets.shape
        stacked = stack_frames(targets, cfg.r_d)
        s = stacked.shape[1]
        dec_in = np.concatenate([np.zeros((b, 1, stacked.shape[2])), stacked[:, :-1]], axis=1)
        if prenet_keep is None and masks is not None:
            prenet_keep = self.training_prenet_masks(masks, b, s)
        x = self.decoder.embed_inputs(dec_in, prenet_keep)
        steps = stacked_length(lengths, cfg.r_d)
        step_valid = length_mask(steps, s)
        self_mask = causal_mask(s)[None] & step_valid[:, None, :]
        src_mask = length_mask(enc_lengths, memory.shape[1])[:, None, :]
        kv = self.decoder.memory_kv(memory)
        self_ws, src_ws = [], []
        for layer, layer_kv in zip(self.decoder.layers, kv):
            x, sw, cw = layer(x, self_mask, layer_kv, src_mask, masks)
            self_ws.append(sw)
            src_ws.append(cw)
        feat, stop = self.decoder.outputs(x)
        coarse = feat.reshape(b, s * cfg.r_d, cfg.n_mels)[:, :t]
        stop_logits = stop.reshape(b, s)
        frame_valid = length_mask(lengths, t)[:, :, None].astype(np.float64)
        fine = coarse + self.postnet(ad.mul(coarse, Tensor(np.broadcast_to(frame_valid, coarse.shape).copy())))
        return DecoderOutput(coarse, fine, stop_logits, src_ws, self_ws, lengths, steps, enc_lengths)

    def training_prenet_masks(self, masks: MaskSource, batch: int, steps: int):
        cfg = self.config
        if cfg.prenet_dropout <= 0:
            return None
        gen = masks.generator(0xD0, masks._calls)
        masks._calls += 1
        return tuple((gen.random((batch, steps, cfg.prenet_units)) >= cfg.prenet_dropout)
                     / (1.0 - cfg.prenet_dropout) for _ in range(2))

    def inference_prenet_masks(self, seed: int, length: int):
        cfg = self.config
        return prenet_masks(MaskSource(seed, stream=7), (), length, cfg.prenet_units, cfg.prenet_dropout)

    def forward(self, inputs, in_lengths, targets, lengths, masks: MaskSource | None = None,
                prenet_keep=None) -> DecoderOutput:
        memory, enc_lengths, _ = self.encoder(inputs, in_lengths, masks)
        return self.decode_teacher_forced(memory, enc_lengths, targets, lengths, masks, prenet_keep)

    # --- parameters
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_params(self, params: dict[str, np.ndarray], allow_missing_input: bool = False) -> list[str]:
        """Copy ``params`` into the model.

        Only input-layer keys (either mode's) may be missing or unused, and
        only when ``allow_missing_input``; any other mismatch raises.
        Returns the list of model keys left untouched.
        """
        own = self.named_parameters()
        untouched = []
        for key, p in own.items():
            if key not in params:
                if allow_missing_input and key.startswith(INPUT_LAYER_PREFIXES):
                    untouched.append(key)
                    continue
                raise KeyError(f"checkpoint lacks parameter {key!r}")
            value = np.asarray(params[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {key!r}: checkpoint {value.shape}, model {p.shape}")
        for key in params:
            if key not in own and not key.startswith(INPUT_LAYER_PREFIXES):
                raise KeyError(f"checkpoint parameter {key!r} has no counterpart in the model")
        for key, p in own.items():
            if key in params:
                p.data = np.array(params[key], dtype=np.float64)
        return untouched


def input_layer_keys(keys) -> list[str]:
    return [k for k in keys if k.startswith(INPUT_LAYER_PREFIXES)]


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"VTNCKPT\x00"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: str
    config: ModelConfig
    mode: str
    step: int = 0
    lineage: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.lineage or self.lineage[-1] != self.stage:
            raise ValueError(f"lineage {self.lineage} must end with stage {self.stage!r}")

    @classmethod
    def from_model(cls, model: VTN, stage: str, step: int = 0, lineage=None, meta=None) -> "Checkpoint":
        return cls(model.state_dict(), stage, model.config, model.mode, step,
                   list(lineage) if lineage else [stage], dict(meta or {}))

    def build_model(self, mode: str | None = None, seed: int = 0) -> VTN:
        mode = mode or self.mode
        model = VTN(self.config, mode, seed)
        model.load_params(self.params, allow_missing_input=(mode != self.mode))
        return model

    def header(self) -> str:
        return json.dumps({"stage": self.stage, "mode": self.mode, "step": self.step,
                           "lineage": self.lineage, "meta": self.meta,
                           "config": self.config.to_dict()}, sort_keys=True, separators=(",", ":"))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        header = self.header().encode("utf-8")
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.asarray(self.params[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:8]) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", view, 8)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * n
        if pos != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(params, header["stage"], ModelConfig.from_dict(header["config"]), header["mode"],
                   header["step"], header["lineage"], header["meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
