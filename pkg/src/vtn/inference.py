"""Autoregressive conversion and synthesis.

Decoding encodes once, then produces one stacked step (r_d frames) at a
time, feeding each prediction back through the prenet.  Self-attention
keys/values of earlier steps are cached per layer, and the postnet runs
once over the finished coarse sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Checkpoint, VTN, stack_frames, unstack_frames
from .nn import AttentionWeights, causal_mask


@dataclass(frozen=True)
class DecodeOptions:
    threshold: float = 0.5
    max_length_ratio: float = 3.0
    symbol_frames: float = 10.0
    min_frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"stop threshold must lie in (0, 1), got {self.threshold}")
        if self.max_length_ratio < 1.0:
            raise ValueError(f"max_length_ratio must be >= 1, got {self.max_length_ratio}")
        if self.symbol_frames <= 0:
            raise ValueError("symbol_frames must be > 0")


@dataclass
class DecodeResult:
    mel: np.ndarray            # refined output [T, n_mels]
    coarse: np.ndarray         # decoder output before the postnet
    stop_logits: np.ndarray    # [S]
    attention: AttentionWeights  # source attention, per layer [1, H, S, N]
    self_attention: AttentionWeights  # per layer [1, H, S, S] (causal)
    stop_step: int             # number of stacked steps decoded
    truncated: bool

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


def _model_for(model, mode: str) -> VTN:
    if isinstance(model, Checkpoint):
        want = {"vc": ("vc",), "tts": ("tts",)}[mode]
        if model.stage not in want:
            raise ValueError(f"{mode} decoding needs a stage {want[0]!r} checkpoint, got {model.stage!r}")
        return model.build_model(mode)
    if model.mode != mode:
        raise ValueError(f"{mode} decoding called on a {model.mode}-mode model")
    return model


def _stop_prob(logit: float) -> float:
    return 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))


def decode(model: VTN, memory: Tensor, max_steps: int, opts: DecodeOptions,
           forced: np.ndarray | None = None, fixed_steps: int | None = None) -> DecodeResult:
    """Cached greedy decoding from an encoded memory [1, N, d].

    ``forced`` (stacked targets [S, r_d*n_mels]) overwrites each prediction
    before it is fed back, reproducing teacher forcing through the loop.
    ``fixed_steps`` disables the stop test and decodes exactly that many steps.
    """
    cfg = model.config
    dec = model.decoder
    min_steps = max(1, -(-(opts.min_frames or cfg.r_d) // cfg.r_d))
    limit = fixed_steps if fixed_steps is not None else max_steps
    keep = model.inference_prenet_masks(opts.seed, limit)
    with ad.no_grad():
        kv = dec.memory_kv(memory)
        caches = [dict() for _ in dec.layers]
        prev = np.zeros((1, 1, cfg.r_d * cfg.n_mels))
        feats, logits = [], []
        src_rows = [[] for _ in dec.layers]
        self_rows = [[] for _ in dec.layers]
        truncated = False
        for i in range(limit):
            step_keep = None if keep is None else tuple(m[i][None, None, :] for m in keep)
            x = dec.embed_inputs(prev, step_keep, offset=i)
            for li, layer in enumerate(dec.layers):
                x, sw, cw = layer.step(x, caches[li], kv[li], None)
                src_rows[li].append(cw.data[:, :, 0])
                self_rows[li].append(sw.data[:, :, 0])
            feat, stop = dec.outputs(x)
            feats.append(feat.data[0, 0])
            logit = float(stop.data[0, 0, 0])
            logits.append(logit)
            if fixed_steps is None and i + 1 >= min_steps and _stop_prob(logit) > opts.threshold:
                break
            if forced is not None and i < len(forced):
                prev = forced[i][None, None, :]
            else:
                prev = feat.data
        else:
            truncated = fixed_steps is None
        return _finish(model, feats, logits, src_rows, self_rows, truncated)


def _finish(model: VTN, feats, logits, src_rows, self_rows, truncated: bool) -> DecodeResult:
    cfg = model.config
    s = len(feats)
    coarse = unstack_frames(np.stack(feats)[None], cfg.r_d)[0]
    with ad.no_grad():
        fine = coarse + model.postnet(Tensor(coarse[None])).data[0]
    src = [np.stack(rows, axis=2) for rows in src_rows]
    self_full = []
    for rows in self_rows:
        full = np.zeros(rows[0].shape[:2] + (s, s))
        for i, r in enumerate(rows):
            full[:, :, i, :r.shape[-1]] = r
        self_full.append(full)
    return DecodeResult(fine, coarse, np.array(logits), AttentionWeights(src), AttentionWeights(self_full),
                        s, truncated)


def decode_recompute(model: VTN, memory: Tensor, steps: int, opts: DecodeOptions,
                     forced: np.ndarray | None = None) -> DecodeResult:
    """Reference decoder: re-runs the whole prefix every step (no cache)."""
    cfg = model.config
    dec = model.decoder
    keep = model.inference_prenet_masks(opts.seed, steps)
    with ad.no_grad():
        kv = dec.memory_kv(memory)
        inputs = [np.zeros(cfg.r_d * cfg.n_mels)]
        feats, logits = [], []
        src_rows = [[] for _ in dec.layers]
        self_rows = [[] for _ in dec.layers]
        for i in range(steps):
            n = i + 1
            step_keep = None if keep is None else tuple(m[:n][None] for m in keep)
            x = dec.embed_inputs(np.stack(inputs)[None], step_keep)
            mask = causal_mask(n)[None]
            for li, layer in enumerate(dec.layers):
                x, sw, cw = layer(x, mask, kv[li], None)
                src_rows[li].append(cw.data[:, :, -1])
                self_rows[li].append(sw.data[:, :, -1])
            feat, stop = dec.outputs(x)
            feats.append(feat.data[0, -1])
            logits.append(float(stop.data[0, -1, 0]))
            nxt = forced[i] if forced is not None and i < len(forced) else feat.data[0, -1]
            inputs.append(nxt)
        return _finish(model, feats, logits, src_rows, self_rows, False)


def _encode_source(model: VTN, source_mel) -> Tensor:
    mel = np.asarray(source_mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError(f"source mel must be a non-empty [T, n_mels] array, got {mel.shape}")
    with ad.no_grad():
        return model.encode_vc(mel)


def _encode_symbols(model: VTN, symbols) -> Tensor:
    with ad.no_grad():
        return model.encode_tts(np.asarray(symbols, dtype=np.int64))


def vc_max_steps(model: VTN, source_frames: int, opts: DecodeOptions) -> int:
    return max(1, math.ceil(opts.max_length_ratio * source_frames / model.config.r_d))


def tts_max_steps(model: VTN, n_symbols: int, opts: DecodeOptions) -> int:
    return max(1, math.ceil(opts.symbol_frames * n_symbols / model.config.r_d))


def convert(model, source_mel, opts: DecodeOptions = DecodeOptions()) -> DecodeResult:
    """Convert a source-speaker mel [T, n_mels] with a VC model or checkpoint."""
    model = _model_for(model, "vc")
    memory = _encode_source(model, source_mel)
    return decode(model, memory, vc_max_steps(model, len(source_mel), opts), opts)


def synthesize_tts(model, symbols, opts: DecodeOptions = DecodeOptions()) -> DecodeResult:
    """Synthesize a mel from symbol ids with a TTS model or checkpoint."""
    model = _model_for(model, "tts")
    if len(symbols) == 0:
        raise ValueError("symbol sequence must be non-empty")
    memory = _encode_symbols(model, symbols)
    return decode(model, memory, tts_max_steps(model, len(symbols), opts), opts)


def _encode_any(model: VTN, source):
    if model.mode == "tts":
        if len(source) == 0:
            raise ValueError("symbol sequence must be non-empty")
        return _encode_symbols(model, source), tts_max_steps(model, len(source), DecodeOptions())
    return _encode_source(model, source), vc_max_steps(model, len(source), DecodeOptions())


def incremental_equivalence_check(model, source, opts: DecodeOptions = DecodeOptions(),
                                  steps: int | None = None) -> float:
    """Max abs deviation between cached decoding and full recomputation.

    Both decoders feed back their own predictions; the comparison covers
    coarse frames, stop logits, refined output and every attention row.
    """
    if isinstance(model, Checkpoint):
        model = model.build_model()
    memory, max_steps = _encode_any(model, source)
    if steps is None:
        steps = decode(model, memory, max_steps, opts).stop_step
    cached = decode(model, memory, max_steps, opts, fixed_steps=steps)
    full = decode_recompute(model, memory, steps, opts)
    devs = [np.abs(cached.coarse - full.coarse).max(), np.abs(cached.mel - full.mel).max(),
            np.abs(cached.stop_logits - full.stop_logits).max()]
    for a, b in zip(cached.attention.layers + cached.self_attention.layers,
                    full.attention.layers + full.self_attention.layers):
        devs.append(np.abs(a - b).max())
    return float(max(devs))


def teacher_forced_through_loop(model: VTN, source, target: np.ndarray, opts: DecodeOptions = DecodeOptions()):
    """Run the cached loop with predictions overwritten by ``target``.

    Returns (loop result, teacher-forced DecoderOutput) computed with the
    same prenet masks, for exact loop-machinery comparison.
    """
    cfg = model.config
    target = np.asarray(target, dtype=np.float64)
    memory, _ = _encode_any(model, source)
    stacked = stack_frames(target, cfg.r_d)
    s = stacked.shape[0]
    loop = decode(model, memory, s, opts, forced=stacked, fixed_steps=s)
    keep = model.inference_prenet_masks(opts.seed, s)
    keep = None if keep is None else tuple(m[None] for m in keep)
    padded = unstack_frames(stacked[None], cfg.r_d)
    with ad.no_grad():
        ref = model.decode_teacher_forced(memory, [memory.shape[1]], padded, [padded.shape[1]], None, keep)
    return loop, ref


def free_running_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean |pred - target| over the target's frames.

    A short prediction is padded by repeating its last frame; a long one
    is cut to the target length.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    t = target.shape[0]
    if pred.shape[0] < t:
        pred = np.concatenate([pred, np.repeat(pred[-1:], t - pred.shape[0], axis=0)])
    return float(np.abs(pred[:t] - target).mean())
