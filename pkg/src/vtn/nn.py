"""Transformer building blocks: attention, feed-forward, encoder/decoder
layers (pre-layernorm), scaled positional encoding, decoder prenet and the
convolutional postnet."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MaskSource, Tensor


class Module:
    """Parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.name == "param":
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def _param(data) -> Tensor:
    return ad.parameter(data, name="param")


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, (n_in, n_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(xavier(rng, n_in, n_out))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator):
        self.weight = _param(rng.normal(0.0, d ** -0.5, (vocab, d)))

    def __call__(self, ids) -> Tensor:
        return ad.embed(ids, self.weight)


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    """table[p, 2i] = sin(p / 10000^(2i/d)), table[p, 2i+1] = cos(...)."""
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * -(math.log(10000.0) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return table


class ScaledPositionalEncoding(Module):
    """x + alpha * table[:T], alpha a trainable scalar initialised to 1."""

    def __init__(self, d_model: int, max_len: int = 2048):
        self.alpha = _param(np.array(1.0))
        self._table = sinusoid_table(max_len, d_model)

    @property
    def table(self) -> np.ndarray:
        return self._table

    def __call__(self, x: Tensor, offset: int = 0) -> Tensor:
        t = x.shape[-2]
        if offset + t > self._table.shape[0]:
            raise ValueError(f"sequence of {offset + t} positions exceeds positional table of {self._table.shape[0]}")
        return x + ad.mul(Tensor(self._table[offset:offset + t]), self.alpha)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    Calls return ``(output, weights)``; weights are the post-softmax
    probabilities [B, H, T_q, T_k] as a Tensor so losses can use them.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self._d_k = d_model // heads
        self._dropout = dropout
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self._d_k).transpose(0, 2, 1, 3)

    def project_kv(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        return self.split(self.k(memory)), self.split(self.v(memory))

    def attend(self, query: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
               masks: MaskSource | None = None) -> tuple[Tensor, Tensor]:
        b, tq, _ = query.shape
        q = self.split(self.q(query))
        scores = ad.scale(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(self._d_k))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 3:
                mask = mask[:, None]
            try:
                np.broadcast_shapes(mask.shape, scores.shape)
            except ValueError:
                raise ad.ShapeError(f"attention mask {mask.shape} does not match scores {scores.shape}") from None
        weights = ad.softmax(scores, mask)
        attn = weights
        if masks is not None and self._dropout > 0:
            attn = ad.dropout(weights, masks.next_mask(weights.shape, self._dropout))
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, tq, self.heads * self._d_k)
        return self.out(ctx), weights

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None,
                 masks: MaskSource | None = None) -> tuple[Tensor, Tensor]:
        k, v = self.project_kv(memory)
        return self.attend(query, k, v, mask, masks)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.relu(self.w1(x)))


def _drop(x: Tensor, rate: float, masks: MaskSource | None) -> Tensor:
    if masks is None or rate <= 0:
        return x
    return ad.dropout(x, masks.next_mask(x.shape, rate))


class _Norm(Module):
    """LayerNorm that can be bypassed (test configurations)."""

    def __init__(self, d: int, enabled: bool):
        self.ln = LayerNorm(d) if enabled else None

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(x) if self.ln is not None else x


class EncoderLayer(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0, layernorm: bool = True):
        self.norm1 = _Norm(d_model, layernorm)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm2 = _Norm(d_model, layernorm)
        self.ff = FeedForward(d_model, d_ff, rng)
        self._dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None, masks: MaskSource | None = None):
        h = self.norm1(x)
        a, w = self.self_attn(h, h, mask, masks)
        x = x + _drop(a, self._dropout, masks)
        x = x + _drop(self.ff(self.norm2(x)), self._dropout, masks)
        return x, w


class DecoderLayer(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0, layernorm: bool = True):
        self.norm1 = _Norm(d_model, layernorm)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm2 = _Norm(d_model, layernorm)
        self.src_attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm3 = _Norm(d_model, layernorm)
        self.ff = FeedForward(d_model, d_ff, rng)
        self._dropout = dropout

    def __call__(self, x: Tensor, self_mask, memory_kv: tuple[Tensor, Tensor], src_mask,
                 masks: MaskSource | None = None):
        h = self.norm1(x)
        a, self_w = self.self_attn(h, h, self_mask, masks)
        x = x + _drop(a, self._dropout, masks)
        a, src_w = self.src_attn.attend(self.norm2(x), *memory_kv, src_mask, masks)
        x = x + _drop(a, self._dropout, masks)
        x = x + _drop(self.ff(self.norm3(x)), self._dropout, masks)
        return x, self_w, src_w

    def step(self, x: Tensor, cache: dict, memory_kv: tuple[Tensor, Tensor], src_mask):
        """Advance one position using cached self-attention keys/values.

        ``x`` is [B, 1, d]; ``cache`` holds the per-head K/V of all earlier
        positions and is extended in place.
        """
        h = self.norm1(x)
        k_new, v_new = self.self_attn.project_kv(h)
        if "k" in cache:
            cache["k"] = ad.concat([cache["k"], k_new], axis=2)
            cache["v"] = ad.concat([cache["v"], v_new], axis=2)
        else:
            cache["k"], cache["v"] = k_new, v_new
        a, self_w = self.self_attn.attend(h, cache["k"], cache["v"])
        x = x + a
        a, src_w = self.src_attn.attend(self.norm2(x), *memory_kv, src_mask)
        x = x + a
        x = x + self.ff(self.norm3(x))
        return x, self_w, src_w


class Prenet(Module):
    """Two relu layers with dropout that stays on at inference.

    ``keep_masks`` are the two rescaled keep masks, shaped like each layer's
    output; None means no dropout (deterministic affine-relu path).
    """

    def __init__(self, n_in: int, units: int, rng: np.random.Generator, rate: float = 0.5):
        self.fc1 = Linear(n_in, units, rng)
        self.fc2 = Linear(units, units, rng)
        self.rate = rate
        self.units = units

    def __call__(self, x: Tensor, keep_masks=None) -> Tensor:
        m1, m2 = keep_masks if keep_masks is not None else (None, None)
        h = ad.dropout(ad.relu(self.fc1(x)), m1)
        return ad.dropout(ad.relu(self.fc2(h)), m2)


def prenet_masks(source: MaskSource, key: tuple[int, ...], length: int, units: int,
                 rate: float) -> tuple[np.ndarray, np.ndarray] | None:
    """Per-position prenet keep masks for one utterance.

    Row ``p`` depends only on (source, key, layer, p): generating a longer
    sequence extends, never changes, the earlier rows.
    """
    if rate <= 0:
        return None
    return tuple(source.keep_mask((length, units), rate, *key, layer) for layer in (0, 1))


class Postnet(Module):
    """Five same-padded conv1d layers, tanh after the first four; returns a residual."""

    def __init__(self, n_mels: int, channels: int, rng: np.random.Generator, kernel: int = 5,
                 layers: int = 5):
        dims = [n_mels] + [channels] * (layers - 1) + [n_mels]
        self.convs = [_Conv(dims[i], dims[i + 1], kernel, rng) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] < 1:
            raise ValueError("postnet needs at least one frame")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ad.tanh(x)
        return x


class _Conv(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator):
        bound = math.sqrt(6.0 / (kernel * (n_in + n_out)))
        self.weight = _param(rng.uniform(-bound, bound, (kernel, n_in, n_out)))
        self.bias = _param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight) + self.bias


@dataclass
class AttentionWeights:
    """Per-layer attention probabilities, each [B, heads, T_out, T_in]."""

    layers: list[np.ndarray]

    def as_array(self) -> np.ndarray:
        return np.stack(self.layers)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def length_mask(lengths, t: int) -> np.ndarray:
    """[B, t] boolean, True on valid positions."""
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]
