"""Waveform <-> feature transforms.

STFT with reflection center-padding, Slaney-style mel filterbank, natural-log
mel spectrograms, Griffin-Lim phase reconstruction, DCT mel-cepstra on a 5 ms
grid, energy-based silence trimming, plus the WAV and feature-cache file
formats.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import wave
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

MEL_FLOOR = 1e-10
SAMPLE_RATE = 16000


class SilentUtteranceWarning(UserWarning):
    pass


class StaleCacheError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 80.0
    fmax: float = 7600.0
    mcep_order: int = 24
    mcep_shift_ms: float = 5.0
    trim_db: float = -40.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        _check_pow2(self.n_fft)
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.fmax > self.sample_rate / 2:
            raise ValueError(f"fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2}")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError("need 0 <= fmin < fmax")
        if self.mcep_order + 1 > self.n_mels:
            raise ValueError("mcep_order + 1 must not exceed n_mels")

    def digest(self) -> str:
        """Hash of every field that changes extracted mel features."""
        keys = ("sample_rate", "n_fft", "hop", "n_mels", "fmin", "fmax")
        blob = json.dumps({k: asdict(self)[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def frame_shift_ms(self) -> float:
        return 1000.0 * self.hop / self.sample_rate


def _check_pow2(n: int) -> None:
    if n < 2 or n & (n - 1):
        raise ValueError(f"n_fft must be a power of two, got {n}")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


# ----------------------------------------------------------------------- STFT

def frame_signal(y: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n = 1 + (len(y) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n)[:, None]
    return y[idx]


def stft(samples, n_fft: int = 1024, hop: int = 256, center: bool = True) -> np.ndarray:
    """Complex spectrogram [T, n_fft/2 + 1], T = len // hop + 1 when centered."""
    _check_pow2(n_fft)
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 1 or len(y) < 1:
        raise ValueError("stft needs a non-empty 1-D signal")
    if not np.all(np.isfinite(y)):
        raise ValueError("stft: non-finite samples")
    if center:
        y = np.pad(y, n_fft // 2, mode="reflect" if len(y) > 1 else "edge")
    if len(y) < n_fft:
        raise ValueError(f"signal of {len(y)} samples shorter than n_fft={n_fft}")
    frames = frame_signal(y, n_fft, hop) * hann(n_fft)
    return np.fft.rfft(frames, axis=-1)


def istft(spec: np.ndarray, n_fft: int = 1024, hop: int = 256, center: bool = True,
          length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`."""
    _check_pow2(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * hann(n_fft)
    n = spec.shape[0]
    total = n_fft + hop * (n - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    w2 = hann(n_fft) ** 2
    for i in range(n):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += w2
    nz = norm > 1e-11
    y[nz] /= norm[nz]
    y[~nz] = 0.0
    if center:
        y = y[n_fft // 2:]
        if length is None:
            length = len(y) - n_fft // 2
    if length is not None:
        y = y[:length] if len(y) >= length else np.pad(y, (0, length - len(y)))
    return y


# ------------------------------------------------------------------------ mel

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def _mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    if fmax > sr / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower = (fft_freqs[None, :] - edges[:-2, None]) / np.diff(edges)[:-1, None]
    upper = (edges[2:, None] - fft_freqs[None, :]) / np.diff(edges)[1:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = 1024, n_mels: int = 80,
                   fmin: float = 80.0, fmax: float = 7600.0) -> np.ndarray:
    """Triangular, area-normalised filters [n_mels, n_fft/2 + 1]."""
    _check_pow2(n_fft)
    return _mel_filterbank(int(sr), int(n_fft), int(n_mels), float(fmin), float(fmax))


@lru_cache(maxsize=16)
def _pinv(sr, n_fft, n_mels, fmin, fmax) -> np.ndarray:
    p = np.linalg.pinv(_mel_filterbank(sr, n_fft, n_mels, fmin, fmax))
    p.setflags(write=False)
    return p


def logmel(spec: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """ln(max(mel-filtered magnitude, 1e-10)), shape [T, n_mels]."""
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mag = np.abs(spec)
    if mag.shape[-1] != fb.shape[1]:
        raise ValueError(f"spectrogram has {mag.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return np.log(np.maximum(mag @ fb.T, MEL_FLOOR))


def wav_to_logmel(samples, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return logmel(stft(samples, cfg.n_fft, cfg.hop), cfg)


def mel_to_magnitude(mel: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Pseudo-inverse of the filterbank applied to exp(mel), clamped at 0."""
    p = _pinv(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return np.maximum(np.exp(np.asarray(mel)) @ p.T, 0.0)


# ---------------------------------------------------------------- Griffin-Lim

_BIN_WEIGHTS: dict[int, np.ndarray] = {}


def _full_spectrum_weights(n_fft: int) -> np.ndarray:
    if n_fft not in _BIN_WEIGHTS:
        w = np.full(n_fft // 2 + 1, 2.0)
        w[0] = w[-1] = 1.0
        _BIN_WEIGHTS[n_fft] = w
    return _BIN_WEIGHTS[n_fft]


def inconsistency(spec_mag: np.ndarray, target_mag: np.ndarray, n_fft: int) -> float:
    """Frobenius distance between magnitudes over the full (two-sided) spectrum."""
    d = (spec_mag - target_mag) ** 2 * _full_spectrum_weights(n_fft)
    return float(np.sqrt(d.sum()))


def griffin_lim(mel: np.ndarray, iters: int = 60, cfg: FeatureConfig = FeatureConfig(),
                seed: int = 0, history: list | None = None) -> np.ndarray:
    """Reconstruct a waveform whose STFT magnitude approximates ``mel``.

    Alternating projections in the uncentred frame domain, so every
    iteration is an exact pair of projections and the magnitude
    inconsistency never increases.  Per-iteration inconsistencies are
    appended to ``history`` when given.
    """
    if iters < 1:
        raise ValueError("griffin_lim needs iters >= 1")
    n_fft, hop = cfg.n_fft, cfg.hop
    target = mel_to_magnitude(mel, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    spec = target * phase
    for _ in range(iters):
        y = istft(spec, n_fft, hop, center=False)
        rebuilt = stft(y, n_fft, hop, center=False)
        mag = np.abs(rebuilt)
        if history is not None:
            history.append(inconsistency(mag, target, n_fft))
        spec = target * np.exp(1j * np.angle(rebuilt))
    y = istft(spec, n_fft, hop, center=False)
    pad = n_fft // 2
    out = y[pad:pad + hop * (target.shape[0] - 1)]
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------- mel cepstra

def cepstrum_frames(mel: np.ndarray, order: int = 24) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel row, first ``order + 1`` terms."""
    mel = np.asarray(mel, dtype=np.float64)
    if order + 1 > mel.shape[-1]:
        raise ValueError(f"order {order} + 1 exceeds {mel.shape[-1]} mel bins")
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel_cepstrum: non-finite mel entries")
    return scipy.fft.dct(mel, type=2, norm="ortho", axis=-1)[..., : order + 1]


def inverse_cepstrum(cep: np.ndarray, n_mels: int = 80) -> np.ndarray:
    full = np.zeros(cep.shape[:-1] + (n_mels,))
    full[..., : cep.shape[-1]] = cep
    return scipy.fft.idct(full, type=2, norm="ortho", axis=-1)


def resample_frames(frames: np.ndarray, src_shift_ms: float, dst_shift_ms: float) -> np.ndarray:
    """Linear interpolation of each column onto a new frame grid."""
    t = frames.shape[0]
    if t == 1:
        return frames.copy()
    src = np.arange(t) * src_shift_ms
    n_out = int(np.floor(src[-1] / dst_shift_ms + 1e-9)) + 1
    dst = np.arange(n_out) * dst_shift_ms
    return np.stack([np.interp(dst, src, frames[:, j]) for j in range(frames.shape[1])], axis=1)


def mel_cepstrum(mel: np.ndarray, order: int = 24, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Mel-cepstra [T', order + 1] on the ``cfg.mcep_shift_ms`` grid."""
    cep = cepstrum_frames(mel, order)
    return resample_frames(cep, cfg.frame_shift_ms, cfg.mcep_shift_ms)


# -------------------------------------------------------------------- silence

def frame_energy(mel: np.ndarray) -> np.ndarray:
    return np.asarray(mel).mean(axis=-1)


def trim_silence(mel: np.ndarray, threshold_db: float = -40.0) -> tuple[int, int]:
    """Frame range [start, stop) with leading/trailing silence removed.

    A frame is silent when its mean log-mel is more than ``-threshold_db``
    (amplitude dB) below the loudest frame, or sits at the mel floor.
    All-silent input yields an empty range and a SilentUtteranceWarning.
    """
    e = frame_energy(mel)
    drop = -threshold_db / 20.0 * np.log(10.0)
    voiced = (e >= e.max() - drop) & (e > np.log(MEL_FLOOR) + 1e-6)
    idx = np.flatnonzero(voiced)
    if idx.size == 0:
        warnings.warn("utterance is entirely silent", SilentUtteranceWarning)
        return 0, 0
    return int(idx[0]), int(idx[-1]) + 1


# ----------------------------------------------------------------- file I/O

def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """16-bit mono PCM -> float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != expected_rate:
            raise ValueError(f"{path}: sample rate {w.getframerate()} Hz, only {expected_rate} Hz is supported")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    y = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(y * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


FEAT_MAGIC = b"VTNFEAT\x00"
FEAT_VERSION = 1


def write_matrix(path, array: np.ndarray, digest: str = "") -> None:
    """Binary matrix file: magic, version, digest, ndim, shape, f64 LE data."""
    arr = np.asarray(array, dtype="<f8", order="C")
    tag = digest.encode("ascii")
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<II", FEAT_VERSION, len(tag)))
        f.write(tag)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_matrix(path, expected_digest: str | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, tlen = struct.unpack_from("<II", data, 8)
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    pos = 16
    digest = data[pos:pos + tlen].decode("ascii")
    pos += tlen
    (ndim,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    if expected_digest is not None and digest != expected_digest:
        raise StaleCacheError(f"{path}: cached features were extracted with a different feature "
                              f"configuration; delete the cache and re-extract")
    n = int(np.prod(shape)) if ndim else 1
    if len(data) - pos != 8 * n:
        raise ValueError(f"{path}: truncated or oversized payload")
    return np.frombuffer(data, dtype="<f8", offset=pos, count=n).reshape(shape).astype(np.float64)


def matrix_digest(path) -> str:
    data = Path(path).read_bytes()
    (tlen,) = struct.unpack_from("<I", data, 12)
    return data[16:16 + tlen].decode("ascii")
