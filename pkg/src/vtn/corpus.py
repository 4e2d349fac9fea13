"""Corpora: a deterministic synthetic parallel-speaker generator that works
directly in log-mel space, WAV corpus ingestion with cached features,
line-delimited manifests and parallel-consistent splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import FeatureConfig, read_matrix, read_wav, wav_to_logmel, write_matrix

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "vtn-manifest"
MANIFEST_VERSION = 1
SILENCE_LEVEL = -8.0
SPEECH_FLOOR = -3.0


@dataclass
class Utterance:
    id: str
    symbols: list[int]
    speaker: str
    path: str | None = None
    frames: int = 0
    mel: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Manifest:
    entries: list[Utterance]
    meta: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        ids = [u.id for u in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest utterance ids must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.entries]

    def features(self, utt: Utterance, digest: str | None = None) -> np.ndarray:
        if utt.mel is not None:
            return utt.mel
        if utt.path is None:
            raise ValueError(f"utterance {utt.id} has neither features nor a feature path")
        path = Path(utt.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return read_matrix(path, digest)

    def load_all(self) -> list[np.ndarray]:
        digest = self.meta.get("feature_digest")
        return [self.features(u, digest) for u in self.entries]

    def subset(self, ids) -> "Manifest":
        keep = set(ids)
        return Manifest([u for u in self.entries if u.id in keep], dict(self.meta), self.root)

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, **self.meta},
                               sort_keys=True) + "\n")
            for u in self.entries:
                f.write(json.dumps({"id": u.id, "symbols": list(map(int, u.symbols)), "speaker": u.speaker,
                                    "path": u.path, "frames": int(u.frames)}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a manifest file")
        meta = {k: v for k, v in lines[0].items() if k not in ("format", "version")}
        entries = [Utterance(d["id"], list(d["symbols"]), d["speaker"], d["path"], d["frames"]) for d in lines[1:]]
        return cls(entries, meta, path.parent)


# ------------------------------------------------------------ synthetic speech

@dataclass
class Language:
    """Shared symbol inventory: spectral bumps and base durations per symbol."""

    alphabet_size: int
    n_mels: int
    centers: np.ndarray      # [A, K]
    widths: np.ndarray       # [A, K]
    amplitudes: np.ndarray   # [A, K]
    base_durations: np.ndarray  # [A]

    @classmethod
    def create(cls, alphabet_size: int = 12, n_mels: int = 80, seed: int = 0, bumps: int = 3,
               min_duration: int = 2, max_duration: int = 4) -> "Language":
        if alphabet_size < 2:
            raise ValueError("alphabet needs at least 2 symbols")
        rng = np.random.default_rng([seed, 0x1A])
        centers = np.sort(rng.uniform(4, n_mels - 5, (alphabet_size, bumps)), axis=1)
        widths = rng.uniform(1.5, 5.0, (alphabet_size, bumps))
        amps = rng.uniform(1.5, 4.0, (alphabet_size, bumps))
        durs = rng.integers(min_duration, max_duration + 1, alphabet_size)
        return cls(alphabet_size, n_mels, centers, widths, amps, durs)


@dataclass
class SyntheticSpeaker:
    id: str
    seed: int
    templates: np.ndarray        # [A, n_mels] log-mel profile per symbol
    base_durations: np.ndarray   # [A] frames
    formant_shift: float = 0.0
    duration_scale: float = 1.0
    jitter: float = 0.15
    noise: float = 0.05

    @classmethod
    def create(cls, id: str, seed: int, language: Language, formant_shift: float = 0.0,
               duration_scale: float = 1.0, jitter: float = 0.15, noise: float = 0.05,
               variation: float = 0.15) -> "SyntheticSpeaker":
        """Speaker-specific templates: shifted bumps, perturbed amplitudes, a spectral tilt."""
        rng = np.random.default_rng([seed, 0x5B])
        bins = np.arange(language.n_mels)[None, None, :]
        amps = language.amplitudes * np.exp(variation * rng.standard_normal(language.amplitudes.shape))
        centers = language.centers + formant_shift + variation * rng.standard_normal(language.centers.shape)
        bumps = amps[..., None] * np.exp(-0.5 * ((bins - centers[..., None]) / language.widths[..., None]) ** 2)
        tilt = rng.uniform(-0.5, 0.5) * np.linspace(-1, 1, language.n_mels)
        templates = SPEECH_FLOOR + bumps.sum(axis=1) + tilt[None, :]
        return cls(id, seed, templates, language.base_durations.copy(), formant_shift, duration_scale,
                   jitter, noise)

    def durations(self, symbols, utt_key: int) -> np.ndarray:
        """Frames per symbol; monotone non-decreasing in ``duration_scale``."""
        rng = np.random.default_rng([self.seed, utt_key, 0xD1])
        jit = np.exp(self.jitter * rng.standard_normal(len(symbols)))
        raw = self.base_durations[np.asarray(symbols)] * self.duration_scale * jit
        return np.maximum(2, np.floor(raw + 0.5).astype(int))

    def render(self, symbols, utt_key: int, silence_frames: int = 2) -> np.ndarray:
        durs = self.durations(symbols, utt_key)
        n_mels = self.templates.shape[1]
        rows = [np.full((silence_frames, n_mels), SILENCE_LEVEL)]
        for s, d in zip(symbols, durs):
            env = np.linspace(-0.3, 0.0, d)[:, None] if d > 2 else np.zeros((d, 1))
            rows.append(self.templates[s][None, :] + env)
        rows.append(np.full((silence_frames, n_mels), SILENCE_LEVEL))
        mel = np.concatenate(rows)
        rng = np.random.default_rng([self.seed, utt_key, 0x0E])
        return mel + self.noise * rng.standard_normal(mel.shape)


def symbol_sequences(n_utts: int, alphabet_size: int, length_range: tuple[int, int], seed: int) -> list[list[int]]:
    """Random symbol strings without immediate repeats."""
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad symbols-per-utterance range {length_range}")
    rng = np.random.default_rng([seed, 0x5E])
    out = []
    for _ in range(n_utts):
        n = int(rng.integers(lo, hi + 1))
        seq = [int(rng.integers(alphabet_size))]
        while len(seq) < n:
            s = int(rng.integers(alphabet_size - 1))
            seq.append(s if s < seq[-1] else s + 1)
        out.append(seq)
    return out


def generate_corpus(speakers: list[SyntheticSpeaker], n_utts: int, length_range=(4, 8), seed: int = 0,
                    out_dir=None, prefix: str = "utt") -> dict[str, Manifest]:
    """Render the same symbol strings for every speaker.

    Returns one manifest per speaker id, all sharing the utterance-id list.
    With ``out_dir`` the features are written as feature files and a
    ``<speaker>.jsonl`` manifest per speaker; otherwise they stay in memory.
    """
    ids = [s.id for s in speakers]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate speaker ids: {ids}")
    alphabet = speakers[0].templates.shape[0]
    seqs = symbol_sequences(n_utts, alphabet, length_range, seed)
    n_mels = speakers[0].templates.shape[1]
    digest = FeatureConfig(n_mels=n_mels, mcep_order=min(FeatureConfig.mcep_order, n_mels - 1)).digest()
    out_dir = Path(out_dir) if out_dir is not None else None
    manifests = {}
    for spk in speakers:
        entries = []
        for i, seq in enumerate(seqs):
            uid = f"{prefix}{i:05d}"
            mel = spk.render(seq, utt_key=seed * 100003 + i)
            path = None
            if out_dir is not None:
                rel = Path("feats") / spk.id / f"{uid}.feat"
                (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
                write_matrix(out_dir / rel, mel, digest)
                path = rel.as_posix()
            entries.append(Utterance(uid, seq, spk.id, path, mel.shape[0], None if out_dir else mel))
        meta = {"speaker": spk.id, "sample_rate": 16000, "feature_digest": digest, "synthetic": True,
                "alphabet_size": alphabet, "seed": seed}
        manifests[spk.id] = Manifest(entries, meta, out_dir)
        if out_dir is not None:
            manifests[spk.id].write(out_dir / f"{spk.id}.jsonl")
    return manifests


# ------------------------------------------------------------------ ingestion

def read_transcripts(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            uid, _, text = line.partition(" ") if "\t" not in line else line.partition("\t")
            out[uid.strip()] = text.strip()
    return out


def char_token_map(texts) -> dict[str, int]:
    return {c: i for i, c in enumerate(sorted({c for t in texts for c in t}))}


def ingest_wav_corpus(wav_dir, transcript_path, cache_dir, cfg: FeatureConfig = FeatureConfig(),
                      speaker: str | None = None, token_map: dict[str, int] | None = None) -> Manifest:
    """Extract (or reuse cached) log-mel features for every transcribed WAV.

    A cache written under a different feature configuration raises
    :class:`~vtn.dsp.StaleCacheError`.  WAVs without a transcript line are
    skipped with a warning.
    """
    wav_dir, cache_dir = Path(wav_dir), Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    texts = read_transcripts(transcript_path)
    token_map = token_map or char_token_map(texts.values())
    digest = cfg.digest()
    speaker = speaker or wav_dir.name
    entries = []
    for wav in sorted(wav_dir.glob("*.wav")):
        uid = wav.stem
        if uid not in texts:
            log.warning("no transcript for %s; skipped", uid)
            continue
        unknown = sorted({c for c in texts[uid] if c not in token_map})
        if unknown:
            log.warning("utterance %s has characters %s outside the token map; skipped", uid, unknown)
            continue
        cache = cache_dir / f"{uid}.feat"
        if cache.exists():
            mel = read_matrix(cache, digest)
        else:
            mel = wav_to_logmel(read_wav(wav, cfg.sample_rate), cfg)
            write_matrix(cache, mel, digest)
        entries.append(Utterance(uid, [token_map[c] for c in texts[uid]], speaker,
                                 str(cache.resolve()), mel.shape[0]))
    meta = {"speaker": speaker, "sample_rate": cfg.sample_rate, "feature_digest": digest,
            "token_map": token_map}
    return Manifest(entries, meta, cache_dir)


# --------------------------------------------------------------------- splits

def split(manifest: Manifest, n_train: int, n_val: int, n_eval: int, seed: int = 0):
    """Disjoint train/val/eval manifests.

    The permutation depends only on the sorted id set and the seed, so two
    speakers of a parallel corpus get identical splits.
    """
    ids = sorted(manifest.ids)
    if min(n_train, n_val, n_eval) < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_val + n_eval > len(ids):
        raise ValueError(f"split sizes {n_train}+{n_val}+{n_eval} exceed corpus of {len(ids)}")
    perm = np.random.default_rng([seed, 0x5711]).permutation(len(ids))
    chosen = [ids[i] for i in perm]
    parts = (chosen[:n_train], chosen[n_train:n_train + n_val],
             chosen[n_train + n_val:n_train + n_val + n_eval])
    return tuple(manifest.subset(p) for p in parts)


def check_parallel(a: Manifest, b: Manifest) -> None:
    if a.ids != b.ids:
        raise ValueError("corpora are not parallel: utterance-id lists differ")
