"""Objective evaluation: silence trimming, DTW alignment, mel-cepstral
distortion and attention diagonality."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import FeatureConfig, mel_cepstrum, trim_silence
from .nn import AttentionWeights

MCD_CONST = 10.0 / math.log(10.0)
REPORT_VERSION = 1


def _frame_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between all frame pairs over coefficients 1..D."""
    d = a[:, None, 1:] - b[None, :, 1:]
    return np.sqrt((d * d).sum(-1))


def dtw_align(a: np.ndarray, b: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost monotone path with steps (1,0), (0,1), (1,1).

    Ties are broken in favour of the diagonal step.  Returns (path, cost),
    cost being the summed frame distance along the path.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("dtw_align needs two non-empty [T, D] sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"coefficient count mismatch: {a.shape[1]} vs {b.shape[1]}")
    dist = _frame_dist(a, b)
    n, m = dist.shape
    acc = np.full((n, m), np.inf)
    back = np.zeros((n, m), dtype=np.int8)  # 0 diag, 1 up (i-1), 2 left (j-1)
    acc[0, 0] = dist[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, move = np.inf, 0
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best, move = acc[i - 1, j], 1
            if j > 0 and acc[i, j - 1] < best:
                best, move = acc[i, j - 1], 2
            acc[i, j] = best + dist[i, j]
            back[i, j] = move
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return path, float(acc[-1, -1])


def check_path(path, len_a: int, len_b: int) -> None:
    if not path or path[0] != (0, 0) or path[-1] != (len_a - 1, len_b - 1):
        raise ValueError("alignment path must run from (0, 0) to the last frame pair")
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            raise ValueError(f"illegal alignment step {(i0, j0)} -> {(i1, j1)}")


def mcd(a: np.ndarray, b: np.ndarray, path) -> float:
    """Mean over path pairs of (10/ln10) * sqrt(2 * sum_{d>=1} (a_d - b_d)^2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_path(path, len(a), len(b))
    idx = np.asarray(path)
    diff = a[idx[:, 0], 1:] - b[idx[:, 1], 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * (diff * diff).sum(-1))))


def attention_diagonality(weights) -> float:
    """1 - mean distance of attention mass from the line n/N = t/T.

    Every [N, T] matrix contributes ``1 - mean_n sum_t A[n, t] |n/N - t/T|``;
    the result averages matrices over layers, heads and batch rows.
    """
    layers = weights.layers if isinstance(weights, AttentionWeights) else list(weights)
    if not layers:
        raise ValueError("no attention matrices given")
    scores = []
    for w in layers:
        w = np.asarray(w, dtype=np.float64)
        mats = w.reshape((-1,) + w.shape[-2:])
        n, t = mats.shape[-2:]
        dist = np.abs(np.arange(n)[:, None] / n - np.arange(t)[None, :] / t)
        scores.extend(1.0 - (mats * dist).sum(-1).mean(-1))
    return float(np.mean(scores))


@dataclass
class UtteranceScore:
    id: str
    mcd: float
    frames_converted: int
    frames_reference: int
    trimmed_converted: tuple[int, int]
    trimmed_reference: tuple[int, int]
    path_length: int
    diagonality: float | None = None


@dataclass
class EvalReport:
    utterances: list[UtteranceScore] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([u.mcd for u in self.utterances])) if self.utterances else math.nan

    @property
    def stdev(self) -> float:
        vals = [u.mcd for u in self.utterances]
        return statistics.pstdev(vals) if vals else math.nan

    def table(self) -> str:
        lines = [f"# MCD report v{REPORT_VERSION}: mean over DTW path of (10/ln10)*sqrt(2*sum_d (a_d-b_d)^2), d=1..24",
                 f"{'utterance':<16} {'mcd_db':>9} {'conv':>6} {'ref':>6} {'path':>6} {'diag':>6}"]
        for u in self.utterances:
            diag = "-" if u.diagonality is None else f"{u.diagonality:.3f}"
            lines.append(f"{u.id:<16} {u.mcd:9.4f} {u.frames_converted:6d} {u.frames_reference:6d} "
                         f"{u.path_length:6d} {diag:>6}")
        lines.append(f"{'mean':<16} {self.mean:9.4f}")
        lines.append(f"{'stdev':<16} {self.stdev:9.4f}")
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        out = [{"type": "header", "version": REPORT_VERSION, "metric": "mcd_db", "coefficients": "1-24"}]
        out += [{"type": "utterance", **asdict(u)} for u in self.utterances]
        out.append({"type": "summary", "mean": self.mean, "stdev": self.stdev, "count": len(self.utterances)})
        return out

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.table(), encoding="utf-8")
        with open(out_dir / "report.jsonl", "w", encoding="utf-8") as f:
            for rec in self.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def score_utterance(uid: str, converted_mel: np.ndarray, reference_mel: np.ndarray,
                    cfg: FeatureConfig = FeatureConfig(), attention=None) -> UtteranceScore:
    """Trim silence, convert to mel-cepstra on the 5 ms grid, DTW, MCD."""
    tc = trim_silence(converted_mel, cfg.trim_db)
    tr = trim_silence(reference_mel, cfg.trim_db)
    conv = converted_mel[tc[0]:tc[1]] if tc[1] > tc[0] else converted_mel
    ref = reference_mel[tr[0]:tr[1]] if tr[1] > tr[0] else reference_mel
    a = mel_cepstrum(conv, cfg.mcep_order, cfg)
    b = mel_cepstrum(ref, cfg.mcep_order, cfg)
    path, _ = dtw_align(a, b)
    diag = attention_diagonality(attention) if attention is not None else None
    return UtteranceScore(uid, mcd(a, b, path), len(converted_mel), len(reference_mel), tc, tr, len(path), diag)


def evaluate_pairs(ids, converted, references, cfg: FeatureConfig = FeatureConfig(),
                   attentions=None) -> EvalReport:
    if not (len(ids) == len(converted) == len(references)):
        raise ValueError("ids, converted and reference sets differ in size")
    attentions = attentions or [None] * len(ids)
    return EvalReport([score_utterance(u, c, r, cfg, a)
                       for u, c, r, a in zip(ids, converted, references, attentions)])
