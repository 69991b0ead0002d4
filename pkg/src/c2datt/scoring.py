"""Trial scoring: segmentation, averaged cosine, AS-norm, EER and minDCF."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import AudioError, Waveform
from .training import wrap_pad

SEGMENT_SECONDS = 4.0
SEGMENT_HOP_SECONDS = 3.0
MIN_TAIL_SECONDS = 1.0


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    label: int          # 1 target, 0 nontarget
    enroll: str
    test: str


@dataclass
class ScoreSet:
    trials: list[Trial] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)
    normalized: list[float] = field(default_factory=list)

    def add(self, trial: Trial, raw: float, normalized: float | None = None) -> None:
        if not np.isfinite(raw) or (normalized is not None and not np.isfinite(normalized)):
            raise ScoringError(f"non-finite score for trial {trial}")
        self.trials.append(trial)
        self.raw.append(float(raw))
        self.normalized.append(float(raw if normalized is None else normalized))

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def scores(self, normalized: bool = True) -> np.ndarray:
        return np.array(self.normalized if normalized else self.raw, dtype=np.float64)


# ---------------------------------------------------------------------------
# segmentation and scoring
# ---------------------------------------------------------------------------

def segment_utterance(wav: Waveform, seconds: float = SEGMENT_SECONDS,
                      hop_seconds: float = SEGMENT_HOP_SECONDS,
                      min_tail_seconds: float = MIN_TAIL_SECONDS) -> list[Waveform]:
    """Fixed-length overlapping segments.

    Full segments start every ``hop_seconds``.  Audio left uncovered after
    the last full segment is kept as one more segment (starting one hop
    later, wrap-padded) when it lasts at least ``min_tail_seconds``.
    Utterances shorter than one segment give a single wrap-padded segment.
    """
    if len(wav) == 0:
        raise AudioError("cannot segment an empty waveform")
    sr = wav.sample_rate
    seg, hop = int(round(seconds * sr)), int(round(hop_seconds * sr))
    x = wav.samples
    if len(x) <= seg:
        return [Waveform(wrap_pad(x, seg), sr)]
    starts = list(range(0, len(x) - seg + 1, hop))
    out = [Waveform(x[s:s + seg], sr) for s in starts]
    covered = starts[-1] + seg
    if len(x) - covered >= int(round(min_tail_seconds * sr)):
        tail = x[starts[-1] + hop:]
        out.append(Waveform(wrap_pad(tail, seg), sr))
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ScoringError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: Sequence[np.ndarray]) -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ScoringError("cosine of a zero-norm vector is undefined")
    return m / norms


def trial_score(enroll_embs: Sequence[np.ndarray], test_embs: Sequence[np.ndarray]) -> float:
    """Mean cosine over every (enrollment segment, test segment) pair."""
    if len(enroll_embs) == 0 or len(test_embs) == 0:
        raise ScoringError("trial_score needs at least one embedding per side")
    return float((_unit_rows(enroll_embs) @ _unit_rows(test_embs).T).mean())


def cohort_scores(embs: Sequence[np.ndarray], cohort: np.ndarray) -> np.ndarray:
    """Averaged cosine of one utterance's segment embeddings against every cohort vector."""
    return (_unit_rows(embs) @ _unit_rows(cohort).T).mean(axis=0)


def top_k_stats(scores: np.ndarray, top_k: int) -> tuple[float, float]:
    """Mean and population std of the ``top_k`` highest scores (stable tie order)."""
    scores = np.asarray(scores, dtype=np.float64)
    if top_k < 1 or scores.size < top_k:
        raise ScoringError(f"cohort has {scores.size} scores, fewer than top_k={top_k}")
    order = np.argsort(-scores, kind="stable")[:top_k]
    top = scores[order]
    return float(top.mean()), float(top.std())


def as_norm(raw: float, enroll_cohort: np.ndarray, test_cohort: np.ndarray, top_k: int) -> float:
    """Adaptive symmetric normalization against the top-k closest cohort scores."""
    mu_e, sd_e = top_k_stats(enroll_cohort, top_k)
    mu_t, sd_t = top_k_stats(test_cohort, top_k)
    if sd_e == 0 or sd_t == 0:
        raise ScoringError("degenerate cohort: zero spread among top-k scores")
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _split(scores, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreSet):
        labels = scores.labels
        scores = scores.scores()
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ScoringError("scores and labels differ in length")
    tar, non = scores[labels == 1], scores[labels != 1]
    if tar.size == 0 or non.size == 0:
        raise ScoringError("metrics need at least one target and one nontarget trial")
    return tar, non


def error_curve(scores, labels=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, P_miss, P_fa) for "accept if score >= t".

    Thresholds are the distinct scores in increasing order followed by +inf,
    so the curve runs from accept-all to reject-all.
    """
    tar, non = _split(scores, labels)
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    p_miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def eer(scores, labels=None) -> float:
    """Equal error rate, linearly interpolated between adjacent operating points."""
    _, p_miss, p_fa = error_curve(scores, labels)
    diff = p_fa - p_miss
    i = int(np.argmax(diff <= 0))   # first point where misses catch up with false alarms
    if diff[i] == 0 or i == 0:
        return float(p_miss[i])
    frac = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(p_miss[i - 1] + frac * (p_miss[i] - p_miss[i - 1]))


def min_dcf(scores, labels=None, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost normalized by the best trivial decision."""
    _, p_miss, p_fa = error_curve(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def read_trials(path: str | Path) -> list[Trial]:
    trials, errs = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            errs.append(f"{path}:{lineno}: expected 'label enroll_path test_path' with label 0 or 1")
            continue
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    if errs:
        raise ScoringError("\n".join(errs))
    if not trials:
        raise ScoringError(f"{path}: no trials")
    return trials


def write_scores(path: str | Path, scores: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trial, raw, norm in zip(scores.trials, scores.raw, scores.normalized):
            fh.write(f"{trial.enroll} {trial.test} {raw!r} {norm!r}\n")


def read_scores(path: str | Path, trials: Sequence[Trial]) -> ScoreSet:
    """Read a score file and attach labels from the matching trial list."""
    labels = {(t.enroll, t.test): t for t in trials}
    out = ScoreSet()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        enroll, test, raw, norm = parts
        out.add(labels[(enroll, test)], float(raw), float(norm))
    return out


def write_det_csv(path: str | Path, scores, labels=None) -> None:
    thresholds, p_miss, p_fa = error_curve(scores, labels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,p_miss,p_fa\n")
        for t, m, f in zip(thresholds, p_miss, p_fa):
            fh.write(f"{t!r},{m!r},{f!r}\n")
