"""Turn-level evaluation: geometric accuracies and language scores.

Geometric protocol. Each aligned (turn, target) pair is an item. Items on
turns typed "trajectory" enter the trajectory pools; items on the other
geometric types are single-moment point items. Errors are Euclidean
distances in meters, computed only at ground-truth-valid steps; a missing
prediction (or a step the prediction claims invalid) scores as an infinite
error, so it counts as a miss without changing any denominator. The three
accuracies use a strict `<` threshold comparison: an error exactly at the
threshold is a miss. Empty denominators report as absent (None), never 0.

    point accuracy     fraction of point items with error < 0.5 m
    trajectory accuracy fraction of trajectory items with mean step
                        error < 1.0 m (mean over valid steps)
    step accuracy      micro average: pooled valid steps with error < 0.5 m

Language protocol. Corpus BLEU-4 (uniform weights, clipped counts,
brevity penalty, add-zero smoothing by default) and CIDEr-D (n = 1..4,
tf-idf cosine, length gaussian sigma = 6, clipping, x10, averaged over n)
over all turns; per-type rows score their own turns. Tokenization is
lowercase with punctuation split into standalone tokens, echoed in the
report header.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .bench import AlignedTurn, GEOMETRIC_TYPES, QUESTION_TYPES

__all__ = [
    "DEFAULT_THRESHOLDS",
    "TurnErrors",
    "MetricsReport",
    "tokenize",
    "geometric_errors",
    "accuracy_metrics",
    "bleu4",
    "cider",
    "aggregate_report",
]

DEFAULT_THRESHOLDS = (0.5, 1.0, 0.5)  # point, trajectory-mean, pooled-step
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
MAX_NGRAM = 4

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split, with punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# geometric errors


@dataclass
class TurnErrors:
    """Flattened error pools for one set of aligned turns."""

    point_errors: list[float] = field(default_factory=list)
    step_errors: list[list[float]] = field(default_factory=list)  # per traj item
    traj_means: list[float] = field(default_factory=list)

    @property
    def pooled_steps(self) -> list[float]:
        return [e for errs in self.step_errors for e in errs]


def _item_errors(item) -> np.ndarray:
    """Errors at gt-valid steps; inf where the prediction is absent."""
    gt_pts = item.gt.points
    valid = item.gt.valid
    errs = np.full(int(valid.sum()), np.inf)
    if item.pred_points is not None:
        diffs = np.linalg.norm(item.pred_points[valid] - gt_pts[valid], axis=1)
        claimed = item.pred_valid[valid] if item.pred_valid is not None else \
            np.ones(int(valid.sum()), dtype=bool)
        errs = np.where(claimed, diffs, np.inf)
    return errs


def geometric_errors(aligned: list[AlignedTurn]) -> TurnErrors:
    """Pool errors across turns, respecting the point/trajectory split.

    Raises ProtocolError-compatible ValueError when a point-typed item does
    not carry exactly one valid step (the bench loader enforces the same).
    """
    out = TurnErrors()
    for turn in aligned:
        if turn.question_type == "scene-level":
            continue
        for item in turn.items:
            errs = _item_errors(item)
            if turn.question_type == "trajectory":
                out.step_errors.append([float(e) for e in errs])
                out.traj_means.append(float(np.mean(errs)))
            else:
                if errs.size != 1:
                    raise ValueError(
                        f"point item on clip {turn.clip_id!r} turn "
                        f"{turn.turn_index} has {errs.size} valid steps")
                out.point_errors.append(float(errs[0]))
    return out


def accuracy_metrics(
    errs: TurnErrors,
    thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS,
) -> tuple[float | None, float | None, float | None]:
    """(point acc, trajectory acc, pooled-step acc) with strict `<`.

    Empty pools yield None (reported as absent, never 0.0).
    """
    t_pt, t_traj, t_step = thresholds
    point = None
    if errs.point_errors:
        point = sum(1 for e in errs.point_errors if e < t_pt) / len(errs.point_errors)
    traj = None
    if errs.traj_means:
        traj = sum(1 for m in errs.traj_means if m < t_traj) / len(errs.traj_means)
    step = None
    pooled = errs.pooled_steps
    if pooled:
        step = sum(1 for e in pooled if e < t_step) / len(pooled)
    return point, traj, step


# ---------------------------------------------------------------------------
# BLEU-4


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(
    hypotheses: list[list[str]],
    references: list[list[str]],
    smooth_eps: float | None = None,
) -> float:
    """Corpus BLEU with n = 1..4, uniform weights, clipped counts, BP.

    Default smoothing is add-zero: if any order has zero clipped matches the
    score is 0. With `smooth_eps` set, a zero clipped numerator is replaced
    by that epsilon before the log.
    """
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need equally many hypotheses and references, at least one")
    matches = [0] * MAX_NGRAM
    totals = [0] * MAX_NGRAM
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_NGRAM + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(0, len(hyp) - n + 1)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    log_prec = 0.0
    for n in range(MAX_NGRAM):
        if totals[n] == 0:
            return 0.0
        num = matches[n]
        if num == 0:
            if smooth_eps is None:
                return 0.0
            num = smooth_eps
        log_prec += math.log(num / totals[n]) / MAX_NGRAM
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf_vector(counts: Counter, doc_freq: dict, log_n_docs: float):
    """Per-order tf-idf maps and their norms.

    N-grams absent from every reference (document frequency 0) get weight
    0: they carry no consensus signal, and assigning them tf * log(N), as
    some published implementations do, makes the score depend on corpus
    size, violating the duplication invariance this scorer guarantees.
    """
    vecs = [defaultdict(float) for _ in range(MAX_NGRAM)]
    norms = [0.0] * MAX_NGRAM
    for gram, tf in counts.items():
        df = doc_freq.get(gram, 0.0)
        if df < 1.0:
            continue
        n = len(gram) - 1
        w = tf * (log_n_docs - math.log(df))
        vecs[n][gram] = w
        norms[n] += w * w
    return vecs, [math.sqrt(x) for x in norms]


def cider(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """CIDEr-D over a corpus with one reference per hypothesis.

    Document frequencies come from the reference set of this corpus, so the
    score is invariant to duplicating every (hypothesis, reference) pair.
    Sentence length uses token counts for the gaussian penalty.
    """
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need equally many hypotheses and references, at least one")
    n_docs = len(references)
    log_n_docs = math.log(n_docs) if n_docs > 0 else 0.0
    doc_freq: dict = defaultdict(float)
    ref_counts = []
    for ref in references:
        counts = Counter()
        for n in range(1, MAX_NGRAM + 1):
            counts.update(_ngrams(ref, n))
        ref_counts.append(counts)
        for gram in counts:
            doc_freq[gram] += 1.0

    scores = []
    for hyp, ref, rcounts in zip(hypotheses, references, ref_counts):
        hcounts = Counter()
        for n in range(1, MAX_NGRAM + 1):
            hcounts.update(_ngrams(hyp, n))
        hvecs, hnorms = _tfidf_vector(hcounts, doc_freq, log_n_docs)
        rvecs, rnorms = _tfidf_vector(rcounts, doc_freq, log_n_docs)
        delta = float(len(hyp) - len(ref))
        penalty = math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA ** 2))
        vals = []
        for n in range(MAX_NGRAM):
            dot = sum(min(w, rvecs[n][g]) * rvecs[n][g]
                      for g, w in hvecs[n].items() if g in rvecs[n])
            if hnorms[n] > 0 and rnorms[n] > 0:
                vals.append(penalty * dot / (hnorms[n] * rnorms[n]))
            else:
                vals.append(0.0)
        scores.append(CIDER_SCALE * float(np.mean(vals)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# report aggregation


@dataclass
class MetricsReport:
    config: dict
    counts: dict
    geometry: dict
    language: dict
    by_type: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "counts": self.counts,
            "geometry": self.geometry,
            "language": self.language,
            "by_type": self.by_type,
        }


def _fraction_entry(numerator: int | None, denominator: int,
                    value: float | None) -> dict:
    return {
        "value": value,
        "numerator": numerator,
        "denominator": denominator,
    }


def _score_subset(aligned: list[AlignedTurn], thresholds) -> tuple[dict, dict, dict]:
    errs = geometric_errors(aligned)
    point, traj, step = accuracy_metrics(errs, thresholds)
    t_pt, t_traj, t_step = thresholds
    pooled = errs.pooled_steps
    geometry = {
        "point_acc": _fraction_entry(
            sum(1 for e in errs.point_errors if e < t_pt) if errs.point_errors else 0,
            len(errs.point_errors), point),
        "traj_acc": _fraction_entry(
            sum(1 for m in errs.traj_means if m < t_traj) if errs.traj_means else 0,
            len(errs.traj_means), traj),
        "step_acc": _fraction_entry(
            sum(1 for e in pooled if e < t_step) if pooled else 0,
            len(pooled), step),
    }
    hyps = [tokenize(t.hypothesis) for t in aligned]
    refs = [tokenize(t.reference) for t in aligned]
    language = {
        "bleu4": bleu4(hyps, refs) if aligned else None,
        "cider": cider(hyps, refs) if aligned else None,
        "meteor": None,  # requires external linguistic resources; reserved
    }
    counts = {
        "turns": len(aligned),
        "language_turns": len(aligned),
        "point_items": len(errs.point_errors),
        "trajectory_items": len(errs.traj_means),
        "pooled_valid_steps": len(pooled),
    }
    return geometry, language, counts


def aggregate_report(
    aligned: list[AlignedTurn],
    stats: dict | None = None,
    thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    """Corpus totals plus per-question-type sub-reports.

    Scene-level rows carry language metrics only. Empty type buckets are
    omitted entirely rather than reported as zeros.
    """
    for turn in aligned:
        if turn.question_type not in QUESTION_TYPES:
            raise ValueError(f"unknown question type {turn.question_type!r} on "
                             f"clip {turn.clip_id!r} turn {turn.turn_index}")
    geometry, language, counts = _score_subset(aligned, thresholds)
    if stats:
        counts["missing_turns"] = stats.get("missing_turns", 0)
        counts["geometric_turns"] = stats.get("geometric_turns", 0)
    by_type = {}
    for qtype in QUESTION_TYPES:
        subset = [t for t in aligned if t.question_type == qtype]
        if not subset:
            continue  # absent, never 0.0
        g, lang, c = _score_subset(subset, thresholds)
        row = {"counts": c, "language": lang}
        if qtype != "scene-level":
            row["geometry"] = g
        by_type[qtype] = row
    config = {
        "thresholds": {"point": thresholds[0], "trajectory_mean": thresholds[1],
                       "pooled_step": thresholds[2]},
        "threshold_comparison": "strict_less",
        "tokenization": "lowercase, punctuation split into standalone tokens",
        "cider_variant": "CIDEr-D",
        "cider_sigma": CIDER_SIGMA,
        "cider_scale": CIDER_SCALE,
        "cider_length": "token counts",
        "bleu_smoothing": "add-zero",
        "alignment": "query order (positional)",
        "missing_prediction_convention":
            "missing or claimed-invalid steps score as misses at every "
            "gt-valid step; denominators never shrink",
        "language_turns": "all turns (geometric turns score their captions too)",
    }
    return MetricsReport(config=config, counts=counts, geometry=geometry,
                         language=language, by_type=by_type)
