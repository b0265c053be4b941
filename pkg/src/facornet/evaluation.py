"""Verification, tri-subject, retrieval, ROC/AUC, k-fold and quality-binned evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .data import KIN_TYPES, TRI_TYPES, FoldSpec, KinPair, TriSubject, pair_quality
from .errors import ConfigurationError, DataError, MissingEntryError, ProtocolError
from .loss import cosine_similarity

log = logging.getLogger(__name__)

POLICIES = ("fixed", "best-on-validation", "best-on-test")
FUSIONS = ("mean", "max", "min")
DEFAULT_BINS = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))


@dataclass(frozen=True)
class ScoredPair:
    pair: KinPair
    score: float


@dataclass
class ThresholdPolicy:
    mode: str = "best-on-validation"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in POLICIES:
            raise ConfigurationError(f"threshold policy must be one of {POLICIES}, got {self.mode!r}")
        if self.mode == "fixed" and not -1.0 <= self.value <= 1.0:
            raise ConfigurationError(f"fixed threshold must lie in [-1, 1], got {self.value}")


# ---------------------------------------------------------------------------
# scoring


@torch.no_grad()
def score_pairs(model, source, pairs: Sequence[tuple[str, str]], batch_size: int = 512,
                dtype=torch.float32) -> np.ndarray:
    """Cosine scores of the pair-dependent output embeddings.

    Each pair goes through the model jointly because cross-attention makes
    both embeddings depend on the partner image.
    """
    pairs = list(pairs)
    out = np.empty(len(pairs), dtype=np.float64)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        fa = source.fetch([a for a, _ in chunk], dtype)
        fb = source.fetch([b for _, b in chunk], dtype)
        emb = model(fa.X, fb.X, fa.r, fb.r)
        s = cosine_similarity(emb.x_out_a.double(), emb.x_out_b.double())
        out[start:start + len(chunk)] = s.clamp(-1.0, 1.0).numpy()
    return out


def score_pair(model, source, img_a: str, img_b: str) -> float:
    return float(score_pairs(model, source, [(img_a, img_b)])[0])


@torch.no_grad()
def score_pairs_backbone_only(source, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    """Cosine of the final backbone vectors only; a cheap smoke-test fallback."""
    pairs = list(pairs)
    fa = source.fetch([a for a, _ in pairs], torch.float64)
    fb = source.fetch([b for _, b in pairs], torch.float64)
    return cosine_similarity(fa.r, fb.r).numpy()


def score_kin_pairs(model, source, pairs: Sequence[KinPair]) -> list[ScoredPair]:
    scores = score_pairs(model, source, [(p.img_a, p.img_b) for p in pairs])
    return [ScoredPair(p, float(s)) for p, s in zip(pairs, scores)]


# ---------------------------------------------------------------------------
# thresholds


def accuracy_at(scores, labels, threshold: float) -> float:
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels, dtype=bool)
    return float(np.mean((scores > threshold) == labels))


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints between sorted distinct scores, plus one point beyond each end."""
    u = np.unique(np.asarray(scores, dtype=float))
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


def best_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising accuracy (kin iff score > t); lowest t wins ties."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ProtocolError("cannot choose a threshold from zero scores")
    cands = candidate_thresholds(scores)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    # candidates never coincide with a score, so side='right' is exact
    correct = (pos.size - np.searchsorted(pos, cands, side="right")) + np.searchsorted(neg, cands, side="right")
    best = int(np.argmax(correct))
    return float(cands[best]), float(correct[best]) / scores.size


def resolve_threshold(policy: ThresholdPolicy, scores, labels,
                      validation: Optional[tuple] = None) -> tuple[float, str]:
    """Pick the decision threshold; ``validation`` is ``(scores, labels)`` or None."""
    if policy.mode == "fixed":
        return policy.value, "fixed threshold"
    if policy.mode == "best-on-validation" and validation is not None and len(validation[0]):
        t, _ = best_threshold(*validation)
        return t, "threshold chosen on validation split"
    if policy.mode == "best-on-validation":
        log.warning("no validation split available; choosing the threshold on the evaluated set")
    t, _ = best_threshold(scores, labels)
    return t, "WARNING: threshold chosen on the evaluated (test) set"


def _unzip(scored):
    return [s.score for s in scored], [s.pair.label for s in scored]


# ---------------------------------------------------------------------------
# kinship verification


@dataclass
class VerificationReport:
    threshold: float
    note: str
    accuracy: dict  # kin type -> accuracy
    counts: dict  # kin type -> (positives, negatives)
    flagged: list
    overall: float

    @property
    def average(self) -> float:
        vals = [v for k, v in self.accuracy.items() if k not in self.flagged]
        return math.fsum(vals) / len(vals) if vals else float("nan")


def verification_eval(scored: Sequence[ScoredPair], policy: ThresholdPolicy,
                      validation: Optional[Sequence[ScoredPair]] = None) -> VerificationReport:
    scored = list(scored)
    if not scored:
        raise ProtocolError("no scored pairs to evaluate")
    t, note = resolve_threshold(policy, *_unzip(scored), _unzip(validation) if validation else None)
    accuracy, counts, flagged = {}, {}, []
    for kt in KIN_TYPES:
        group = [s for s in scored if s.pair.kin_type == kt]
        if not group:
            continue
        labels = [s.pair.label for s in group]
        counts[kt] = (sum(labels), len(labels) - sum(labels))
        accuracy[kt] = accuracy_at([s.score for s in group], labels, t)
        if 0 in counts[kt]:
            flagged.append(kt)
            log.warning("kin type %s has a single label class; excluded from the average", kt)
    overall = accuracy_at([s.score for s in scored], [s.pair.label for s in scored], t)
    return VerificationReport(t, note, accuracy, counts, flagged, overall)


# ---------------------------------------------------------------------------
# tri-subject verification


def fuse_scores(father, mother, fusion: str = "mean") -> np.ndarray:
    f, m = np.asarray(father, dtype=float), np.asarray(mother, dtype=float)
    if fusion == "mean":
        return (f + m) / 2.0
    if fusion == "max":
        return np.maximum(f, m)
    if fusion == "min":
        return np.minimum(f, m)
    raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {fusion!r}")


def tri_subject_scores(triplets: Sequence[TriSubject], model, source, fusion: str = "mean") -> np.ndarray:
    triplets = list(triplets)
    if not triplets:
        return np.empty(0)
    try:
        for t in triplets:
            for img in (t.img_father, t.img_mother, t.img_child):
                source.fetch([img])
    except MissingEntryError as exc:
        raise DataError(f"tri-subject record references a missing image: {exc}") from None
    sf = score_pairs(model, source, [(t.img_father, t.img_child) for t in triplets])
    sm = score_pairs(model, source, [(t.img_mother, t.img_child) for t in triplets])
    return fuse_scores(sf, sm, fusion)


@dataclass
class TriSubjectReport:
    threshold: float
    note: str
    accuracy: dict  # FMD / FMS -> accuracy
    counts: dict

    @property
    def average(self) -> float:
        return math.fsum(self.accuracy.values()) / len(self.accuracy) if self.accuracy else float("nan")


def tri_subject_eval(triplets, model, source, policy: ThresholdPolicy, fusion: str = "mean",
                     validation=None) -> TriSubjectReport:
    triplets = list(triplets)
    scores = tri_subject_scores(triplets, model, source, fusion)
    val = None
    if validation:
        val = (list(validation), tri_subject_scores(validation, model, source, fusion))
    return tri_subject_report(triplets, scores, policy, val)


def tri_subject_report(triplets, scores, policy: ThresholdPolicy, validation=None) -> TriSubjectReport:
    """Threshold fused scores; ``validation`` is an optional ``(triplets, scores)`` tuple."""
    labels = [t.label for t in triplets]
    val = None
    if validation:
        val = (list(validation[1]), [t.label for t in validation[0]])
    t, note = resolve_threshold(policy, list(scores), labels, val)
    accuracy, counts = {}, {}
    for tt in TRI_TYPES:
        idx = [i for i, tr in enumerate(triplets) if tr.type == tt]
        if idx:
            sub = [labels[i] for i in idx]
            accuracy[tt] = accuracy_at([scores[i] for i in idx], sub, t)
            counts[tt] = (sum(sub), len(sub) - sum(sub))
    return TriSubjectReport(t, note, accuracy, counts)


# ---------------------------------------------------------------------------
# search and retrieval


@dataclass
class RetrievalResult:
    rankings: dict  # probe id -> ranked gallery ids
    rank_at_k: dict  # K -> hit rate
    avg: float  # mean average precision
    average_precision: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)


def average_precision(relevant: Sequence[bool]) -> float:
    rel = np.asarray(relevant, dtype=bool)
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((hits / ranks)[rel]) / rel.sum())


def retrieval_metrics(scores, probes: Sequence[tuple[str, str]], gallery: Sequence[tuple[str, str]],
                      ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    """Rank the gallery per probe (score descending, gallery id ascending on ties).

    ``scores[p, g]`` scores probe ``p`` against gallery item ``g``.  A gallery
    item with the probe's own id is skipped; probes whose family has no
    other gallery image are excluded with a warning.
    """
    scores = np.asarray(scores, dtype=float)
    if not gallery:
        raise ProtocolError("retrieval needs a non-empty gallery")
    if scores.shape != (len(probes), len(gallery)):
        raise ConfigurationError(f"score matrix {scores.shape} does not match {len(probes)}x{len(gallery)}")
    gal_ids = np.array([g for g, _ in gallery])
    gal_fam = np.array([f for _, f in gallery])
    rankings, aps, hits, excluded = {}, {}, {k: [] for k in ks}, []
    for p, (pid, pfam) in enumerate(probes):
        keep = gal_ids != pid
        if not np.any(gal_fam[keep] == pfam):
            log.warning("probe %s: family %s absent from gallery; excluded", pid, pfam)
            excluded.append(pid)
            continue
        ids, fam, sc = gal_ids[keep], gal_fam[keep], scores[p, keep]
        order = np.lexsort((ids, -sc))
        rel = fam[order] == pfam
        rankings[pid] = ids[order].tolist()
        aps[pid] = average_precision(rel)
        for k in ks:
            hits[k].append(bool(rel[:k].any()))
    n = len(aps)
    rank_at_k = {k: (sum(hits[k]) / n if n else float("nan")) for k in ks}
    avg = math.fsum(aps.values()) / n if n else float("nan")
    return RetrievalResult(rankings, rank_at_k, avg, aps, excluded)


def retrieval_eval(probes, gallery, model, source, ks: Sequence[int] = (1, 5, 10),
                   backbone_only: bool = False) -> RetrievalResult:
    probes, gallery = list(probes), list(gallery)
    grid = [(p, g) for p, _ in probes for g, _ in gallery]
    if backbone_only:
        flat = score_pairs_backbone_only(source, grid)
    else:
        flat = score_pairs(model, source, grid)
    return retrieval_metrics(flat.reshape(len(probes), len(gallery)), probes, gallery, ks)


# ---------------------------------------------------------------------------
# ROC / AUC


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# k-fold protocol


@dataclass
class KFoldReport:
    per_fold: dict  # fold -> {kin type -> accuracy}

    @property
    def types(self) -> list:
        seen = {t for r in self.per_fold.values() for t in r}
        return [t for t in KIN_TYPES if t in seen]

    def mean(self) -> dict:
        out = {}
        for t in self.types:
            vals = [r[t] for r in self.per_fold.values() if t in r]
            out[t] = math.fsum(vals) / len(vals)
        return out

    def fold_average(self, fold) -> float:
        vals = list(self.per_fold[fold].values())
        return math.fsum(vals) / len(vals)

    @property
    def average(self) -> float:
        m = self.mean()
        return math.fsum(m.values()) / len(m)


def kfold_eval(folds: FoldSpec, pairs: Sequence[KinPair],
               run: Callable[[list, list, int], dict]) -> KFoldReport:
    """For every fold, ``run(train_pairs, test_pairs, fold)`` returns per-type accuracy."""
    if len(folds.folds) < 2:
        raise ProtocolError("k-fold evaluation needs at least 2 folds")
    pairs = list(pairs)
    per_fold = {}
    for f in sorted(folds.folds):
        train = [pairs[i] for i in folds.train_indices(f)]
        test = [pairs[i] for i in folds.test_indices(f)]
        per_fold[f] = dict(run(train, test, f))
    return KFoldReport(per_fold)


# ---------------------------------------------------------------------------
# quality bins


def _check_bins(bins):
    bins = [tuple(map(float, b)) for b in bins]
    ok = bool(bins) and bins[0][0] == 0.0 and bins[-1][1] == 1.0
    ok = ok and all(lo < hi for lo, hi in bins)
    ok = ok and all(a[1] == b[0] for a, b in zip(bins, bins[1:]))
    if not ok:
        raise ConfigurationError(f"quality bins must be ordered, contiguous and cover [0, 1]: {bins}")
    return bins


def quality_bin(q: float, bins=DEFAULT_BINS) -> int:
    """Index of the half-open bin ``[lo, hi)`` holding ``q``; the last bin is closed."""
    for i, (lo, hi) in enumerate(bins):
        if lo <= q < hi or (i == len(bins) - 1 and q == hi):
            return i
    raise DataError(f"quality {q} outside the bin range")


@dataclass
class QualityBinReport:
    bins: list
    threshold: float
    counts: list
    accuracy: list  # nan for empty bins


def quality_binned_eval(scored: Sequence[ScoredPair], qt: dict, bins=DEFAULT_BINS,
                        threshold: Optional[float] = None) -> QualityBinReport:
    """Accuracy per face-pair quality bin (pair quality = lower image score).

    One threshold serves every bin; by default it is the best threshold over
    all evaluated pairs.
    """
    bins = _check_bins(bins)
    scored = list(scored)
    if threshold is None:
        threshold, _ = best_threshold([s.score for s in scored], [s.pair.label for s in scored])
    members = [[] for _ in bins]
    for s in scored:
        members[quality_bin(pair_quality(s.pair, qt), bins)].append(s)
    counts = [len(m) for m in members]
    acc = [accuracy_at([s.score for s in m], [s.pair.label for s in m], threshold) if m else float("nan")
           for m in members]
    return QualityBinReport(bins, threshold, counts, acc)
