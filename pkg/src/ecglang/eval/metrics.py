"""Ranking, retrieval and text-overlap metrics."""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count one half.

    Computed from midranks (Mann-Whitney U), which equals exhaustive pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(scores: np.ndarray, labels: np.ndarray,
                class_names: Sequence[str] | None = None) -> tuple[float, dict[str, float]]:
    """Mean per-class AUROC over classes that have both positives and negatives.

    Returns the macro value and the per-class values actually used.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels).astype(bool)
    n_cls = scores.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_cls)]
    per = {}
    for j, name in enumerate(names):
        col = labels[:, j]
        if col.all() or not col.any():
            log.info("auroc undefined for class %s (single-class labels); skipped", name)
            continue
        per[name] = auroc(scores[:, j], col)
    if not per:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(list(per.values()))), per


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def partner_ranks(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """0-based rank of gallery[i] among all gallery rows for query i (cosine, ties by index)."""
    q, g = _unit(queries), _unit(gallery)
    if q.shape[0] < 2 or q.shape != g.shape:
        raise ValueError("need at least 2 query/gallery pairs of matching shape")
    sims = q @ g.T
    own = np.diag(sims)[:, None]
    idx = np.arange(len(q))
    better = (sims > own).sum(axis=1)
    tied_before = ((sims == own) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return better + tied_before


def recall_at_k(queries: np.ndarray, gallery: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    ranks = partner_ranks(queries, gallery)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


# ---------------------------------------------------------------------------
# text overlap
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence, references: Sequence[Sequence], n: int = 4) -> float:
    """Sentence BLEU-n with uniform weights and brevity penalty.

    Zero clipped counts are replaced by ``BLEU_EPS`` so the geometric mean stays defined.
    """
    if len(candidate) == 0:
        return 0.0
    if not references:
        raise ValueError("bleu needs at least one reference")
    if not isinstance(references[0], (list, tuple)):
        references = [references]
    log_p = 0.0
    for i in range(1, n + 1):
        cand = _ngrams(candidate, i)
        total = sum(cand.values())
        max_ref: Counter = Counter()
        for ref in references:
            for gram, c in _ngrams(ref, i).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        p = (clipped if clipped else BLEU_EPS) / max(total, 1)
        log_p += math.log(p) / n
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure weighted toward recall by ``beta``."""
    if len(candidate) == 0 or len(reference) == 0:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
