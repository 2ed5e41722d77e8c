"""Image-to-class similarity: 3-D similarity tensors, pattern vectors,
class scores, and the cross-entropy classification loss.

similarity_matrix is the reference path: it computes every entry with
the same elementary operations a naive loop would use (per-pair dot and
1-D norms), so oracle tests can demand bit-identical results.  score_set
is the bulk path built on one matrix product per class; it agrees with
the reference path to float tolerance and is what the engine runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkit import log_softmax, unit_rows
from .semantic import SemanticFeatureMap

POOLING_SIDES = ("support", "query")


@dataclass
class SimilarityPattern:
    """Pooled similarity vector of one query against one class.

    parts holds one vector per support image (pattern entries for that
    image's positions); vector is their concatenation in class order.
    """

    vector: np.ndarray
    parts: list[np.ndarray]
    class_index: int | None = None

    @property
    def score(self) -> float:
        return float(self.vector.mean())

    @property
    def raw_sum(self) -> float:
        return float(self.vector.sum())


@dataclass
class ClassScores:
    """Per-class scalar scores with the top-2 ranking.

    Ties resolve to the lowest class index, so pos != neg whenever at
    least two classes exist.
    """

    scores: np.ndarray
    pos: int
    neg: int
    patterns: list[SimilarityPattern]


def _rank_top2(scores: np.ndarray) -> tuple[int, int]:
    pos = int(scores.argmax())  # argmax returns the first (lowest) index on ties
    rest = np.delete(scores, pos)
    neg = int(rest.argmax())
    if neg >= pos:
        neg += 1
    return pos, neg


def similarity_matrix(
    query: SemanticFeatureMap, support_class: Sequence[SemanticFeatureMap]
) -> np.ndarray:
    """Entry (i, a, b): cosine of query position a vs support image i
    position b.  Reference implementation; entries are computed one at a
    time from the raw rows so a naive loop reproduces them exactly.
    """
    channels = query.channels
    q = query.features
    q_norms = [np.linalg.norm(row) for row in q]
    out = np.empty((len(support_class), query.positions, support_class[0].positions))
    for i, smap in enumerate(support_class):
        if smap.channels != channels:
            raise ValueError(
                f"channel mismatch: query {channels}, support {smap.channels}"
            )
        s = smap.features
        s_norms = [np.linalg.norm(row) for row in s]
        for a in range(q.shape[0]):
            qa, na = q[a], q_norms[a]
            for b in range(s.shape[0]):
                denom = na * s_norms[b]
                if denom == 0.0:
                    out[i, a, b] = 0.0
                else:
                    out[i, a, b] = max(-1.0, min(1.0, float(np.dot(qa, s[b])) / denom))
    return out


def similarity_pattern(
    matrix: np.ndarray,
    pooling: str = "support",
    class_index: int | None = None,
) -> SimilarityPattern:
    """Pool the 3-D similarity tensor into a pattern vector.

    support pooling keeps, for every support position, the best match
    over query positions; query pooling is the transpose convention.
    """
    if pooling not in POOLING_SIDES:
        raise ValueError(f"pooling must be one of {POOLING_SIDES}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise ValueError("similarity tensor contains non-finite entries")
    axis = 1 if pooling == "support" else 2
    pooled = matrix.max(axis=axis)  # (K, S_s) or (K, S_q)
    parts = [pooled[i].copy() for i in range(pooled.shape[0])]
    return SimilarityPattern(pooled.reshape(-1).copy(), parts, class_index)


@dataclass
class ScoreTable:
    """Batched scores for many queries against the same class prototypes."""

    scores: np.ndarray                        # (Q, N)
    patterns: list[list[SimilarityPattern]]   # [query][class]

    def top2(self, q: int) -> tuple[int, int]:
        return _rank_top2(self.scores[q])

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


def score_set(
    queries: Sequence[SemanticFeatureMap],
    classes: Sequence[Sequence[SemanticFeatureMap]],
    pooling: str = "support",
    normalize: bool = True,
) -> ScoreTable:
    """Score every query against every class with one product per class.

    normalize=True divides the pattern sum by its length (the mean), so
    scores are resolution-independent; False keeps the literal raw sum.
    """
    if pooling not in POOLING_SIDES:
        raise ValueError(f"pooling must be one of {POOLING_SIDES}")
    n_q = len(queries)
    n_classes = len(classes)
    q_unit = np.vstack([unit_rows(m.features) for m in queries])
    s_q = queries[0].positions
    scores = np.empty((n_q, n_classes))
    patterns: list[list[SimilarityPattern]] = [[] for _ in range(n_q)]
    for c, prototypes in enumerate(classes):
        shots = len(prototypes)
        s_s = prototypes[0].positions
        s_unit = np.vstack([unit_rows(m.features) for m in prototypes])
        sims = np.clip(q_unit @ s_unit.T, -1.0, 1.0)
        if pooling == "support":
            # (Q, S_q, shots*S_s) -> best query position per support position
            pooled = sims.reshape(n_q, s_q, shots * s_s).max(axis=1)
            per_img = pooled.reshape(n_q, shots, s_s)
        else:
            pooled4 = sims.reshape(n_q, s_q, shots, s_s).max(axis=3)
            per_img = pooled4.transpose(0, 2, 1)  # (Q, shots, S_q)
            pooled = per_img.reshape(n_q, -1)
        for q in range(n_q):
            vec = pooled[q].reshape(-1)
            patterns[q].append(
                SimilarityPattern(vec, [per_img[q, i].copy() for i in range(shots)], c)
            )
            scores[q, c] = vec.mean() if normalize else vec.sum()
    return ScoreTable(scores, patterns)


def class_scores(
    query: SemanticFeatureMap,
    classes: Sequence[Sequence[SemanticFeatureMap]],
    pooling: str = "support",
    normalize: bool = True,
) -> ClassScores:
    """Scores of one query against all classes, with the top-2 ranking."""
    if len(classes) < 2:
        raise ValueError("need at least 2 classes to rank")
    table = score_set([query], classes, pooling, normalize)
    pos, neg = table.top2(0)
    return ClassScores(table.scores[0], pos, neg, table.patterns[0])


def cross_entropy(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Mean negative log softmax probability of the labels, rows = queries."""
    scores = np.asarray(scores, dtype=np.float64)
    n_classes = scores.shape[1]
    total = 0.0
    for q, lab in enumerate(labels):
        if not 0 <= lab < n_classes:
            raise ValueError(f"label {lab} outside [0, {n_classes})")
        total -= log_softmax(scores[q])[lab]
    return total / len(labels)


def classification_loss(
    queries: Sequence[SemanticFeatureMap],
    labels: Sequence[int],
    classes: Sequence[Sequence[SemanticFeatureMap]],
    pooling: str = "support",
    normalize: bool = True,
) -> float:
    """Mean cross-entropy of the softmax over class scores at the labels."""
    n_classes = len(classes)
    for lab in labels:
        if not 0 <= lab < n_classes:
            raise ValueError(f"label {lab} outside [0, {n_classes})")
    table = score_set(queries, classes, pooling, normalize)
    return cross_entropy(table.scores, labels)
