"""Cross-domain self-training over target queries.

High-confidence target queries are promoted to class prototypes that
replace the source-side support prototypes of their class, then the
remaining target queries are reclassified against the updated set.  The
round loop stops at a fixed point (the confident selection repeats) or
after the configured number of rounds.  Ground-truth target labels are
never visible here: the module only ever sees feature maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkit import softmax
from .patterns import ScoreTable, score_set
from .semantic import SemanticFeatureMap

CONFIDENCE_MEASURES = ("score_ratio", "score_margin", "raw_sum")
REPLACE_MODES = ("replace", "union")


@dataclass(frozen=True)
class ConfidenceRule:
    """How a target query qualifies as confident.

    score_ratio passes when exp(s_pos - s_neg) reaches the threshold,
    score_margin compares the difference itself, raw_sum compares the
    unnormalized pattern sum for the top class.
    """

    measure: str = "score_ratio"
    threshold: float = 1.7
    max_rounds: int = 3

    def __post_init__(self):
        if self.measure not in CONFIDENCE_MEASURES:
            raise ValueError(f"measure must be one of {CONFIDENCE_MEASURES}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def passes(self, s_pos: float, s_neg: float, raw_pos: float) -> bool:
        if self.measure == "score_ratio":
            return math.exp(s_pos - s_neg) >= self.threshold
        if self.measure == "score_margin":
            return s_pos - s_neg >= self.threshold
        return raw_pos >= self.threshold


@dataclass
class Prototype:
    """One class prototype with its provenance."""

    feature_map: SemanticFeatureMap
    origin: str = "support"        # "support" | "target"
    promoted_round: int | None = None


@dataclass
class PrototypeSet:
    """Per-class prototype lists the classifier matches against."""

    per_class: list[list[Prototype]]

    def __post_init__(self):
        if any(len(group) == 0 for group in self.per_class):
            raise ValueError("every class needs at least one prototype")

    @classmethod
    def from_support(cls, support: Sequence[Sequence[SemanticFeatureMap]]) -> "PrototypeSet":
        return cls([[Prototype(m) for m in group] for group in support])

    def feature_maps(self) -> list[list[SemanticFeatureMap]]:
        return [[p.feature_map for p in group] for group in self.per_class]

    def target_owned_classes(self) -> set[int]:
        return {
            c
            for c, group in enumerate(self.per_class)
            if any(p.origin == "target" for p in group)
        }


@dataclass
class SelfTrainResult:
    prototypes: PrototypeSet
    predictions: np.ndarray
    rounds_used: int
    confident: list[list[int]]   # final confident query ids per class

    @property
    def confident_count(self) -> int:
        return sum(len(ids) for ids in self.confident)


def _confident_from_table(
    table: ScoreTable, rule: ConfidenceRule, n_classes: int
) -> list[list[int]]:
    per_class: list[list[int]] = [[] for _ in range(n_classes)]
    for q in range(table.scores.shape[0]):
        pos, neg = table.top2(q)
        raw_pos = table.patterns[q][pos].raw_sum
        if rule.passes(table.scores[q, pos], table.scores[q, neg], raw_pos):
            per_class[pos].append(q)
    return per_class


def select_confident(
    queries: Sequence[SemanticFeatureMap],
    prototypes: PrototypeSet,
    rule: ConfidenceRule,
    pooling: str = "support",
    normalize: bool = True,
) -> list[list[int]]:
    """Query ids that pass the confidence rule, listed under their top class."""
    table = score_set(queries, prototypes.feature_maps(), pooling, normalize)
    return _confident_from_table(table, rule, len(prototypes.per_class))


def promote_and_reclassify(
    queries: Sequence[SemanticFeatureMap],
    initial: PrototypeSet,
    rule: ConfidenceRule,
    pooling: str = "support",
    normalize: bool = True,
    replace_mode: str = "replace",
    initial_table: ScoreTable | None = None,
) -> SelfTrainResult:
    """Iterate confident selection and prototype promotion.

    Classes with at least one confident query swap their prototypes for
    those queries (or add them, in union mode); classes with none keep
    what they have.  Predictions always reflect the final prototype set.
    """
    if replace_mode not in REPLACE_MODES:
        raise ValueError(f"replace_mode must be one of {REPLACE_MODES}")
    prototypes = PrototypeSet([list(group) for group in initial.per_class])
    n_classes = len(prototypes.per_class)
    table = initial_table
    if table is None:
        table = score_set(queries, prototypes.feature_maps(), pooling, normalize)
    previous: list[list[int]] = [[] for _ in range(n_classes)]
    confident = previous
    rounds_used = 0
    for round_no in range(1, rule.max_rounds + 1):
        confident = _confident_from_table(table, rule, n_classes)
        if confident == previous:
            break
        for c, ids in enumerate(confident):
            if not ids:
                continue
            promoted = [
                Prototype(queries[q], origin="target", promoted_round=round_no)
                for q in ids
            ]
            if replace_mode == "union":
                base = [p for p in prototypes.per_class[c] if p.origin == "support"]
                prototypes.per_class[c] = base + promoted
            else:
                prototypes.per_class[c] = promoted
        table = score_set(queries, prototypes.feature_maps(), pooling, normalize)
        rounds_used = round_no
        previous = confident
    return SelfTrainResult(prototypes, table.predictions, rounds_used, confident)


def matching_hinge(pi_pos: float, pi_neg: float, margin: float) -> float:
    """Single-query hinge term on the top-2 softmax probability gap."""
    return max(pi_neg - pi_pos + margin, 0.0)


def class_matching_loss(
    queries: Sequence[SemanticFeatureMap],
    prototypes: PrototypeSet,
    margin: float = 1.5,
    pooling: str = "support",
    normalize: bool = True,
    reduce: str = "sum",
) -> float:
    """Hinge on the softmax probability gap between a query's top-2 classes.

    Each query contributes max(pi_neg - pi_pos + margin, 0); the default
    sums over queries, reduce="mean" averages instead.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if reduce not in ("sum", "mean"):
        raise ValueError("reduce must be 'sum' or 'mean'")
    table = score_set(queries, prototypes.feature_maps(), pooling, normalize)
    total = 0.0
    for q in range(table.scores.shape[0]):
        pos, neg = table.top2(q)
        pi = softmax(table.scores[q])
        total += matching_hinge(pi[pos], pi[neg], margin)
    return total / len(queries) if reduce == "mean" else total
