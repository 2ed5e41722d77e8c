"""Tests for confidence selection, prototype promotion, and the hinge loss."""

import math

import numpy as np
import pytest

from fewshift.engine import PipelineConfig, config_for_toggles, _episode_maps
from fewshift.patterns import score_set
from fewshift.selftrain import (
    ConfidenceRule,
    PrototypeSet,
    class_matching_loss,
    matching_hinge,
    promote_and_reclassify,
    select_confident,
)
from fewshift.semantic import SemanticFeatureMap
from fewshift.synthgen import SynthConfig, generate_episode


def one_hot_map(channel, channels, positions=4, jiggle=0.0, rng=None):
    rows = np.zeros((positions, channels))
    rows[:, channel] = 1.0
    if jiggle:
        rows += jiggle * rng.normal(size=rows.shape)
    return SemanticFeatureMap(rows, 2, positions // 2)


class TestConfidenceRule:
    def test_equal_scores_not_confident(self):
        rule = ConfidenceRule()
        assert not rule.passes(0.4, 0.4, raw_pos=10.0)

    def test_log2_margin_is_confident(self):
        rule = ConfidenceRule()  # ratio threshold 1.7
        assert rule.passes(0.5 + math.log(2.0), 0.5, raw_pos=0.0)
        assert math.exp(math.log(2.0)) >= 1.7

    def test_margin_measure(self):
        rule = ConfidenceRule(measure="score_margin", threshold=0.25)
        assert rule.passes(0.6, 0.3, raw_pos=0.0)
        assert not rule.passes(0.5, 0.3, raw_pos=0.0)

    def test_raw_sum_measure(self):
        rule = ConfidenceRule(measure="raw_sum", threshold=1.7)
        assert rule.passes(0.0, 0.0, raw_pos=1.8)
        assert not rule.passes(1.0, 0.0, raw_pos=1.6)

    def test_validation(self):
        with pytest.raises(ValueError):
            ConfidenceRule(measure="bogus")
        with pytest.raises(ValueError):
            ConfidenceRule(threshold=0.0)
        with pytest.raises(ValueError):
            ConfidenceRule(max_rounds=0)


def split_classes(channels=6):
    """Three well-separated classes on orthogonal channels."""
    return [[one_hot_map(c, channels)] for c in range(3)]


class TestSelectConfident:
    def test_clear_queries_selected_once(self):
        protos = PrototypeSet.from_support(split_classes())
        queries = [one_hot_map(0, 6), one_hot_map(1, 6), one_hot_map(2, 6)]
        picked = select_confident(queries, protos, ConfidenceRule())
        assert picked == [[0], [1], [2]]

    def test_ambiguous_query_not_selected(self):
        protos = PrototypeSet.from_support(split_classes())
        rows = np.zeros((4, 6))
        rows[:, 0] = 1.0
        rows[:, 1] = 1.0  # equally similar to classes 0 and 1
        queries = [SemanticFeatureMap(rows, 2, 2)]
        picked = select_confident(queries, protos, ConfidenceRule())
        assert picked == [[], [], []]


class TestPromoteAndReclassify:
    def test_nothing_passes_keeps_round_zero(self):
        protos = PrototypeSet.from_support(split_classes())
        rng = np.random.default_rng(0)
        queries = [one_hot_map(c, 6, jiggle=0.4, rng=rng) for c in (0, 1, 2)]
        strict = ConfidenceRule(measure="score_margin", threshold=10.0)
        result = promote_and_reclassify(queries, protos, strict)
        base = score_set(queries, protos.feature_maps())
        assert np.array_equal(result.predictions, base.predictions)
        assert result.rounds_used == 0
        assert result.confident == [[], [], []]
        assert result.prototypes.target_owned_classes() == set()

    def test_early_stop_matches_single_round(self):
        rng = np.random.default_rng(1)
        protos = PrototypeSet.from_support(split_classes())
        queries = [one_hot_map(c, 6, jiggle=0.02, rng=rng) for c in (0, 1, 2)]
        one = promote_and_reclassify(queries, protos, ConfidenceRule(max_rounds=1))
        three = promote_and_reclassify(queries, protos, ConfidenceRule(max_rounds=3))
        assert np.array_equal(one.predictions, three.predictions)
        assert one.confident == three.confident

    def test_promotion_replaces_prototypes(self):
        rng = np.random.default_rng(2)
        protos = PrototypeSet.from_support(split_classes())
        queries = [one_hot_map(0, 6, jiggle=0.01, rng=rng)]
        result = promote_and_reclassify(queries, protos, ConfidenceRule())
        group = result.prototypes.per_class[0]
        assert all(p.origin == "target" for p in group)
        assert group[0].promoted_round == 1
        assert all(p.origin == "support" for p in result.prototypes.per_class[1])

    def test_union_mode_keeps_support(self):
        rng = np.random.default_rng(3)
        protos = PrototypeSet.from_support(split_classes())
        queries = [one_hot_map(0, 6, jiggle=0.01, rng=rng)]
        result = promote_and_reclassify(
            queries, protos, ConfidenceRule(), replace_mode="union"
        )
        origins = sorted(p.origin for p in result.prototypes.per_class[0])
        assert origins == ["support", "target"]

    def test_target_ownership_monotone_across_round_budgets(self):
        cfg = SynthConfig(seed=17, shift_strength=0.4, pixel_noise=0.15,
                          distractor_rate=0.2, n_query=8, height=8, width=8,
                          channels=48)
        ep, _ = generate_episode(cfg)
        pc = config_for_toggles(PipelineConfig(), {"tse", "cs"})
        support, _, qtm, _, _ = _episode_maps(ep, pc, None, 0)
        protos = PrototypeSet.from_support([list(g) for g in support])
        owned = []
        for rounds in (1, 2, 3):
            res = promote_and_reclassify(qtm, protos, ConfidenceRule(max_rounds=rounds))
            owned.append(res.prototypes.target_owned_classes())
        assert owned[0] <= owned[1] <= owned[2]

    def test_deterministic(self):
        cfg = SynthConfig(seed=23, shift_strength=0.5, pixel_noise=0.15,
                          distractor_rate=0.2, n_query=6, height=8, width=8,
                          channels=48)
        ep, _ = generate_episode(cfg)
        pc = config_for_toggles(PipelineConfig(), {"tse", "cs"})
        support, _, qtm, _, _ = _episode_maps(ep, pc, None, 0)
        protos = PrototypeSet.from_support([list(g) for g in support])
        a = promote_and_reclassify(qtm, protos, ConfidenceRule())
        b = promote_and_reclassify(qtm, protos, ConfidenceRule())
        assert np.array_equal(a.predictions, b.predictions)
        assert a.confident == b.confident

    @pytest.mark.slow
    def test_selection_precision_at_moderate_shift(self):
        # confident selections vs generator truth, 50-episode average
        total = correct = 0
        for i in range(50):
            cfg = SynthConfig(seed=611 ^ i, shift_strength=0.3, pixel_noise=0.15,
                              distractor_rate=0.2, n_query=6, height=8, width=8,
                              channels=48)
            ep, _ = generate_episode(cfg)
            pc = config_for_toggles(PipelineConfig(), {"tse", "cs"})
            support, _, qtm, _, _ = _episode_maps(ep, pc, None, 0)
            protos = PrototypeSet.from_support([list(g) for g in support])
            picked = select_confident(qtm, protos, ConfidenceRule())
            labels = ep.scoring_labels()
            for c, ids in enumerate(picked):
                for q in ids:
                    total += 1
                    correct += int(labels[q] == c)
        assert total > 0
        assert correct / total >= 0.9


class TestClassMatchingLoss:
    def test_hinge_closed_forms(self):
        assert matching_hinge(1.0, 0.0, 1.5) == 0.5
        assert matching_hinge(0.2, 0.2, 1.5) == 1.5
        assert matching_hinge(0.9, 0.1, 0.0) == 0.0

    def test_hinge_monotone_in_pos(self):
        lo = matching_hinge(0.8, 0.2, 1.5)
        hi = matching_hinge(0.6, 0.2, 1.5)
        assert lo <= hi

    def test_per_term_bounds(self):
        margin = 1.5
        rng = np.random.default_rng(4)
        protos = PrototypeSet.from_support(split_classes())
        for _ in range(20):
            queries = [one_hot_map(int(rng.integers(3)), 6, jiggle=0.3, rng=rng)]
            term = class_matching_loss(queries, protos, margin)
            assert max(0.0, margin - 1.0) <= term <= margin

    def test_sum_vs_mean(self):
        rng = np.random.default_rng(5)
        protos = PrototypeSet.from_support(split_classes())
        queries = [one_hot_map(c, 6, jiggle=0.1, rng=rng) for c in (0, 1, 2)]
        total = class_matching_loss(queries, protos, 1.5)
        mean = class_matching_loss(queries, protos, 1.5, reduce="mean")
        assert total == pytest.approx(3.0 * mean, abs=1e-12)

    def test_negative_margin_rejected(self):
        protos = PrototypeSet.from_support(split_classes())
        with pytest.raises(ValueError):
            class_matching_loss([one_hot_map(0, 6)], protos, -0.5)


class TestPrototypeSet:
    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            PrototypeSet([[], []])
