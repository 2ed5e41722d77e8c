"""Tests for cluster-count selection, task clustering, and the quadrant fold."""

import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fewshift.numkit import cosine_matrix, farthest_first_init, kmeans
from fewshift.rng import SplitMix64
from fewshift.semantic import (
    AttentionParams,
    SemanticCentroids,
    SemanticFeatureMap,
    block_split_concat,
    cluster_task,
    fuse_centroids,
    select_cluster_count,
    semantic_map,
)
from fewshift.synthgen import SynthConfig, generate_episode


def matrix_with_spectrum(rng, n, cols, spectrum):
    """Rows whose mean-centered singular values equal the given spectrum."""
    r = len(spectrum)
    ones = np.ones(n) / math.sqrt(n)
    cand = rng.normal(size=(n, r))
    cand -= np.outer(ones, ones @ cand)  # keep column means exactly zero
    u, _ = np.linalg.qr(cand)
    v, _ = np.linalg.qr(rng.normal(size=(cols, r)))
    return (u * np.asarray(spectrum)) @ v.T


class TestSelectClusterCount:
    def test_constructed_spectrum(self):
        rng = np.random.default_rng(0)
        m = matrix_with_spectrum(rng, 40, 12, [10.0, 5.0, 1.0, 0.1])
        assert select_cluster_count(m, tau_rel=0.2, k_min=2, k_max=8) == 2

    def test_degenerate_rows(self):
        m = np.tile([1.0, 2.0, 3.0], (10, 1))
        assert select_cluster_count(m, k_min=2, k_max=8) == 2

    def test_high_threshold_hits_floor(self):
        m = np.random.default_rng(1).normal(size=(30, 6))
        assert select_cluster_count(m, tau_rel=0.999, k_min=2, k_max=8) == 2

    def test_clamps_to_k_max(self):
        m = np.random.default_rng(2).normal(size=(50, 10))
        assert select_cluster_count(m, tau_rel=0.01, k_min=2, k_max=3) == 3

    def test_row_permutation_invariant(self):
        rng = np.random.default_rng(3)
        m = matrix_with_spectrum(rng, 30, 8, [8.0, 4.0, 2.0, 0.05])
        k = select_cluster_count(m, tau_rel=0.3, k_min=2, k_max=8)
        perm = rng.permutation(30)
        assert select_cluster_count(m[perm], tau_rel=0.3, k_min=2, k_max=8) == k

    def test_rotation_invariant(self):
        rng = np.random.default_rng(4)
        m = matrix_with_spectrum(rng, 30, 8, [8.0, 4.0, 2.0, 0.05])
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        k = select_cluster_count(m, tau_rel=0.3, k_min=2, k_max=8)
        assert select_cluster_count(m @ q, tau_rel=0.3, k_min=2, k_max=8) == k

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            select_cluster_count(np.zeros((5, 3)), tau_rel=1.5)


class TestFuseCentroids:
    def test_empty_history_returns_init(self):
        init = np.random.default_rng(5).normal(size=(3, 6))
        out = fuse_centroids(init, None, AttentionParams.identity(6))
        assert np.array_equal(out, init)
        out2 = fuse_centroids(init, np.zeros((0, 6)), AttentionParams.identity(6))
        assert np.array_equal(out2, init)

    def test_orthonormal_self_attention_keeps_direction(self):
        rng = np.random.default_rng(6)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        rows = q[:4]
        out = fuse_centroids(rows, rows, AttentionParams.identity(8))
        cos = (out * rows).sum(axis=1)
        assert np.all(cos >= 1.0 / math.sqrt(2.0))

    def test_zero_value_projection(self):
        rng = np.random.default_rng(7)
        init = rng.normal(size=(3, 5))
        prev = rng.normal(size=(4, 5))
        eye = np.eye(5)
        out = fuse_centroids(init, prev, AttentionParams(eye, eye, np.zeros((5, 5))))
        expected = init / np.linalg.norm(init, axis=1, keepdims=True)
        assert np.allclose(out, expected, atol=1e-12)

    def test_output_rows_unit_norm(self):
        rng = np.random.default_rng(8)
        out = fuse_centroids(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)),
                             AttentionParams.identity(4))
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def blob_points(rng, center, n, spread=1e-7):
    return center + spread * rng.normal(size=(n, len(center)))


class TestClusterTask:
    def test_two_blob_merge_recovers_means(self):
        rng = np.random.default_rng(9)
        pts = np.vstack([
            blob_points(rng, np.array([2.0, 0.0, 0.0]), 20),
            blob_points(rng, np.array([0.0, 3.0, 0.0]), 20),
        ])
        cents = cluster_task(pts, pts.copy(), 2)
        blob_means = np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        cost = -cosine_matrix(cents.centroids, blob_means)
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            assert np.allclose(cents.centroids[i], blob_means[j], atol=1e-6)

    def test_support_only_matches_plain_kmeans(self):
        rng = np.random.default_rng(10)
        support = rng.normal(size=(60, 5))
        query = rng.normal(size=(40, 5))
        cents = cluster_task(support, query, 3, merge="support_only")
        from fewshift.semantic import _INIT_SEED

        init = farthest_first_init(support, 3, SplitMix64(_INIT_SEED))
        expected = kmeans(support, 3, init).centroids
        assert np.array_equal(cents.centroids, expected)

    def test_concat_doubles_rows(self):
        rng = np.random.default_rng(11)
        cents = cluster_task(rng.normal(size=(30, 4)), rng.normal(size=(30, 4)),
                             2, merge="concat")
        assert cents.k == 4

    def test_match_average_keeps_k(self):
        rng = np.random.default_rng(12)
        cents = cluster_task(rng.normal(size=(30, 4)), rng.normal(size=(30, 4)), 3)
        assert cents.k == 3
        assert cents.source == "merged"

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        support = rng.normal(size=(50, 6))
        query = rng.normal(size=(50, 6))
        a = cluster_task(support, query, 4)
        b = cluster_task(support, query, 4)
        assert np.array_equal(a.centroids, b.centroids)

    def test_planted_parts_recovered(self):
        sigma_p = 0.05
        cfg = SynthConfig(seed=31, n_way=1, n_query=12, height=8, width=8,
                          channels=32, parts_per_class=4, part_noise=sigma_p,
                          pixel_noise=0.05, shift_strength=0.0, distractor_rate=0.0)
        episode, truth = generate_episode(cfg)
        d = 32
        support_locals = np.vstack(
            [np.asarray(m, float).reshape(-1, d) for grp in episode.support for m in grp]
            + [np.asarray(m, float).reshape(-1, d) for m in episode.query_source]
        )
        query_locals = np.vstack(
            [np.asarray(m, float).reshape(-1, d) for m in episode.query_target]
        )
        cents = cluster_task(support_locals, query_locals, 4)
        prototypes = truth.prototypes[0]
        dist = np.linalg.norm(
            cents.centroids[:, None, :] - prototypes[None, :, :], axis=2
        )
        rows, cols = linear_sum_assignment(dist)
        assert len(set(cols)) == 4  # one distinct prototype per centroid
        radius = 3.0 * sigma_p * math.sqrt(d)
        assert dist[rows, cols].max() <= radius

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            cluster_task(np.zeros((2, 3)), np.zeros((10, 3)), 3)

    def test_unknown_merge(self):
        with pytest.raises(ValueError):
            cluster_task(np.zeros((5, 3)), np.zeros((5, 3)), 2, merge="bogus")


class TestSemanticMap:
    def test_exact_centroid_match_scores_one(self):
        cents = SemanticCentroids(np.array([[1.0, 0.0], [0.0, 1.0]]), "merged")
        img = np.zeros((2, 2, 2))
        img[0, 0] = [2.0, 0.0]  # parallel to centroid 0
        grid = semantic_map(img, cents)
        assert grid[0, 0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_local_all_zero(self):
        cents = SemanticCentroids(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), "merged")
        img = np.zeros((1, 1, 3))
        img[0, 0] = [0.0, 0.0, 5.0]
        assert np.array_equal(semantic_map(img, cents)[0, 0], [0.0, 0.0])

    def test_against_naive_loop(self):
        rng = np.random.default_rng(14)
        img = rng.normal(size=(6, 6, 32))
        cents = SemanticCentroids(rng.normal(size=(5, 32)), "merged")
        grid = semantic_map(img, cents)
        # matmul reassociation keeps entries within an ulp of the scalar path
        for r in range(6):
            for c in range(6):
                for j in range(5):
                    v = img[r, c]
                    m = cents.centroids[j]
                    want = np.dot(v, m) / (np.linalg.norm(v) * np.linalg.norm(m))
                    assert grid[r, c, j] == pytest.approx(want, abs=1e-13)

    def test_scale_invariance(self):
        rng = np.random.default_rng(15)
        img = rng.normal(size=(4, 4, 8))
        cents = SemanticCentroids(rng.normal(size=(3, 8)), "merged")
        scaled = SemanticCentroids(cents.centroids * 7.5, "merged")
        a = semantic_map(img, cents)
        b = semantic_map(img * 0.25, scaled)
        assert np.allclose(a, b, atol=1e-9)

    def test_dim_mismatch(self):
        cents = SemanticCentroids(np.ones((2, 5)), "merged")
        with pytest.raises(ValueError):
            semantic_map(np.zeros((2, 2, 4)), cents)


class TestBlockSplit:
    def test_minimal_grid_order(self):
        grid = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])  # 2x2x1
        fmap = block_split_concat(grid)
        assert fmap.positions == 1
        assert fmap.channels == 4
        assert np.array_equal(fmap.features[0], [1.0, 2.0, 3.0, 4.0])

    def test_multiset_preserved(self):
        grid = np.random.default_rng(16).normal(size=(4, 4, 3))
        fmap = block_split_concat(grid)
        assert fmap.features.size == 48
        assert np.array_equal(
            np.sort(fmap.features, axis=None), np.sort(grid, axis=None)
        )

    def test_odd_grid_rejected(self):
        with pytest.raises(ValueError):
            block_split_concat(np.zeros((3, 4, 2)))

    def test_inverse_round_trip(self):
        grid = np.random.default_rng(17).normal(size=(6, 8, 5))
        fmap = block_split_concat(grid)
        h2, w2, k = 3, 4, 5
        folded = fmap.features.reshape(h2, w2, 4 * k)
        rebuilt = np.empty_like(grid)
        rebuilt[:h2, :w2] = folded[:, :, 0 * k:1 * k]
        rebuilt[:h2, w2:] = folded[:, :, 1 * k:2 * k]
        rebuilt[h2:, :w2] = folded[:, :, 2 * k:3 * k]
        rebuilt[h2:, w2:] = folded[:, :, 3 * k:4 * k]
        assert np.array_equal(rebuilt, grid)

    def test_from_raw_wrapping(self):
        img = np.random.default_rng(18).normal(size=(5, 7, 6))
        fmap = SemanticFeatureMap.from_raw(img, owner="x", domain="source")
        assert fmap.positions == 35
        assert fmap.channels == 6
        assert np.array_equal(fmap.features, img.reshape(35, 6))


class TestCentroidValidation:
    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            SemanticCentroids(np.array([[1.0, 0.0], [0.0, 0.0]]), "merged")

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            SemanticCentroids(np.ones((1, 4)), "support")


class TestAttentionParams:
    def test_identity(self):
        params = AttentionParams.identity(4)
        assert np.array_equal(params.w_q, np.eye(4))

    def test_from_file(self, tmp_path):
        from fewshift.feature_store import write_tensor_file

        stacked = np.random.default_rng(19).normal(size=(3, 6, 6)).astype(np.float32)
        path = tmp_path / "attn.ftns"
        write_tensor_file(stacked, path)
        params = AttentionParams.from_file(str(path), 6)
        assert np.allclose(params.w_k, stacked[1], atol=1e-7)

    def test_from_file_wrong_shape(self, tmp_path):
        from fewshift.feature_store import write_tensor_file

        path = tmp_path / "attn.ftns"
        write_tensor_file(np.zeros((2, 6, 6), dtype=np.float32), path)
        with pytest.raises(ValueError):
            AttentionParams.from_file(str(path), 6)
