"""Task-specific semantic feature embedding.

Pipeline per task: pick a cluster count from the singular-value profile
of the pooled local features, run K-means separately on the source-side
and target-side locals, optionally warm-start both runs by cross-attending
the fresh initialization to the previous task's centroids, merge the two
clusterings into one centroid set, project every local feature onto the
centroids by cosine, and fold each map's 2x2 spatial quadrants into the
channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .feature_store import read_tensor_file
from .numkit import (
    cosine_matrix,
    farthest_first_init,
    kmeans,
    singular_values,
    softmax,
    unit_rows,
)
from .rng import SplitMix64

# fixed seed for farthest-first initialization: clustering must be
# reproducible without threading an RNG through the whole pipeline
_INIT_SEED = 0x5EED_C1A5


@dataclass
class SemanticCentroids:
    """Cluster centroids a task projects its local features onto."""

    centroids: np.ndarray  # (k, d)
    source: str            # "support" | "query" | "merged"
    task_id: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("need at least 2 centroid rows")
        norms = np.linalg.norm(self.centroids, axis=1)
        if (norms == 0.0).any():
            raise ValueError("centroid rows must be non-zero")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(eq=False)
class SemanticFeatureMap:
    """Per-position feature rows for one image after the quadrant fold.

    features is (grid_h * grid_w, channels) row-major over the folded
    grid.  Raw-local maps reuse this container via from_raw, in which
    case the values are not cosines and channels equal the local dim.
    """

    features: np.ndarray
    grid_h: int
    grid_w: int
    owner: str = ""
    domain: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[0] != self.grid_h * self.grid_w:
            raise ValueError("feature rows disagree with the grid size")

    @classmethod
    def from_raw(cls, image: np.ndarray, owner: str = "", domain: str = "") -> "SemanticFeatureMap":
        h, w, d = image.shape
        rows = np.asarray(image, dtype=np.float64).reshape(h * w, d)
        return cls(rows, h, w, owner, domain)

    @property
    def positions(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices for the centroid warm-start cross-attention."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "AttentionParams":
        eye = np.eye(dim)
        return cls(eye, eye, eye)

    @classmethod
    def from_file(cls, path: str, dim: int) -> "AttentionParams":
        stacked = read_tensor_file(path)
        if stacked.shape != (3, dim, dim):
            raise ValueError(
                f"attention weight tensor must be (3, {dim}, {dim}), got {stacked.shape}"
            )
        arr = stacked.astype(np.float64)
        return cls(arr[0], arr[1], arr[2])


def select_cluster_count(
    locals_matrix: np.ndarray,
    tau_rel: float = 0.1,
    k_min: int = 2,
    k_max: int = 64,
) -> int:
    """Cluster count = number of singular values of the mean-centered
    locals that reach tau_rel times the largest one, clamped to bounds."""
    if not 0.0 < tau_rel < 1.0:
        raise ValueError("tau_rel must lie in (0, 1)")
    if k_min > k_max:
        raise ValueError("k_min exceeds k_max")
    locals_matrix = np.asarray(locals_matrix, dtype=np.float64)
    centered = locals_matrix - locals_matrix.mean(axis=0)
    sv = singular_values(centered)
    scale = float(np.abs(locals_matrix).max()) if locals_matrix.size else 0.0
    if sv[0] <= 1e-10 * max(1.0, scale):
        return k_min  # degenerate: all rows equal
    count = int((sv >= tau_rel * sv[0]).sum())
    return min(max(count, k_min), k_max)


def fuse_centroids(
    c_init: np.ndarray,
    c_prev: np.ndarray | None,
    params: AttentionParams,
) -> np.ndarray:
    """Cross-attend a fresh initialization to the previous task's centroids.

    A = softmax_rows((C_init W_q)(C_prev W_k)^T / sqrt(d)); the output is
    the row-normalized C_init + A (C_prev W_v).  An empty history returns
    C_init unchanged.
    """
    c_init = np.asarray(c_init, dtype=np.float64)
    if c_prev is None or len(c_prev) == 0:
        return c_init.copy()
    c_prev = np.asarray(c_prev, dtype=np.float64)
    d = c_init.shape[1]
    logits = (c_init @ params.w_q) @ (c_prev @ params.w_k).T / math.sqrt(d)
    attn = np.vstack([softmax(row) for row in logits])
    fused = c_init + attn @ (c_prev @ params.w_v)
    return unit_rows(fused)


def _merge_match_average(c_support: np.ndarray, c_query: np.ndarray) -> np.ndarray:
    """One-to-one cosine match, averaged pairs rescaled to the mean norm.

    Rescaling restores the magnitude lost when averaging misaligned
    directions; a near-cancelling pair falls back to the support row.
    """
    cos = cosine_matrix(c_support, c_query)
    rows, cols = linear_sum_assignment(-cos)
    merged = np.empty_like(c_support)
    for i, j in zip(rows, cols):
        avg = (c_support[i] + c_query[j]) / 2.0
        target_norm = (np.linalg.norm(c_support[i]) + np.linalg.norm(c_query[j])) / 2.0
        norm = np.linalg.norm(avg)
        if norm <= 1e-12 * max(1.0, target_norm):
            merged[i] = c_support[i]
        else:
            merged[i] = avg * (target_norm / norm)
    return merged


def cluster_task(
    support_locals: np.ndarray,
    query_locals: np.ndarray,
    k: int,
    warm: SemanticCentroids | None = None,
    params: AttentionParams | None = None,
    merge: str = "match_average",
    task_id: int = 0,
) -> SemanticCentroids:
    """Cluster the two local-feature pools separately and merge.

    merge selects how the two k-centroid sets become the task centroids:
    match_average (default) pairs them one-to-one by cosine and averages,
    concat stacks both (2k rows), support_only discards the query side.
    """
    support_locals = np.asarray(support_locals, dtype=np.float64)
    query_locals = np.asarray(query_locals, dtype=np.float64)
    if support_locals.shape[0] < k or query_locals.shape[0] < k:
        raise ValueError(f"both local pools need at least k={k} rows")
    if merge not in ("match_average", "concat", "support_only"):
        raise ValueError(f"unknown merge strategy '{merge}'")
    if params is None:
        params = AttentionParams.identity(support_locals.shape[1])

    def side(points: np.ndarray) -> np.ndarray:
        init = farthest_first_init(points, k, SplitMix64(_INIT_SEED))
        if warm is not None:
            init = fuse_centroids(init, warm.centroids, params)
        return kmeans(points, k, init).centroids

    c_support = side(support_locals)
    if merge == "support_only":
        merged = c_support
    else:
        c_query = side(query_locals)
        if merge == "concat":
            merged = np.vstack([c_support, c_query])
        else:
            merged = _merge_match_average(c_support, c_query)
    return SemanticCentroids(merged, source="merged", task_id=task_id)


def semantic_map(image: np.ndarray, centroids: SemanticCentroids) -> np.ndarray:
    """Per-position cosine of each local vector against each centroid."""
    h, w, d = image.shape
    if d != centroids.centroids.shape[1]:
        raise ValueError(
            f"local dim {d} does not match centroid dim {centroids.centroids.shape[1]}"
        )
    rows = np.asarray(image, dtype=np.float64).reshape(h * w, d)
    return cosine_matrix(rows, centroids.centroids).reshape(h, w, centroids.k)


def block_split_concat(
    cosine_grid: np.ndarray, owner: str = "", domain: str = ""
) -> SemanticFeatureMap:
    """Fold the four spatial quadrants into the channel axis.

    The grid must have even height and width.  Position (i, j) of the
    half-resolution output concatenates the top-left, top-right,
    bottom-left, bottom-right quadrant values, in that order, giving 4k
    channels.  The mapping is a bijection on the values.
    """
    h, w, k = cosine_grid.shape
    if h % 2 or w % 2:
        raise ValueError(f"grid must have even height and width, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    folded = np.concatenate(
        [
            cosine_grid[:h2, :w2],
            cosine_grid[:h2, w2:],
            cosine_grid[h2:, :w2],
            cosine_grid[h2:, w2:],
        ],
        axis=2,
    )
    return SemanticFeatureMap(folded.reshape(h2 * w2, 4 * k), h2, w2, owner, domain)
