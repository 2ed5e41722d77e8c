"""Per-episode pipeline orchestration, suite evaluation, and ablation.

run_episode wires the stages together: cluster-count selection, task
clustering (optionally warm-started from the previous task's centroids),
semantic projection and quadrant fold, pattern scoring, cross-domain
self-training, and the four loss terms combined as

    total = l_cls + lambda_sfa * l_sfa + lambda_spa * l_spa + lambda_clm * l_clm

Nothing is trained; losses are outputs.  Predictions are produced by a
label-blind forward pass and only afterwards scored against the
episode's quarantined target labels.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import alignment, patterns, selftrain, semantic
from .errors import ConfigError
from .feature_store import Episode, EpisodeManifest, load_episode
from .rng import derive_seed
from .synthgen import SynthConfig, generate_episode

FEATURE_MODES = ("semantic", "raw_local")
CSV_COLUMNS = (
    "episode_id", "accuracy", "l_cls", "l_sfa", "l_spa", "l_clm",
    "total", "k", "rounds", "confident_count", "wall_ms",
)


@dataclass(frozen=True)
class PipelineConfig:
    lambda_sfa: float = 0.1
    lambda_spa: float = 0.05
    lambda_clm: float = 0.01
    margin: float = 1.5
    tau_rel: float = 0.1
    k_min: int = 2
    k_max: int = 0              # 0 -> min(d // 2, 64) at run time
    merge: str = "match_average"
    use_catt: bool = True
    attention_weights: str = ""
    pooling: str = "support"
    normalize_scores: bool = True
    confidence_measure: str = "score_ratio"
    confidence_threshold: float = 1.7
    max_rounds: int = 3
    replace_mode: str = "replace"
    self_training: bool = True
    ridge: float = 1e-4
    feature_mode: str = "semantic"

    def __post_init__(self):
        for name in ("lambda_sfa", "lambda_spa", "lambda_clm"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.margin < 0:
            raise ConfigError("margin", "must be >= 0")
        if not 0.0 < self.tau_rel < 1.0:
            raise ConfigError("tau_rel", "must lie in (0, 1)")
        if self.k_min < 2:
            raise ConfigError("k_min", "must be >= 2")
        if self.k_max and self.k_max < self.k_min:
            raise ConfigError("k_max", "must be 0 or >= k_min")
        if self.merge not in ("match_average", "concat", "support_only"):
            raise ConfigError("merge", f"unknown strategy '{self.merge}'")
        if self.pooling not in patterns.POOLING_SIDES:
            raise ConfigError("pooling", f"must be one of {patterns.POOLING_SIDES}")
        if self.confidence_measure not in selftrain.CONFIDENCE_MEASURES:
            raise ConfigError(
                "confidence_measure",
                f"must be one of {selftrain.CONFIDENCE_MEASURES}",
            )
        if self.confidence_threshold <= 0:
            raise ConfigError("confidence_threshold", "must be positive")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds", "must be >= 1")
        if self.replace_mode not in selftrain.REPLACE_MODES:
            raise ConfigError(
                "replace_mode", f"must be one of {selftrain.REPLACE_MODES}"
            )
        if self.ridge < 0:
            raise ConfigError("ridge", "must be >= 0")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError("feature_mode", f"must be one of {FEATURE_MODES}")

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def confidence_rule(self) -> selftrain.ConfidenceRule:
        return selftrain.ConfidenceRule(
            self.confidence_measure, self.confidence_threshold, self.max_rounds
        )


@dataclass
class EpisodeReport:
    episode_id: str
    predictions: np.ndarray
    correct: np.ndarray
    accuracy: float
    l_cls: float
    l_sfa: float
    l_spa: float
    l_clm: float
    total: float
    k: int
    rounds: int
    confident_per_class: list[int]
    spa_skipped: int
    wall_ms: float
    episode_hash: str

    @property
    def confident_count(self) -> int:
        return sum(self.confident_per_class)

    def csv_row(self) -> list[str]:
        return [
            self.episode_id,
            repr(float(self.accuracy)),
            repr(float(self.l_cls)),
            repr(float(self.l_sfa)),
            repr(float(self.l_spa)),
            repr(float(self.l_clm)),
            repr(float(self.total)),
            str(self.k),
            str(self.rounds),
            str(self.confident_count),
            repr(float(self.wall_ms)),
        ]


@dataclass
class ForwardResult:
    """Everything the label-blind forward pass produces."""

    predictions: np.ndarray
    l_cls: float
    l_sfa: float
    l_spa: float
    l_clm: float
    k: int
    rounds: int
    confident_per_class: list[int]
    spa_skipped: int
    centroids: semantic.SemanticCentroids | None


def _episode_maps(
    episode: Episode, cfg: PipelineConfig, history, task_id: int
):
    """Embed every image; returns (support groups, qs maps, qt maps, k, centroids)."""
    h, w, d = episode.grid
    if cfg.feature_mode == "raw_local":
        def raw(img, owner, domain):
            return semantic.SemanticFeatureMap.from_raw(img, owner, domain)

        support = [
            [raw(m, f"s{c}_{j}", "source") for j, m in enumerate(group)]
            for c, group in enumerate(episode.support)
        ]
        qs = [raw(m, f"qs{i}", "source") for i, m in enumerate(episode.query_source)]
        qt = [raw(m, f"qt{i}", "target") for i, m in enumerate(episode.query_target)]
        return support, qs, qt, 0, None

    source_imgs = [m for group in episode.support for m in group]
    source_imgs += list(episode.query_source)
    source_locals = np.vstack(
        [np.asarray(m, dtype=np.float64).reshape(-1, d) for m in source_imgs]
    )
    target_locals = np.vstack(
        [np.asarray(m, dtype=np.float64).reshape(-1, d) for m in episode.query_target]
    )
    all_locals = np.vstack([source_locals, target_locals])
    k_max = cfg.k_max if cfg.k_max else min(d // 2, 64)
    k = semantic.select_cluster_count(all_locals, cfg.tau_rel, cfg.k_min, k_max)
    params = (
        semantic.AttentionParams.from_file(cfg.attention_weights, d)
        if cfg.attention_weights
        else semantic.AttentionParams.identity(d)
    )
    warm = history if cfg.use_catt else None
    cents = semantic.cluster_task(
        source_locals, target_locals, k, warm, params, cfg.merge, task_id
    )

    def embed(img, owner, domain):
        grid = semantic.semantic_map(np.asarray(img, dtype=np.float64), cents)
        return semantic.block_split_concat(grid, owner, domain)

    support = [
        [embed(m, f"s{c}_{j}", "source") for j, m in enumerate(group)]
        for c, group in enumerate(episode.support)
    ]
    qs = [embed(m, f"qs{i}", "source") for i, m in enumerate(episode.query_source)]
    qt = [embed(m, f"qt{i}", "target") for i, m in enumerate(episode.query_target)]
    return support, qs, qt, k, cents


def forward_episode(
    episode: Episode,
    cfg: PipelineConfig,
    history: semantic.SemanticCentroids | None = None,
    task_id: int = 0,
) -> ForwardResult:
    """Label-blind pass: embeddings, losses, and target predictions.

    Target labels are untouched; scoring happens in run_episode.
    """
    n = episode.n_way
    support, qs_maps, qt_maps, k, cents = _episode_maps(episode, cfg, history, task_id)
    support_groups = [list(group) for group in support]
    pool, norm = cfg.pooling, cfg.normalize_scores

    qs_table = patterns.score_set(qs_maps, support_groups, pool, norm)
    l_cls = patterns.cross_entropy(qs_table.scores, episode.query_source_labels)

    qt_table = patterns.score_set(qt_maps, support_groups, pool, norm)
    protos = selftrain.PrototypeSet.from_support(support_groups)
    if cfg.self_training:
        result = selftrain.promote_and_reclassify(
            qt_maps, protos, cfg.confidence_rule(), pool, norm,
            cfg.replace_mode, initial_table=qt_table,
        )
        predictions = result.predictions
        rounds = result.rounds_used
        confident = [len(ids) for ids in result.confident]
        final_protos = result.prototypes
    else:
        predictions = qt_table.predictions
        rounds = 0
        confident = [0] * n
        final_protos = protos

    l_clm = selftrain.class_matching_loss(
        qt_maps, final_protos, cfg.margin, pool, norm
    )
    l_sfa = alignment.sfa_loss(qs_maps, qt_maps, cfg.ridge)

    # pattern alignment uses the support-based (round-0) patterns on both
    # sides so the per-class vectors share one length
    def group_by_class(table):
        grouped = [[] for _ in range(n)]
        for q in range(len(table.patterns)):
            for c in range(n):
                grouped[c].append(table.patterns[q][c])
        return grouped

    l_spa, skipped = alignment.spa_loss(
        group_by_class(qs_table), group_by_class(qt_table), cfg.ridge
    )
    return ForwardResult(
        predictions, l_cls, l_sfa, l_spa, l_clm, k, rounds, confident,
        skipped, cents,
    )


def run_episode(
    episode: Episode,
    cfg: PipelineConfig,
    history: semantic.SemanticCentroids | None = None,
    episode_id: str = "0",
    task_id: int = 0,
) -> tuple[EpisodeReport, semantic.SemanticCentroids | None]:
    """Forward pass plus scoring; returns the report and the centroids
    the next task may warm-start from."""
    start = time.perf_counter()
    fwd = forward_episode(episode, cfg, history, task_id)
    labels = np.asarray(episode.scoring_labels())
    correct = fwd.predictions == labels
    accuracy = float(correct.mean())
    total = (
        fwd.l_cls
        + cfg.lambda_sfa * fwd.l_sfa
        + cfg.lambda_spa * fwd.l_spa
        + cfg.lambda_clm * fwd.l_clm
    )
    wall_ms = (time.perf_counter() - start) * 1e3
    report = EpisodeReport(
        episode_id=episode_id,
        predictions=fwd.predictions,
        correct=correct,
        accuracy=accuracy,
        l_cls=fwd.l_cls,
        l_sfa=fwd.l_sfa,
        l_spa=fwd.l_spa,
        l_clm=fwd.l_clm,
        total=total,
        k=fwd.k,
        rounds=fwd.rounds,
        confident_per_class=fwd.confident_per_class,
        spa_skipped=fwd.spa_skipped,
        wall_ms=wall_ms,
        episode_hash=episode.content_hash(),
    )
    return report, fwd.centroids


class TaskStream(Protocol):
    """Random-access source of episodes for a run."""

    def episode(self, index: int) -> tuple[str, Episode]: ...

    def descriptor(self) -> str: ...


class SyntheticTaskStream:
    """Episodes generated on demand; episode i uses seed base ^ i."""

    def __init__(self, base: SynthConfig):
        self.base = base

    def episode(self, index: int) -> tuple[str, Episode]:
        cfg = replace(self.base, seed=derive_seed(self.base.seed, index))
        ep, _ = generate_episode(cfg)
        return f"synth{index:04d}", ep

    def descriptor(self) -> str:
        return "synth:" + json.dumps(self.base.to_dict(), sort_keys=True)


class ManifestTaskStream:
    """Episodes loaded from manifest files on disk."""

    def __init__(self, manifest_paths: Sequence[str | Path]):
        self.paths = [Path(p) for p in manifest_paths]

    def __len__(self) -> int:
        return len(self.paths)

    def episode(self, index: int) -> tuple[str, Episode]:
        path = self.paths[index]
        ep = load_episode(EpisodeManifest.load(path), path.parent)
        return path.parent.name or path.stem, ep

    def descriptor(self) -> str:
        return "manifests:" + ",".join(str(p) for p in self.paths)


@dataclass
class RunReport:
    reports: list[EpisodeReport]
    mean_accuracy: float
    ci95: float
    fingerprint: str
    failures: list[tuple[str, str]]

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(r.csv_row()) for r in self.reports]
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [
            f"episodes: {len(self.reports)}",
            f"mean_accuracy: {self.mean_accuracy:.4f}",
            f"ci95_half_width: {self.ci95:.4f}",
            f"fingerprint: {self.fingerprint}",
        ]
        if self.failures:
            lines.append(f"failures: {len(self.failures)}")
        return "\n".join(lines) + "\n"


def _fingerprint(cfg: PipelineConfig, descriptor: str, n_tasks: int) -> str:
    blob = json.dumps(
        {"config": cfg.to_dict(), "stream": descriptor, "tasks": n_tasks},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate(
    stream: TaskStream,
    n_tasks: int,
    cfg: PipelineConfig,
    threads: int = 1,
) -> RunReport:
    """Run n_tasks episodes and aggregate mean accuracy with a 95% CI.

    With the centroid warm start enabled the episodes are serialized so
    each task can inherit the previous task's centroids; otherwise the
    episodes are independent and may fan out over threads.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    reports: list[EpisodeReport | None] = [None] * n_tasks
    failures: list[tuple[str, str]] = []

    chained = cfg.use_catt and cfg.feature_mode == "semantic"
    if chained or threads <= 1:
        history = None
        for i in range(n_tasks):
            eid, ep = stream.episode(i)
            try:
                reports[i], cents = run_episode(ep, cfg, history, eid, task_id=i)
            except Exception as exc:  # episode failure aborts that episode only
                failures.append((eid, repr(exc)))
                continue
            if chained:
                history = cents
    else:
        def one(i: int):
            eid, ep = stream.episode(i)
            try:
                return i, run_episode(ep, cfg, None, eid, task_id=i)[0], None
            except Exception as exc:
                return i, None, (eid, repr(exc))

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, rep, fail in pool.map(one, range(n_tasks)):
                if fail is not None:
                    failures.append(fail)
                else:
                    reports[i] = rep

    done = [r for r in reports if r is not None]
    if not done:
        raise RuntimeError("every episode failed")
    accs = np.array([r.accuracy for r in done])
    mean = float(accs.mean())
    ci = (
        1.96 * float(accs.std(ddof=1)) / math.sqrt(len(accs))
        if len(accs) > 1
        else 0.0
    )
    return RunReport(done, mean, ci, _fingerprint(cfg, stream.descriptor(), n_tasks), failures)


TOGGLES = ("tse", "catt", "cs")


def config_for_toggles(base: PipelineConfig, toggles: set[str]) -> PipelineConfig:
    """Map an ablation row's module toggles onto a config."""
    unknown = toggles - set(TOGGLES)
    if unknown:
        raise ValueError(f"unknown toggles {sorted(unknown)}")
    return replace(
        base,
        feature_mode="semantic" if "tse" in toggles else "raw_local",
        use_catt="catt" in toggles and "tse" in toggles,
        self_training="cs" in toggles,
    )


@dataclass
class AblationRow:
    toggles: frozenset[str]
    report: RunReport

    def label(self) -> str:
        return "+".join(t for t in TOGGLES if t in self.toggles) or "baseline"


def ablate(
    base: PipelineConfig,
    grid: Sequence[set[str]],
    stream_factory: Callable[[], TaskStream],
    n_tasks: int,
    threads: int = 1,
) -> list[AblationRow]:
    """Evaluate every toggle set on identical episodes (paired design).

    The pairing is asserted: all variants must consume byte-identical
    episode streams, verified through the per-episode content hashes.
    """
    rows = []
    for toggles in grid:
        cfg = config_for_toggles(base, set(toggles))
        report = evaluate(stream_factory(), n_tasks, cfg, threads)
        rows.append(AblationRow(frozenset(toggles), report))
    if len(rows) > 1:
        reference = [r.episode_hash for r in rows[0].report.reports]
        for row in rows[1:]:
            hashes = [r.episode_hash for r in row.report.reports]
            if hashes != reference:
                raise AssertionError("ablation variants saw different episodes")
    return rows
