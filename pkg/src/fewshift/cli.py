"""Command-line front door.

Subcommands: gen (write synthetic episodes to disk), run (one episode),
eval (a suite with CSV + summary), ablate (paired toggle grid), dump
(intermediate tensors for external plotting).  Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine
from .engine import (
    ManifestTaskStream,
    PipelineConfig,
    SyntheticTaskStream,
    ablate,
    evaluate,
    run_episode,
)
from .errors import ConfigError, FewshiftError
from .feature_store import (
    EpisodeManifest,
    ManifestEntry,
    load_episode,
    write_tensor_file,
)
from .rng import derive_seed
from .synthgen import SynthConfig, generate_episode

DUMP_STAGES = ("centroids", "semantic", "patterns", "scores")


def _load_synth_config(path: str, seed_override: int | None) -> tuple[SynthConfig, int]:
    raw = json.loads(Path(path).read_text())
    episodes = int(raw.pop("episodes", 1))
    if episodes < 1:
        raise ConfigError("episodes", "must be >= 1")
    if seed_override is not None:
        raw["seed"] = seed_override
    return SynthConfig.from_dict(raw), episodes


def _load_pipeline_config(path: str) -> PipelineConfig:
    return PipelineConfig.from_file(path)


def _manifest_paths(episodes_dir: str) -> list[Path]:
    root = Path(episodes_dir)
    paths = sorted(root.glob("*/manifest.json"))
    if not paths:
        paths = sorted(root.glob("manifest*.json"))
    if not paths:
        raise FileNotFoundError(f"no manifests under {root}")
    return paths


def _write_episode(episode, out_dir: Path, cfg: SynthConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    support_entries = []
    for c, group in enumerate(episode.support):
        for j, arr in enumerate(group):
            name = f"support_c{c}_s{j}.ftns"
            write_tensor_file(arr, out_dir / name)
            support_entries.append(ManifestEntry(name, c, "source"))
    qs_entries = []
    for i, (arr, lab) in enumerate(
        zip(episode.query_source, episode.query_source_labels)
    ):
        name = f"query_source_{i:03d}.ftns"
        write_tensor_file(arr, out_dir / name)
        qs_entries.append(ManifestEntry(name, lab, "source"))
    qt_entries = []
    for i, (arr, lab) in enumerate(
        zip(episode.query_target, episode.scoring_labels())
    ):
        name = f"query_target_{i:03d}.ftns"
        write_tensor_file(arr, out_dir / name)
        qt_entries.append(ManifestEntry(name, lab, "target"))
    manifest = EpisodeManifest(
        n_way=cfg.n_way,
        k_shot=cfg.k_shot,
        n_query=cfg.n_query,
        height=cfg.height,
        width=cfg.width,
        channels=cfg.channels,
        support=tuple(support_entries),
        query_source=tuple(qs_entries),
        query_target=tuple(qt_entries),
    )
    manifest.save(out_dir / "manifest.json")


def cmd_gen(args) -> int:
    base, episodes = _load_synth_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(episodes):
        cfg = replace(base, seed=derive_seed(base.seed, i))
        episode, _ = generate_episode(cfg)
        _write_episode(episode, out / f"episode_{i:03d}", cfg)
    print(f"wrote {episodes} episodes under {out} (base seed {base.seed})")
    return 0


def _single_episode(args):
    if args.synth:
        base, _ = _load_synth_config(args.synth, args.seed)
        episode, _ = generate_episode(base)
        return "synth0000", episode
    path = Path(args.episode)
    episode = load_episode(EpisodeManifest.load(path), path.parent)
    return path.parent.name or path.stem, episode


def cmd_run(args) -> int:
    cfg = _load_pipeline_config(args.pipeline) if args.pipeline else PipelineConfig()
    eid, episode = _single_episode(args)
    report, _ = run_episode(episode, cfg, episode_id=eid)
    print(f"episode {report.episode_id}: accuracy {report.accuracy:.4f}")
    print(
        f"losses: l_cls {report.l_cls:.6f}  l_sfa {report.l_sfa:.6f}  "
        f"l_spa {report.l_spa:.6f}  l_clm {report.l_clm:.6f}  total {report.total:.6f}"
    )
    print(
        f"k {report.k}  rounds {report.rounds}  "
        f"confident {report.confident_count}  wall_ms {report.wall_ms:.1f}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_pipeline_config(args.pipeline) if args.pipeline else PipelineConfig()
    if args.synth:
        base, episodes = _load_synth_config(args.synth, args.seed)
        stream = SyntheticTaskStream(base)
        n_tasks = args.tasks or episodes
    else:
        stream = ManifestTaskStream(_manifest_paths(args.episodes))
        n_tasks = args.tasks or len(stream)
    report = evaluate(stream, n_tasks, cfg, threads=args.threads)
    out = Path(args.out)
    out.write_text(report.to_csv())
    summary = report.summary_text() + f"feature_mode: {cfg.feature_mode}\n"
    out.with_suffix(".summary.txt").write_text(summary)
    print(summary, end="")
    for eid, err in report.failures:
        print(f"episode {eid} failed: {err}", file=sys.stderr)
    return 0


def _parse_grid(text: str) -> list[set[str]]:
    grid = []
    for token in text.split(","):
        token = token.strip()
        if token in ("", "none", "baseline"):
            grid.append(set())
            continue
        toggles = set(token.split("+"))
        unknown = toggles - set(engine.TOGGLES)
        if unknown:
            raise ConfigError("grid", f"unknown toggle '{sorted(unknown)[0]}'")
        grid.append(toggles)
    return grid


def cmd_ablate(args) -> int:
    cfg = _load_pipeline_config(args.pipeline) if args.pipeline else PipelineConfig()
    base, episodes = _load_synth_config(args.synth, args.seed)
    n_tasks = args.tasks or episodes
    grid = _parse_grid(args.grid)
    rows = ablate(cfg, grid, lambda: SyntheticTaskStream(base), n_tasks, args.threads)
    lines = ["variant,mean_accuracy,ci95"]
    for row in rows:
        lines.append(f"{row.label()},{row.report.mean_accuracy!r},{row.report.ci95!r}")
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return 0


def cmd_dump(args) -> int:
    if args.stage not in DUMP_STAGES:
        print(
            f"unknown stage '{args.stage}'; valid stages: {', '.join(DUMP_STAGES)}",
            file=sys.stderr,
        )
        return 2
    cfg = _load_pipeline_config(args.pipeline) if args.pipeline else PipelineConfig()
    path = Path(args.episode)
    episode = load_episode(EpisodeManifest.load(path), path.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    support, qs_maps, qt_maps, k, cents = engine._episode_maps(episode, cfg, None, 0)
    if args.stage == "centroids":
        if cents is None:
            print("raw_local mode has no centroids", file=sys.stderr)
            return 2
        write_tensor_file(cents.centroids.astype(np.float32), out / "centroids.ftns")
        print(f"wrote centroids.ftns (k={cents.k})")
        return 0
    if args.stage == "semantic":
        count = 0
        for group in support:
            for m in group:
                grid = m.features.reshape(m.grid_h, m.grid_w, m.channels)
                write_tensor_file(grid.astype(np.float32), out / f"semantic_{m.owner}.ftns")
                count += 1
        for m in qs_maps + qt_maps:
            grid = m.features.reshape(m.grid_h, m.grid_w, m.channels)
            write_tensor_file(grid.astype(np.float32), out / f"semantic_{m.owner}.ftns")
            count += 1
        print(f"wrote {count} semantic maps")
        return 0

    from .patterns import score_set

    groups = [list(g) for g in support]
    for prefix, maps in (("qs", qs_maps), ("qt", qt_maps)):
        table = score_set(maps, groups, cfg.pooling, cfg.normalize_scores)
        for q in range(len(maps)):
            if args.stage == "scores":
                write_tensor_file(
                    table.scores[q].astype(np.float32),
                    out / f"scores_{prefix}{q}.ftns",
                )
            else:
                stacked = np.vstack([p.vector for p in table.patterns[q]])
                write_tensor_file(
                    stacked.astype(np.float32), out / f"patterns_{prefix}{q}.ftns"
                )
    print(f"wrote {args.stage} for {len(qs_maps) + len(qt_maps)} queries")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshift",
        description="Few-shot cross-domain episode pipeline",
    )
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1,
        help="episode-level parallelism (ignored when the centroid chain is on)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate synthetic episodes on disk")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run one episode and print its report")
    src = p_run.add_mutually_exclusive_group(required=True)
    src.add_argument("--episode", help="path to a manifest.json")
    src.add_argument("--synth", help="path to a generator config")
    p_run.add_argument("--pipeline")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a suite, write CSV + summary")
    src = p_eval.add_mutually_exclusive_group(required=True)
    src.add_argument("--episodes", help="directory of generated episodes")
    src.add_argument("--synth", help="path to a generator config")
    p_eval.add_argument("--pipeline")
    p_eval.add_argument("--tasks", type=int, default=0)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="paired toggle grid over one episode stream")
    p_abl.add_argument("--synth", required=True)
    p_abl.add_argument("--pipeline")
    p_abl.add_argument("--tasks", type=int, default=0)
    p_abl.add_argument(
        "--grid", default="tse,cs,tse+catt,tse+cs,tse+catt+cs",
        help="comma-separated variants, toggles joined by '+'",
    )
    p_abl.add_argument("--out")
    p_abl.set_defaults(func=cmd_ablate)

    p_dump = sub.add_parser("dump", help="write intermediate tensors to disk")
    p_dump.add_argument("--episode", required=True, help="path to a manifest.json")
    p_dump.add_argument("--stage", required=True)
    p_dump.add_argument("--pipeline")
    p_dump.add_argument("--out", required=True)
    p_dump.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FewshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
