"""Command-line entry point for the audit pipeline.

The config file is the source of truth; flags override single values
for one invocation without editing it. Each subcommand runs one stage
(or all of them for ``run``), and ``validate`` checks the config
without touching the output directory.

Exit codes: 0 success, 2 config error, 3 stage failure with nothing
completed in this run, 4 partial completion.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .pipeline import (
    _COMBINED_KEY,
    ConfigError,
    EmbeddingSourceSpec,
    LockHeld,
    PipelineConfig,
    load_config,
    run_pipeline,
    validate_config,
)

STAGE_COMMANDS = ("collect", "keyframes", "embed", "analyze", "project")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftaudit",
        description="Audit content drift in recommendation chains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "collect": "collect or ingest recommendation chains",
        "keyframes": "extract keyframes from frame directories",
        "embed": "produce embeddings for keyframes and captions",
        "analyze": "compute the divergence report",
        "project": "emit 2-D plot CSVs",
        "run": "run every configured stage",
        "validate": "check the config and report all findings",
    }
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, type=Path, help="pipeline config JSON")
        sp.add_argument("--out-dir", type=Path, help="override the output directory")
        sp.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
        if name in ("collect", "run", "validate"):
            sp.add_argument("--depth", type=int, help="chain depth for synthetic collection")
            sp.add_argument(
                "--seeds-file",
                type=Path,
                help="newline-delimited seed video ids for synthetic collection",
            )
            sp.add_argument(
                "--provider",
                choices=("synthetic", "jsonl-replay"),
                help="assert the chain source kind (jsonl-replay reads dataset files)",
            )
            sp.add_argument("--drift", type=float, help="drift probability override")
        if name in ("keyframes", "run", "validate"):
            sp.add_argument("--frames-root", type=Path, help="root of frame directories")
            sp.add_argument(
                "--lambda", dest="lam", type=float, help="keyframe threshold multiplier"
            )
            sp.add_argument("--min-gap", type=int, help="minimum spacing between keyframes")
        if name in ("embed", "run", "validate"):
            sp.add_argument(
                "--embeddings",
                type=Path,
                help="load vectors from this file and skip the embedding service",
            )
        if name in ("analyze", "run", "validate"):
            sp.add_argument("--k-codebook", type=int, help="codebook size for JSD")
            sp.add_argument("--n-slices", type=int, help="projection count for sliced W1")
            sp.add_argument(
                "--max-exact-pairs",
                type=int,
                help="largest cloud still using exact pairwise distances",
            )
            sp.add_argument(
                "--on-projection",
                action="store_true",
                default=None,
                help="run metrics on shared 2-D PCA coordinates",
            )
        if name in ("collect", "analyze", "run", "validate"):
            sp.add_argument(
                "--rng-seed",
                type=int,
                help="override collection and analysis seeds together",
            )
        if name in ("project", "run", "validate"):
            sp.add_argument(
                "--project",
                dest="project_method",
                choices=("pca", "import"),
                help="projection method",
            )
            sp.add_argument(
                "--coords-file",
                action="append",
                metavar="MODALITY=PATH",
                help="imported 2-D coordinates, one per modality (repeatable)",
            )
    return parser


def _override_synthetic(cfg: PipelineConfig, **changes) -> PipelineConfig:
    datasets = tuple(
        replace(spec, synthetic=replace(spec.synthetic, **changes))
        if spec.synthetic is not None
        else spec
        for spec in cfg.datasets
    )
    return replace(cfg, datasets=datasets)


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Fold CLI flags into the config, raising ConfigError on conflicts."""
    findings: list[str] = []
    if getattr(args, "out_dir", None) is not None:
        cfg = replace(cfg, out_dir=args.out_dir)

    if getattr(args, "provider", None) is not None:
        if args.provider == "synthetic":
            wrong = [s.key for s in cfg.datasets if s.synthetic is None]
            if wrong:
                findings.append(
                    f"--provider synthetic, but datasets {wrong} are configured with files"
                )
        else:
            wrong = [s.key for s in cfg.datasets if s.path is None]
            if wrong:
                findings.append(
                    f"--provider jsonl-replay, but datasets {wrong} are configured as synthetic"
                )
    if getattr(args, "depth", None) is not None:
        cfg = _override_synthetic(cfg, depth=args.depth)
    if getattr(args, "drift", None) is not None:
        cfg = _override_synthetic(cfg, drift=args.drift)
    if getattr(args, "seeds_file", None) is not None:
        try:
            lines = args.seeds_file.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            findings.append(f"--seeds-file: cannot read {args.seeds_file}: {exc}")
        else:
            seeds = tuple(line.strip() for line in lines if line.strip())
            if not seeds:
                findings.append(f"--seeds-file: {args.seeds_file} contains no video ids")
            else:
                cfg = _override_synthetic(cfg, seeds=seeds, n_seeds=len(seeds))

    if getattr(args, "frames_root", None) is not None:
        cfg = replace(cfg, frames_root=args.frames_root)
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, keyframes=replace(cfg.keyframes, lam=args.lam))
    if getattr(args, "min_gap", None) is not None:
        cfg = replace(cfg, keyframes=replace(cfg.keyframes, min_gap=args.min_gap))

    if getattr(args, "embeddings", None) is not None:
        cfg = replace(
            cfg,
            embedding=EmbeddingSourceSpec(
                mode="file",
                paths=((_COMBINED_KEY, args.embeddings),),
                expected_dim=cfg.embedding.expected_dim,
            ),
        )

    analysis_changes = {}
    if getattr(args, "k_codebook", None) is not None:
        analysis_changes["k_codebook"] = args.k_codebook
    if getattr(args, "n_slices", None) is not None:
        analysis_changes["n_slices"] = args.n_slices
    if getattr(args, "max_exact_pairs", None) is not None:
        analysis_changes["max_exact_n"] = args.max_exact_pairs
    if getattr(args, "rng_seed", None) is not None:
        analysis_changes["rng_seed"] = args.rng_seed
        if any(s.synthetic is not None for s in cfg.datasets):
            cfg = _override_synthetic(cfg, rng_seed=args.rng_seed)
    if analysis_changes:
        cfg = replace(cfg, analysis=replace(cfg.analysis, **analysis_changes))
    if getattr(args, "on_projection", None):
        cfg = replace(cfg, on_projection=True)

    if getattr(args, "project_method", None) is not None:
        cfg = replace(cfg, projection=replace(cfg.projection, method=args.project_method))
    if getattr(args, "coords_file", None):
        coords = dict(cfg.projection.coords)
        for item in args.coords_file:
            modality, sep, path = item.partition("=")
            if not sep or modality not in ("image", "caption") or not path:
                findings.append(
                    f"--coords-file: expected image=PATH or caption=PATH, got {item!r}"
                )
                continue
            coords[modality] = Path(path)
        cfg = replace(
            cfg, projection=replace(cfg.projection, coords=tuple(sorted(coords.items())))
        )

    if findings:
        raise ConfigError(findings)
    return cfg


def _print_findings(findings) -> None:
    for finding in findings:
        print(f"config: {finding}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        _print_findings(exc.findings)
        return 2

    if args.command == "validate":
        findings = validate_config(cfg)
        if findings:
            _print_findings(findings)
            return 2
        print("config ok")
        return 0

    stages = [args.command] if args.command in STAGE_COMMANDS else None
    try:
        result = run_pipeline(cfg, stages)
    except ConfigError as exc:
        _print_findings(exc.findings)
        return 2
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    for stage in STAGE_COMMANDS:
        if stage in result.cached:
            print(f"stage {stage}: cached")
        elif stage in result.ran:
            elapsed = result.manifest["stages"][stage]["last_run"].get("elapsed_s", 0.0)
            print(f"stage {stage}: completed ({elapsed:.2f}s)")
    if result.failed is not None:
        print(f"stage {result.failed}: failed: {result.error}", file=sys.stderr)
    else:
        print(f"artifacts in {cfg.out_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
