"""Config validation, stage caching, and artifact layout of the pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import (
    embedding_set_for,
    make_chain,
    make_dataset,
    make_record,
    two_scene_clip,
    write_frame_dir,
)
from driftaudit.chains import AuditDataset, RecommendationChain, parse_dataset, serialize_dataset
from driftaudit.embeddings import EmbeddingKey, load_embeddings, save_embeddings
from driftaudit.pipeline import (
    STAGES,
    ConfigError,
    DatasetSpec,
    EmbeddingSourceSpec,
    LockHeld,
    PipelineConfig,
    ProjectionSpec,
    SyntheticCollectSpec,
    load_config,
    parse_config,
    run_pipeline,
    validate_config,
)


def synthetic_entry(drift=0.2, rng_seed=11, **over):
    entry = {
        "n_topics": 3,
        "videos_per_topic": 12,
        "drift": drift,
        "embed_dim": 4,
        "n_seeds": 3,
        "depth": 3,
        "rng_seed": rng_seed,
    }
    entry.update(over)
    return entry


def base_raw(**over):
    raw = {
        "out_dir": "out",
        "datasets": {
            "A": {"name": "edu", "synthetic": synthetic_entry(drift=0.2, rng_seed=11)},
            "B": {"name": "ent", "synthetic": synthetic_entry(drift=0.8, rng_seed=12)},
        },
        "embedding": {"mode": "synthetic-ground-truth"},
        "analysis": {"k_codebook": 4, "n_slices": 8},
    }
    raw.update(over)
    return raw


def write_config(tmp_path, raw=None, name="config.json"):
    raw = raw if raw is not None else base_raw()
    path = tmp_path / name
    path.write_text(json.dumps(raw, indent=2))
    return path


def spec_synthetic(**over):
    base = dict(
        n_topics=3, videos_per_topic=12, drift=0.2, embed_dim=4, n_seeds=3, depth=3
    )
    base.update(over)
    return SyntheticCollectSpec(**base)


def config_for(tmp_path, **over):
    base = dict(
        out_dir=tmp_path / "out",
        datasets=(DatasetSpec(key="A", name="edu", synthetic=spec_synthetic()),),
        embedding=EmbeddingSourceSpec(mode="synthetic-ground-truth"),
    )
    base.update(over)
    return PipelineConfig(**base)


# ----------------------------------------------------------------- parsing


class TestParseConfig:
    def test_minimal_round_trip(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.out_dir == tmp_path / "out"
        assert [d.key for d in cfg.datasets] == ["A", "B"]
        assert cfg.dataset("A").name == "edu"
        assert cfg.dataset("A").synthetic.drift == 0.2
        assert cfg.embedding.mode == "synthetic-ground-truth"
        assert cfg.analysis.k_codebook == 4
        assert cfg.selected_stages() == ("collect", "embed", "analyze", "project")

    def test_keyframes_selected_when_frames_root_set(self, tmp_path):
        raw = base_raw(frames_root="frames")
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.selected_stages() == STAGES
        assert cfg.frames_root == tmp_path / "frames"

    def test_name_defaults_to_key(self, tmp_path):
        raw = base_raw()
        del raw["datasets"]["A"]["name"]
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.dataset("A").name == "A"

    def test_absolute_paths_kept(self, tmp_path):
        raw = base_raw(out_dir=str(tmp_path / "elsewhere"))
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.out_dir == tmp_path / "elsewhere"

    def test_collects_every_structural_finding(self, tmp_path):
        raw = {
            "out_dir": 7,
            "datasets": {"C": {}},
            "stages": ["collect", "nonsense"],
            "analysis": {"k_codebook": "big"},
        }
        with pytest.raises(ConfigError) as err:
            parse_config(raw, tmp_path)
        findings = "\n".join(err.value.findings)
        assert len(err.value.findings) >= 4
        assert "out_dir" in findings
        assert "datasets" in findings
        assert "nonsense" in findings
        assert "k_codebook" in findings

    def test_dataset_keys_limited_to_a_and_b(self, tmp_path):
        raw = base_raw()
        raw["datasets"]["C"] = raw["datasets"]["B"]
        with pytest.raises(ConfigError) as err:
            load_config(write_config(tmp_path, raw))
        assert any("datasets.C" in f for f in err.value.findings)

    def test_stages_deduped_in_canonical_order(self, tmp_path):
        raw = base_raw(stages=["project", "collect", "collect", "analyze"])
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.stages == ("collect", "analyze", "project")
        assert cfg.selected_stages() == ("collect", "analyze", "project")

    def test_embedding_single_path_becomes_combined(self, tmp_path):
        raw = base_raw(embedding={"mode": "file", "path": "vectors.embf"})
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.embedding.path_map() == {"combined": tmp_path / "vectors.embf"}

    def test_embedding_per_dataset_paths(self, tmp_path):
        raw = base_raw(
            embedding={"mode": "file", "paths": {"B": "b.embf", "A": "a.embf"}}
        )
        cfg = load_config(write_config(tmp_path, raw))
        assert cfg.embedding.path_map() == {
            "A": tmp_path / "a.embf",
            "B": tmp_path / "b.embf",
        }

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "not valid JSON" in err.value.findings[0]

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_non_object_root_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(["not", "a", "dict"], tmp_path)


# -------------------------------------------------------------- validation


class TestValidateConfig:
    def test_valid_config_has_no_findings(self, tmp_path):
        assert validate_config(config_for(tmp_path)) == []

    def test_both_sources_on_dataset(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(
                    key="A",
                    name="edu",
                    path=tmp_path / "a.jsonl",
                    synthetic=spec_synthetic(),
                ),
            ),
        )
        findings = validate_config(cfg)
        assert any("exactly one of 'path' or 'synthetic'" in f for f in findings)

    def test_neither_source_on_dataset(self, tmp_path):
        cfg = config_for(tmp_path, datasets=(DatasetSpec(key="A", name="edu"),))
        findings = validate_config(cfg)
        assert any("exactly one of" in f for f in findings)

    def test_missing_dataset_file(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(DatasetSpec(key="A", name="edu", path=tmp_path / "gone.jsonl"),),
            embedding=EmbeddingSourceSpec(mode="service", url="http://x"),
        )
        findings = validate_config(cfg)
        assert any("does not exist" in f for f in findings)

    def test_synthetic_bounds_surfaced(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(
                    key="A",
                    name="edu",
                    synthetic=spec_synthetic(depth=0, embed_dim=2, n_seeds=0),
                ),
            ),
        )
        findings = "\n".join(validate_config(cfg))
        assert "depth" in findings
        assert "embed_dim >= n_topics" in findings
        assert "n_seeds" in findings

    def test_n_seeds_beyond_topic_inventory(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(key="A", name="edu", synthetic=spec_synthetic(n_seeds=13)),
            ),
        )
        assert any("exceeds" in f for f in validate_config(cfg))

    def test_seeds_topic_out_of_range(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(key="A", name="edu", synthetic=spec_synthetic(seeds_topic=3)),
            ),
        )
        assert any("seeds_topic" in f for f in validate_config(cfg))

    def test_keyframes_needs_frames_root(self, tmp_path):
        cfg = config_for(tmp_path, stages=("collect", "keyframes"))
        assert any("frames_root: required" in f for f in validate_config(cfg))

    def test_frames_root_must_be_directory(self, tmp_path):
        stray = tmp_path / "file.txt"
        stray.write_text("x")
        cfg = config_for(tmp_path, stages=("keyframes",), frames_root=stray)
        assert any("not a directory" in f for f in validate_config(cfg))

    def test_unknown_embedding_mode(self, tmp_path):
        cfg = config_for(tmp_path, embedding=EmbeddingSourceSpec(mode="magic"))
        assert any("embedding.mode" in f for f in validate_config(cfg))

    def test_two_embedding_sources(self, tmp_path):
        emb = tmp_path / "e.embf"
        emb.write_bytes(b"")
        cfg = config_for(
            tmp_path,
            embedding=EmbeddingSourceSpec(
                mode="file", paths=(("combined", emb),), url="http://x"
            ),
        )
        assert any("two sources" in f for f in validate_config(cfg))

    def test_file_mode_needs_paths(self, tmp_path):
        cfg = config_for(tmp_path, embedding=EmbeddingSourceSpec(mode="file"))
        assert any("needs 'path'" in f for f in validate_config(cfg))

    def test_file_mode_missing_dataset_entries(self, tmp_path):
        emb = tmp_path / "a.embf"
        emb.write_bytes(b"")
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(key="A", name="edu", synthetic=spec_synthetic()),
                DatasetSpec(key="B", name="ent", synthetic=spec_synthetic()),
            ),
            embedding=EmbeddingSourceSpec(mode="file", paths=(("A", emb),)),
        )
        assert any("missing entries for datasets ['B']" in f for f in validate_config(cfg))

    def test_file_mode_nonexistent_path(self, tmp_path):
        cfg = config_for(
            tmp_path,
            embedding=EmbeddingSourceSpec(
                mode="file", paths=(("combined", tmp_path / "gone.embf"),)
            ),
        )
        assert any("does not exist" in f for f in validate_config(cfg))

    def test_service_mode_needs_url(self, tmp_path, monkeypatch):
        monkeypatch.delenv("EMBED_SERVICE_URL", raising=False)
        cfg = config_for(tmp_path, embedding=EmbeddingSourceSpec(mode="service"))
        assert any("EMBED_SERVICE_URL" in f for f in validate_config(cfg))

    def test_service_mode_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EMBED_SERVICE_URL", "http://example:9")
        cfg = config_for(tmp_path, embedding=EmbeddingSourceSpec(mode="service"))
        assert validate_config(cfg) == []

    def test_ground_truth_needs_synthetic_datasets(self, tmp_path):
        chains = tmp_path / "a.jsonl"
        chains.write_text("")
        cfg = config_for(
            tmp_path, datasets=(DatasetSpec(key="A", name="edu", path=chains),)
        )
        assert any("synthetic-ground-truth" in f for f in validate_config(cfg))

    def test_batch_size_bound(self, tmp_path):
        cfg = config_for(
            tmp_path,
            embedding=EmbeddingSourceSpec(mode="synthetic-ground-truth", batch_size=0),
        )
        assert any("batch_size" in f for f in validate_config(cfg))

    def test_projection_method_membership(self, tmp_path):
        cfg = config_for(tmp_path, projection=ProjectionSpec(method="umap"))
        assert any("projection.method" in f for f in validate_config(cfg))

    def test_import_projection_needs_coords(self, tmp_path):
        cfg = config_for(tmp_path, projection=ProjectionSpec(method="import"))
        findings = validate_config(cfg)
        assert any("missing file for modality 'image'" in f for f in findings)
        assert any("missing file for modality 'caption'" in f for f in findings)

    def test_reports_all_findings_together(self, tmp_path, monkeypatch):
        monkeypatch.delenv("EMBED_SERVICE_URL", raising=False)
        cfg = config_for(
            tmp_path,
            datasets=(
                DatasetSpec(key="A", name="edu", synthetic=spec_synthetic(depth=0)),
            ),
            embedding=EmbeddingSourceSpec(mode="service"),
            projection=ProjectionSpec(method="umap"),
        )
        findings = validate_config(cfg)
        assert len(findings) >= 3

    def test_out_dir_created(self, tmp_path):
        cfg = config_for(tmp_path, out_dir=tmp_path / "deep" / "nested" / "out")
        assert validate_config(cfg) == []
        assert cfg.out_dir.is_dir()


# --------------------------------------------------------------- execution


@pytest.fixture()
def run_cfg(tmp_path):
    return load_config(write_config(tmp_path))


class TestRunPipeline:
    def test_full_run_and_artifacts(self, run_cfg):
        result = run_pipeline(run_cfg)
        assert result.failed is None
        assert result.exit_code == 0
        assert result.ran == ["collect", "embed", "analyze", "project"]
        assert result.cached == []
        out = run_cfg.out_dir
        for rel in (
            "collect/A.jsonl",
            "collect/A.groundtruth.jsonl",
            "collect/B.jsonl",
            "collect/B.groundtruth.jsonl",
            "embed/A.embf",
            "embed/A.keys.jsonl",
            "embed/B.embf",
            "embed/B.keys.jsonl",
            "analyze/report.json",
            "analyze/report.txt",
            "project/image_points.csv",
            "project/image_hulls.csv",
            "project/caption_points.csv",
            "project/caption_hulls.csv",
            "manifest.json",
        ):
            assert (out / rel).exists(), rel
        assert not (out / ".lock").exists()

    def test_manifest_records_hashes_and_outputs(self, run_cfg):
        run_pipeline(run_cfg)
        manifest = json.loads((run_cfg.out_dir / "manifest.json").read_text())
        assert manifest["version"] == 1
        assert set(manifest["stages"]) == {"collect", "embed", "analyze", "project"}
        for entry in manifest["stages"].values():
            assert entry["input_hash"]
            assert entry["outputs"]
            assert entry["last_run"]["cached"] is False
        assert "collect/A.jsonl" in manifest["stages"]["collect"]["outputs"]

    def test_second_run_fully_cached_and_byte_identical(self, run_cfg):
        run_pipeline(run_cfg)
        report_before = (run_cfg.out_dir / "analyze" / "report.json").read_bytes()
        points_before = (run_cfg.out_dir / "project" / "image_points.csv").read_bytes()
        again = run_pipeline(run_cfg)
        assert again.ran == []
        assert again.cached == ["collect", "embed", "analyze", "project"]
        assert (run_cfg.out_dir / "analyze" / "report.json").read_bytes() == report_before
        assert (run_cfg.out_dir / "project" / "image_points.csv").read_bytes() == points_before

    def test_deleted_artifact_reruns_only_that_stage(self, run_cfg):
        run_pipeline(run_cfg)
        (run_cfg.out_dir / "analyze" / "report.json").unlink()
        result = run_pipeline(run_cfg)
        assert result.ran == ["analyze"]
        assert result.cached == ["collect", "embed", "keyframes", "project"] or result.cached == [
            "collect",
            "embed",
            "project",
        ]

    def test_tampered_artifact_reruns_stage(self, run_cfg):
        run_pipeline(run_cfg)
        path = run_cfg.out_dir / "analyze" / "report.txt"
        path.write_text(path.read_text() + "graffiti\n")
        result = run_pipeline(run_cfg)
        assert result.ran == ["analyze"]

    def test_analysis_config_change_reruns_analyze_only(self, run_cfg):
        from dataclasses import replace

        run_pipeline(run_cfg)
        bumped = replace(run_cfg, analysis=replace(run_cfg.analysis, k_codebook=5))
        result = run_pipeline(bumped)
        assert result.ran == ["analyze"]
        assert result.cached == ["collect", "embed", "project"]

    def test_graph_seed_change_reruns_everything(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        run_pipeline(cfg)
        raw = base_raw()
        raw["datasets"]["B"]["synthetic"]["rng_seed"] = 99
        changed = load_config(write_config(tmp_path, raw, name="config2.json"))
        result = run_pipeline(changed)
        assert result.ran == ["collect", "embed", "analyze", "project"]

    def test_groundtruth_covers_every_video_once(self, run_cfg):
        run_pipeline(run_cfg, stages=("collect",))
        dataset = parse_dataset((run_cfg.out_dir / "collect" / "A.jsonl").read_bytes())
        rows = [
            json.loads(line)
            for line in (run_cfg.out_dir / "collect" / "A.groundtruth.jsonl")
            .read_text()
            .splitlines()
        ]
        ids = [r["video_id"] for r in rows]
        assert len(ids) == len(set(ids))
        assert set(ids) == {v.video_id for v in dataset.videos()}
        assert all(len(r["vector"]) == 4 for r in rows)
        assert all(v.startswith("A-t") for v in ids)

    def test_report_layout_from_run(self, run_cfg):
        run_pipeline(run_cfg)
        report = json.loads((run_cfg.out_dir / "analyze" / "report.json").read_text())
        assert report["domains"] == ["edu", "ent"]
        assert set(report["cells"]) == {"edu", "ent"}
        for block in report["cross_domain"].values():
            shares = block["normalized_delta_variance"]
            assert shares is None or sum(shares.values()) == pytest.approx(1.0)

    def test_lock_blocks_concurrent_run(self, run_cfg):
        run_cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (run_cfg.out_dir / ".lock").write_text("9999")
        with pytest.raises(LockHeld):
            run_pipeline(run_cfg)
        (run_cfg.out_dir / ".lock").unlink()
        assert run_pipeline(run_cfg).failed is None

    def test_invalid_config_raises_before_any_stage(self, tmp_path):
        cfg = config_for(
            tmp_path,
            datasets=(DatasetSpec(key="A", name="edu", synthetic=spec_synthetic(depth=0)),),
        )
        with pytest.raises(ConfigError):
            run_pipeline(cfg)

    def test_unknown_stage_selection(self, run_cfg):
        with pytest.raises(ConfigError):
            run_pipeline(run_cfg, stages=("collect", "nonsense"))

    def test_missing_upstream_fails_with_nothing_run(self, run_cfg):
        result = run_pipeline(run_cfg, stages=("analyze",))
        assert result.failed == "analyze"
        assert result.ran == []
        assert result.exit_code == 3
        assert "collect" in result.error

    def test_partial_failure_keeps_completed_stages(self, run_cfg):
        result = run_pipeline(run_cfg, stages=("collect", "analyze"))
        assert result.ran == ["collect"]
        assert result.failed == "analyze"
        assert result.exit_code == 4
        manifest = json.loads((run_cfg.out_dir / "manifest.json").read_text())
        assert set(manifest["stages"]) == {"collect"}

    def test_failure_stops_later_stages(self, run_cfg):
        result = run_pipeline(run_cfg, stages=("collect", "analyze", "project"))
        assert result.failed == "analyze"
        manifest = json.loads((run_cfg.out_dir / "manifest.json").read_text())
        assert "project" not in manifest["stages"]

    def test_on_projection_changes_analyze_inputs(self, run_cfg):
        from dataclasses import replace

        run_pipeline(run_cfg)
        flipped = replace(run_cfg, on_projection=True)
        result = run_pipeline(flipped)
        assert result.ran == ["analyze"]
        report = json.loads((run_cfg.out_dir / "analyze" / "report.json").read_text())
        assert report["domains"] == ["edu", "ent"]


class TestFileBasedRun:
    @pytest.fixture()
    def file_cfg_raw(self, tmp_path, rng):
        ds_a = make_dataset(n_chains=4, depth=3, domain="edu", name="edu", seed_prefix="a")
        ds_b = make_dataset(n_chains=4, depth=3, domain="ent", name="ent", seed_prefix="b")
        (tmp_path / "a.jsonl").write_bytes(serialize_dataset(ds_a))
        (tmp_path / "b.jsonl").write_bytes(serialize_dataset(ds_b))
        from driftaudit.embeddings import merge_embeddings

        emb = merge_embeddings(
            embedding_set_for(ds_a, rng, dim=6), embedding_set_for(ds_b, rng, dim=6)
        )
        save_embeddings(emb, tmp_path / "vectors.embf")
        return {
            "out_dir": "out",
            "datasets": {
                "A": {"name": "edu", "path": "a.jsonl"},
                "B": {"name": "ent", "path": "b.jsonl"},
            },
            "embedding": {"mode": "file", "path": "vectors.embf"},
            "analysis": {"k_codebook": 4, "n_slices": 8},
        }

    def test_ingest_runs_end_to_end(self, tmp_path, file_cfg_raw):
        cfg = load_config(write_config(tmp_path, file_cfg_raw))
        result = run_pipeline(cfg)
        assert result.failed is None
        assert result.ran == ["collect", "embed", "analyze", "project"]
        combined = cfg.out_dir / "embed" / "combined.embf"
        assert combined.exists()
        assert load_embeddings(combined).dim == 6

    def test_two_fresh_out_dirs_byte_identical(self, tmp_path, file_cfg_raw):
        reports = []
        csvs = []
        for sub in ("run1", "run2"):
            raw = dict(file_cfg_raw, out_dir=sub)
            cfg = load_config(write_config(tmp_path, raw, name=f"{sub}.json"))
            assert run_pipeline(cfg).failed is None
            reports.append((cfg.out_dir / "analyze" / "report.json").read_bytes())
            csvs.append(
                [
                    (cfg.out_dir / "project" / name).read_bytes()
                    for name in (
                        "image_points.csv",
                        "image_hulls.csv",
                        "caption_points.csv",
                        "caption_hulls.csv",
                    )
                ]
            )
        assert reports[0] == reports[1]
        assert csvs[0] == csvs[1]

    def test_chain_ingest_preserves_dataset(self, tmp_path, file_cfg_raw):
        cfg = load_config(write_config(tmp_path, file_cfg_raw))
        run_pipeline(cfg, stages=("collect",))
        original = parse_dataset((tmp_path / "a.jsonl").read_bytes(), name="edu")
        ingested = parse_dataset(
            (cfg.out_dir / "collect" / "A.jsonl").read_bytes(), name="edu"
        )
        assert ingested == original


class TestFramePipeline:
    @pytest.fixture()
    def frame_cfg_raw(self, tmp_path, rng):
        frames_root = tmp_path / "frames"
        chain = RecommendationChain(
            seed=make_record("s0", domain="edu", frame_dir="s0"),
            recs=(
                make_record("r1", depth=1, seed_id="s0", domain="edu", frame_dir="r1"),
            ),
            session_id="edu-s0000",
        )
        ds = AuditDataset(name="edu", max_depth=1, chains=(chain,))
        (tmp_path / "a.jsonl").write_bytes(serialize_dataset(ds))
        write_frame_dir(frames_root / "s0", two_scene_clip(n_frames=24, cut=12))
        write_frame_dir(frames_root / "r1", two_scene_clip(n_frames=24, cut=8))
        emb = embedding_set_for(ds, rng, dim=4, keyframe_indices=(0, 8, 12))
        save_embeddings(emb, tmp_path / "vectors.embf")
        return {
            "out_dir": "out",
            "datasets": {"A": {"name": "edu", "path": "a.jsonl"}},
            "frames_root": "frames",
            "embedding": {"mode": "file", "path": "vectors.embf"},
            "analysis": {"k_codebook": 2, "n_slices": 4},
            "keyframes": {"min_gap": 3},
        }

    def test_keyframe_stage_output(self, tmp_path, frame_cfg_raw):
        cfg = load_config(write_config(tmp_path, frame_cfg_raw))
        result = run_pipeline(cfg, stages=("collect", "keyframes"))
        assert result.failed is None
        rows = [
            json.loads(line)
            for line in (cfg.out_dir / "keyframes" / "keyframes.jsonl")
            .read_text()
            .splitlines()
        ]
        assert [r["video_id"] for r in rows] == ["r1", "s0"]
        by_id = {r["video_id"]: r for r in rows}
        assert by_id["s0"]["indices"] == [0, 12]
        assert by_id["r1"]["indices"] == [0, 8]
        assert by_id["s0"]["n_frames"] == 24
        assert all(r["config_hash"] == cfg.keyframes.config_hash() for r in rows)

    def test_frame_edit_invalidates_keyframes(self, tmp_path, frame_cfg_raw):
        cfg = load_config(write_config(tmp_path, frame_cfg_raw))
        run_pipeline(cfg, stages=("collect", "keyframes"))
        write_frame_dir(tmp_path / "frames" / "s0", two_scene_clip(n_frames=24, cut=5))
        result = run_pipeline(cfg, stages=("collect", "keyframes"))
        assert result.cached == ["collect"]
        assert result.ran == ["keyframes"]


class TestServiceRun:
    def test_service_mode_end_to_end(self, tmp_path, rng, stub_service):
        server, url = stub_service
        frames_root = tmp_path / "frames"
        chain = RecommendationChain(
            seed=make_record("s0", domain="edu", frame_dir="s0"),
            recs=(
                make_record("r1", depth=1, seed_id="s0", domain="edu", frame_dir="r1"),
            ),
            session_id="edu-s0000",
        )
        ds = AuditDataset(name="edu", max_depth=1, chains=(chain,))
        (tmp_path / "a.jsonl").write_bytes(serialize_dataset(ds))
        write_frame_dir(frames_root / "s0", two_scene_clip(n_frames=24, cut=12))
        write_frame_dir(frames_root / "r1", two_scene_clip(n_frames=24, cut=8))
        raw = {
            "out_dir": "out",
            "datasets": {"A": {"name": "edu", "path": "a.jsonl"}},
            "frames_root": "frames",
            "embedding": {"mode": "service", "url": url},
            "analysis": {"k_codebook": 2, "n_slices": 4},
            "keyframes": {"min_gap": 3},
            "stages": ["collect", "keyframes", "embed", "analyze"],
        }
        cfg = load_config(write_config(tmp_path, raw))
        result = run_pipeline(cfg)
        assert result.failed is None, result.error
        emb = load_embeddings(cfg.out_dir / "embed" / "A.embf")
        # two videos x two keyframes x two modalities
        assert len(emb.keys()) == 8
        assert {k.modality for k in emb.keys()} == {"image", "caption"}
        assert EmbeddingKey("s0", 12, "image") in emb.keys()
        assert (cfg.out_dir / "analyze" / "report.json").exists()
        caption_posts = [c for c in server.calls if c == ("POST", "/v1/caption")]
        embed_posts = [c for c in server.calls if c == ("POST", "/v1/embed")]
        assert caption_posts and embed_posts

    def test_service_reruns_hit_cache_without_calls(self, tmp_path, rng, stub_service):
        server, url = stub_service
        frames_root = tmp_path / "frames"
        chain = RecommendationChain(
            seed=make_record("s0", domain="edu", frame_dir="s0"),
            recs=(
                make_record("r1", depth=1, seed_id="s0", domain="edu", frame_dir="r1"),
            ),
            session_id="edu-s0000",
        )
        ds = AuditDataset(name="edu", max_depth=1, chains=(chain,))
        (tmp_path / "a.jsonl").write_bytes(serialize_dataset(ds))
        write_frame_dir(frames_root / "s0", two_scene_clip(n_frames=24, cut=12))
        write_frame_dir(frames_root / "r1", two_scene_clip(n_frames=24, cut=8))
        raw = {
            "out_dir": "out",
            "datasets": {"A": {"name": "edu", "path": "a.jsonl"}},
            "frames_root": "frames",
            "embedding": {"mode": "service", "url": url},
            "analysis": {"k_codebook": 2, "n_slices": 4},
            "stages": ["collect", "keyframes", "embed"],
        }
        cfg = load_config(write_config(tmp_path, raw))
        assert run_pipeline(cfg).failed is None
        calls_after_first = len(server.calls)
        again = run_pipeline(cfg)
        assert again.cached == ["collect", "keyframes", "embed"]
        assert len(server.calls) == calls_after_first  # cache hit, no traffic
