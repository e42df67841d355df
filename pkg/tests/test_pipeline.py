from __future__ import annotations

import json

import pytest

from handbook_divergence.cli import main
from handbook_divergence.pipeline import FIXTURE_DIR, STAGES, RunConfig, load_run_config, run_pipeline


def cfg_for(tmp_path, **kw) -> RunConfig:
    return RunConfig(output_dir=tmp_path, run_name="r", mock=True, workers=2, **kw)


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    report = run_pipeline(cfg_for(root))
    assert report["exit_code"] == 0
    return root


class TestConfig:
    def test_ini_loading(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text(
            "[run]\nname = trial\noutput = out\nmock = yes\n"
            "[chunking]\nmax_tokens = 256\n"
            "[retrieval]\ntop_k_final = 3\nk_rrf = 30\n"
            "[models]\nchat_model = some/model\n"
            "[concurrency]\nworkers = 8\nmax_in_flight = 2\n"
        )
        cfg = load_run_config(ini)
        assert cfg.run_dir == tmp_path / "out" / "trial"
        assert cfg.mock and cfg.workers == 8 and cfg.max_in_flight == 2
        assert cfg.chunking.max_tokens == 256
        assert (cfg.retrieval.top_k_final, cfg.retrieval.k_rrf) == (3, 30)
        assert cfg.models.chat_model == "some/model"
        assert cfg.corpus_dir == FIXTURE_DIR / "handbooks"

    def test_hash_tracks_settings(self):
        a = RunConfig()
        b = RunConfig()
        b.retrieval = type(b.retrieval)(top_k_final=3)
        assert a.config_hash() == RunConfig().config_hash() != b.config_hash()


class TestRunPipeline:
    def test_layout(self, completed_run):
        run = completed_run / "r"
        for d in ("answers", "comparisons", "matrices", "metrics", "reports", "figures", "index", "_meta"):
            assert (run / d).is_dir()
        assert len(list((run / "answers").glob("*/*.json"))) == 19
        assert len(list((run / "comparisons").glob("*/*.json"))) == 24
        assert len(list((run / "figures").glob("*.svg"))) == 6
        report = json.loads((run / "_meta" / "run_report.json").read_text())
        assert set(report["stages"]) == set(STAGES)

    def test_metrics_and_report_only(self, completed_run):
        answers_before = {p: p.read_bytes() for p in (completed_run / "r" / "answers").glob("*/*.json")}
        (completed_run / "r" / "reports" / "global_labels.md").unlink()
        cfg = cfg_for(completed_run)
        cfg.stages = ("metrics", "report")
        report = run_pipeline(cfg)
        assert report["exit_code"] == 0
        assert "gateway" not in report
        assert (completed_run / "r" / "reports" / "global_labels.md").exists()
        assert answers_before == {p: p.read_bytes() for p in (completed_run / "r" / "answers").glob("*/*.json")}

    def test_mixed_config_hash_is_stage_error(self, tmp_path):
        cfg = cfg_for(tmp_path)
        cfg.stages = ("validate", "index", "generate", "judge")
        assert run_pipeline(cfg)["exit_code"] == 0
        path = next((tmp_path / "r" / "answers").glob("*/*.json"))
        doc = json.loads(path.read_text())
        doc["config_hash"] = "something-else"
        path.write_text(json.dumps(doc))
        cfg.stages = ("metrics",)
        report = run_pipeline(cfg)
        assert report["exit_code"] == 2
        assert "config" in report["stages"]["metrics"]["error"]

    def test_report_without_metrics_fails(self, tmp_path):
        cfg = cfg_for(tmp_path)
        cfg.stages = ("report",)
        assert run_pipeline(cfg)["exit_code"] == 2

    def test_invalid_questions_exit_one(self, tmp_path):
        bad = tmp_path / "q.json"
        bad.write_text(json.dumps([{"id": "x", "text": "?", "organ": "general", "topics": []}]))
        report = run_pipeline(cfg_for(tmp_path, questions_path=bad))
        assert report["exit_code"] == 1
        assert "topics" in report["stages"]["validate"]["error"]

    def test_strict_rejects_bad_handbook(self, tmp_path):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        for src in (FIXTURE_DIR / "handbooks").glob("*.json"):
            (corpus / src.name).write_text(src.read_text())
        (corpus / "broken.json").write_text("{}")
        lenient = cfg_for(tmp_path, corpus_dir=corpus)
        lenient.stages = ("validate",)
        assert run_pipeline(lenient)["exit_code"] == 0
        strict = cfg_for(tmp_path, corpus_dir=corpus, strict=True)
        strict.stages = ("validate",)
        assert run_pipeline(strict)["exit_code"] == 1

    def test_unknown_stage(self, tmp_path):
        cfg = cfg_for(tmp_path)
        cfg.stages = ("extract",)
        with pytest.raises(ValueError):
            run_pipeline(cfg)


class TestCli:
    def test_validate_verb(self, tmp_path, capsys):
        assert main(["validate", "--out", str(tmp_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["stages"]["validate"]["pairs"] == 19

    def test_run_then_rerun_skips(self, tmp_path, capsys):
        args = ["run", "--mock", "--out", str(tmp_path), "--run-name", "cli"]
        assert main(args) == 0
        capsys.readouterr()
        assert main(args) == 0
        stages = json.loads(capsys.readouterr().out)["stages"]
        assert stages["index"]["skipped"] == stages["index"]["total"] == 4
        assert stages["generate"]["skipped"] == stages["generate"]["total"] == 19
        assert stages["judge"]["skipped"] == stages["judge"]["total"] == 24

    def test_bad_stage_name(self, tmp_path, capsys):
        assert main(["run", "--mock", "--out", str(tmp_path), "--stages", "metrics,plot"]) == 1
        assert "plot" in capsys.readouterr().err
