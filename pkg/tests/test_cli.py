import hashlib
import json
import os

import pytest
from click.testing import CliRunner

from ragroute.cli import main
from ragroute.llm_client import random_stub_world_spec


@pytest.fixture
def workspace(tmp_path):
    """Config + stub world + dataset files for CLI runs."""
    world_path = tmp_path / "world.jsonl"
    spec = random_stub_world_spec(40, seed=3, signal_scale=2.0)
    with open(world_path, "w") as fh:
        for q in spec.queries:
            fh.write(json.dumps({
                "id": q.id, "question": q.question, "answers": list(q.answers),
                "knows_parametric": q.knows_parametric,
                "answer_in_corpus": q.answer_in_corpus,
                "entity": q.entity, "entity_freq": q.entity_freq,
            }) + "\n")
    dataset_path = tmp_path / "dataset.jsonl"
    with open(dataset_path, "w") as fh:
        for q in spec.queries:
            fh.write(json.dumps({
                "id": q.id, "question": q.question, "answers": list(q.answers),
                "entity": q.entity, "entity_freq": q.entity_freq,
            }) + "\n")
    config_path = tmp_path / "config.toml"
    outdir = tmp_path / "out"
    config_path.write_text(
        "[backends]\n"
        f'stub_world = "{world_path}"\n'
        "embed_dim = 16\n"
        "signal_scale = 2.0\n"
        "seed = 3\n"
        "[paths]\n"
        f'output_dir = "{outdir}"\n'
        f'model = "{outdir}/model.bin"\n'
    )
    return {"config": str(config_path), "dataset": str(dataset_path), "out": str(outdir)}


def run(args, **kwargs):
    result = CliRunner().invoke(main, args, **kwargs)
    assert result.exit_code == 0, result.output
    return result


class TestIngest:
    def test_writes_splits_and_report(self, workspace):
        run(["--config", workspace["config"], "ingest", "--dataset", workspace["dataset"],
             "--train-fraction", "0.75", "--seed", "1"])
        out = workspace["out"]
        assert os.path.exists(os.path.join(out, "train.jsonl"))
        assert os.path.exists(os.path.join(out, "test.jsonl"))
        report = json.load(open(os.path.join(out, "split_report.json")))
        assert report["n_train"] == 30 and report["n_test"] == 10

    def test_unknown_subcommand_exits_2(self):
        result = CliRunner().invoke(main, ["frobnicate"])
        assert result.exit_code == 2

    def test_missing_config_is_error(self, workspace):
        result = CliRunner().invoke(
            main, ["--config", "/non/existent.toml", "ingest",
                   "--dataset", workspace["dataset"]],
        )
        assert result.exit_code == 1
        assert "error:" in result.output


class TestPipeline:
    def label_and_train(self, workspace, seed="5"):
        run(["--config", workspace["config"], "ingest",
             "--dataset", workspace["dataset"], "--seed", "1"])
        out = workspace["out"]
        run(["--config", workspace["config"], "label",
             "--dataset", os.path.join(out, "train.jsonl"), "--seed", seed])
        run(["--config", workspace["config"], "train",
             "--labels", os.path.join(out, "labels.jsonl"),
             "--embeddings", os.path.join(out, "label_embeddings.bin"),
             "--hidden", "16", "8", "--seed", seed])
        return out

    def test_full_pipeline_and_eval(self, workspace):
        out = self.label_and_train(workspace)
        run(["--config", workspace["config"], "eval",
             "--dataset", os.path.join(out, "test.jsonl"),
             "--train-dataset", os.path.join(out, "train.jsonl"),
             "--policy", "all"])
        report = json.load(open(os.path.join(out, "report_full-retrieval.json")))
        assert report["por_percent"] == 100.0
        assert os.path.exists(os.path.join(out, "reports.csv"))

    def test_train_twice_same_hash(self, workspace):
        out = self.label_and_train(workspace)
        h1 = hashlib.sha256(open(os.path.join(out, "model.bin"), "rb").read()).hexdigest()
        run(["--config", workspace["config"], "train",
             "--labels", os.path.join(out, "labels.jsonl"),
             "--embeddings", os.path.join(out, "label_embeddings.bin"),
             "--hidden", "16", "8", "--seed", "5"])
        h2 = hashlib.sha256(open(os.path.join(out, "model.bin"), "rb").read()).hexdigest()
        assert h1 == h2

    def test_eval_ei_policy(self, workspace):
        out = self.label_and_train(workspace)
        run(["--config", workspace["config"], "eval",
             "--dataset", os.path.join(out, "test.jsonl"),
             "--train-dataset", os.path.join(out, "train.jsonl"),
             "--policy", "ei", "--model", os.path.join(out, "model.bin")])
        report = json.load(open(os.path.join(out, "report_ei.json")))
        assert set(report) >= {"policy", "acc_percent", "por_percent", "quadrants", "n"}

    def test_route_prints_json(self, workspace):
        out = self.label_and_train(workspace)
        result = run(["--config", workspace["config"], "route",
                      "--question", "What is the zorp of entity00001?",
                      "--model", os.path.join(out, "model.bin")])
        body = json.loads(result.output.strip().splitlines()[-1])
        assert set(body) == {"retrieve", "score", "policy", "decision_ms"}


class TestEmbedVizSweep:
    def test_embed_then_viz(self, workspace):
        out = workspace["out"]
        run(["--config", workspace["config"], "embed",
             "--dataset", workspace["dataset"], "--layer", "1"])
        cache = os.path.join(out, "embeddings_layer1.bin")
        assert os.path.exists(cache)
        run(["--config", workspace["config"], "viz",
             "--dataset", workspace["dataset"], "--embeddings", cache])
        header = open(os.path.join(out, "viz.csv")).readline().strip()
        assert header == "query_id,x,y,log_freq,relation"

    def test_sweep_layers_csv(self, workspace):
        out = workspace["out"]
        run(["--config", workspace["config"], "ingest",
             "--dataset", workspace["dataset"], "--seed", "1"])
        run(["--config", workspace["config"], "sweep-layers", "--layers", "0,1",
             "--train-dataset", os.path.join(out, "train.jsonl"),
             "--test-dataset", os.path.join(out, "test.jsonl")])
        lines = open(os.path.join(out, "layer_sweep.csv")).read().strip().splitlines()
        assert len(lines) == 3  # header + 2 data rows


class TestConfigEnvVar:
    def test_eiarag_config_env(self, workspace, monkeypatch):
        monkeypatch.setenv("EIARAG_CONFIG", workspace["config"])
        result = CliRunner().invoke(main, ["ingest", "--dataset", workspace["dataset"]])
        assert result.exit_code == 0, result.output
