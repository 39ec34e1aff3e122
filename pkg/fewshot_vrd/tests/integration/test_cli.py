import json
import shutil
from pathlib import Path

import pytest

from app.core.manifest import file_digest, manifest_path, read_manifest
from app.main import cli_main
from app.services.eval_metrics import read_report
from app.services.fewshot_trainer import load_checkpoint, read_loss_curve
from app.services.relation_kg import read_graph

QUIET = ["--log-level", "ERROR"]
FIXTURES = Path(__file__).parent.parent / "fixtures"

SYNTH_CONFIG = "\n".join(
    [
        "# small world for CLI runs",
        "num_classes=8",
        "num_relations=4",
        "num_groups=2",
        "feature_dim=8",
        "word_dim=8",
        "train_images=60",
        "test_images=20",
        "captions_per_pair=1",
    ]
)


def run(capsys, *argv):
    code = cli_main(QUIET + [str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_line(stderr):
    return json.loads(stderr.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    """gen-synth -> parse-captions -> build-kg -> train-vrk, shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "synth.conf"
    config.write_text(SYNTH_CONFIG + "\n", encoding="utf-8")
    data = root / "data"
    steps = [
        ["gen-synth", "--out", data, "--config", config, "--seed", 5],
        ["parse-captions", "--in", data / "captions.jsonl", "--out", root / "triplets.tsv", "--jobs", 2],
        ["build-kg", "--in", root / "triplets.tsv", "--out", root / "graph.tsv"],
        [
            "train-vrk",
            "--graph", root / "graph.tsv",
            "--candidates", data / "relations.txt",
            "--epochs", 60,
            "--seed", 5,
            "--out", root / "vrk.bin",
        ],
    ]
    for argv in steps:
        assert cli_main(QUIET + [str(a) for a in argv]) == 0, argv
    return root


def train_and_eval(root, run_dir, *extra):
    run_dir.mkdir(exist_ok=True)
    data = root / "data"
    train_argv = [
        "train",
        "--train", data / "train.jsonl",
        "--embeddings", data / "embeddings.txt",
        "--vrk", root / "vrk.bin",
        "--benchmark", f"custom:{data / 'relations.txt'}",
        "--shots", 2,
        "--epochs", 15,
        "--hidden-dim", 8,
        "--seed", 3,
        "--out", run_dir / "model.bin",
        *extra,
    ]
    assert cli_main(QUIET + [str(a) for a in train_argv]) == 0
    eval_argv = ["eval", "--checkpoint", run_dir / "model.bin", "--test", data / "test.jsonl", "--out", run_dir / "report.json"]
    assert cli_main(QUIET + [str(a) for a in eval_argv]) == 0
    return run_dir / "model.bin", run_dir / "report.json"


class TestParseCaptions:
    def test_example_caption_gives_two_triplets(self, tmp_path, capsys):
        captions = tmp_path / "caps.jsonl"
        captions.write_text(json.dumps({"id": "c1", "text": "A little cute dog on the sofa is eating an apple"}) + "\n")
        out = tmp_path / "trip.tsv"
        code, _, _ = run(capsys, "parse-captions", "--in", captions, "--out", out)
        assert code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert sorted(lines) == ["dog\tis_eating\tapple\tc1", "dog\ton\tsofa\tc1"]

        manifest = read_manifest(manifest_path(out))
        assert manifest.command == "parse-captions"
        assert manifest.outputs == {str(out): file_digest(out)}
        assert str(captions) in manifest.inputs

    def test_rerun_is_byte_identical(self, tmp_path, capsys):
        captions = tmp_path / "caps.jsonl"
        captions.write_text(json.dumps({"id": "c1", "text": "A man riding a horse on the beach"}) + "\n")
        out = tmp_path / "trip.tsv"
        run(capsys, "parse-captions", "--in", captions, "--out", out)
        first = (out.read_bytes(), manifest_path(out).read_bytes())
        run(capsys, "parse-captions", "--in", captions, "--out", out)
        assert (out.read_bytes(), manifest_path(out).read_bytes()) == first


class TestFilterKg:
    def test_one_hop_matches_oracle(self, tmp_path, capsys):
        edges = [
            ("dog", "on", "sofa"),
            ("dog", "eating", "apple"),
            ("man", "riding", "horse"),
            ("horse", "on", "beach"),
            ("woman", "holding", "umbrella"),
            ("umbrella", "near", "car"),
        ]
        triplets = tmp_path / "trip.tsv"
        triplets.write_text("".join(f"{s}\t{p}\t{o}\tc{i}\n" for i, (s, p, o) in enumerate(edges)))
        anchors = tmp_path / "classes.txt"
        anchors.write_text("dog\nhorse\n")
        assert run(capsys, "build-kg", "--in", triplets, "--out", tmp_path / "g.tsv")[0] == 0
        code, _, _ = run(
            capsys, "filter-kg", "--in", tmp_path / "g.tsv", "--out", tmp_path / "g1.tsv", "--mode", "1hop", "--anchors", anchors
        )
        assert code == 0

        keep = {"dog", "horse"}
        oracle = keep | {o for s, _, o in edges if s in keep} | {s for s, _, o in edges if o in keep}
        filtered = read_graph(tmp_path / "g1.tsv")
        assert filtered.nodes == oracle
        assert set(filtered.counts) == {e for e in edges if e[0] in oracle and e[2] in oracle}

    def test_top_k_relations(self, tmp_path, capsys):
        triplets = tmp_path / "trip.tsv"
        triplets.write_text("a\ton\tb\tc1\na\ton\tc\tc2\nb\tnear\tc\tc3\n")
        run(capsys, "build-kg", "--in", triplets, "--out", tmp_path / "g.tsv")
        code, _, _ = run(capsys, "filter-kg", "--in", tmp_path / "g.tsv", "--out", tmp_path / "top.tsv", "--relations", "top:1")
        assert code == 0
        assert read_graph(tmp_path / "top.tsv").relations == {"on"}


class TestErrors:
    def test_unknown_flag_is_usage_error(self, capsys):
        code, _, err = run(capsys, "parse-captions", "--bogus")
        assert code == 2
        assert error_line(err)["error"] == "usage"

    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 2
        assert error_line(err)["error"] == "usage"

    def test_missing_input_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "parse-captions", "--in", tmp_path / "absent.jsonl", "--out", tmp_path / "t.tsv")
        assert code == 2
        line = error_line(err)
        assert line["error"] == "usage"
        assert "absent.jsonl" in line["message"]

    def test_bad_relation_regime_is_config_error(self, tmp_path, capsys):
        (tmp_path / "g.tsv").write_text("a\ton\tb\t1\n")
        code, _, err = run(capsys, "filter-kg", "--in", tmp_path / "g.tsv", "--out", tmp_path / "x.tsv", "--relations", "best:2")
        assert code == 1
        assert error_line(err)["error"] == "config"

    def test_dataset_error_names_the_line(self, tmp_path, capsys):
        dataset = tmp_path / "train.jsonl"
        dataset.write_text("{not json\n")
        (tmp_path / "train.features.bin").write_bytes(b"")
        (tmp_path / "train.features.idx").write_text("")
        (tmp_path / "emb.txt").write_text("D_t=2\n<unk>\t0.0,0.0\n")
        code, _, err = run(
            capsys, "train", "--train", dataset, "--embeddings", tmp_path / "emb.txt", "--no-vrk", "--out", tmp_path / "m.bin"
        )
        assert code == 1
        line = error_line(err)
        assert line["error"] == "dataset"
        assert "line 1" in line["message"]

    def test_empty_triplet_field_is_config_error(self, tmp_path, capsys):
        triplets = tmp_path / "trip.tsv"
        triplets.write_text("dog\ton\tsofa\tc1\ndog\t\tapple\tc2\n", encoding="utf-8")
        code, _, err = run(capsys, "build-kg", "--in", triplets, "--out", tmp_path / "g.tsv")
        assert code == 1
        line = error_line(err)
        assert line["error"] == "config"
        assert "trip.tsv:2" in line["message"]

    def test_invalid_utf8_graph_is_parse_error(self, tmp_path, capsys):
        graph = tmp_path / "g.tsv"
        graph.write_bytes(b"dog\ton\tsofa\t1\nd\xffog\ton\tsofa\t1\n")
        code, _, err = run(capsys, "filter-kg", "--in", graph, "--out", tmp_path / "g0.tsv", "--mode", "all")
        assert code == 1
        line = error_line(err)
        assert line["error"] == "parse"
        assert "line 2" in line["message"]

    def test_bad_box_is_dataset_error(self, tmp_path, capsys):
        for name in ("mini.jsonl", "mini.features.bin", "mini.features.idx"):
            shutil.copy(FIXTURES / name, tmp_path / name)
        dataset = tmp_path / "mini.jsonl"
        dataset.write_text(dataset.read_text(encoding="utf-8").replace("[0.1,0.1,0.4,0.9]", "[0.9,0.2,0.1,0.8]"), encoding="utf-8")
        (tmp_path / "emb.txt").write_text("D_t=2\n<unk>\t0.0,0.0\n")
        code, _, err = run(
            capsys, "train", "--train", dataset, "--embeddings", tmp_path / "emb.txt", "--no-vrk", "--out", tmp_path / "m.bin"
        )
        assert code == 1
        line = error_line(err)
        assert line["error"] == "dataset"
        assert "line 1" in line["message"] and "img1" in line["message"]


class TestPipeline:
    def test_synthetic_artifacts(self, synthetic):
        data = synthetic / "data"
        for name in ("train.jsonl", "train.features.bin", "test.jsonl", "captions.jsonl", "embeddings.txt", "partition.json"):
            assert (data / name).exists()
        assert manifest_path(data / "partition.json").exists()
        graph = read_graph(synthetic / "graph.tsv")
        assert len(graph) == 8 * 7
        assert read_manifest(manifest_path(synthetic / "vrk.bin")).seed == 5
        assert len(read_loss_curve(synthetic / "vrk.loss.csv")) == 60

    def test_train_eval_report(self, synthetic, tmp_path, capsys):
        checkpoint, report_path = train_and_eval(synthetic, tmp_path / "run")
        model, seen, extra = load_checkpoint(checkpoint)
        assert len(model.candidates) == 5
        assert seen.seen_pairs
        assert 0.0 <= extra["train_accuracy"] <= 1.0
        # 4 relations x 2 shots and as many negatives, batch 32: one step per epoch
        assert len(read_loss_curve(tmp_path / "run" / "model.loss.csv")) == 15

        report = read_report(report_path)
        assert set(report["recall"]) == {"20", "50", "100"}
        assert report["counts"]["images"] == 20

        capsys.readouterr()
        code, out, _ = run(capsys, "report", "--in", report_path, "--out", tmp_path / "table.txt")
        assert code == 0
        assert "psR" in out and "puR" in out
        assert (tmp_path / "table.txt").read_text(encoding="utf-8").strip() == out.strip()

    def test_reruns_are_byte_identical(self, synthetic, tmp_path):
        first = train_and_eval(synthetic, tmp_path / "one")
        second = train_and_eval(synthetic, tmp_path / "two")
        assert first[0].read_bytes() == second[0].read_bytes()
        assert first[1].read_bytes() == second[1].read_bytes()

    def test_switches_reach_the_checkpoint(self, synthetic, tmp_path):
        checkpoint, _ = train_and_eval(synthetic, tmp_path / "ablate", "--no-vrk", "--no-textual", "--template", "cloze")
        model, _, _ = load_checkpoint(checkpoint)
        assert model.config.use_vrk is False
        assert model.config.use_textual is False
        assert model.config.template.value == "cloze"

    def test_replay_regenerates_outputs(self, synthetic, tmp_path, capsys):
        _, report_path = train_and_eval(synthetic, tmp_path / "replay")
        before = report_path.read_bytes()
        report_path.unlink()
        code, _, _ = run(capsys, "replay", "--manifest", manifest_path(report_path))
        assert code == 0
        assert report_path.read_bytes() == before

    def test_replay_detects_drift(self, synthetic, tmp_path, capsys):
        _, report_path = train_and_eval(synthetic, tmp_path / "drift")
        manifest = json.loads(manifest_path(report_path).read_text(encoding="utf-8"))
        manifest["outputs"] = {k: "0" * 64 for k in manifest["outputs"]}
        tampered = tmp_path / "tampered.json"
        tampered.write_text(json.dumps(manifest), encoding="utf-8")
        code, _, err = run(capsys, "replay", "--manifest", tampered)
        assert code == 1
        assert error_line(err)["error"] == "replay"

    def test_too_few_instances_for_benchmark(self, synthetic, tmp_path, capsys):
        data = synthetic / "data"
        code, _, err = run(
            capsys,
            "train", "--train", data / "train.jsonl", "--embeddings", data / "embeddings.txt",
            "--no-vrk", "--benchmark", "50way", "--out", tmp_path / "m.bin",
        )
        assert code == 1
        assert error_line(err)["error"] == "support"

    def test_prior_needs_encoder(self, synthetic, tmp_path, capsys):
        data = synthetic / "data"
        code, _, err = run(
            capsys, "train", "--train", data / "train.jsonl", "--embeddings", data / "embeddings.txt", "--out", tmp_path / "m.bin"
        )
        assert code == 2
        assert "--vrk" in error_line(err)["message"]
