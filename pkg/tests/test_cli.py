"""Command-line behavior: outputs, manifests, exit codes, determinism."""

import json

import numpy as np
import pytest
from PIL import Image

import coralsynth as cs
from coralsynth.cli import main


def run(*args):
    return main([str(a) for a in args])


def write_png(path, seed, h=24, w=24):
    rng = np.random.default_rng(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    cs.save_image(rng.integers(0, 256, size=(1, 3, h, w)).astype(np.float32), path)
    return path


@pytest.fixture
def content_png(tmp_path):
    return write_png(tmp_path / "content.png", seed=1)


@pytest.fixture
def style_png(tmp_path):
    return write_png(tmp_path / "style.png", seed=2)


SMALL_LOSS = (
    "--feat-layers", "conv1_2:1",
    "--coral-layers", "conv1_1:0.5",
    "--lambda", "10",
)


class TestSynth:
    def test_writes_image_manifest_and_summary(self, tmp_path, content_png, style_png, capsys):
        out = tmp_path / "gen" / "result.png"
        code = run(
            "synth", "--random-weights", "0", "--content", content_png,
            "--style", style_png, "--out", out, "--iterations", "3",
            "--label", "aeroplane",
        )
        assert code == 0
        assert out.exists()
        line = capsys.readouterr().out.strip()
        assert line.startswith("feat=") and "coral=" in line and "total=" in line

        records = cs.read_manifest(tmp_path / "gen" / "manifest.jsonl")
        assert len(records) == 1
        rec = records[0]
        assert rec.output_path == str(out)
        assert rec.label == "aeroplane"
        assert rec.lam == 1000.0
        assert rec.iterations == 3
        assert rec.feat_layers == {"conv3_2": 1.0}
        assert rec.coral_layers == {
            "conv1_1": 0.2, "conv2_1": 0.2, "conv3_1": 0.2,
            "conv4_1": 0.2, "conv5_1": 0.2,
        }

    def test_identical_runs_identical_bytes(self, tmp_path, content_png, style_png):
        outs = [tmp_path / "a.png", tmp_path / "b.png"]
        for out in outs:
            code = run(
                "synth", "--random-weights", "0", "--content", content_png,
                "--style", style_png, "--out", out, "--iterations", "4",
                "--manifest", tmp_path / "m.jsonl",
            )
            assert code == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_matched_pair_reports_zero_objective(self, tmp_path, content_png, capsys):
        code = run(
            "synth", "--random-weights", "0", "--content", content_png,
            "--style", content_png, "--out", tmp_path / "o.png",
            "--iterations", "3", "--noise-sigma", "0",
        )
        assert code == 0
        assert capsys.readouterr().out.strip() == "feat=0 coral=0 total=0"

    def test_trace_file(self, tmp_path, content_png, style_png):
        trace_path = tmp_path / "trace.jsonl"
        code = run(
            "synth", "--random-weights", "0", "--content", content_png,
            "--style", style_png, "--out", tmp_path / "o.png",
            "--iterations", "7", "--log-every", "3", "--trace", trace_path,
            *SMALL_LOSS,
        )
        assert code == 0
        points = [json.loads(l) for l in trace_path.read_text().splitlines()]
        assert [p["iter"] for p in points] == [0, 3, 6, 7]
        assert all(set(p) == {"iter", "feat", "coral", "total"} for p in points)


class TestExitCodes:
    def test_missing_required_flag(self, tmp_path, content_png):
        assert run("synth", "--random-weights", "0", "--content", content_png,
                   "--out", tmp_path / "o.png") == 1

    def test_unknown_loss_layer(self, tmp_path, content_png, style_png):
        assert run("synth", "--random-weights", "0", "--content", content_png,
                   "--style", style_png, "--out", tmp_path / "o.png",
                   "--iterations", "2", "--feat-layers", "conv9_9:1") == 1

    def test_non_conv_loss_layer(self, tmp_path, content_png, style_png):
        assert run("synth", "--random-weights", "0", "--content", content_png,
                   "--style", style_png, "--out", tmp_path / "o.png",
                   "--iterations", "2", "--feat-layers", "pool1:1") == 1

    def test_both_weight_sources(self, tmp_path, content_png, style_png):
        assert run("synth", "--weights", tmp_path / "w.dgcw", "--random-weights",
                   "0", "--content", content_png, "--style", style_png,
                   "--out", tmp_path / "o.png") == 1

    def test_no_weight_source(self, tmp_path, content_png, style_png):
        assert run("synth", "--content", content_png, "--style", style_png,
                   "--out", tmp_path / "o.png") == 1

    def test_missing_content_file(self, tmp_path, style_png):
        assert run("synth", "--random-weights", "0", "--content",
                   tmp_path / "nope.png", "--style", style_png,
                   "--out", tmp_path / "o.png", "--iterations", "2") == 2

    def test_bad_weight_file(self, tmp_path, content_png, style_png):
        bad = tmp_path / "bad.dgcw"
        bad.write_bytes(b"not a weight container")
        assert run("synth", "--weights", bad, "--content", content_png,
                   "--style", style_png, "--out", tmp_path / "o.png",
                   "--iterations", "2") == 2

    def test_non_rgb_content(self, tmp_path, style_png):
        gray = tmp_path / "gray.png"
        Image.new("L", (24, 24)).save(gray)
        assert run("synth", "--random-weights", "0", "--content", gray,
                   "--style", style_png, "--out", tmp_path / "o.png",
                   "--iterations", "2") == 2

    def test_divergent_run(self, tmp_path, content_png, style_png):
        assert run("synth", "--random-weights", "0", "--content", content_png,
                   "--style", style_png, "--out", tmp_path / "o.png",
                   "--iterations", "5", "--optimizer", "gd", "--step", "1e30",
                   *SMALL_LOSS) == 3

    def test_empty_style_dir(self, tmp_path, content_png):
        (tmp_path / "styles").mkdir()
        (tmp_path / "contents" / "cat").mkdir(parents=True)
        write_png(tmp_path / "contents" / "cat" / "a.png", seed=1)
        assert run("batch", "--random-weights", "0",
                   "--content-dir", tmp_path / "contents",
                   "--style-dir", tmp_path / "styles",
                   "--out-dir", tmp_path / "out", "--iterations", "2") == 2


@pytest.fixture
def batch_tree(tmp_path):
    contents = tmp_path / "contents"
    styles = tmp_path / "styles"
    for label, idx in (("cat", 0), ("cat", 1), ("dog", 0), ("dog", 1)):
        write_png(contents / label / f"{idx}.png", seed=10 + idx, h=16, w=16)
    for i in range(3):
        write_png(styles / f"s{i}.png", seed=20 + i, h=16, w=16)
    return contents, styles


def run_batch(contents, styles, out_dir, *extra):
    return run(
        "batch", "--random-weights", "0", "--content-dir", contents,
        "--style-dir", styles, "--out-dir", out_dir,
        "--iterations", "3", *SMALL_LOSS, *extra,
    )


class TestBatch:
    def test_generates_labeled_tree(self, tmp_path, batch_tree, capsys):
        contents, styles = batch_tree
        out_dir = tmp_path / "out"
        assert run_batch(contents, styles, out_dir) == 0
        assert capsys.readouterr().out.strip() == "generated 4, skipped 0, failed 0"

        records = cs.read_manifest(out_dir / "manifest.jsonl")
        assert len(records) == 4
        assert sorted(r.label for r in records) == ["cat", "cat", "dog", "dog"]
        for label, idx in (("cat", 0), ("cat", 1), ("dog", 0), ("dog", 1)):
            assert (out_dir / label / f"{idx}.png").exists()
        seeds = {r.output_path: r.seed for r in records}
        assert sorted(seeds.values()) == [0, 1, 2, 3]

    def test_pairing_is_deterministic(self, tmp_path, batch_tree):
        contents, styles = batch_tree
        run_batch(contents, styles, tmp_path / "out1")
        run_batch(contents, styles, tmp_path / "out2")
        pick = lambda d: {
            r.content_path.split("contents/")[1]: r.style_path
            for r in cs.read_manifest(d / "manifest.jsonl")
        }
        assert pick(tmp_path / "out1") == pick(tmp_path / "out2")

    def test_resume_regenerates_only_missing(self, tmp_path, batch_tree, capsys):
        contents, styles = batch_tree
        out_dir = tmp_path / "out"
        run_batch(contents, styles, out_dir)
        capsys.readouterr()
        victim = out_dir / "dog" / "1.png"
        original = victim.read_bytes()
        victim.unlink()

        assert run_batch(contents, styles, out_dir) == 0
        assert capsys.readouterr().out.strip() == "generated 1, skipped 3, failed 0"
        assert victim.read_bytes() == original
        records = cs.read_manifest(out_dir / "manifest.jsonl")
        assert len(records) == 4
        assert len({r.output_path for r in records}) == 4

    def test_workers_do_not_change_results(self, tmp_path, batch_tree):
        contents, styles = batch_tree
        run_batch(contents, styles, tmp_path / "seq")
        run_batch(contents, styles, tmp_path / "par", "--workers", "2")
        for rel in ("cat/0.png", "cat/1.png", "dog/0.png", "dog/1.png"):
            assert (tmp_path / "seq" / rel).read_bytes() == \
                (tmp_path / "par" / rel).read_bytes()
        by_out = lambda d: {
            r.output_path.rsplit("/", 2)[-1]: (r.seed, r.final_feat)
            for r in cs.read_manifest(d / "manifest.jsonl")
        }
        assert by_out(tmp_path / "seq") == by_out(tmp_path / "par")


@pytest.fixture
def two_sets(tmp_path):
    set_a = tmp_path / "set_a"
    set_b = tmp_path / "set_b"
    for i in range(2):
        write_png(set_a / f"{i}.png", seed=30 + i, h=12, w=12)
        write_png(set_b / f"{i}.png", seed=40 + i, h=12, w=12)
    return set_a, set_b


class TestMetrics:
    def test_identical_sets_zero_distance(self, tmp_path, two_sets, capsys):
        set_a, _ = two_sets
        code = run("metrics", "--random-weights", "0", "--set-a", set_a,
                   "--set-b", set_a, "--layers", "conv1_1,conv2_1")
        assert code == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert [l["layer"] for l in lines] == ["conv1_1", "conv2_1"]
        assert all(l["distance"] == 0.0 for l in lines)
        assert all(l["n_pairs"] == 2 for l in lines)

    def test_pairwise_matches_direct_computation(self, tmp_path, two_sets):
        set_a, set_b = two_sets
        report = tmp_path / "report.jsonl"
        code = run("metrics", "--random-weights", "0", "--set-a", set_a,
                   "--set-b", set_b, "--layers", "conv1_1", "--out", report)
        assert code == 0

        net = cs.random_weights(cs.vgg16(), seed=0)
        def cov(path):
            cache = cs.forward(net, cs.load_image(path), "conv1_1", "f32")
            return cs.covariance(cache.get("conv1_1"), "channels")
        dists = [
            float(np.sum((cov(set_a / f"{i}.png") - cov(set_b / f"{i}.png")) ** 2))
            for i in range(2)
        ]
        got = json.loads(report.read_text())
        assert got["distance"] == float(np.mean(dists))
        assert got["n_pairs"] == 2

    def test_mean_cov_mode_allows_unequal_sets(self, tmp_path, two_sets, capsys):
        set_a, set_b = two_sets
        write_png(set_b / "extra.png", seed=50, h=12, w=12)
        code = run("metrics", "--random-weights", "0", "--set-a", set_a,
                   "--set-b", set_b, "--layers", "conv1_1", "--mode", "mean-cov")
        assert code == 0
        got = json.loads(capsys.readouterr().out)
        assert got["n_pairs"] == 1
        assert got["distance"] > 0.0

    def test_pairwise_rejects_unequal_sets(self, tmp_path, two_sets):
        set_a, set_b = two_sets
        write_png(set_b / "extra.png", seed=50, h=12, w=12)
        assert run("metrics", "--random-weights", "0", "--set-a", set_a,
                   "--set-b", set_b, "--layers", "conv1_1") == 2

    def test_layers_reported_in_network_order(self, tmp_path, two_sets, capsys):
        set_a, set_b = two_sets
        code = run("metrics", "--random-weights", "0", "--set-a", set_a,
                   "--set-b", set_b, "--layers", "conv2_1,conv1_1,conv1_2")
        assert code == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert [l["layer"] for l in lines] == ["conv1_1", "conv1_2", "conv2_1"]


class TestSweep:
    def test_writes_images_and_report(self, tmp_path, content_png, style_png, capsys):
        out_dir = tmp_path / "sweep"
        code = run(
            "sweep", "--random-weights", "0", "--content", content_png,
            "--style", style_png, "--out-dir", out_dir, "--lambdas", "10,0",
            "--iterations", "2", *SMALL_LOSS[:4],
        )
        assert code == 0
        assert (out_dir / "lambda_0.png").exists()
        assert (out_dir / "lambda_10.png").exists()
        report = [json.loads(l) for l in (out_dir / "sweep.jsonl").read_text().splitlines()]
        assert [r["lambda"] for r in report] == [0.0, 10.0]
        printed = capsys.readouterr().out.splitlines()
        assert printed[0].startswith("lambda=0 ")
        assert printed[1].startswith("lambda=10 ")

    def test_rejects_negative_lambda(self, tmp_path, content_png, style_png):
        assert run("sweep", "--random-weights", "0", "--content", content_png,
                   "--style", style_png, "--out-dir", tmp_path / "s",
                   "--lambdas", "1,-2", "--iterations", "2") == 1

    def test_rejects_empty_lambda_list(self, tmp_path, content_png, style_png):
        assert run("sweep", "--random-weights", "0", "--content", content_png,
                   "--style", style_png, "--out-dir", tmp_path / "s",
                   "--lambdas", ",", "--iterations", "2") == 1


class TestRf:
    def test_table_values(self, capsys):
        assert run("rf") == 0
        table = dict(l.split() for l in capsys.readouterr().out.splitlines())
        assert table["conv1_1"] == "3"
        assert table["conv1_2"] == "5"
        assert table["conv2_2"] == "14"
        assert table["conv3_2"] == "32"
        assert table["conv3_3"] == "40"
        assert table["conv4_2"] == "76"
        assert table["conv5_2"] == "164"
        assert table["conv5_3"] == "196"
        assert len(table) == 13

    def test_layer_filter(self, capsys):
        assert run("rf", "--layers", "conv3_2") == 0
        assert capsys.readouterr().out.split() == ["conv3_2", "32"]

    def test_unknown_layer(self):
        assert run("rf", "--layers", "convX") == 1
