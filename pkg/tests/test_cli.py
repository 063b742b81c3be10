import csv
import json

import numpy as np
import pytest

from anchoralign import cli
from anchoralign.embedding_io import (
    LANGUAGE,
    VISION,
    PairedDataset,
    TokenSequence,
    read_corpus,
    read_pairs,
    write_corpus,
    write_labels,
    write_pairs,
)
from anchoralign.evaluator import anchor_overlap, export_heatmaps, read_attention_csv, retrieval_eval, similarity_matrix
from anchoralign.relrep import encode, encode_pooled
from anchoralign.trainer import TrainConfig, init_anchors, load_checkpoint

SMALL_SYNTH = ["--train-size", "120", "--test-size", "20"]


def run(argv):
    return cli.main([str(a) for a in argv])


def dir_bytes(path, skip=("run_manifest.json",)):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name not in skip}


def read_metrics(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default synth corpus plus a default-flag training run, shared by the module."""
    root = tmp_path_factory.mktemp("default")
    assert run(["synth", "--out", root / "data"]) == 0
    assert run(["train", "--data", root / "data", "--out", root / "run"]) == 0
    return root


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    assert run(["synth", "--seed", 3, "--grid", "3x3", "--out", root / "data"] + SMALL_SYNTH) == 0
    assert run(["train", "--data", root / "data", "--out", root / "run", "--K", 16, "--epochs", 3,
                "--batch-size", 32]) == 0
    return root


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--concepts", 8, "--seed", 1, "--out", tmp_path / name] + SMALL_SYNTH) == 0
    a, b = dir_bytes(tmp_path / "a"), dir_bytes(tmp_path / "b")
    assert set(a) == {
        "prompts.palt", "train_vision.palt", "train_language.palt", "train_pairs.tsv", "train_vision.labels",
        "train_language.labels", "test_vision.palt", "test_language.palt", "test_pairs.tsv",
        "test_vision.labels", "test_language.labels",
    }
    assert a == b
    ma = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "run_manifest.json").read_text())
    assert ma["config"] == mb["config"]


def test_synth_rejects_single_concept(tmp_path, capsys):
    assert run(["synth", "--concepts", 1, "--out", tmp_path]) == 2
    assert "error" in capsys.readouterr().err


def test_synth_bad_config_value_is_usage_error(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("noise_sigma = lots\n")
    assert run(["synth", "--config", cfg, "--out", tmp_path / "d"]) == 2


def test_synth_flag_overrides_config(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("num_train = 30\nnum_test = 5\nnum_concepts = 3\n")
    assert run(["synth", "--config", cfg, "--concepts", 4, "--out", tmp_path / "d"]) == 0
    manifest = json.loads((tmp_path / "d" / "run_manifest.json").read_text())
    assert manifest["config"]["num_concepts"] == 4
    assert manifest["config"]["num_train"] == 30
    assert len(read_corpus(tmp_path / "d" / "prompts.palt")) == 4


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_default_synth_and_train_loss_trends_down(default_run):
    rows = read_metrics(default_run / "run" / "train_log.csv")
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(float(r["loss"]))
    assert sorted(by_epoch) == list(range(TrainConfig().epochs))
    assert np.mean(by_epoch[max(by_epoch)]) < np.mean(by_epoch[0])
    state = load_checkpoint(default_run / "run" / "checkpoint.palc")
    assert state.config == TrainConfig()
    assert state.anchors_v.K == 512


def test_zero_learning_rate_keeps_initial_anchors(small_run, tmp_path):
    assert run(["train", "--data", small_run / "data", "--out", tmp_path, "--K", 8, "--epochs", 2, "--lr", 0]) == 0
    state = load_checkpoint(tmp_path / "checkpoint.palc")
    seq_v, seq_l = read_corpus(small_run / "data" / "train_vision.palt"), read_corpus(small_run / "data" / "train_language.palt")
    ds = PairedDataset(list(seq_v), list(seq_l), read_pairs(small_run / "data" / "train_pairs.tsv"))
    av, al = init_anchors(ds, state.config)
    assert state.step > 0
    assert state.anchors_v == av and state.anchors_l == al


def test_missing_pair_manifest_exits_2(small_run, tmp_path):
    data = small_run / "data"
    code = run(["train", "--vision", data / "train_vision.palt", "--language", data / "train_language.palt",
                "--pairs", tmp_path / "nope.tsv", "--out", tmp_path / "run", "--epochs", 1])
    assert code == 2


def test_train_is_reproducible_and_thread_independent(small_run, tmp_path):
    argv = ["train", "--data", small_run / "data", "--K", 8, "--epochs", 2, "--batch-size", 16]
    assert run(argv + ["--out", tmp_path / "a"]) == 0
    assert run(argv + ["--out", tmp_path / "b", "--threads", 1]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_train_resume_matches_single_run(small_run, tmp_path):
    base = ["train", "--data", small_run / "data", "--K", 8, "--batch-size", 16]
    assert run(base + ["--epochs", 4, "--out", tmp_path / "full"]) == 0
    assert run(base + ["--epochs", 2, "--out", tmp_path / "half"]) == 0
    assert run(base + ["--epochs", 4, "--out", tmp_path / "resumed", "--resume", tmp_path / "half" / "checkpoint.palc"]) == 0
    full = (tmp_path / "full" / "checkpoint.palc").read_bytes()
    assert (tmp_path / "resumed" / "checkpoint.palc").read_bytes() == full


def test_train_numeric_abort_exits_3(tmp_path, capsys):
    # two identical pairs whose tokens coincide with the anchors: tau so small the logits overflow
    data = tmp_path / "data"
    data.mkdir()
    seqs = [TokenSequence(np.array([[1.0, 0.0]]), sample_id=i) for i in range(2)]
    write_corpus(seqs, data / "train_vision.palt", VISION, 2)
    write_corpus(seqs, data / "train_language.palt", LANGUAGE, 2)
    write_pairs([(0, 0), (1, 1)], data / "train_pairs.tsv")
    code = run(["train", "--data", data, "--out", tmp_path / "run", "--K", 1, "--tau", 1e-320, "--batch-size", 2])
    assert code == 3
    assert "checkpoint" in capsys.readouterr().err


def test_train_writes_manifest_with_digests(small_run):
    manifest = json.loads((small_run / "run" / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["K"] == 16
    assert any(name.endswith("train_pairs.tsv") for name in manifest["inputs"])
    assert all(len(d) == 64 for d in manifest["inputs"].values())


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_default_passes(capsys):
    assert run(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_broken_gradient_exits_4(tmp_path, capsys):
    assert run(["gradcheck", "--instances", 5, "--break-gradient", "--out", tmp_path]) == 4
    out = capsys.readouterr().out
    assert "FAIL" in out and "worst instance" in out
    assert (tmp_path / "gradcheck_report.txt").exists()
    assert (tmp_path / "run_manifest.json").exists()


def test_gradcheck_zero_instances_is_usage_error():
    assert run(["gradcheck", "--instances", 0]) == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _one_pair_dataset(root, grid=None):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(5)
    v = TokenSequence(rng.standard_normal((4, 32)), grid=grid, sample_id=0)
    lang = TokenSequence(rng.standard_normal((3, 24)), sample_id=0)
    write_corpus([v], root / "train_vision.palt", VISION, 32)
    write_corpus([lang], root / "train_language.palt", LANGUAGE, 24)
    write_pairs([(0, 0)], root / "train_pairs.tsv")
    write_labels([np.zeros(4, dtype=np.int32)], root / "train_vision.labels", [0], VISION)
    write_corpus([TokenSequence(rng.standard_normal((1, 24)), sample_id=0)], root / "prompts.palt", LANGUAGE, 24)
    return root


def test_eval_retrieval_one_pair_is_perfect(small_run, tmp_path):
    data = _one_pair_dataset(tmp_path / "data")
    ckpt = small_run / "run" / "checkpoint.palc"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--task", "retrieval", "--out", tmp_path / "e"]) == 0
    rows = read_metrics(tmp_path / "e" / "metrics.csv")
    assert rows and all(float(r["value"]) == 1.0 for r in rows)


def test_eval_classify_single_class_is_perfect(small_run, tmp_path):
    data = _one_pair_dataset(tmp_path / "data")
    ckpt = small_run / "run" / "checkpoint.palc"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--task", "classify", "--out", tmp_path / "e"]) == 0
    (row,) = read_metrics(tmp_path / "e" / "metrics.csv")
    assert row["metric"] == "top1_accuracy" and float(row["value"]) == 1.0


def test_eval_dense_without_grids_exits_2(small_run, tmp_path):
    data = _one_pair_dataset(tmp_path / "data")
    ckpt = small_run / "run" / "checkpoint.palc"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--task", "dense", "--out", tmp_path / "e"]) == 2


def test_eval_dense_with_grids_runs(small_run, tmp_path):
    data = _one_pair_dataset(tmp_path / "data", grid=(2, 2))
    ckpt = small_run / "run" / "checkpoint.palc"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--task", "dense", "--out", tmp_path / "e"]) == 0
    (row,) = read_metrics(tmp_path / "e" / "metrics.csv")
    assert row["metric"] == "miou_fg" and 0.0 <= float(row["value"]) <= 1.0


def test_eval_retrieval_matches_library(small_run, tmp_path):
    data, ckpt = small_run / "data", small_run / "run" / "checkpoint.palc"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--split", "test", "--task", "retrieval",
                "--ks", "1,5", "--out", tmp_path]) == 0
    state = load_checkpoint(ckpt)
    c = state.config
    h_v = encode(list(read_corpus(data / "test_vision.palt")), state.anchors_v, c.tau_p, c.pooling)
    h_l = encode(list(read_corpus(data / "test_language.palt")), state.anchors_l, c.tau_p, c.pooling)
    expected = retrieval_eval(similarity_matrix(h_v, h_l), read_pairs(data / "test_pairs.tsv"), (1, 5))
    names = {"i2t": "a2b", "t2i": "b2a"}
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 4
    for r in rows:
        assert r["dataset"] == "test"
        assert float(r["value"]) == expected[names[r["direction"]]][int(r["k"])]


# ---------------------------------------------------------------------------
# analyze and heatmap
# ---------------------------------------------------------------------------

def _report(path):
    return dict(line.split("=", 1) for line in path.read_text().split())


def test_analyze_matches_library(small_run, tmp_path):
    data, ckpt = small_run / "data", small_run / "run" / "checkpoint.palc"
    assert run(["analyze", "--checkpoint", ckpt, "--data", data, "--split", "test", "--seed", 4, "--out", tmp_path]) == 0
    state = load_checkpoint(ckpt)
    c = state.config
    p_v = encode_pooled(list(read_corpus(data / "test_vision.palt")), state.anchors_v, c.tau_p, c.pooling)
    p_l = encode_pooled(list(read_corpus(data / "test_language.palt")), state.anchors_l, c.tau_p, c.pooling)
    expected = anchor_overlap(p_v, p_l, read_pairs(data / "test_pairs.tsv"), seed=4, k_top=5)
    assert (tmp_path / "overlap_report.txt").read_text() == expected.to_text()


def test_analyze_self_overlap_is_one(small_run, tmp_path):
    # vision corpus paired with itself under the vision anchors on both sides
    data = small_run / "data"
    state = load_checkpoint(small_run / "run" / "checkpoint.palc")
    from anchoralign.trainer import TrainState, save_checkpoint

    twin = TrainState.fresh(state.config, state.anchors_v, state.anchors_v)
    save_checkpoint(twin, tmp_path / "twin.palc")
    n = len(read_corpus(data / "test_vision.palt"))
    write_pairs([(i, i) for i in range(n)], tmp_path / "self_pairs.tsv")
    code = run(["analyze", "--checkpoint", tmp_path / "twin.palc", "--vision", data / "test_vision.palt",
                "--language", data / "test_vision.palt", "--pairs", tmp_path / "self_pairs.tsv", "--out", tmp_path / "a"])
    assert code == 0
    report = _report(tmp_path / "a" / "overlap_report.txt")
    assert float(report["mean_hard_overlap_matched"]) == 1.0
    assert float(report["mean_dice_matched"]) == 1.0


def test_heatmap_invalid_anchor_exits_2(small_run, tmp_path):
    code = run(["heatmap", "--checkpoint", small_run / "run" / "checkpoint.palc", "--data", small_run / "data",
                "--samples", "0", "--anchors", "99", "--out", tmp_path])
    assert code == 2


def test_heatmap_matches_library(small_run, tmp_path):
    data, ckpt = small_run / "data", small_run / "run" / "checkpoint.palc"
    code = run(["heatmap", "--checkpoint", ckpt, "--data", data, "--samples", "0,2", "--anchors", "1,3", "--out", tmp_path / "cli"])
    assert code == 0
    state = load_checkpoint(ckpt)
    seq_v, seq_l = read_corpus(data / "train_vision.palt"), read_corpus(data / "train_language.palt")
    pairs = read_pairs(data / "train_pairs.tsv")
    for n in (0, 2):
        i, j = pairs[n]
        export_heatmaps(seq_v[i], state.anchors_v, seq_l[j], state.anchors_l, [1, 3], state.config.tau_p, tmp_path / "lib")
    cli_files = dir_bytes(tmp_path / "cli" / "heatmaps")
    assert cli_files == dir_bytes(tmp_path / "lib")
    assert len(cli_files) == 2 * 2 * 3
    text = [name for name in cli_files if name.endswith("_text.csv")]
    rows = read_attention_csv(tmp_path / "cli" / "heatmaps" / text[0])
    assert len(rows) > 0
    assert (tmp_path / "cli" / "run_manifest.json").exists()
