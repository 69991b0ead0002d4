import csv

import numpy as np
import pytest

from c2datt import cli
from c2datt.checkpoint import read_entries, save_checkpoint, write_entries
from c2datt.frontend import FeatureConfig, Waveform, read_matrix, write_wav
from c2datt.model import ModelConfig, SpeakerNet, layer_param_counts
from c2datt.scoring import eer, min_dcf, read_scores, read_trials

from oracles import eer_sweep, min_dcf_sweep

SR = 16000

TINY_MODEL_INI = """\
[model]
depth = 34
width = 4
n_mels = 16
embed_dim = 8
asp_bottleneck = 8
attention = c2d
pooling = std

[features]
n_mels = 16
"""

TINY_TRAIN_INI = """\
[train]
batch_size = 4
crop_seconds = 0.3
warmup_steps = 2
lr_peak = 0.01
decay_epochs = 1
total_epochs = 2
"""


def tone(freq, seconds, seed):
    t = np.arange(int(seconds * SR)) / SR
    noise = np.random.default_rng(seed).standard_normal(t.size)
    return Waveform(0.3 * np.sin(2 * np.pi * freq * t) + 0.02 * noise, SR)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    lines = []
    for spk, freq in enumerate((300, 900, 1500)):
        for k in range(3):
            name = f"s{spk}_{k}.wav"
            write_wav(root / name, tone(freq, 1.0 + 0.5 * k, 10 * spk + k))
            lines.append(f"{spk}\t{name}")
    (root / "train.lst").write_text("\n".join(lines) + "\n")
    (root / "model.ini").write_text(TINY_MODEL_INI)
    (root / "train.ini").write_text(TINY_TRAIN_INI)
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--manifest", str(corpus / "train.lst"), "--model-config", str(corpus / "model.ini"),
                     "--train-config", str(corpus / "train.ini"), "--out-dir", str(out), "--seed", "3"])
    assert code == 0
    return out


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# -- feats -------------------------------------------------------------------------

def test_feats_prints_shape(tmp_path, capsys):
    write_wav(tmp_path / "a.wav", tone(440, 2.0, 0))
    code, out, _ = run(capsys, "feats", "--wav", tmp_path / "a.wav", "--out", tmp_path / "a.bin")
    assert code == 0
    assert out.strip() == "64 x 198"
    assert read_matrix(tmp_path / "a.bin").shape == (64, 198)


def test_feats_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "feats", "--wav", tmp_path / "ghost.wav", "--out", tmp_path / "x.bin")
    assert code == 2
    assert "ghost.wav" in err


def test_feats_rejects_8k(tmp_path, capsys):
    write_wav(tmp_path / "low.wav", Waveform(np.zeros(8000), 8000))
    code, _, err = run(capsys, "feats", "--wav", tmp_path / "low.wav", "--out", tmp_path / "x.bin")
    assert code == 2
    assert "8000 Hz" in err


def test_feats_config(tmp_path, capsys):
    write_wav(tmp_path / "a.wav", tone(440, 1.0, 0))
    (tmp_path / "f.ini").write_text("[features]\nn_mels = 40\n")
    code, out, _ = run(capsys, "feats", "--wav", tmp_path / "a.wav", "--config", tmp_path / "f.ini",
                       "--out", tmp_path / "a.bin")
    assert code == 0 and out.strip() == "40 x 98"


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["feats"])
    assert exc.value.code == 2


# -- params ---------------------------------------------------------------------------

def test_params_report(tmp_path, capsys):
    (tmp_path / "m.ini").write_text("[model]\ndepth = 34\nwidth = 32\nn_mels = 64\n")
    code, out, _ = run(capsys, "params", "--model-config", tmp_path / "m.ini")
    assert code == 0
    lines = out.splitlines()
    per_layer = [ln for ln in lines[: lines.index("-" * 40)]]
    assert sum(int(ln.split()[-1]) for ln in per_layer) == int(lines[-1].split()[1])
    assert "attention weights per block" in out and lines[-4].split()[-1] == "144"
    total = int(lines[-1].split()[1])
    assert abs(total - 6.9e6) / 6.9e6 < 0.03
    assert lines[-1].endswith("(6.90M)")


def test_params_config_errors_listed_together(tmp_path, capsys):
    (tmp_path / "m.ini").write_text("[model]\ndepth = 50\nwidth = 0\nattention = mlp\n")
    code, _, err = run(capsys, "params", "--model-config", tmp_path / "m.ini")
    assert code == 2
    assert "depth" in err and "width" in err and "attention must be one of" in err


# -- train ----------------------------------------------------------------------------

def test_train_writes_metrics_and_checkpoints(trained):
    with open(trained / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "epoch", "lr", "loss", "acc"]
    assert len(rows) == 6                      # 9 utterances, batch 4, 2 epochs
    assert float(rows[0]["lr"]) == 0.0
    assert float(rows[1]["lr"]) == pytest.approx(0.005)
    assert float(rows[-1]["lr"]) == pytest.approx(0.001)
    assert (trained / "epoch_002.c2da").is_file()


def test_train_same_seed_same_metrics(corpus, trained, tmp_path):
    code = cli.main(["train", "--manifest", str(corpus / "train.lst"), "--model-config", str(corpus / "model.ini"),
                     "--train-config", str(corpus / "train.ini"), "--out-dir", str(tmp_path), "--seed", "3"])
    assert code == 0
    assert (tmp_path / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()


def test_train_reports_all_problems(corpus, tmp_path, capsys):
    (tmp_path / "gap.lst").write_text(f"0\t{corpus / 's0_0.wav'}\n2\t{corpus / 's2_0.wav'}\n")
    (tmp_path / "bad.ini").write_text("[train]\nmargin = 3\nbatch_size = 0\n")
    code, _, err = run(capsys, "train", "--manifest", tmp_path / "gap.lst", "--model-config", corpus / "model.ini",
                       "--train-config", tmp_path / "bad.ini", "--out-dir", tmp_path / "o")
    assert code == 2
    assert "not dense" in err and "margin" in err and "batch_size" in err
    assert not (tmp_path / "o").exists()


# -- embed / score / eval ------------------------------------------------------------

def test_embed_store_layout(trained, tmp_path, capsys):
    write_wav(tmp_path / "long.wav", tone(500, 10.0, 1))
    ckpt = trained / "epoch_002.c2da"
    code, out, _ = run(capsys, "embed", "--ckpt", ckpt, "--wav", tmp_path / "long.wav", "--out", tmp_path / "e.c2da")
    assert code == 0 and "3 segment(s), dim 8" in out
    meta, entries = read_entries(tmp_path / "e.c2da")
    key = str(tmp_path / "long.wav")
    assert sorted(entries) == sorted([f"{key}#seg0", f"{key}#seg1", f"{key}#seg2", f"{key}#mean"])
    np.testing.assert_allclose(entries[f"{key}#mean"], np.mean([entries[f"{key}#seg{i}"] for i in range(3)], axis=0),
                               rtol=1e-6)
    run(capsys, "embed", "--ckpt", ckpt, "--wav", tmp_path / "long.wav", "--out", tmp_path / "again.c2da")
    assert (tmp_path / "e.c2da").read_bytes() == (tmp_path / "again.c2da").read_bytes()


def test_embed_missing_utterances_listed(trained, tmp_path, capsys):
    (tmp_path / "list.txt").write_text(f"{tmp_path / 'a.wav'}\n{tmp_path / 'b.wav'}\n")
    code, _, err = run(capsys, "embed", "--ckpt", trained / "epoch_002.c2da", "--list", tmp_path / "list.txt",
                       "--out", tmp_path / "e.c2da")
    assert code == 2 and "a.wav" in err and "b.wav" in err


def test_embed_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "embed", "--ckpt", tmp_path / "none.c2da", "--wav", "x.wav", "--out", tmp_path / "e")
    assert code == 2 and "none.c2da" in err


@pytest.fixture
def separable_store(tmp_path):
    """Embedding store where speaker identity is the dominant direction."""
    rng = np.random.default_rng(0)
    centers = np.eye(8) * 5
    entries, trials = [], []
    for spk in range(4):
        for k in range(3):
            for i in range(2):
                entries.append((f"s{spk}_{k}#seg{i}", centers[spk] + rng.standard_normal(8) * 0.3))
    cohort = [(f"c{j}#seg0", rng.standard_normal(8)) for j in range(12)]
    write_entries(tmp_path / "store.c2da", entries)
    write_entries(tmp_path / "cohort.c2da", cohort)
    for spk in range(4):
        trials.append(f"1 s{spk}_0 s{spk}_1")
        trials.append(f"1 s{spk}_1 s{spk}_2")
        trials.append(f"0 s{spk}_0 s{(spk + 1) % 4}_2")
        trials.append(f"0 s{spk}_2 s{(spk + 2) % 4}_1")
    (tmp_path / "trials.txt").write_text("\n".join(trials) + "\n")
    return tmp_path


def test_eval_separable_gives_zero_eer(separable_store, capsys):
    d = separable_store
    code, out, _ = run(capsys, "eval", "--embeddings", d / "store.c2da", "--trials", d / "trials.txt",
                       "--cohort", d / "cohort.c2da", "--topk", 5, "--out", d / "scores.txt", "--det", d / "det.csv")
    assert code == 0
    assert "EER: 0.00%" in out
    assert "minDCF(p_target=0.01, c_miss=1, c_fa=1): 0.0000" in out
    assert (d / "det.csv").is_file()


def test_eval_matches_metric_oracle(separable_store, capsys):
    d = separable_store
    text = (d / "trials.txt").read_text().replace("1 s0_0 s0_1", "1 s0_0 s3_1")
    (d / "trials.txt").write_text(text)
    code, out, _ = run(capsys, "eval", "--embeddings", d / "store.c2da", "--trials", d / "trials.txt",
                       "--no-asnorm", "--out", d / "scores.txt")
    assert code == 0 and "scores: raw" in out
    ss = read_scores(d / "scores.txt", read_trials(d / "trials.txt"))
    raw = ss.scores(normalized=False)
    assert ss.scores() .tolist() == raw.tolist()
    assert f"EER: {100 * eer_sweep(raw, ss.labels):.2f}%" in out
    assert f"{min_dcf_sweep(raw, ss.labels):.4f}" in out
    assert eer(raw, ss.labels) == pytest.approx(eer_sweep(raw, ss.labels), abs=1e-9)
    assert min_dcf(raw, ss.labels) == pytest.approx(min_dcf_sweep(raw, ss.labels), abs=1e-9)


def test_eval_single_class(separable_store, capsys):
    d = separable_store
    (d / "one.txt").write_text("1 s0_0 s0_1\n1 s1_0 s1_1\n")
    code, _, err = run(capsys, "eval", "--embeddings", d / "store.c2da", "--trials", d / "one.txt",
                       "--no-asnorm", "--out", d / "s.txt")
    assert code == 2 and "single class" in err


def test_score_missing_utterances(separable_store, capsys):
    d = separable_store
    (d / "t.txt").write_text("1 s0_0 ghost_a\n0 ghost_b s1_1\n")
    code, _, err = run(capsys, "score", "--embeddings", d / "store.c2da", "--trials", d / "t.txt",
                       "--no-asnorm", "--out", d / "s.txt")
    assert code == 2 and "ghost_a" in err and "ghost_b" in err


def test_score_needs_cohort_or_flag(separable_store, capsys):
    d = separable_store
    code, _, err = run(capsys, "score", "--embeddings", d / "store.c2da", "--trials", d / "trials.txt",
                       "--out", d / "s.txt")
    assert code == 2 and "--cohort" in err


def test_score_from_wavs_end_to_end(corpus, trained, tmp_path, capsys):
    w = lambda s, k: corpus / f"s{s}_{k}.wav"  # noqa: E731
    (tmp_path / "t.txt").write_text(f"1 {w(0, 0)} {w(0, 1)}\n0 {w(0, 0)} {w(1, 1)}\n0 {w(2, 0)} {w(1, 2)}\n")
    (tmp_path / "cohort.lst").write_text("\n".join(str(w(s, 2)) for s in range(3)) + "\n")
    code, out, _ = run(capsys, "score", "--ckpt", trained / "epoch_002.c2da", "--trials", tmp_path / "t.txt",
                       "--cohort", tmp_path / "cohort.lst", "--topk", 2, "--out", tmp_path / "s.txt")
    assert code == 0 and "scored 3 trials" in out
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith(f"{w(0, 0)} {w(0, 1)} ")


# -- attmap ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def wide_checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("wide")
    out = {}
    for variant in ("c2d", "se", "fwse"):
        model = SpeakerNet(ModelConfig(width=32, n_mels=64).with_attention(variant=variant), seed=1)
        save_checkpoint(model, root / f"{variant}.c2da")
        out[variant] = root / f"{variant}.c2da"
    write_wav(root / "speech.wav", tone(220, 1.0, 5))
    out["wav"] = root / "speech.wav"
    return out


def read_map(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def test_attmap_c2d_shape_and_range(wide_checkpoints, tmp_path, capsys):
    code, out, _ = run(capsys, "attmap", "--ckpt", wide_checkpoints["c2d"], "--wav", wide_checkpoints["wav"],
                       "--out", tmp_path / "m.csv", "--pgm", tmp_path / "m.pgm", "--bin", tmp_path / "m.bin")
    assert code == 0 and "32 (freq) x 64 (channel)" in out
    header, m = read_map(tmp_path / "m.csv")
    assert header[0] == "freq\\channel" and header[1] == "c0" and len(header) == 65
    assert m.shape == (32, 64)
    assert ((m > 0) & (m < 1)).all()
    assert read_matrix(tmp_path / "m.bin").shape == (64, 32)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n64 32\n255\n")


def test_attmap_se_rows_identical(wide_checkpoints, tmp_path, capsys):
    run(capsys, "attmap", "--ckpt", wide_checkpoints["se"], "--wav", wide_checkpoints["wav"], "--out", tmp_path / "m.csv")
    _, m = read_map(tmp_path / "m.csv")
    assert (m == m[0]).all() and m[0].std() > 0


def test_attmap_fwse_columns_identical(wide_checkpoints, tmp_path, capsys):
    run(capsys, "attmap", "--ckpt", wide_checkpoints["fwse"], "--wav", wide_checkpoints["wav"],
        "--out", tmp_path / "m.csv")
    _, m = read_map(tmp_path / "m.csv")
    assert (m == m[:, :1]).all() and m[:, 0].std() > 0


def test_attmap_unknown_block(wide_checkpoints, tmp_path, capsys):
    code, _, err = run(capsys, "attmap", "--ckpt", wide_checkpoints["c2d"], "--wav", wide_checkpoints["wav"],
                       "--block", "res9.last", "--out", tmp_path / "m.csv")
    assert code == 2 and "res9.last" in err


def test_param_lines_match_inventory():
    rows = layer_param_counts(ModelConfig(width=8).with_attention(variant="se"))
    lines = cli.params_report(rows)
    assert len(lines) == len(rows) + 5
    assert "(0." in lines[-1]


def test_threads_env(monkeypatch):
    monkeypatch.setenv("C2DATT_THREADS", "3")
    assert cli._workers() == 3
    monkeypatch.setenv("C2DATT_THREADS", "many")
    with pytest.raises(cli.UsageError):
        cli._workers()


def test_feature_mismatch_in_model_config(corpus, tmp_path, capsys):
    (tmp_path / "m.ini").write_text(TINY_MODEL_INI.replace("[features]\nn_mels = 16", "[features]\nn_mels = 64"))
    code, _, err = run(capsys, "train", "--manifest", corpus / "train.lst", "--model-config", tmp_path / "m.ini",
                       "--train-config", corpus / "train.ini", "--out-dir", tmp_path / "o")
    assert code == 2 and "n_mels" in err
    assert FeatureConfig().n_mels == 64
