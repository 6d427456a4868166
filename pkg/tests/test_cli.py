import numpy as np

from simnet.checkpoint import load_checkpoint, save_checkpoint
from simnet.cli import main
from simnet.data import write_cifar_binary
from simnet.flops import count_costs
from simnet.network import NetworkSpec

SEPARABLE = """
[run]
seed = {seed}
checkpoint = {d}/sep.ckpt
metrics = {d}/sep.tsv
report = {d}/sep_report.txt
[data]
format = synthetic
synthetic_size = 120
holdout = 30
[layer1]
channels = 4
whiten_dim = 2
[train]
batch_size = 16
lr = 0.05
weight_decay = 0.0
epochs = 4
noise_std = 0.05
"""

STRIPES = """
[run]
checkpoint = {d}/st.ckpt
metrics = {d}/st.tsv
report = {d}/st_report.txt
[data]
format = synthetic
synthetic_task = images
synthetic_size = 60
height = 8
width = 8
channels = 3
holdout = 20
mean_subtraction = true
[layer1]
field = 3
channels = 3
whiten_dim = 6
trainable_filters = false
pool = mex
[layer2]
field = 2
channels = 4
whiten_dim = 8
trainable_filters = false
[train]
batch_size = 16
epochs = 2
[pretrain]
enabled = true
patches = 1000
max_iter = 20
"""


def write(tmp_path, template, name="run.ini", **kw):
    path = tmp_path / name
    path.write_text(template.format(d=tmp_path, seed=kw.get("seed", 0)))
    return str(path)


def test_selftest_and_gradcheck(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--tolerance", "1e-14"]) == 1


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--config", "x.ini", "--bogus"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nwidth = 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["flops"]) == 2


def test_train_then_eval_matches_final_epoch(tmp_path, capsys):
    cfg = write(tmp_path, SEPARABLE)
    assert main(["train", "--config", cfg, "--fixed-clock"]) == 0
    last = (tmp_path / "sep.tsv").read_text().splitlines()[-1].split("\t")
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "sep.ckpt")]) == 0
    lines = dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines())
    assert float(lines["accuracy"]) == float(last[3])
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "sep.ckpt"), "--split", "train"]) == 0
    train_acc = float(dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines())["accuracy"])
    assert train_acc == float(last[2])
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "sep.ckpt"), "--split", "test"]) == 2


def test_eval_batch_size_invariant(tmp_path, capsys):
    cfg = write(tmp_path, SEPARABLE)
    assert main(["train", "--config", cfg]) == 0
    outs = []
    for bs in ("1", "7", "500"):
        capsys.readouterr()
        assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "sep.ckpt"), "--batch-size", bs]) == 0
        outs.append(capsys.readouterr().out.splitlines()[0])
    assert len(set(outs)) == 1


def test_commands_deterministic(tmp_path):
    cfg = write(tmp_path, STRIPES)
    results = []
    for run in range(2):
        out = tmp_path / f"r{run}"
        out.mkdir()
        assert main(["pretrain", "--config", cfg, "--out", str(out / "p.ckpt"), "--report", str(out / "p.txt")]) == 0
        assert main(["train", "--config", cfg, "--init", str(out / "p.ckpt"), "--out", str(out / "t.ckpt"),
                     "--metrics", str(out / "m.tsv"), "--fixed-clock", "--seed", "3"]) == 0
        results.append([(out / n).read_bytes() for n in ("p.ckpt", "p.txt", "t.ckpt", "m.tsv")])
    assert results[0] == results[1]
    assert load_checkpoint(tmp_path / "r0" / "t.ckpt").input_mean is not None


def test_train_runs_pretraining_when_enabled(tmp_path):
    cfg = write(tmp_path, STRIPES)
    assert main(["train", "--config", cfg, "--epochs", "1"]) == 0
    assert "[layer 1]" in (tmp_path / "st_report.txt").read_text()
    assert len((tmp_path / "st.tsv").read_text().splitlines()) == 1


def test_seed_changes_results(tmp_path):
    cfg = write(tmp_path, SEPARABLE)
    blobs = []
    for seed in ("1", "2"):
        assert main(["train", "--config", cfg, "--seed", seed, "--out", str(tmp_path / f"{seed}.ckpt")]) == 0
        blobs.append((tmp_path / f"{seed}.ckpt").read_bytes())
    assert blobs[0] != blobs[1]


def test_flops_minimal_spec(tmp_path, capsys):
    spec = NetworkSpec([], [], 1.0, np.zeros((2, 1)), 0.0)
    save_checkpoint(spec, tmp_path / "min.ckpt")
    assert main(["flops", "--checkpoint", str(tmp_path / "min.ckpt"), "--input", "1x1x1", "--tsv"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    report = count_costs(spec, (1, 1, 1))
    assert rows[-1] == f"total\t{report.total_flops}\t2"
    assert main(["flops", "--checkpoint", str(tmp_path / "min.ckpt")]) == 2
    assert main(["flops", "--checkpoint", str(tmp_path / "min.ckpt"), "--input", "1x1"]) == 2


def test_flops_from_config(tmp_path, capsys):
    cfg = write(tmp_path, STRIPES)
    assert main(["flops", "--config", cfg, "--compare", "1e5", "1e3"]) == 0
    out = capsys.readouterr().out
    assert "global_pool" in out and "ratio" in out


def test_validation_failures_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, SEPARABLE)
    (tmp_path / "junk.ckpt").write_bytes(b"JUNKJUNKJUNK")
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "junk.ckpt")]) == 1
    assert "magic" in capsys.readouterr().err
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1


def test_cifar_binary_pipeline(tmp_path, capsys):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (30, 32, 32, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, 30)
    write_cifar_binary(tmp_path / "train.bin", imgs, labels)
    write_cifar_binary(tmp_path / "test.bin", imgs[:10], labels[:10])
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"""
[run]
checkpoint = {tmp_path}/c.ckpt
metrics = {tmp_path}/c.tsv
report = {tmp_path}/c.txt
[data]
format = cifar_binary
train = {tmp_path}/train.bin
test = {tmp_path}/test.bin
classes = 10
height = 32
width = 32
channels = 3
class_filter = {labels[0]}, {labels[1] if labels[1] != labels[0] else (labels[0] + 1) % 10}
holdout = 2
[layer1]
field = 5
stride = 3
channels = 2
whiten_dim = 4
pool = global
[train]
epochs = 1
batch_size = 4
""")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg), "--checkpoint", f"{tmp_path}/c.ckpt", "--split", "test"]) == 0
    (tmp_path / "train.bin").write_bytes((tmp_path / "train.bin").read_bytes()[:-1])
    assert main(["train", "--config", str(cfg)]) == 1
    assert "byte offset" in capsys.readouterr().err
