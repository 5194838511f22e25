import gzip
import struct
import textwrap

import numpy as np
import pytest

from errwhiten.cli import main
from errwhiten.errors import ConfigError, FormatError
from errwhiten.experiments.config import load_config, parse_config
from errwhiten.experiments.data import (
    load_mnist_idx,
    regression_target,
    unit_square_grid,
    write_idx_images,
    write_idx_labels,
)
from errwhiten.experiments.records import (
    emit_csv,
    load_checkpoint,
    read_csv,
    read_traces,
    save_checkpoint,
)
from errwhiten.experiments.runners import run
from errwhiten.net import MlpSpec, init_params
from errwhiten.optimizers import TrainTrace


# IDX ---------------------------------------------------------------------------


def test_idx_single_white_pixel(tmp_path):
    img = np.zeros((1, 28, 28), dtype=np.uint8)
    img[0, 3, 4] = 255
    write_idx_images(tmp_path / "img", img)
    write_idx_labels(tmp_path / "lab", [7])
    data = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    assert data.images.shape == (1, 784)
    assert data.images[0, 3 * 28 + 4] == 1.0
    assert data.images.sum() == 1.0
    assert data.labels.tolist() == [7]


def test_idx_bytes_are_bit_exact(tmp_path):
    write_idx_labels(tmp_path / "lab", [0, 5, 9])
    assert (tmp_path / "lab").read_bytes() == b"\x00\x00\x08\x01\x00\x00\x00\x03\x00\x05\x09"
    img = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
    write_idx_images(tmp_path / "img", img)
    raw = (tmp_path / "img").read_bytes()
    assert raw[:16] == struct.pack(">4i", 0x803, 2, 2, 3)
    assert raw[16:] == bytes(range(12))


def test_idx_labels_and_gzip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 28, 28), dtype=np.uint8)
    write_idx_images(tmp_path / "img", img)
    write_idx_labels(tmp_path / "lab", [0, 5, 9])
    (tmp_path / "img.gz").write_bytes(gzip.compress((tmp_path / "img").read_bytes()))
    data = load_mnist_idx(tmp_path / "img.gz", tmp_path / "lab")
    assert data.labels.tolist() == [0, 5, 9]
    np.testing.assert_array_equal(data.images * 255, img.reshape(3, -1))
    np.testing.assert_array_equal(data.one_hot()[1], np.eye(10)[5])


def test_idx_errors(tmp_path):
    write_idx_labels(tmp_path / "lab", [1, 2])
    write_idx_images(tmp_path / "img", np.zeros((2, 28, 28), dtype=np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "lab", tmp_path / "lab")
    (tmp_path / "short").write_bytes((tmp_path / "img").read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "short", tmp_path / "lab")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img", tmp_path / "tiny")
    write_idx_labels(tmp_path / "lab3", [1, 2, 3])
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab3")


def test_mnist_sample_fixture(mnist_dir):
    train = load_mnist_idx(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte")
    test = load_mnist_idx(mnist_dir / "t10k-images-idx3-ubyte", mnist_dir / "t10k-labels-idx1-ubyte")
    assert len(train) == 4000 and len(test) == 1000
    assert train.images.min() >= 0 and train.images.max() <= 1
    assert set(np.unique(train.labels)) == set(range(10))


# CSV and checkpoints ------------------------------------------------------------------


def test_csv_empty_and_single(tmp_path):
    emit_csv([], tmp_path / "empty.csv")
    lines = (tmp_path / "empty.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("iteration,loss,step_size")
    emit_csv([TrainTrace(0, 0.5, 1.0, 1.0)], tmp_path / "one.csv")
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 2


def test_csv_round_trip(tmp_path):
    traces = [
        TrainTrace(0, 0.123456789012345678, 0.5, 0.5, 75, 0.97, 0.99, -0.25, 80, ""),
        TrainTrace(1, 1e-13, 2.0**-30, 0.5 + 2.0**-30, None, None, None, None, None, "ascent"),
    ]
    emit_csv(traces, tmp_path / "t.csv")
    assert read_traces(tmp_path / "t.csv") == traces
    text = (tmp_path / "t.csv").read_text()
    assert ";" not in text and "," in text


def test_csv_dict_records(tmp_path):
    emit_csv([{"a": 1, "b": "x"}, {"a": 2.5, "b": None}], tmp_path / "d.csv")
    assert read_csv(tmp_path / "d.csv") == [{"a": 1, "b": "x"}, {"a": 2.5, "b": None}]


def test_checkpoint_round_trip(tmp_path):
    p = init_params(MlpSpec.mlp(2, 4, 2, 1, init_scale=1.8, seed=3))
    save_checkpoint(tmp_path / "c.npz", p, step=7)
    q, meta = load_checkpoint(tmp_path / "c.npz")
    assert q.spec == p.spec
    np.testing.assert_array_equal(q.values, p.values)
    assert meta == {"step": 7}


# Config --------------------------------------------------------------------------


def test_regression_target_and_grid():
    X = unit_square_grid(3)
    assert X.shape == (9, 2)
    assert X.min() >= 0 and X.max() <= 1
    np.testing.assert_allclose(regression_target(np.array([[0.25, 0.25]])), [1.0 + np.sin(7 * np.pi / 4) ** 2])


def _regression_raw(**over):
    raw = {
        "task": "regression",
        "model": {"width": 8, "depth": 2},
        "data": {"train_grid": 6, "eval_grid": 9},
        "optimizers": [{"kind": "G", "steps": 3, "rank": 10, "oversketch": 4}],
    }
    raw.update(over)
    return raw


def test_parse_defaults():
    cfg = parse_config(_regression_raw())
    assert cfg.loss["kind"] == "quartic"
    assert cfg.model["init_scale"] == 1.8
    assert cfg.mlp(0).n_params == 2 * 8 + 8 + 8 * 8 + 8 + 8 + 1
    assert cfg.optimizers[0].spec.sketch.tolerance == 1e-14
    full = parse_config({"task": "regression", "optimizers": [{"kind": "adam", "steps": 1}]})
    assert full.mlp(0).n_params == 12951


def test_parse_rejects_bad_configs(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(task="cifar"))
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(optimizers=[]))
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(seeds=[]))
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(optimizers=[{"kind": "G", "steps": 1, "learning": 1}]))
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(optimizers=[{"kind": "G"}]))
    with pytest.raises(ConfigError):
        parse_config(_regression_raw(loss={"kind": "hinge"}))
    with pytest.raises(ConfigError):
        parse_config({"task": "double_integrator", "loss": {"kind": "quartic"},
                      "optimizers": [{"kind": "adam", "steps": 1}]})
    with pytest.raises(ConfigError):
        parse_config({"task": "mnist", "optimizers": [{"kind": "adam", "epochs": 1}],
                      "data": {"train_images": "x", "train_labels": "x", "test_images": "x", "test_labels": "x"}})
    (tmp_path / "bad.toml").write_text("task = [")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_load_config_relative_paths(tmp_path, mnist_dir):
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
        (tmp_path / name).write_bytes((mnist_dir / name).read_bytes())
    (tmp_path / "m.toml").write_text(textwrap.dedent("""
        task = "mnist"
        [data]
        train_images = "train-images-idx3-ubyte"
        train_labels = "train-labels-idx1-ubyte"
        test_images = "t10k-images-idx3-ubyte"
        test_labels = "t10k-labels-idx1-ubyte"
        [optimizer]
        kind = "adam"
        epochs = 1
    """))
    cfg = load_config(tmp_path / "m.toml")
    assert cfg.path("train_images") == tmp_path / "train-images-idx3-ubyte"
    assert cfg.data["batch_size"] == 512


# Runners ---------------------------------------------------------------------------


def _smoke_regression(tmp_path, optimizers, loss="quartic", steps=50):
    text = textwrap.dedent(f"""
        task = "regression"
        seeds = [0]
        [loss]
        kind = "{loss}"
        [model]
        width = 8
        depth = 2
        [data]
        train_grid = 8
        eval_grid = 10
        [logging]
        align_every = 10
        snapshot_rank = 20
        snapshot_oversketch = 5
    """)
    for kind in optimizers:
        text += textwrap.dedent(f"""
            [[optimizers]]
            kind = "{kind}"
            steps = {steps}
            rank = 20
            oversketch = 5
            tolerance = 1e-12
        """)
    path = tmp_path / "smoke.toml"
    path.write_text(text)
    return path


def test_regression_smoke_best_so_far_monotone(tmp_path):
    cfg = load_config(_smoke_regression(tmp_path, ["G"]))
    (job,) = run(cfg, tmp_path / "out")
    for name in ("traces.csv", "alignment.csv", "summary.csv", "mismatch_ode.csv", "final.npz"):
        assert (job.directory / name).exists()
    losses = [t.loss for t in read_traces(job.directory / "traces.csv")]
    assert len(losses) == 50
    best = np.minimum.accumulate(losses)
    assert np.all(np.diff(best) <= 0)
    assert losses[-1] < losses[0]
    align = read_csv(job.directory / "alignment.csv")
    assert [r["iteration"] for r in align] == [0, 10, 20, 30, 40]
    ode = read_csv(job.directory / "mismatch_ode.csv")
    assert ode[0]["tau"] == 0.0 and ode[0]["deviation"] == 0.0
    summary = read_csv(job.directory / "summary.csv")[0]
    assert summary["optimizer"] == "G" and summary["steps"] == 50


def test_regression_squared_g_matches_gj(tmp_path):
    cfg = load_config(_smoke_regression(tmp_path, ["G", "G_J"], loss="squared", steps=5))
    a, b = run(cfg, tmp_path / "out")
    la = np.array([t.loss for t in a.traces])
    lb = np.array([t.loss for t in b.traces])
    np.testing.assert_allclose(la, lb, rtol=1e-8, atol=1e-14)


def test_runs_are_reproducible(tmp_path):
    cfg = load_config(_smoke_regression(tmp_path, ["G_J"], steps=5))
    a = run(cfg, tmp_path / "a")[0]
    b = run(cfg, tmp_path / "b")[0]
    assert (a.directory / "traces.csv").read_bytes() == (b.directory / "traces.csv").read_bytes()


def test_mnist_smoke(tmp_path, mnist_dir):
    (tmp_path / "m.toml").write_text(textwrap.dedent(f"""
        task = "mnist"
        [model]
        width = 16
        [data]
        train_images = "{mnist_dir / 'train-images-idx3-ubyte'}"
        train_labels = "{mnist_dir / 'train-labels-idx1-ubyte'}"
        test_images = "{mnist_dir / 't10k-images-idx3-ubyte'}"
        test_labels = "{mnist_dir / 't10k-labels-idx1-ubyte'}"
        batch_size = 256
        subset = 1000
        [[optimizers]]
        kind = "adam"
        epochs = 2
        lr = 1e-2
        schedule = "constant"
    """))
    (job,) = run(load_config(tmp_path / "m.toml"), tmp_path / "out")
    acc = read_csv(job.directory / "accuracy.csv")
    assert len(acc) == 1 + 8
    s = job.summary
    assert s["steps_per_epoch"] == 4 and s["steps"] == 8
    assert s["best_accuracy"] > 0.3


def test_double_integrator_smoke(tmp_path):
    (tmp_path / "d.toml").write_text(textwrap.dedent("""
        task = "double_integrator"
        [model]
        width = 8
        [data]
        n_samples = 100
        eval_grid = 11
        oracle_resolution = 41
        [[optimizers]]
        kind = "G"
        steps = 3
        rank = 10
        oversketch = 4
        sketch_type = "two_pass"
        tolerance = 1e-5
    """))
    (job,) = run(load_config(tmp_path / "d.toml"), tmp_path / "out")
    grid = read_csv(job.directory / "value_grid.csv")
    assert len(grid) == 121
    assert 0.0 <= job.summary["agreement_fraction"] <= 1.0
    assert job.summary["value_rmse"] > 0


# CLI --------------------------------------------------------------------------------


def test_cli_train_diagnose_snapshot(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ERRWHITEN_NUM_THREADS", "1")
    cfg = _smoke_regression(tmp_path, ["G_J"], steps=4)
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    job = out / "regression" / "G_J" / "seed_3"
    assert (job / "summary.csv").exists()
    assert main(["diagnose", "--traces", str(out)]) == 0
    rows = read_csv(out / "diagnosis.csv")
    assert {r["metric"] for r in rows} >= {"final_loss", "final_eval_mse"}
    assert main(["snapshot", "--config", str(cfg), "--checkpoint", str(job / "final.npz")]) == 0
    table = read_csv(job / "final.alignment.csv")
    assert {"row", "col", "cosine"} <= set(table[0])
    diag = [r["cosine"] for r in table if r["row"] == r["col"]]
    np.testing.assert_allclose(diag, 1.0)


def test_cli_diagnose_empty(tmp_path):
    assert main(["diagnose", "--traces", str(tmp_path)]) == 1


def test_cli_oracle(tmp_path):
    assert main(["oracle", "--task", "double_integrator", "--out", str(tmp_path), "--resolution", "31"]) == 0
    rows = read_csv(tmp_path / "oracle.csv")
    assert len(rows) == 31 * 31
    assert min(r["value"] for r in rows) == 0.0
    with pytest.raises(SystemExit):
        main(["oracle", "--task", "mnist", "--out", str(tmp_path)])
