"""Command-line surface: config handling, exit codes, file formats, and the
gen/train/sample/eval/reconstruct pipeline on tiny runs."""

import json
import os

import numpy as np
import pytest

from atlasrgd import cli
from atlasrgd import io as aio


def run(args):
    return cli.main(args)


# -- config --------------------------------------------------------------------

def test_config_roundtrip_identity():
    cfg = cli.parse_config({"kind": "ring", "N": 50, "lr": "0.01"})
    text = cli.serialize_config(cfg)
    again = cli.parse_config(json.loads(text))
    assert again == cfg
    assert again["lr"] == 0.01


def test_unknown_key_rejected():
    with pytest.raises(cli.UsageError, match="unknown config key"):
        cli.parse_config({"bogus_key": 1})


def test_bool_parsing():
    assert cli.parse_config({"resume": "true"})["resume"] is True
    assert cli.parse_config({"resume": "0"})["resume"] is False
    with pytest.raises(cli.UsageError):
        cli.parse_config({"resume": "maybe"})


def test_exit_codes():
    assert run(["gen", "--set", "bogus=1"]) == 1          # usage
    assert run(["train", "--set", "dataset=/nope.csv",
                "--out", "/tmp/cli_err"]) == 3            # i/o
    assert run(["nonsense"]) == 1


# -- file formats ---------------------------------------------------------------

def test_csv_roundtrip(tmp_path, rng):
    X = rng.normal(size=(7, 3))
    p = os.path.join(tmp_path, "pts.csv")
    aio.write_points(p, X)
    np.testing.assert_allclose(aio.read_points(p), X, atol=1e-12)


def test_raw_roundtrip(tmp_path, rng):
    a = rng.normal(size=(3, 4, 5))
    p = os.path.join(tmp_path, "a.raw")
    aio.write_raw(p, a)
    np.testing.assert_array_equal(aio.read_raw(p), a)


def test_pgm_header(tmp_path):
    p = os.path.join(tmp_path, "img.pgm")
    aio.write_pgm(p, np.linspace(0, 1, 64).reshape(8, 8))
    raw = open(p, "rb").read()
    assert raw.startswith(b"P5\n8 8\n255\n")
    assert len(raw) == len(b"P5\n8 8\n255\n") + 64


def test_bundle_roundtrip(tmp_path, rng):
    obs = rng.normal(size=(6, 6))
    gt = rng.normal(size=(6, 6))
    d = os.path.join(tmp_path, "bundle")
    aio.write_bundle(d, obs, {"side": 6, "kernel_std": 2.0}, ground_truth=gt)
    o2, op, g2 = aio.read_bundle(d)
    np.testing.assert_array_equal(o2, obs)
    np.testing.assert_array_equal(g2, gt)
    assert op["side"] == 6


def test_scatter_image_shape(rng):
    img = aio.scatter_image(rng.normal(size=(50, 2)),
                            labels=rng.integers(0, 3, 50), size=64)
    assert img.shape == (64, 64, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


# -- pipeline -------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    g = str(root / "gen")
    t = str(root / "train")
    assert run(["gen", "--out", g, "--seed", "3",
                "--set", "kind=two_circles", "--set", "N=150"]) == 0
    assert run(["train", "--out", t, "--seed", "3",
                "--set", f"dataset={g}/dataset.csv", "--set", "K=2",
                "--set", "epochs_reg=1", "--set", "epochs_plain=2",
                "--set", "epochs_overlap=1"]) == 0
    return root, g, t


def test_gen_outputs(pipeline):
    _, g, _ = pipeline
    X = aio.read_points(os.path.join(g, "dataset.csv"))
    assert X.shape == (150, 2)
    assert os.path.exists(os.path.join(g, "config.json"))


def test_gen_deterministic(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        assert run(["gen", "--out", out, "--seed", "11",
                    "--set", "kind=ring", "--set", "N=40"]) == 0
    assert (open(os.path.join(a, "dataset.csv"), "rb").read()
            == open(os.path.join(b, "dataset.csv"), "rb").read())


def test_gen_bars(tmp_path):
    out = str(tmp_path / "bars")
    assert run(["gen", "--out", out, "--set", "kind=bars",
                "--set", "side=16", "--set", "N=12"]) == 0
    X = aio.read_raw(os.path.join(out, "dataset.raw"))
    assert X.shape == (12, 256)
    assert X.min() >= 0.0 and X.max() <= 1.0


def test_train_outputs(pipeline):
    _, _, t = pipeline
    assert os.path.exists(os.path.join(t, "atlas.ckpt"))
    log = open(os.path.join(t, "loss_log.csv")).read().strip().splitlines()
    assert log[0].split(",")[:3] == ["epoch", "stage", "loss"]
    stages = [line.split(",")[1] for line in log[1:]]
    assert stages == ["reg", "plain", "plain", "overlap"]


def test_sample_command(pipeline, tmp_path):
    _, _, t = pipeline
    out = str(tmp_path / "s")
    assert run(["sample", "--out", out, "--seed", "1",
                "--set", f"checkpoint={t}/atlas.ckpt",
                "--set", "m=30"]) == 0
    rows = aio.read_csv(os.path.join(out, "samples.csv"), skip_header=True)
    assert rows.shape == (30, 3)
    assert set(rows[:, 0]) <= {1.0, 2.0}  # labels are 1..K
    assert os.path.exists(os.path.join(out, "samples.ppm"))


def test_sample_zero(pipeline, tmp_path):
    _, _, t = pipeline
    out = str(tmp_path / "s0")
    assert run(["sample", "--out", out,
                "--set", f"checkpoint={t}/atlas.ckpt", "--set", "m=0"]) == 0
    rows = open(os.path.join(out, "samples.csv")).read().strip().splitlines()
    assert len(rows) == 1  # header only


def test_eval_command(pipeline, tmp_path):
    _, g, t = pipeline
    out = str(tmp_path / "e")
    assert run(["eval", "--out", out,
                "--set", f"checkpoint={t}/atlas.ckpt",
                "--set", f"dataset={g}/dataset.csv",
                "--set", "kind=two_circles"]) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    assert set(rep) >= {"mean_projection_distance", "alpha", "coverage"}
    beta = aio.read_csv(os.path.join(out, "responsibilities.csv"),
                        skip_header=True)
    np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-5)


def test_reconstruct_toy(pipeline, tmp_path):
    _, _, t = pipeline
    out = str(tmp_path / "r")
    assert run(["reconstruct", "--out", out, "--seed", "0",
                "--set", f"checkpoint={t}/atlas.ckpt",
                "--set", "objective=two_circles", "--set", "iters=5",
                "--set", "retraction=project"]) == 0
    res = json.load(open(os.path.join(out, "result.json")))
    assert res["status"] in ("finished", "stalled")
    traj = aio.read_csv(os.path.join(out, "trajectory.csv"), skip_header=True)
    assert traj.shape[1] == 3
    f = traj[1:, 2]
    assert np.all(np.diff(f) <= 1e-12)  # accepted objective never increases


def test_reconstruct_requires_problem(pipeline, tmp_path):
    _, _, t = pipeline
    assert run(["reconstruct", "--out", str(tmp_path / "x"),
                "--set", f"checkpoint={t}/atlas.ckpt"]) == 1


def test_resume_reproduces_losses(pipeline, tmp_path):
    root, g, t = pipeline
    full = open(os.path.join(t, "loss_log.csv")).read().strip().splitlines()
    out = str(tmp_path / "resume")
    # train the first two epochs, then resume for the rest
    assert run(["train", "--out", out, "--seed", "3",
                "--set", f"dataset={g}/dataset.csv", "--set", "K=2",
                "--set", "epochs_reg=1", "--set", "epochs_plain=1",
                "--set", "epochs_overlap=0", "--set", "checkpoint_every=1"]) == 0
    assert run(["train", "--out", out, "--seed", "3",
                "--set", f"dataset={g}/dataset.csv", "--set", "K=2",
                "--set", "epochs_reg=1", "--set", "epochs_plain=2",
                "--set", "epochs_overlap=1", "--set", "resume=true"]) == 0
    resumed = open(os.path.join(out, "loss_log.csv")).read().strip().splitlines()
    assert resumed[-2:] == full[-2:]


def test_config_file_plus_override(tmp_path):
    cfgp = str(tmp_path / "cfg.json")
    json.dump({"kind": "ring", "N": 30}, open(cfgp, "w"))
    out = str(tmp_path / "o")
    assert run(["gen", "--config", cfgp, "--out", out, "--seed", "2",
                "--set", "N=45"]) == 0
    X = aio.read_points(os.path.join(out, "dataset.csv"))
    assert X.shape == (45, 2)
    saved = json.load(open(os.path.join(out, "config.json")))
    assert saved["N"] == 45 and saved["kind"] == "ring"
