import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistent_diffusion import config as config_mod
from consistent_diffusion.checkpoint import (
    ChecksumError,
    TruncatedError,
    VersionError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from consistent_diffusion.cli import run_cli
from consistent_diffusion.net import NetConfig
from consistent_diffusion.tasks import make_dataset, TaskSpec
from consistent_diffusion.tensor import load_ctns, save_ctns

from .gradcheck import randomized_params

TINY = """
[diffusion]
T = 15
[net]
base = 4
depth = 1
[train]
mode = {mode}
steps = 6
checkpoint_every = 3
seed = 2
[task]
size = 16
count = 6
eval_count = 2
[io]
out_dir = {root}/run
data_dir = {root}/data
"""


def _write_cfg(tmp_path, mode="traditional", extra=""):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY.format(mode=mode, root=tmp_path) + extra)
    return path


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    p = randomized_params(NetConfig(base=4, depth=1), 0)
    p.step = 17
    save_checkpoint(tmp_path / "a.cdif", p, {"seed": 3})
    q, header = load_checkpoint(tmp_path / "a.cdif")
    assert q.step == 17 and header["seed"] == 3 and q.config == p.config
    for group in ("weights", "ema", "m", "v"):
        for k in p.weights:
            assert np.array_equal(getattr(p, group)[k].view(np.uint32), getattr(q, group)[k].view(np.uint32))


def test_checkpoint_flipped_byte_is_crc_error():
    buf = bytearray(checkpoint_bytes(randomized_params(NetConfig(base=4, depth=1), 0)))
    buf[-40] ^= 0x01
    with pytest.raises(ChecksumError):
        parse_checkpoint(bytes(buf))


def test_checkpoint_newer_version_names_both():
    buf = bytearray(checkpoint_bytes(randomized_params(NetConfig(base=4, depth=1), 0)))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError, match=r"version 2.*version 1"):
        parse_checkpoint(bytes(buf))


def test_checkpoint_truncation():
    buf = checkpoint_bytes(randomized_params(NetConfig(base=4, depth=1), 0))
    for cut in (8, 30, len(buf) - 100):
        with pytest.raises(TruncatedError):
            parse_checkpoint(buf[:cut])


# -- config -----------------------------------------------------------------


def test_config_defaults_and_unknown_key():
    cfg = config_mod.parse("[train]\nsteps = 7\n")
    assert cfg["train"]["steps"] == 7 and cfg["diffusion"]["T"] == 15
    with pytest.raises(config_mod.ConfigError, match="stepz"):
        config_mod.parse("[train]\nstepz = 7\n")
    with pytest.raises(config_mod.ConfigError, match="optim"):
        config_mod.parse("[optim]\nlr = 1\n")
    with pytest.raises(config_mod.ConfigError):
        config_mod.parse("[diffusion]\nT = fifteen\n")


def test_shipped_configs_parse():
    for name in ("toy-denoise", "toy-sisr"):
        cfg = config_mod.load(f"configs/{name}.cfg")
        cfg.train_config()
        cfg.task_spec("train")
        cfg.task_spec("eval")
    assert config_mod.load("configs/toy-denoise.cfg")["train"]["steps"] == 5000


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.floats(0.01, 10, allow_nan=False), st.booleans(),
       st.sampled_from(["traditional", "efficient", "data_consistent"]), st.integers(0, 2**31))
def test_config_roundtrip_is_idempotent(T, kappa, stoch, mode, seed):
    text = f"[diffusion]\nT = {T}\nkappa = {kappa!r}\n[train]\nmode = {mode}\nchain_stochastic = {stoch}\nseed = {seed}\n"
    once = config_mod.dumps(config_mod.parse(text))
    assert config_mod.dumps(config_mod.parse(once)) == once
    assert config_mod.parse(once).values == config_mod.parse(text).values


def test_train_hash_ignores_checkpoint_interval():
    a = config_mod.parse("[train]\ncheckpoint_every = 5\n")
    b = config_mod.parse("[train]\ncheckpoint_every = 9\n")
    c = config_mod.parse("[train]\nseed = 9\n")
    assert a.train_hash() == b.train_hash() != c.train_hash()


# -- command line -----------------------------------------------------------


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    cfg.write_text(cfg.read_text().replace("base = 4", "base = 4\nwidth = 3"))
    assert run_cli(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "width" in err and len(err.strip().splitlines()) == 1


def test_usage_errors_exit_2(tmp_path):
    assert run_cli(["train"]) == 2
    assert run_cli(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert run_cli(["train", "--config", str(_write_cfg(tmp_path)), "--mode", "sideways"]) == 2


def test_io_errors_exit_3(tmp_path):
    (tmp_path / "junk.cdif").write_bytes(b"CDIF\x01")
    assert run_cli(["eval", "--ckpt", str(tmp_path / "nope.cdif"), "--data", "x", "--out", "y"]) == 3
    assert run_cli(["eval", "--ckpt", str(tmp_path / "junk.cdif"), "--data", "x", "--out", "y"]) == 3


def _pipeline(tmp_path, mode="traditional"):
    cfg = _write_cfg(tmp_path, mode)
    assert run_cli(["gen-data", "--config", str(cfg)]) == 0
    assert run_cli(["train", "--config", str(cfg)]) == 0
    run, data = tmp_path / "run", tmp_path / "data"
    ckpt = run / "final.cdif"
    assert run_cli(["eval", "--ckpt", str(ckpt), "--data", str(data / "eval/manifest.json"),
                    "--out", str(run / "metrics.json")]) == 0
    assert run_cli(["analyze", "--ckpt", str(ckpt), "--data", str(data / "eval/manifest.json"),
                    "--metric", "kl", "--samples", "4", "--items", "2", "--out", str(run / "report.csv")]) == 0
    return cfg, run


def test_pipeline_is_deterministic(tmp_path):
    _, a = _pipeline(tmp_path / "a", "efficient")
    _, b = _pipeline(tmp_path / "b", "efficient")
    for name in ("loss.csv", "metrics.json", "report.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # checkpoint headers record the run's own paths; the arrays must still match
    pa, ha = load_checkpoint(a / "final.cdif")
    pb, hb = load_checkpoint(b / "final.cdif")
    assert ha["train_hash"] == hb["train_hash"]
    assert all(np.array_equal(pa.ema[k], pb.ema[k]) for k in pa.ema)
    assert len((a / "loss.csv").read_text().splitlines()) == 7
    assert (a / "ckpt_000003.cdif").exists()
    doc = json.loads((a / "metrics.json").read_text())
    assert doc["mode"] == "efficient" and doc["task"] == "denoise50"
    assert run_cli(["compare", "--reports", str(a / "report.csv"), str(b / "report.csv"),
                    "--out", str(a / "delta.csv")]) == 0
    rows = (a / "delta.csv").read_text().splitlines()
    assert len(rows) == 16 and all(float(v) == 0 for r in rows[1:] for v in r.split(",")[1:])


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg, full = _pipeline(tmp_path / "full")
    part = _write_cfg(tmp_path / "part")
    assert run_cli(["gen-data", "--config", str(part)]) == 0
    assert run_cli(["train", "--config", str(part), "--stop-at", "4"]) == 0
    run = tmp_path / "part" / "run"
    assert run_cli(["train", "--config", str(part), "--resume", str(run / "ckpt_000003.cdif")]) == 0
    assert (run / "loss.csv").read_bytes() == (full / "loss.csv").read_bytes()
    a, _ = load_checkpoint(run / "final.cdif")
    b, _ = load_checkpoint(full / "final.cdif")
    for k in a.weights:
        assert np.array_equal(a.weights[k], b.weights[k]) and np.array_equal(a.ema[k], b.ema[k])


def test_resume_with_other_config_needs_force(tmp_path, capsys):
    cfg, run = _pipeline(tmp_path)
    ckpt = str(run / "ckpt_000003.cdif")
    assert run_cli(["train", "--config", str(cfg), "--seed", "5", "--resume", ckpt]) == 2
    assert "--force" in capsys.readouterr().err
    assert run_cli(["train", "--config", str(cfg), "--seed", "5", "--resume", ckpt, "--force"]) == 0


def test_sample_exact_oracle_without_noise(tmp_path):
    _, run = _pipeline(tmp_path)
    pair = make_dataset(TaskSpec(size=16, count=1, seed=4))[0]
    save_ctns(tmp_path / "lq.ctns", pair.y0)
    save_ctns(tmp_path / "gt.ctns", pair.x0)
    assert run_cli(["sample", "--ckpt", str(run / "final.cdif"), "--input", str(tmp_path / "lq.ctns"),
                    "--out", str(tmp_path / "out.ctns"), "--kappa", "0", "--oracle-gt", str(tmp_path / "gt.ctns")]) == 0
    assert np.array_equal(load_ctns(tmp_path / "out.ctns"), pair.x0)
    assert run_cli(["sample", "--ckpt", str(run / "final.cdif"), "--input", str(tmp_path / "lq.ctns"),
                    "--out", str(tmp_path / "net.pgm")]) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_4(tmp_path):
    cfg = _write_cfg(tmp_path, extra="")
    cfg.write_text(cfg.read_text().replace("steps = 6", "steps = 6\nmax_lr = 1e38"))
    assert run_cli(["gen-data", "--config", str(cfg)]) == 0
    assert run_cli(["train", "--config", str(cfg)]) == 4
