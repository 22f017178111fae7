"""Config parsing, checkpoint format, and pipeline orchestration."""

import os
import struct

import numpy as np
import pytest

from biltrans import cli
from biltrans.checkpoint import (
    MAGIC,
    build_state,
    load_checkpoint,
    read_checkpoint_arrays,
    save_checkpoint,
)
from biltrans.config import default_config, parse_config, serialize_config
from biltrans.bilevel import metatrain, pretrain
from biltrans.tensor import TensorError

SMOKE = """
# five-minute smoke settings
image_size = 16
classes = 3
base_width = 4
depth = 1
n_train_scenes = 4
n_unseen_scenes = 2
samples_per_scene = 2
pretrain_iters = 6
metatrain_iters = 2
train_inner_iters = 1
inner_iters = 3
inner_batch = 2
meta_batch = 2
n_test = 2
k_aux = 2
gp_finetune_iters = 1
alpha = 0.001
beta = 0.001
phi_widths = 4,4
"""


# ---------------------------------------------------------------------------
# config


def test_empty_config_gives_recipe_defaults():
    cfg = parse_config("")
    assert cfg.lambda_adv == 10.0
    assert cfg.lambda_perc == 2.0
    assert cfg.alpha == 1e-4
    assert cfg.inner_iters == 20
    assert cfg.meta_batch == 5
    assert cfg.adam_beta1 == 0.5


def test_unknown_key_rejected_with_line_number():
    with pytest.raises(TensorError, match="line 3"):
        parse_config("# comment\nmode = pg2\nwibble = 7\n")


def test_bad_value_rejected_with_line_number():
    with pytest.raises(TensorError, match="line 1"):
        parse_config("pretrain_iters = soon\n")


def test_invalid_n_shot_rejected():
    with pytest.raises(TensorError, match="n_shot"):
        parse_config("n_shot = 3\n")


def test_config_round_trip():
    cfg = parse_config(SMOKE)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_provenance_labels():
    cfg = parse_config("alpha = 0.5\n")
    prov = cfg.provenance()
    assert prov["alpha"] == "user"
    assert prov["lambda_adv"] == "recipe"
    assert prov["out_dir"] == "repo"
    assert "# recipe" in serialize_config(cfg, with_provenance=True)


# ---------------------------------------------------------------------------
# checkpoints


def smoke_cfg(tmp_path, **over):
    cfg = parse_config(SMOKE)
    from dataclasses import replace

    return replace(cfg, out_dir=str(tmp_path / "run"), **over).validate()


def test_checkpoint_round_trip_bit_identical(tmp_path):
    cfg = smoke_cfg(tmp_path)
    state = build_state(cfg)
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(state, cfg, path)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert loaded.g_gp.digest() == state.g_gp.digest()
    assert loaded.d_gp.digest() == state.d_gp.digest()
    assert loaded.objective.phi.digest() == state.objective.phi.digest()
    # save -> load -> save produces byte-identical files
    path2 = str(tmp_path / "b.ckpt")
    save_checkpoint(loaded, cfg2, path2)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_checkpoint_corrupted_magic_rejected(tmp_path):
    cfg = smoke_cfg(tmp_path)
    state = build_state(cfg)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(state, cfg, path)
    blob = bytearray(open(path, "rb").read())
    blob[:8] = b"NOTCKPT\x00"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(TensorError, match="magic"):
        read_checkpoint_arrays(path)


def test_checkpoint_truncation_rejected(tmp_path):
    cfg = smoke_cfg(tmp_path)
    state = build_state(cfg)
    path = str(tmp_path / "d.ckpt")
    save_checkpoint(state, cfg, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[: len(blob) - 17])
    with pytest.raises(TensorError, match="truncated"):
        read_checkpoint_arrays(path)


def test_checkpoint_dimension_overflow_rejected(tmp_path):
    path = str(tmp_path / "e.ckpt")
    cfg_text = serialize_config(default_config()).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", len(cfg_text)))
        f.write(cfg_text)
        f.write(struct.pack("<Q", 4))
        f.write(b"evil")
        f.write(struct.pack("<Q", 1))
        f.write(struct.pack("<Q", 2**40))
    with pytest.raises(TensorError, match="overflow"):
        read_checkpoint_arrays(path)


def test_resume_equals_uninterrupted_training(tmp_path):
    cfg = smoke_cfg(tmp_path)
    from biltrans.cli import _train_scenes

    scenes = _train_scenes(cfg)

    straight = build_state(cfg)
    pretrain(straight, scenes, iters=4)
    metatrain(straight, scenes, cfg.meta_mode, iters=2)

    resumed = build_state(cfg)
    pretrain(resumed, scenes, iters=2)
    path = str(tmp_path / "mid.ckpt")
    save_checkpoint(resumed, cfg, path)
    resumed2, _ = load_checkpoint(path)
    pretrain(resumed2, scenes, iters=4)
    metatrain(resumed2, scenes, cfg.meta_mode, iters=1)
    path2 = str(tmp_path / "mid2.ckpt")
    save_checkpoint(resumed2, cfg, path2)
    resumed3, _ = load_checkpoint(path2)
    metatrain(resumed3, scenes, cfg.meta_mode, iters=2)

    assert resumed3.g_gp.digest() == straight.g_gp.digest()
    assert resumed3.d_gp.digest() == straight.d_gp.digest()
    assert resumed3.adam_g.t == straight.adam_g.t


# ---------------------------------------------------------------------------
# CLI pipeline


def run_cli(*argv):
    return cli.main(list(argv))


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nope = 1\n")
    assert run_cli("pretrain", "--config", str(bad)) == 2


def test_cli_missing_prerequisite_exit_code(tmp_path):
    cfg_file = tmp_path / "smoke.cfg"
    cfg_file.write_text(SMOKE + f"\nout_dir = {tmp_path / 'run'}\n")
    assert run_cli("pretrain", "--config", str(cfg_file)) == 3
    assert run_cli("adapt", "--config", str(cfg_file)) == 3


def test_cli_full_run_smoke_emits_all_rows(tmp_path, capsys):
    cfg_file = tmp_path / "smoke.cfg"
    out = tmp_path / "run"
    cfg_file.write_text(SMOKE + f"\nout_dir = {out}\n")
    assert run_cli("full-run", "--config", str(cfg_file)) == 0
    results = out / "results"
    for row in ("baseline", "baseline_shot", "bilevel_noaux", "bilevel"):
        assert (results / f"metrics_{row}.csv").exists()
        assert (results / f"summary_{row}.json").exists()
    table = (results / "comparison.txt").read_text()
    assert all(row in table for row in cli.ROWS)
    assert (out / "checkpoints" / "pretrain.ckpt").exists()
    assert (out / "checkpoints" / "metatrain.ckpt").exists()
    # generated images exist for every unseen scene and test sample
    ppms = list((results / "bilevel").rglob("img_*.ppm"))
    assert len(ppms) == 2 * 2


def test_cli_retrieve_ranks_duplicate_first(tmp_path, capsys):
    cfg_file = tmp_path / "smoke.cfg"
    out = tmp_path / "run"
    cfg_file.write_text(SMOKE + f"\nout_dir = {out}\n")
    assert run_cli("gen-data", "--config", str(cfg_file)) == 0
    capsys.readouterr()
    assert run_cli("retrieve", "--config", str(cfg_file), "--scene", "0") == 0
    printed = capsys.readouterr().out
    assert "rank 1" in printed


def test_cli_adapt_before_metatrain_fails_cleanly(tmp_path):
    cfg_file = tmp_path / "smoke.cfg"
    out = tmp_path / "run"
    cfg_file.write_text(SMOKE + f"\nout_dir = {out}\n")
    assert run_cli("gen-data", "--config", str(cfg_file)) == 0
    assert run_cli("pretrain", "--config", str(cfg_file)) == 0
    assert run_cli("adapt", "--config", str(cfg_file)) == 3  # metatrain missing


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    cfg_file = tmp_path / "smoke.cfg"
    cfg_file.write_text(SMOKE + f"\nout_dir = {tmp_path / 'run'}\n")

    def explode(cfg, iters=None):
        raise TensorError("conv2d: non-finite value in output")

    monkeypatch.setattr(cli, "cmd_pretrain", explode)
    assert run_cli("pretrain", "--config", str(cfg_file)) == 4


def test_cli_parallel_adapt_matches_serial(tmp_path):
    cfg_file = tmp_path / "smoke.cfg"
    cfg_file.write_text(SMOKE)
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    for out, jobs in ((serial, "1"), (parallel, "2")):
        argv = ["--config", str(cfg_file), "--out", str(out), "--jobs", jobs]
        for sub in ("gen-data", "pretrain", "metatrain", "adapt"):
            assert run_cli(sub, *argv) == 0
    for ppm in sorted((serial / "results").rglob("*.ppm")):
        rel = ppm.relative_to(serial)
        assert ppm.read_bytes() == (parallel / rel).read_bytes(), rel


def test_cli_meta_mode_override_full_unrolled(tmp_path):
    cfg_file = tmp_path / "smoke.cfg"
    out = tmp_path / "run"
    cfg_file.write_text(SMOKE + f"\nout_dir = {out}\n")
    argv = ["--config", str(cfg_file), "--meta-mode", "full-unrolled"]
    assert run_cli("gen-data", *argv) == 0
    assert run_cli("pretrain", *argv) == 0
    assert run_cli("metatrain", *argv) == 0
    text, _ = read_checkpoint_arrays(str(out / "checkpoints" / "metatrain.ckpt"))
    assert "meta_mode = full-unrolled" in text


def test_cli_interrupt_and_resume_adapt_identical(tmp_path):
    cfg_file = tmp_path / "smoke.cfg"
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cfg_file.write_text(SMOKE)

    def run_all(out, split_metatrain):
        argv = ["--config", str(cfg_file), "--out", str(out)]
        assert run_cli("gen-data", *argv) == 0
        assert run_cli("pretrain", *argv) == 0
        if split_metatrain:
            assert run_cli("metatrain", *argv, "--iters", "1") == 0
            assert run_cli("metatrain", *argv) == 0  # resume to target
        else:
            assert run_cli("metatrain", *argv) == 0
        assert run_cli("adapt", *argv) == 0
        assert run_cli("eval", *argv) == 0

    run_all(out_a, split_metatrain=False)
    run_all(out_b, split_metatrain=True)

    for rel in ("results/metrics_bilevel.csv", "results/metrics_baseline.csv",
                "results/comparison.txt"):
        a = (out_a / rel).read_bytes()
        b = (out_b / rel).read_bytes()
        assert a == b, f"{rel} differs between interrupted and straight runs"

    # checkpoints match exactly except for the embedded out_dir line
    text_a, arrays_a = read_checkpoint_arrays(str(out_a / "checkpoints/metatrain.ckpt"))
    text_b, arrays_b = read_checkpoint_arrays(str(out_b / "checkpoints/metatrain.ckpt"))
    strip = lambda t: [l for l in t.splitlines() if not l.startswith("out_dir")]
    assert strip(text_a) == strip(text_b)
    assert list(arrays_a) == list(arrays_b)
    for name in arrays_a:
        assert np.array_equal(arrays_a[name], arrays_b[name]), name