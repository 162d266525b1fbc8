import csv
import dataclasses
import hashlib
from pathlib import Path

import numpy as np
import pytest

from vsrt import cli
from vsrt.data import MotionSpec, generate_sequence, load_dataset, read_ppm, write_ppm
from vsrt.model import ModelConfig, init_params
from vsrt.resample import bilinear_upsample
from vsrt.serialize import read_manifest
from vsrt.theory import _cell_seed, fcsa_bound, fcsa_init_gradnorm, make_kpattern
from vsrt.train import TrainConfig, save_checkpoint

GOLDEN_SR = Path(__file__).parent / "golden" / "super_resolve"

TINY = ["frames=2", "channels=6", "extractor_blocks=1", "recon_blocks=1", "prop_blocks=1", "ff_hidden=8"]


def tree_hash(directory):
    h = hashlib.sha256()
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(out), "count=2", "frames=2", "height=8", "width=8"]) == 0
    return out


# ---------------------------------------------------------------------------
# configuration plumbing


def test_help_lists_every_config_key_with_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            assert f"  {f.name} = " in text
    assert "  lr0 = 0.0002" in text and "  channels = 12" in text


def test_config_file_then_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk\nchannels = 6\nlr0 = 1e-3\nperiods = 10,10\n")
    model, train = cli.build_configs("train", str(cfg), ["lr0=5e-4", "restart_weights=1,0.5"])
    assert model.channels == 6
    assert train.lr0 == 5e-4 and train.periods == [10, 10] and train.restart_weights == [1.0, 0.5]


def test_unknown_key_is_a_usage_error_listing_valid_keys(dataset, tmp_path, capsys):
    code = cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "learning_rate=1"])
    err = capsys.readouterr().err
    assert code == 2
    assert "learning_rate" in err and "lr0" in err and "channels" in err


def test_bad_value_and_malformed_override(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "count=many"]) == 2
    assert cli.main(["gen-data", "--out", str(tmp_path), "count"]) == 2
    assert "not key=value" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_empty_set_names_the_key(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "count=0"]) == 2
    assert "count" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_gen_data_is_reproducible_and_readable(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "count=3"]) == 0
    assert capsys.readouterr().out.strip().endswith("sequences.txt")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    pairs, specs = load_dataset(tmp_path / "a")
    assert len(pairs) == 3 and all(p.lr.shape == (3, 3, 16, 16) and p.hr.shape == (3, 3, 64, 64) for p in pairs)


# ---------------------------------------------------------------------------
# train


def test_train_zero_iterations_writes_the_initialisation(dataset, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "iterations=0", "crop=8", *TINY]) == 0
    init = init_params(ModelConfig(frames=2, channels=6, extractor_blocks=1, recon_blocks=1, prop_blocks=1,
                                   ff_hidden=8), 0)
    saved = read_manifest(out / "last")
    assert all(np.array_equal(saved[k], init[k].data) for k in init)


def test_train_log_steps_are_monotone_and_ablation_flag_applies(dataset, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--data", str(dataset), "--out", str(out), "--ablation", "no_stcsa",
            "iterations=3", "eval_every=2", "crop=8", *TINY]
    assert cli.main(args) == 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["step", "lr", "loss", "psnr", "ssim"]
    steps = [int(r[0]) for r in rows[1:]]
    assert steps == sorted(steps) and steps[-1] == 3
    assert "ablation = no_stcsa" in (out / "last" / "train.cfg").read_text()


def test_train_missing_dataset_is_a_data_error(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3
    assert "nope" in capsys.readouterr().err


def test_train_crop_larger_than_frames(dataset, tmp_path):
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "crop=16", *TINY]) == 3


def test_train_nan_abort_exit_code(dataset, tmp_path, monkeypatch):
    from vsrt import train as tr

    monkeypatch.setattr(tr, "train_step", lambda *a: (float("nan"), {}))
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "crop=8", *TINY]) == 4
    assert (out / "last" / "manifest.txt").exists()


# ---------------------------------------------------------------------------
# super-resolve


def checkpoint(tmp_path, cfg, params=None, name="ck"):
    params = init_params(cfg, 0) if params is None else params
    save_checkpoint(tmp_path / name, params, cfg, TrainConfig(), 0)
    return tmp_path / name


def frame_dir(tmp_path, frames, name="lr"):
    d = tmp_path / name
    d.mkdir()
    for i, f in enumerate(frames):
        write_ppm(d / f"frame{i}.ppm", f)
    return d


def test_window_starts():
    assert cli.window_starts(6, 3) == [0, 3]
    assert cli.window_starts(7, 3) == [0, 3, 4]
    assert cli.window_starts(3, 3) == [0]
    with pytest.raises(cli.ShapeError):
        cli.window_starts(2, 3)


def test_zero_weight_checkpoint_gives_bilinear_upsample(tmp_path, rng):
    cfg = ModelConfig(flow_estimator="identity")
    params = {k: type(p)(np.zeros_like(p.data)) for k, p in init_params(cfg, 0).items()}
    frames = frame_dir(tmp_path, rng.uniform(0, 1, (4, 3, 8, 8)))
    out = tmp_path / "hr"
    assert cli.main(["super-resolve", "--checkpoint", str(checkpoint(tmp_path, cfg, params)),
                     "--frames", str(frames), "--out", str(out)]) == 0
    for i in range(4):
        lr = read_ppm(frames / f"frame{i}.ppm")
        want = np.clip(bilinear_upsample(lr, 4), 0, 1) * 255
        got = read_ppm(out / f"frame{i}_x4.ppm") * 255
        # float32 model output against a float64 reference: at most one 8-bit step apart
        assert np.abs(got - want).max() <= 1.0 + 1e-3


def test_super_resolve_is_byte_identical_across_runs(tmp_path, rng):
    cfg = ModelConfig(flow_estimator="identity")
    ck = checkpoint(tmp_path, cfg)
    frames = frame_dir(tmp_path, rng.uniform(0, 1, (5, 3, 8, 8)))
    for name in ("a", "b"):
        assert cli.main(["super-resolve", "--checkpoint", str(ck), "--frames", str(frames),
                         "--out", str(tmp_path / name)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert len(list((tmp_path / "a").glob("*.ppm"))) == 5


def test_super_resolve_shape_errors(tmp_path, rng):
    cfg = ModelConfig(flow_estimator="identity")
    ck = checkpoint(tmp_path, cfg)
    odd = frame_dir(tmp_path, rng.uniform(0, 1, (3, 3, 7, 8)), "odd")
    assert cli.main(["super-resolve", "--checkpoint", str(ck), "--frames", str(odd), "--out", str(tmp_path / "o")]) == 3
    few = frame_dir(tmp_path, rng.uniform(0, 1, (2, 3, 8, 8)), "few")
    assert cli.main(["super-resolve", "--checkpoint", str(ck), "--frames", str(few), "--out", str(tmp_path / "o")]) == 3


def test_ground_truth_checkpoint_needs_shift(tmp_path, rng):
    ck = checkpoint(tmp_path, ModelConfig())
    frames = frame_dir(tmp_path, rng.uniform(0, 1, (3, 3, 8, 8)))
    base = ["super-resolve", "--checkpoint", str(ck), "--frames", str(frames), "--out", str(tmp_path / "o")]
    assert cli.main(base) == 2
    assert cli.main(base + ["--shift", "1,x"]) == 2
    assert cli.main(base + ["--shift", "0.25,-0.5"]) == 0


def golden_checkpoint(tmp_path):
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    rng = np.random.default_rng(2024)
    params["recon.out.w"].data = rng.uniform(-0.1, 0.1, params["recon.out.w"].shape).astype(np.float32)
    pair = generate_sequence(MotionSpec(1.5, -1.0, "gaussian-blobs", 11), 3, 8, 8)
    return checkpoint(tmp_path, cfg, params), pair.lr


def test_super_resolve_golden_regression(tmp_path):
    ck, lr = golden_checkpoint(tmp_path)
    frames = frame_dir(tmp_path, lr)
    out = tmp_path / "hr"
    assert cli.main(["super-resolve", "--checkpoint", str(ck), "--frames", str(frames), "--out", str(out),
                     "--shift", "0.375,-0.25"]) == 0
    for i in range(3):
        name = f"frame{i}_x4.ppm"
        assert (out / name).read_bytes() == (GOLDEN_SR / name).read_bytes()


def write_super_resolve_golden(tmp_path):
    """Regenerate the golden PPMs; only after the model oracle tests pass."""
    ck, lr = golden_checkpoint(tmp_path)
    cli.main(["super-resolve", "--checkpoint", str(ck), "--frames", str(frame_dir(tmp_path, lr)),
              "--out", str(GOLDEN_SR), "--shift", "0.375,-0.25"])


# ---------------------------------------------------------------------------
# eval


def test_eval_rows_and_reproducibility(dataset, tmp_path):
    cfg = ModelConfig(frames=2, channels=6, extractor_blocks=1, recon_blocks=1, prop_blocks=1, ff_hidden=8)
    ck = checkpoint(tmp_path, cfg)
    for name, workers in (("a", "1"), ("b", "2")):
        assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(dataset), "--out", str(tmp_path / name),
                         "--channels", "y", "--workers", workers]) == 0
    a = (tmp_path / "a" / "eval_y.csv").read_bytes()
    assert a == (tmp_path / "b" / "eval_y.csv").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    assert rows[0] == list(cli.EVAL_HEADER)
    assert [r[0] for r in rows[1:]] == ["model"] * 3 + ["bicubic"] * 3
    assert rows[3][1] == "average" and rows[6][1] == "average"


def test_eval_of_ground_truth_is_capped(rng):
    hr = rng.uniform(0, 1, (2, 3, 12, 12))
    p, s, capped = cli._eval_one((hr, hr, "rgb"))
    assert (p, capped) == (100.0, True) and s == pytest.approx(1.0)


def test_eval_bad_workers(dataset, tmp_path):
    ck = checkpoint(tmp_path, ModelConfig(frames=2, channels=6))
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(dataset), "--out", str(tmp_path / "e"),
                     "--workers", "0"]) == 2


# ---------------------------------------------------------------------------
# theory and gradcheck


def test_theory_single_cell_matches_direct_call(tmp_path):
    out = tmp_path / "t"
    args = ["theory", "--out", str(out), "--parts", "gradnorm", "n=6", "k=2", "q=4", "trials=3", "seed=5"]
    assert cli.main(args) == 0
    rows = list(csv.DictReader(open(out / "gradnorm.csv")))
    direct = fcsa_init_gradnorm(make_kpattern(6, 2, j_star=2), 4, 3, _cell_seed(5, 6, 2, 4))
    assert [float(r["sq_norm"]) for r in rows] == direct.sq_norms
    assert all(float(r["bound"]) == fcsa_bound(6, 2, 4) for r in rows)


def test_theory_malformed_grid(tmp_path, capsys):
    assert cli.main(["theory", "--out", str(tmp_path), "q=0"]) == 2
    assert cli.main(["theory", "--out", str(tmp_path), "--parts", "gradnorm,spectra"]) == 2
    bad = tmp_path / "grid.cfg"
    bad.write_text("n 8\n")
    assert cli.main(["theory", "--out", str(tmp_path), "--config", str(bad)]) == 2


def test_gradcheck_ops_table(tmp_path, capsys):
    assert cli.main(["gradcheck", "--scope", "ops", "--out", str(tmp_path)]) == 0
    table = (tmp_path / "gradcheck_ops.txt").read_text().splitlines()
    from vsrt.tensor import DIFFERENTIABLE_OPS

    names = [line.split()[0] for line in table[1:]]
    assert sorted(names) == sorted(DIFFERENTIABLE_OPS)


def test_gradcheck_failure_names_op_and_error(monkeypatch, capsys):
    from vsrt import gradcheck

    bad = gradcheck.CheckResult("softmax_columns", 0.25, 3, 0)
    monkeypatch.setattr(gradcheck, "run", lambda scope, seed: [bad])
    assert cli.main(["gradcheck"]) == 4
    err = capsys.readouterr().err
    assert "softmax_columns" in err and "2.500e-01" in err
