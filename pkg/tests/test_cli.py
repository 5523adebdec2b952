import numpy as np
import pytest

from mcgen.checkpoint import save_model
from mcgen.cli import main
from mcgen.codebook import one_hot
from mcgen.data import read_image
from mcgen.metrics import parse_metrics
from mcgen.models import McVae
from mcgen.rng import Stream

from _oracles import cli, cli_pipeline, manifest_path, replay_mismatches


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, cli_pipeline(root)


def _code(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


# -- argument errors ------------------------------------------------------------

def test_missing_out_is_a_usage_error(runs, capsys):
    root, _ = runs
    code, err = _code(capsys, "generate", "--ckpt", root / "gan" / "model.ckpt")
    assert code == 2 and "--out" in err


def test_crossover_needs_source(runs, capsys, tmp_path):
    root, _ = runs
    code, err = _code(capsys, "create", "--ckpt", root / "gan" / "model.ckpt", "--method", "crossover", "--target", 1, "--out", tmp_path / "x")
    assert code == 2 and "--source" in err
    assert not (tmp_path / "x").exists()


def test_dirichlet_rejects_mc_checkpoints(runs, capsys, tmp_path):
    root, _ = runs
    code, err = _code(capsys, "create", "--ckpt", root / "gan" / "model.ckpt", "--method", "dirichlet", "--out", tmp_path / "x")
    assert code == 2 and "--method" in err


def test_resample_rejects_embedding_checkpoints(runs, capsys, tmp_path):
    root, _ = runs
    code, _ = _code(capsys, "create", "--ckpt", root / "cgan" / "model.ckpt", "--method", "resample", "--out", tmp_path / "x")
    assert code == 2


@pytest.mark.parametrize("modes", ["9", "a,b", "", "0,-1"])
def test_bad_modes(runs, capsys, tmp_path, modes):
    root, _ = runs
    code, err = _code(capsys, "generate", "--ckpt", root / "gan" / "model.ckpt", "--modes", modes, "--out", tmp_path / "g.pgm")
    assert code == 2 and "--modes" in err


def test_missing_checkpoint_and_data(runs, capsys, tmp_path):
    root, _ = runs
    assert _code(capsys, "generate", "--ckpt", tmp_path / "nope.ckpt", "--out", tmp_path / "g.pgm")[0] == 2
    assert _code(capsys, "train", "--data", tmp_path / "nothing", "--out", tmp_path / "t")[0] == 2


def test_invalid_dataset_spec_names_the_flag(capsys, tmp_path):
    code, err = _code(capsys, "make-data", "--modes", 1, "--out", tmp_path / "d")
    assert code == 2 and "--modes" in err


def test_eval_needs_a_classifier_for_sample_metrics(runs, capsys, tmp_path):
    root, _ = runs
    code, err = _code(capsys, "eval", "--ckpt", root / "gan" / "model.ckpt", "--data", root / "data", "--out", tmp_path / "r.txt")
    assert code == 2 and "--classifier" in err
    code, err = _code(capsys, "eval", "--ckpt", root / "gan" / "model.ckpt", "--data", root / "data", "--classifier", root / "vae" / "model.ckpt", "--out", tmp_path / "r.txt")
    assert code == 2 and "--classifier" in err


def test_nll_needs_a_likelihood_model(runs, capsys, tmp_path):
    root, _ = runs
    code, _ = _code(capsys, "eval", "--ckpt", root / "gan" / "model.ckpt", "--data", root / "data", "--metrics", "nll", "--out", tmp_path / "r.txt")
    assert code == 2


def test_unknown_config_key(runs, capsys, tmp_path):
    root, _ = runs
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour=red\n")
    code, err = _code(capsys, "generate", "--ckpt", root / "gan" / "model.ckpt", "--config", cfg, "--out", tmp_path / "g.pgm")
    assert code == 2 and "colour" in err


def test_replay_of_a_different_command(runs, capsys, tmp_path):
    root, _ = runs
    code, err = _code(capsys, "generate", "--replay", root / "data" / "run_manifest.txt", "--out", tmp_path / "g.pgm")
    assert code == 2 and "--replay" in err


def test_corrupt_checkpoint_is_a_runtime_failure(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNK" + bytes(20))
    code, err = _code(capsys, "generate", "--ckpt", bad, "--out", tmp_path / "g.pgm")
    assert code == 3 and "FormatError" in err


def test_unwritable_output_is_a_runtime_failure(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, err = _code(capsys, "make-data", "--modes", 2, "--per-mode", 2, "--size", 8, "--out", blocker / "d")
    assert code == 3 and "Error" in err


# -- outputs --------------------------------------------------------------------

def test_every_command_writes_a_manifest(runs):
    _, done = runs
    for command, out, is_dir in done:
        lines = manifest_path(out, is_dir).read_text().splitlines()
        keys = [line.split("=", 1)[0] for line in lines]
        assert keys[:3] == ["command", "engine_version", "seed"] and keys[-2:] == ["start", "end"]
        assert lines[0] == f"command={command}"
        assert any(k.startswith("artifact.") for k in keys)


def test_train_outputs(runs):
    root, _ = runs
    assert {p.name for p in (root / "gan").iterdir()} == {"model.ckpt", "curve.txt", "config.txt", "run_manifest.txt"}
    assert (root / "gan" / "curve.txt").read_text().startswith("epoch=1 loss=")
    config = (root / "gan" / "config.txt").read_text()
    assert "model_id=mcgan" in config and "dataset_id=data" in config and "model.latent_dim=4" in config


def test_generate_grid_shape(runs):
    root, _ = runs
    # 3 rows × 4 mode columns of 8×8 tiles with one-pixel separators
    assert read_image(root / "grid.pgm").shape == (1, 3 * 9 - 1, 4 * 9 - 1)


def test_create_outputs(runs):
    root, _ = runs
    labels = (root / "resample" / "labels.txt").read_text().splitlines()
    assert labels[:3] == ["0 0", "1 0", "2 1"] and len(labels) == 6
    assert (root / "resample" / "view.ckpt").exists()
    assert len((root / "cross" / "labels.txt").read_text().splitlines()) == 5 * 2
    assert not (root / "dirichlet" / "view.ckpt").exists()


def test_end_to_end_report_is_finite(runs):
    root, _ = runs
    report = parse_metrics((root / "gan_report.txt").read_text())
    assert {"is", "fid", "dbi", "accuracy"} <= set(report)
    for name in ("is", "fid", "dbi"):
        assert np.isfinite(report[name]["value"]) and report[name]["n"] == 20
    assert "info.classifier_sha256=" in manifest_path(root / "gan_report.txt", False).read_text()
    nll = parse_metrics((root / "vae_report.txt").read_text())
    assert np.isfinite(nll["nll_bound_bpd"]["value"]) and nll["nll_bound_bpd"]["value"] > 0


def test_inspect_codebook_lines(runs, capsys):
    root, _ = runs
    text = (root / "books.txt").read_text()
    layers = [line.split()[0] for line in text.splitlines()]
    assert layers == ["layer=g.fc", "layer=g.up0", "layer=d.down0", "layer=d.down1"]
    assert main(["inspect-codebook", "--ckpt", str(root / "gan" / "model.ckpt"), "--layer", "g.up0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 and out[0].startswith("layer=g.up0 modes=4 width=4 ")
    # pairs among 4 modes
    hist = out[0].split("hamming=")[1]
    assert sum(int(c.split(":")[1]) for c in hist.split(",")) == 6


def test_inspect_rejects_unknown_layer(runs, capsys):
    root, _ = runs
    assert _code(capsys, "inspect-codebook", "--ckpt", root / "gan" / "model.ckpt", "--layer", "zz")[0] == 2
    assert _code(capsys, "inspect-codebook", "--ckpt", root / "cgan" / "model.ckpt")[0] == 2


# -- determinism ----------------------------------------------------------------

def test_replay_reproduces_every_artifact(tmp_path):
    assert replay_mismatches(tmp_path) == []


def test_same_seed_resample_gives_identical_directories(runs, tmp_path):
    root, _ = runs
    for name in ("a", "b"):
        cli("create", "--ckpt", root / "gan" / "model.ckpt", "--method", "resample", "--num-new", 3, "--n-per-mode", 2, "--seed", 5, "--out", tmp_path / name)
    for f in ("creations.pgm", "labels.txt", "view.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() == (root / "resample" / f).read_bytes()
    cli("create", "--ckpt", root / "gan" / "model.ckpt", "--method", "resample", "--num-new", 3, "--n-per-mode", 2, "--seed", 6, "--out", tmp_path / "c")
    assert (tmp_path / "c" / "creations.pgm").read_bytes() != (tmp_path / "a" / "creations.pgm").read_bytes()


def test_all_ones_checkpoint_ignores_requested_modes(tmp_path):
    m = McVae(4, size=8, widths=(4, 6, 8), latent_dim=4, conditioning="ones", dtype="f64")
    m.losses(np.random.default_rng(0).uniform(0, 1, (6, 1, 8, 8)), one_hot([0, 1, 2, 3, 0, 1], 4), Stream(0))
    save_model(m, tmp_path / "ones.ckpt")
    for name, modes in (("a", "0"), ("b", "3"), ("c", "1")):
        cli("generate", "--ckpt", tmp_path / "ones.ckpt", "--modes", modes, "--n-per-mode", 4, "--seed", 9, "--out", tmp_path / f"{name}.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes() == (tmp_path / "c.pgm").read_bytes()


def test_flags_override_config(runs, tmp_path):
    root, _ = runs
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_per_mode=2\nmodes=0,1\nseed=3\n")
    cli("generate", "--ckpt", root / "gan" / "model.ckpt", "--config", cfg, "--seed", 8, "--out", tmp_path / "g.pgm")
    manifest = (tmp_path / "g.pgm.manifest").read_text()
    assert "config.seed=8" in manifest and "config.n_per_mode=2" in manifest and "seed=8\n" in manifest
    assert read_image(tmp_path / "g.pgm").shape == (1, 2 * 9 - 1, 2 * 9 - 1)


def test_eight_mode_pipeline_reports_finite_metrics(tmp_path):
    cli("make-data", "--modes", 8, "--per-mode", 10, "--seed", 3, "--out", tmp_path / "data")
    for model, args in (("mcgan", "model.latent_dim=8\n"), ("classifier", "model.widths=4,8\n")):
        (tmp_path / f"{model}.cfg").write_text(args)
        cli("train", "--model", model, "--data", tmp_path / "data", "--epochs", 1, "--batch-size", 32, "--config", tmp_path / f"{model}.cfg", "--out", tmp_path / model)
    cli("eval", "--ckpt", tmp_path / "mcgan" / "model.ckpt", "--data", tmp_path / "data", "--classifier", tmp_path / "classifier" / "model.ckpt", "--n-per-mode", 4, "--out", tmp_path / "r.txt")
    report = parse_metrics((tmp_path / "r.txt").read_text())
    assert all(np.isfinite(report[m]["value"]) for m in ("is", "fid", "dbi"))
    assert 1 <= report["is"]["value"] <= 8
