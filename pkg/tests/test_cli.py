"""CLI contract: stage chaining, dependency errors, digests, determinism."""

import subprocess
import sys

from rispa import cli
from rispa.scene import default_scene, save_scene

TINY = ["--profiles", "80", "--targets", "120", "--epochs-fse", "6",
        "--epochs-ide", "3", "--batch", "32"]


def run_cli(args, out_dir):
    return cli.main([*args, "--out", str(out_dir)])


def test_pipeline_writes_all_artifacts(tmp_path):
    assert run_cli(["pipeline", "--seed", "5", *TINY], tmp_path) == 0
    for name in ("dataset.jsonl", "fse.json", "ide.json", "eval.csv",
                 "special_cases.csv", "summary.txt", "manifest.json",
                 "fse_history.csv", "ide_history.csv", "scene.json"):
        assert (tmp_path / name).exists(), name


def test_pipeline_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pipeline", "--seed", "9", *TINY], a) == 0
    assert run_cli(["pipeline", "--seed", "9", *TINY], b) == 0
    assert (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
    assert (a / "fse.json").read_bytes() == (b / "fse.json").read_bytes()
    c = tmp_path / "c"
    assert run_cli(["pipeline", "--seed", "10", *TINY], c) == 0
    assert (a / "eval.csv").read_bytes() != (c / "eval.csv").read_bytes()


def test_stagewise_chain_matches_contract(tmp_path):
    assert run_cli(["collect", "--seed", "5", *TINY], tmp_path) == 0
    assert run_cli(["train-fse", "--seed", "5", *TINY], tmp_path) == 0
    assert run_cli(["train-ide", "--seed", "5", *TINY], tmp_path) == 0
    assert run_cli(["eval", "--seed", "5", *TINY], tmp_path) == 0
    assert run_cli(["special-cases", "--seed", "5", *TINY], tmp_path) == 0
    assert (tmp_path / "eval.csv").exists()
    assert (tmp_path / "special_cases.csv").exists()


def test_train_ide_without_fse_is_dependency_error(tmp_path, capsys):
    code = run_cli(["train-ide", *TINY], tmp_path)
    assert code == cli.EXIT_MISSING_DEPENDENCY
    assert "missing dependency: train-fse" in capsys.readouterr().err


def test_train_fse_without_dataset_is_dependency_error(tmp_path, capsys):
    code = run_cli(["train-fse", *TINY], tmp_path)
    assert code == cli.EXIT_MISSING_DEPENDENCY
    assert "missing dependency: collect" in capsys.readouterr().err


def test_eval_without_models_is_dependency_error(tmp_path):
    assert run_cli(["eval", *TINY], tmp_path) == cli.EXIT_MISSING_DEPENDENCY


def test_eval_with_mismatched_seed_is_config_error(tmp_path, capsys):
    for stage in ("collect", "train-fse", "train-ide"):
        assert run_cli([stage, "--seed", "5", *TINY], tmp_path) == 0
    code = run_cli(["eval", "--seed", "6", *TINY], tmp_path)
    assert code == cli.EXIT_CONFIG
    assert "different --seed" in capsys.readouterr().err


def test_missing_scene_file_is_config_error(tmp_path, capsys):
    code = run_cli(["collect", "--scene", str(tmp_path / "nope.json"), *TINY], tmp_path)
    assert code == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_scene_digest_mismatch_refused_without_force(tmp_path, capsys):
    assert run_cli(["collect", "--seed", "5", *TINY], tmp_path) == 0
    # different scene (nonzero noise changes the digest)
    assert run_cli(["train-fse", "--seed", "5", "--noise", "0.05", *TINY],
                   tmp_path) == cli.EXIT_CONFIG
    assert "digest mismatch" in capsys.readouterr().err
    assert run_cli(["train-fse", "--seed", "5", "--noise", "0.05", "--force", *TINY],
                   tmp_path) == 0


def test_explicit_scene_file_and_rispa_out_env(tmp_path, monkeypatch):
    scene_path = tmp_path / "scene.json"
    save_scene(default_scene(), scene_path)
    out = tmp_path / "from_env"
    monkeypatch.setenv("RISPA_OUT", str(out))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["collect", "--scene", str(scene_path), "--seed", "1", *TINY]) == 0
    assert (out / "dataset.jsonl").exists()


def test_adapt_command_runs_tiny(tmp_path):
    code = run_cli(["adapt", "--seed", "5", *TINY], tmp_path)
    assert code == 0
    for name in ("adapt_stale.csv", "adapt_retrained.csv", "adapt_summary.txt"):
        assert (tmp_path / name).exists(), name
    text = (tmp_path / "adapt_summary.txt").read_text()
    assert "stale_mse:" in text and "retrained_mse:" in text


def test_threads_flag_does_not_change_results(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["collect", "--seed", "3", *TINY], a) == 0
    assert run_cli(["collect", "--seed", "3", "--threads", "4", *TINY], b) == 0
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()


def test_console_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "rispa.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    for flag in ("--scene", "--seed", "--preset", "--tau", "--threads", "--force"):
        assert flag in proc.stdout
