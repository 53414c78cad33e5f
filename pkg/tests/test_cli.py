import io
import json
import os
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from voxseg.cli import main
from voxseg.config import config_keys, load_run_config
from voxseg.data import read_case, read_dataset_manifest
from voxseg.render import read_netpbm
from voxseg.tensor import save_array


def run_cli(*args):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in args])
    return code, out.getvalue(), err.getvalue()


def small_config(path: Path, **extra) -> Path:
    cfg = {
        "seed": 3,
        "phantom": {
            "extents": [16, 16, 16],
            "edema_radius": [3.5, 4.5],
            "core_radius": [2.2, 3.0],
            "necrotic_radius": [1.0, 1.8],
        },
        "model": {"volume_extents": [16, 16, 16]},
        "augment": {
            "rotation_degrees": 0,
            "scale_probability": 0,
            "flip_probability": 0,
            "intensity_shift": 0,
            "elastic_amplitude": 0,
        },
        "train": {"epochs": 2, "val_count": 1, "batch_size": 2},
    }
    for dotted, value in extra.items():
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# ----- parser surface ----------------------------------------------------


def test_help_lists_every_configuration_flag():
    code, out, _ = run_cli("--help")
    assert code == 0
    assert "--config" in out
    for key in config_keys():
        assert f"--{key}" in out, key
    for command in ("gen", "train", "infer", "eval", "sweep", "render"):
        assert command in out


def test_no_command_is_a_usage_error():
    code, _, _ = run_cli()
    assert code == 1


def test_missing_argument_is_a_usage_error():
    code, _, err = run_cli("gen")
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError"


def test_unknown_flag_is_a_usage_error():
    code, _, _ = run_cli("gen", "/tmp/x", "--no_such_flag", "1")
    assert code == 1


def test_unknown_configuration_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    code, _, err = run_cli("gen", tmp_path / "d", "--config", bad)
    assert code == 1
    assert "epochz" in err


def test_invalid_configuration_value_is_a_usage_error(tmp_path):
    cfg = small_config(tmp_path / "cfg.json", **{"train.lr_decay": 0.5})
    code, _, err = run_cli("gen", tmp_path / "d", "--config", cfg)
    assert code == 1
    assert "lr_decay" in err


def test_environment_variables_override_the_file(tmp_path, monkeypatch):
    cfg = small_config(tmp_path / "cfg.json")
    monkeypatch.setenv("VOXSEG_PHANTOM__EXTENTS", "[24, 24, 24]")
    code, _, _ = run_cli("gen", tmp_path / "d", "--count", 1, "--config", cfg)
    assert code == 0
    assert read_case(tmp_path / "d" / "case000").extents == (24, 24, 24)


def test_flags_override_environment_and_file(tmp_path, monkeypatch):
    cfg = small_config(tmp_path / "cfg.json")
    monkeypatch.setenv("VOXSEG_PHANTOM__EXTENTS", "[8, 8, 8]")
    code, _, _ = run_cli("gen", tmp_path / "d", "--count", 1, "--config", cfg,
                         "--phantom.extents", "[20, 20, 20]")
    assert code == 0
    assert read_case(tmp_path / "d" / "case000").extents == (20, 20, 20)


def test_unknown_environment_key_is_rejected(tmp_path, monkeypatch):
    monkeypatch.setenv("VOXSEG_NO_SUCH_KEY", "1")
    code, _, _ = run_cli("gen", tmp_path / "d", "--count", 1)
    assert code == 1


def test_config_flag_before_the_subcommand_is_honored(tmp_path):
    cfg = small_config(tmp_path / "cfg.json")
    code, _, _ = run_cli("--config", cfg, "gen", tmp_path / "d", "--count", 1)
    assert code == 0
    assert read_case(tmp_path / "d" / "case000").extents == (16, 16, 16)


# ----- gen ---------------------------------------------------------------


def test_gen_writes_cases_and_manifest(tmp_path):
    cfg = small_config(tmp_path / "cfg.json")
    code, out, _ = run_cli("gen", tmp_path / "data", "--count", 4, "--config", cfg)
    assert code == 0
    payload = json.loads(out.strip().splitlines()[-1])
    assert payload["cases"] == 4
    dirs = read_dataset_manifest(tmp_path / "data" / "manifest.txt")
    assert len(dirs) == 4
    for d in dirs:
        case = read_case(d)
        assert case.labels is not None
        assert case.extents == (16, 16, 16)


def test_gen_output_is_byte_identical_across_runs(tmp_path):
    cfg = small_config(tmp_path / "cfg.json")
    assert run_cli("gen", tmp_path / "a", "--count", 2, "--config", cfg)[0] == 0
    assert run_cli("gen", tmp_path / "b", "--count", 2, "--config", cfg)[0] == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert list(a) == list(b)
    for name in a:
        assert a[name] == b[name], name


# ----- train / infer / eval / sweep --------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = small_config(root / "cfg.json")
    assert run_cli("gen", root / "data", "--count", 3, "--config", cfg)[0] == 0
    code, out, err = run_cli("train", root / "data" / "manifest.txt",
                             root / "run", "--config", cfg)
    assert code == 0, err
    return {
        "root": root,
        "config": cfg,
        "data": root / "data",
        "manifest": root / "data" / "manifest.txt",
        "run": root / "run",
        "checkpoint": root / "run" / "checkpoint",
        "summary": json.loads(out.strip().splitlines()[-1]),
    }


def test_train_writes_checkpoint_log_and_config(trained):
    assert (trained["run"] / "log.jsonl").is_file()
    lines = (trained["run"] / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert (trained["checkpoint"] / "meta.json").is_file()
    # the stored config round-trips through the loader
    stored = load_run_config(trained["checkpoint"] / "config.json")
    assert stored.train.epochs == 2
    assert trained["summary"]["best_epoch"] >= 1


def test_infer_writes_labels_and_probabilities(trained):
    out = trained["root"] / "pred_one"
    code, _, err = run_cli("infer", trained["checkpoint"],
                           trained["data"] / "case002", out)
    assert code == 0, err
    assert (out / "labels.bin").is_file()
    assert (out / "probabilities.bin").is_file()
    meta = json.loads((out / "meta.json").read_text())
    assert meta["case_id"] == "case002"


def test_infer_without_config_next_to_checkpoint_needs_the_flag(trained, tmp_path):
    bare = tmp_path / "bare_ckpt"
    bare.mkdir()
    code, _, _ = run_cli("infer", bare, trained["data"] / "case000", tmp_path / "o")
    assert code == 1


def test_eval_identical_directories_score_perfect_dice(trained, tmp_path):
    out_csv = tmp_path / "self.csv"
    code, out, _ = run_cli("eval", trained["data"], trained["data"], out_csv)
    assert code == 0
    rows = out_csv.read_text().splitlines()
    assert rows[0].startswith("case_id,region,dice")
    assert len(rows) == 1 + 3 * 3  # 3 cases x 3 regions
    for row in rows[1:]:
        fields = row.split(",")
        assert fields[2] == "1.000000000"
        assert fields[5] == "0.000000000"
    payload = json.loads(out.strip().splitlines()[-1])
    assert payload["mean_dice"] == {"ET": 1.0, "WT": 1.0, "TC": 1.0}


def test_eval_missing_prediction_is_a_data_error(trained, tmp_path):
    empty = tmp_path / "pred_none"
    empty.mkdir()
    code, _, err = run_cli("eval", empty, trained["data"], tmp_path / "m.csv")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ParseError"


def test_sweep_emits_one_row_per_iteration_count(trained):
    out = trained["root"] / "swp"
    code, _, err = run_cli("sweep", trained["manifest"], trained["checkpoint"],
                           out, "--iterations", "1,5")
    assert code == 0, err
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "iterations,dice_ET,dice_WT,dice_TC"
    assert len(rows) == 3
    assert [int(r.split(",")[0]) for r in rows[1:]] == [1, 5]
    traces = json.loads((out / "trajectories.json").read_text())
    assert [t["iterations"] for t in traces] == [1, 5]
    for t in traces:
        assert len(t["cases"]) == 3
        for case in t["cases"]:
            assert len(case["h_c_delta"]) == t["iterations"]
            assert len(case["free_energy"]) == t["iterations"]


def test_sweep_rejects_the_concat_baseline(trained, tmp_path):
    cfg = small_config(tmp_path / "cfg.json", **{"model.fusion_mode": "concat"})
    code, _, _ = run_cli("sweep", trained["manifest"], trained["checkpoint"],
                         tmp_path / "s", "--config", cfg)
    assert code == 1


def test_numeric_blowup_exits_with_code_three(trained, tmp_path):
    code, _, err = run_cli("train", trained["manifest"], tmp_path / "run",
                           "--config", trained["config"],
                           "--train.learning_rate", "1e300")
    assert code == 3
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] in ("NumericError", "TrainingError")


def test_missing_manifest_is_a_data_error(tmp_path):
    code, _, err = run_cli("train", tmp_path / "nosuch.txt", tmp_path / "r")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ParseError"


# ----- render ------------------------------------------------------------


def test_render_background_slice_is_all_black(trained, tmp_path):
    img_path = tmp_path / "edge.ppm"
    # slice 0 lies outside the brain ellipsoid, so every label is background
    code, _, _ = run_cli("render", trained["data"] / "case000", img_path,
                         "--axis", 0, "--index", 0)
    assert code == 0
    img = read_netpbm(img_path)
    assert img.shape == (16, 16, 3)
    assert np.all(img == 0)


def test_render_middle_slice_shows_tumor_colors(trained, tmp_path):
    img_path = tmp_path / "mid.ppm"
    code, out, _ = run_cli("render", trained["data"] / "case000", img_path)
    assert code == 0
    assert json.loads(out.strip().splitlines()[-1])["index"] == 8
    img = read_netpbm(img_path)
    seen = {tuple(px) for px in img.reshape(-1, 3)}
    assert (0, 255, 0) in seen  # enhancing ring in green
    assert len(seen) > 1


def test_render_probability_volume_maps_one_to_black(tmp_path):
    vol = np.zeros((4, 5, 6))
    vol[2, 2, 2] = 1.0
    path = tmp_path / "prob.bin"
    save_array(path, vol, name="prob")
    img_path = tmp_path / "prob.pgm"
    code, _, _ = run_cli("render", path, img_path, "--axis", 0, "--index", 2)
    assert code == 0
    img = read_netpbm(img_path)
    assert img.shape == (5, 6)
    assert img[2, 2] == 0
    assert img[0, 0] == 255


def test_render_bad_index_is_a_data_error(trained, tmp_path):
    code, _, err = run_cli("render", trained["data"] / "case000",
                           tmp_path / "x.ppm", "--index", 99)
    assert code == 2
    assert "99" in err


# ----- console script ----------------------------------------------------


def test_console_script_is_installed():
    import shutil
    import subprocess

    exe = shutil.which("voxseg")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True,
                          env={**os.environ, "VOXSEG_THREADS": "1"})
    assert proc.returncode == 0
    assert "sweep" in proc.stdout
