import json
from importlib import resources

import pytest

from densityctl.cli import main

TOY = """
name = "toy"
[system]
variables = ["x"]
{F}
G = [["1"]]
[data]
source = "table"
sample_times = [0.0, 1.0]
omega = 0.0
X = [[1.0, 2.0]]
Xdot = [[1.0, 2.0]]
U = [[0.0, 0.0]]
[synthesis]
b = "x^2"
"""


def preset_text(name):
    return resources.files("densityctl.presets").joinpath(f"{name}.toml").read_text()


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(*argv):
    return main([*argv, "--quiet"])


def load(path):
    return json.loads(path.read_text())


# experiment ------------------------------------------------------------------------------


def test_experiment_writes_three_samples(tmp_path):
    assert run("experiment", "--config", "example1", "--out", str(tmp_path)) == 0
    lines = (tmp_path / "experiment.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1].startswith("t,x_1,x_2,xdot_1")
    assert len(lines) == 2 + 3
    assert "config_hash" in load(tmp_path / "experiment.json")


def test_experiment_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("experiment", "--config", "example2", "--out", str(tmp_path / d), "--seed", "3") == 0
    for f in ("experiment.csv", "experiment.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_vector_field_is_config_error(tmp_path):
    assert run("experiment", "--config", write(tmp_path, TOY.format(F="")), "--out", str(tmp_path)) == 2


def test_missing_config_file(tmp_path):
    assert run("synthesize", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)) == 2


def test_unknown_command_and_bad_flags():
    assert main(["frobnicate"]) == 2
    assert main(["verify", "--config", "example1", "--method", "cor9"]) == 2


def test_help_exits_cleanly():
    assert main(["--help"]) == 0


# synthesize --------------------------------------------------------------------------------


def test_synthesize_first_example(tmp_path):
    assert run("synthesize", "--config", "example1", "--out", str(tmp_path)) == 0
    doc = load(tmp_path / "controller.json")
    assert {"config_hash", "data_hash", "controller", "provenance", "gain"} <= set(doc)
    assert doc["provenance"]["matrix_size"] == 7


def test_rank_deficient_data_exit_code(tmp_path):
    cfg = write(tmp_path, TOY.format(F='F = ["x"]'))
    assert run("synthesize", "--config", cfg, "--out", str(tmp_path)) == 4


def test_uncontrolled_template_exit_code(tmp_path):
    text = preset_text("example1").replace("deg_c = 2", "deg_c = 0")
    assert run("synthesize", "--config", write(tmp_path, text), "--out", str(tmp_path)) == 3


def test_solver_failure_exit_code(tmp_path):
    text = preset_text("example1") + '\n[solver]\nbackend = "ipm"\nmax_iters = 1\n'
    assert run("synthesize", "--config", write(tmp_path, text), "--out", str(tmp_path)) == 5


def test_unknown_solver_key(tmp_path):
    text = preset_text("example1") + "\n[solver]\nturbo = true\n"
    assert run("synthesize", "--config", write(tmp_path, text), "--out", str(tmp_path)) == 2


# verify -------------------------------------------------------------------------------------


def test_verify_fixture_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("verify", "--config", "example1", "--fixture", "--out", str(tmp_path / d)) == 0
    a = (tmp_path / "a" / "certificate_cor5.json").read_bytes()
    assert a == (tmp_path / "b" / "certificate_cor5.json").read_bytes()
    doc = json.loads(a)
    assert doc["pointwise"]["ok"] and doc["certificate"]["matrix_size"] == 7


def test_verify_second_example_sizes(tmp_path):
    assert run("synthesize", "--config", "example2", "--out", str(tmp_path)) == 0
    ctrl = str(tmp_path / "controller.json")
    for method, size in (("cor6", 3), ("cor5", 5)):
        assert run("verify", "--config", "example2", "--controller", ctrl, "--method", method,
                   "--deg-v", "4", "--out", str(tmp_path)) == 0
        assert load(tmp_path / f"certificate_{method}.json")["certificate"]["matrix_size"] == size


def test_corrupted_controller_file(tmp_path):
    bad = tmp_path / "controller.json"
    bad.write_text("{not json")
    assert run("verify", "--config", "example1", "--controller", str(bad), "--out", str(tmp_path)) == 2
    bad.write_text(json.dumps({"controller": {"a": "1", "c": ["x1 +"]}}))
    assert run("verify", "--config", "example1", "--controller", str(bad), "--out", str(tmp_path)) == 2


def test_verify_needs_a_controller(tmp_path):
    assert run("verify", "--config", "example1", "--out", str(tmp_path)) == 2


def test_open_loop_not_certified_exit_code(tmp_path):
    ctrl = tmp_path / "zero.json"
    ctrl.write_text(json.dumps({"controller": {"a": "1", "c": ["0"]}}))
    assert run("verify", "--config", "example1", "--controller", str(ctrl), "--out", str(tmp_path)) == 3


# validate -----------------------------------------------------------------------------------------


def test_validate_writes_plot_data(tmp_path):
    V = "3.0231*x1^2 + 2.1599*x1*x2 + 1.6122*x2^2"
    assert run("validate", "--config", "example1", "--fixture", "--lyapunov", V, "--out", str(tmp_path)) == 0
    doc = load(tmp_path / "validation.json")
    assert doc["all_converged"] and len(doc["final_norms"]) == 4
    for name in ("trajectory_1.csv", "phase_field.csv", "lyapunov_levels.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        assert lines[0] == f"# config_hash={doc['config_hash']}"
    assert (tmp_path / "trajectory_1.csv").read_text().splitlines()[1] == "t,x_1,x_2,V"


def test_validate_zero_horizon(tmp_path):
    assert run("validate", "--config", "example1", "--fixture", "--horizon", "0", "--out", str(tmp_path)) == 2


def test_validate_without_ground_truth(tmp_path):
    text = TOY.format(F='F = ["x"]').replace("U = [[0.0, 0.0]]", "U = [[1.0, 0.0]]")
    ctrl = tmp_path / "c.json"
    ctrl.write_text(json.dumps({"controller": {"a": "1", "c": ["-2*x"]}}))
    assert run("validate", "--config", write(tmp_path, text), "--controller", str(ctrl),
               "--out", str(tmp_path)) == 2


# repro ------------------------------------------------------------------------------------------------


def test_repro_first_example(tmp_path):
    assert run("repro", "1", "--out", str(tmp_path)) == 0
    summary = (tmp_path / "summary.md").read_text()
    assert "certified" in summary and "| validate | converged |" in summary
    assert load(tmp_path / "certificate_cor5.json")["certificate"]["deg_v"] == 2
