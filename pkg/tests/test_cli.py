import os
import subprocess
import sys

import pytest

from cpxg.cli import main
from cpxg.diagnostics import CSV_FIELDS

SMALL = ["--agents", "4", "--dim", "10", "--samples", "10", "--pool-size", "4", "--budget", "60"]


def cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "cpxg", *args], capture_output=True, text=True,
                          env=dict(os.environ, **(env or {})))


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        res = cli("run", *SMALL, "--seed", "4", "--diagnostics", "true", "--out", str(out))
        assert res.returncode == 0, res.stderr
    assert read(a / "trace.csv") == read(b / "trace.csv")
    header = read(a / "trace.csv").decode().splitlines()[0]
    assert header == ",".join(CSV_FIELDS)


def test_env_seed_used_when_flag_absent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli("run", *SMALL, "--out", str(a), env={"CPXG_SEED": "4"}).returncode == 0
    assert main(["run", *SMALL, "--seed", "4", "--out", str(b)]) == 0
    assert read(a / "trace.csv") == read(b / "trace.csv")


def test_run_writes_metadata(tmp_path):
    assert main(["run", *SMALL, "--out", str(tmp_path)]) == 0
    meta = (tmp_path / "run.txt").read_text()
    assert "f_star=" in meta and "multistep_accelerated" in meta


def test_compare_identical_methods_give_identical_traces(tmp_path):
    assert main(["compare", *SMALL, "--methods", "basic_proxgrad,basic_proxgrad", "--out", str(tmp_path)]) == 0
    a = (tmp_path / "trace_0_basic_proxgrad.csv").read_text()
    b = (tmp_path / "trace_1_basic_proxgrad.csv").read_text()
    assert a.replace("trace_0", "") == b.replace("trace_1", "")
    assert a.splitlines()[0].endswith(",method")
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert rows[0] == "t,0_basic_proxgrad,1_basic_proxgrad"
    for row in rows[1:]:
        _, x, y = row.split(",")
        assert x == y


def test_compare_grid_carries_forward(tmp_path):
    assert main(["compare", *SMALL, "--methods", "multistep_accelerated,basic_proxgrad",
                 "--out", str(tmp_path)]) == 0
    rows = [r.split(",") for r in (tmp_path / "compare.csv").read_text().splitlines()[1:]]
    assert [int(r[0]) for r in rows] == list(range(1, 61))
    # t=2 is not an iteration end of the main method; value is carried from t=1
    assert rows[1][1] == rows[0][1]
    assert (tmp_path / "summary.txt").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("problem.agents = 4\nproblem.dim = 10\nproblem.samples = 10\npool.size = 4\n"
                   "budget = 500\nseed = 4\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--budget", "60", "--out", str(a)]) == 0
    assert main(["run", *SMALL, "--seed", "4", "--out", str(b)]) == 0
    assert read(a / "trace.csv") == read(b / "trace.csv")


@pytest.mark.parametrize("args", [
    ["run", "--alpha", "0"],
    ["run", "--budget", "0"],
    ["run", "--algo", "nope"],
    ["run", "--dataset", "/no/such/file"],
    ["compare", "--methods", "basic_proxgrad"],
    ["run", "--budget", "many"],
    ["run", "--no-such-flag"],
    ["check", "--scope", "everything"],
])
def test_configuration_errors_exit_1(args, tmp_path):
    assert main(args + ["--out", str(tmp_path)] if args[0] != "check" else args) == 1


def test_configuration_error_message_names_key(tmp_path):
    res = cli("run", "--alpha", "-1", "--out", str(tmp_path))
    assert res.returncode == 1
    assert "alpha" in res.stderr


def test_runtime_failure_exit_2(tmp_path):
    # logarithmic schedule with theoretical gamma asks for an absurd first stage
    res = cli("run", *SMALL, "--schedule", "logarithmic", "--budget", str(10**18), "--out", str(tmp_path))
    assert res.returncode == 2
    assert "runtime failure" in res.stderr
    # with a realistic budget the same schedule is a configuration problem
    res = cli("run", *SMALL, "--schedule", "logarithmic", "--out", str(tmp_path))
    assert res.returncode == 1 and "first stage" in res.stderr


def test_check_scope_passes():
    res = cli("check", "--scope", "netmodel")
    assert res.returncode == 0, res.stdout
    assert "checks passed" in res.stdout


def test_check_detects_injected_fault():
    res = cli("check", "--scope", "proxcore", "--fault", "prox_identity")
    assert res.returncode != 0
    assert "failed invariant: proxcore." in res.stdout


def test_gen_pool_and_reuse(tmp_path):
    pool = tmp_path / "pool.txt"
    assert main(["gen-pool", "--agents", "4", "--pool-size", "4", "--seed", "2", "--out", str(pool)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    # the generated pool uses seed + 1 as the run does, so both runs see the same matrices
    assert main(["run", *SMALL, "--seed", "2", "--pool-file", str(pool), "--out", str(a)]) == 0
    assert main(["run", *SMALL, "--seed", "2", "--out", str(b)]) == 0
    assert read(a / "trace.csv") == read(b / "trace.csv")


def test_gen_data_and_dataset_run(tmp_path):
    data = tmp_path / "data.txt"
    assert main(["gen-data", "--agents", "4", "--dim", "10", "--samples", "10", "--out", str(data)]) == 0
    assert len(data.read_text().splitlines()) == 40
    assert main(["run", *SMALL, "--dataset", str(data), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "trace.csv").exists()


def test_help_exits_zero():
    assert main(["--help"]) == 0
