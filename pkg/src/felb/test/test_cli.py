import json

import pandas as pd
import pytest

from felb.__main__ import main
from felb.io_utils import read_jsonl
from felb.matrix import BinaryMatrix, read_matrix_market, write_matrix_market

SMALL = """
[data]
rows = 60
cols = 20
tiles = 2
noise = 0.05

[federation]
clients = 3
rank = 2
sync_interval = 2
max_iterations = 5
seed = 11

[baseline]
local_iterations = 30
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL, encoding="utf-8")
    return path


def run_cli(*args):
    return main([str(a) for a in args])


# ---------- generate ----------


def test_generate_writes_readable_files(tmp_path):
    out = tmp_path / "gen"
    assert run_cli("generate", "--out", out, "--rows", 40, "--cols", 20, "--tiles", 2, "--seed", 3) == 0
    data, mask = read_matrix_market(out / "data.mtx"), read_matrix_market(out / "mask.mtx")
    assert data.shape == mask.shape == (40, 20)
    (record,) = read_jsonl(out / "spec.jsonl")
    assert record["spec"]["seed"] == 3 and record["spec"]["tile_rows"] == 10


def test_generate_is_byte_identical_for_same_seed(tmp_path):
    for name in ("a", "b"):
        assert run_cli("generate", "--out", tmp_path / name, "--rows", 30, "--cols", 12, "--seed", 8, "--noise", 0.1) == 0
    for file in ("data.mtx", "mask.mtx", "spec.jsonl"):
        assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()


def test_generate_without_tiles_has_empty_mask(tmp_path):
    assert run_cli("generate", "--out", tmp_path, "--rows", 20, "--cols", 10, "--tiles", 0) == 0
    assert read_matrix_market(tmp_path / "mask.mtx").nnz == 0


# ---------- run ----------


def test_run_writes_all_outputs(tmp_path, small_config):
    out = tmp_path / "run"
    assert run_cli("run", "--config", small_config, "--out", out) == 0
    history = pd.read_csv(out / "history.csv")
    assert len(history) == 5
    assert history["round"].tolist() == [1, 2, 3, 4, 5]
    assert history["elapsed_seconds"].isna().all()
    assert read_matrix_market(out / "vhat.mtx").shape == (2, 20)
    assert sum(read_matrix_market(out / f"u_{i}.mtx").rows for i in range(3)) == 60
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["seed"] == 11
    assert summary["config"]["federation"]["clients"] == "3"
    assert set(summary["final"]) == {"rmsd", "f1", "f1_star", "integrality_gap"}


def test_run_is_reproducible_across_thread_counts(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("FELB_THREADS", "1")
    assert run_cli("run", "--config", small_config, "--out", tmp_path / "serial") == 0
    monkeypatch.setenv("FELB_THREADS", "3")
    assert run_cli("run", "--config", small_config, "--out", tmp_path / "parallel") == 0
    serial = (tmp_path / "serial" / "history.csv").read_bytes()
    assert serial == (tmp_path / "parallel" / "history.csv").read_bytes()


def test_methods_differ_only_in_step_rule(tmp_path, small_config):
    for method in ("felb", "felb-mu"):
        assert run_cli("run", "--config", small_config, "--out", tmp_path / method, "--method", method) == 0
    felb, mu = (json.loads((tmp_path / m / "summary.json").read_text(encoding="utf-8")) for m in ("felb", "felb-mu"))
    assert felb["step_rule"]["variant"] == "lipschitz" and mu["step_rule"]["variant"] == "mu"
    felb["config"]["federation"].pop("method")
    mu["config"]["federation"].pop("method")
    assert felb["config"] == mu["config"]


def test_run_with_privacy_flags(tmp_path, small_config):
    out = tmp_path / "dp"
    args = ("run", "--config", small_config, "--out", out, "--privacy", "gauss", "--epsilon", 2, "--theta", 1.5)
    assert run_cli(*args) == 0
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["config"]["privacy"]["clipped"] == "true"
    assert summary["config"]["privacy"]["clip_theta"] == "1.5"


def test_aggregated_baseline_run(tmp_path, small_config):
    out = tmp_path / "agg"
    assert run_cli("run", "--config", small_config, "--out", out, "--method", "agg-baseline", "--agg", "or") == 0
    assert len(pd.read_csv(out / "history.csv")) == 1
    assert not (out / "vhat.fac").exists()


def test_multiple_trials_use_subdirectories(tmp_path, small_config):
    text = small_config.read_text(encoding="utf-8") + "\n[experiment]\ntrials = 2\n"
    small_config.write_text(text, encoding="utf-8")
    assert run_cli("run", "--config", small_config, "--out", tmp_path / "trials") == 0
    seeds = [json.loads((tmp_path / "trials" / f"trial_{j}" / "summary.json").read_text())["seed"] for j in range(2)]
    assert seeds[0] == 11 and seeds[1] != 11


# ---------- evaluate ----------


def test_evaluate_file_against_itself(tmp_path):
    run_cli("generate", "--out", tmp_path, "--rows", 20, "--cols", 10, "--seed", 1)
    data = tmp_path / "data.mtx"
    csv = tmp_path / "eval.csv"
    assert run_cli("evaluate", data, data, "--mask", tmp_path / "mask.mtx", "--csv", csv) == 0
    row = pd.read_csv(csv).iloc[0]
    assert row["rmsd"] == 0.0 and row["f1"] == 1.0 and row["integrality_gap"] == 0.0


def test_evaluate_against_zeros(tmp_path):
    run_cli("generate", "--out", tmp_path, "--rows", 20, "--cols", 10, "--seed", 1)
    zeros = tmp_path / "zeros.mtx"
    write_matrix_market(zeros, BinaryMatrix.zeros(20, 10))
    csv = tmp_path / "eval.csv"
    assert run_cli("evaluate", zeros, tmp_path / "data.mtx", "--csv", csv) == 0
    assert pd.read_csv(csv).iloc[0]["f1"] == 0.0


# ---------- 退出码 ----------


def test_invalid_config_exits_with_2(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[federation]\nclients = 0\nrank = 0\n", encoding="utf-8")
    assert run_cli("run", "--config", path, "--out", tmp_path / "x") == 2


def test_unknown_config_key_exits_with_2(tmp_path):
    path = tmp_path / "typo.ini"
    path.write_text("[federation]\nclient = 3\n", encoding="utf-8")
    assert run_cli("run", "--config", path) == 2


def test_shape_mismatch_exits_with_3(tmp_path):
    write_matrix_market(tmp_path / "a.mtx", BinaryMatrix.zeros(2, 2))
    write_matrix_market(tmp_path / "b.mtx", BinaryMatrix.zeros(2, 3))
    assert run_cli("evaluate", tmp_path / "a.mtx", tmp_path / "b.mtx") == 3


def test_missing_data_file_exits_with_3(tmp_path):
    path = tmp_path / "file.ini"
    path.write_text(f"[data]\nsource = file\npath = {tmp_path / 'nope.mtx'}\n", encoding="utf-8")
    assert run_cli("run", "--config", path, "--out", tmp_path / "x") == 3


# ---------- sweep ----------


def test_privacy_sweep_writes_one_row_per_setting(tmp_path, small_config):
    out = tmp_path / "sweep"
    args = ("sweep", "privacy", "--config", small_config, "--out", out, "--epsilons", "0.5,2", "--privacy", "laplace")
    assert run_cli(*args) == 0
    frame = pd.read_csv(out / "sweep_privacy.csv")
    assert frame["privacy"].tolist() == ["laplace@0.5", "laplace@2"]


def test_client_sweep(tmp_path, small_config):
    out = tmp_path / "sweep"
    assert run_cli("sweep", "clients", "--config", small_config, "--out", out, "--counts", "1,2") == 0
    assert pd.read_csv(out / "sweep_clients.csv")["clients"].tolist() == [1, 2]
