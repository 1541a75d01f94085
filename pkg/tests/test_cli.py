import csv
import json
import math

import numpy as np
import pytest

from cldssm import cli
from cldssm.data import default_spec, load_csv, regime_series, synth_lgssm
from cldssm.training import mse

CONFIG = """\
[data]
source = synthetic
n_tasks = 2
n_windows = 2
window = 10
test_len = {test_len}

[model]
d_z = 3
hidden = 6
recog_hidden = 4
ensemble = 8

[output]
dir = out

[train]
epochs = 2
seeds = 0, 1
kinds = {kinds}
"""


def write_config(tmp_path, kinds="none, ewc_online", test_len=12, extra=""):
    p = tmp_path / "exp.ini"
    p.write_text(CONFIG.format(kinds=kinds, test_len=test_len) + extra, encoding="utf-8")
    return p


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_train_summary_shape_and_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    p = write_config(tmp_path)
    assert cli.main(["train", "--config", str(p)]) == 0
    summary = tmp_path / "out" / "summary.csv"
    rows = read_rows(summary)
    assert rows[0] == ["kind", "stage1_mean", "stage1_std", "stage2_mean", "stage2_std"]
    assert [r[0] for r in rows[1:]] == ["none", "ewc_online"]
    first = summary.read_bytes()
    assert b"\r" not in first
    assert cli.main(["train", "--config", str(p)]) == 0
    assert summary.read_bytes() == first
    for run in ("none_seed0", "none_seed1", "ewc_online_seed0", "ewc_online_seed1"):
        for name in ("report.csv", "model.ckpt", "state.bin"):
            assert (tmp_path / "out" / run / name).exists()


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    cfg = cli.parse_config(write_config(tmp_path))
    assert cfg.seeds == [7]
    assert cli.parse_config(write_config(tmp_path), env={}).seeds == [0, 1]


@pytest.mark.parametrize("extra", ["[data]\nbogus = 1\n", "[weird]\nx = 1\n"])
def test_unknown_keys_rejected(tmp_path, extra, capsys):
    p = tmp_path / "bad.ini"
    p.write_text(extra, encoding="utf-8")
    assert cli.main(["train", "--config", str(p)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:")


def test_bad_values_rejected(tmp_path):
    p = write_config(tmp_path, kinds="none, vcl")
    assert cli.main(["train", "--config", str(p)]) == 1
    p = write_config(tmp_path, extra="lambda_si = -1\n")
    assert cli.main(["train", "--config", str(p)]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 1


def test_lambda_overrides(tmp_path):
    cfg = cli.parse_config(write_config(tmp_path, extra="lambda_si = 100\nlambda_mas = 8000\n"), env={})
    tc = cfg.train_config(0)
    assert tc.regularizer("si").lam == 100.0 and tc.regularizer("mas").lam == 8000.0
    assert tc.regularizer("ewc_online").lam == 1000.0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    p = write_config(d, kinds="lwf", test_len=200)
    assert cli.main(["train", "--config", str(p)]) == 0
    return d / "out"


def test_eval_writes_forecast(trained, tmp_path, capsys):
    out = tmp_path / "f.csv"
    run = trained / "lwf_seed0"
    code = cli.main(["eval", "--checkpoint", str(run / "model.ckpt"), "--state", str(run / "state.bin"),
                     "--data", str(trained / "tasks" / "task_1.csv"), "--horizon", "200",
                     "--task", "1", "--out", str(out)])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 201 and rows[0] == ["t", "truth_1", "truth_2", "pred_1", "pred_2"]
    arr = np.array(rows[1:], dtype=float)
    printed = float(capsys.readouterr().out.strip().split("=")[1])
    assert printed == pytest.approx(mse(arr[:, 3:], arr[:, 1:3]), rel=1e-10)


def test_eval_truncated_checkpoint(trained, tmp_path, capsys):
    run = trained / "lwf_seed0"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((run / "model.ckpt").read_bytes()[:50])
    code = cli.main(["eval", "--checkpoint", str(bad), "--state", str(run / "state.bin"),
                     "--data", str(trained / "tasks" / "task_1.csv"), "--horizon", "10"])
    assert code == 1 and "IncompatibleCheckpoint" in capsys.readouterr().err


def test_eval_task_out_of_range(trained, tmp_path):
    run = trained / "lwf_seed0"
    code = cli.main(["eval", "--checkpoint", str(run / "model.ckpt"), "--state", str(run / "state.bin"),
                     "--data", str(trained / "tasks" / "task_1.csv"), "--horizon", "10", "--task", "3",
                     "--out", str(tmp_path / "f.csv")])
    assert code == 1


def test_task_csvs_parse(trained):
    for j in (1, 2):
        s = load_csv(trained / "tasks" / f"task_{j}.csv", default_spec(2, 1))
        assert len(s) == 10 + 200


def test_synth_lgssm(tmp_path):
    assert cli.main(["synth", "--kind", "lgssm", "--out", str(tmp_path), "--T-total", "100", "--seed", "3"]) == 0
    rows = read_rows(tmp_path / "lgssm.csv")
    assert len(rows) == 101
    meta = json.loads((tmp_path / "lgssm.json").read_text())
    assert math.isfinite(meta["log_evidence"])
    ref = synth_lgssm(0.9, 1.0, 0.1, 0.1, 100, seed=3)
    assert meta["log_evidence"] == ref.loglik
    back = load_csv(tmp_path / "lgssm.csv", default_spec(1, 0))
    assert np.array_equal(back.x, ref.x)


def test_synth_regimes(tmp_path):
    assert cli.main(["synth", "--kind", "regimes", "--out", str(tmp_path), "--n-tasks", "4",
                     "--T-total", "60"]) == 0
    files = sorted(tmp_path.glob("regime_task*.csv"))
    assert len(files) == 4
    ref = regime_series(4, seed=0, length=60)
    for f, s in zip(files, ref):
        back = load_csv(f, default_spec(2, 1))
        assert np.array_equal(back.x, s.x) and np.array_equal(back.u, s.u)


def test_internal_error_exit_code(monkeypatch, tmp_path, capsys):
    def boom(*args, **kwargs):
        raise AssertionError("invariant broken")

    monkeypatch.setattr(cli, "synth_lgssm", boom)
    assert cli.main(["synth", "--kind", "lgssm", "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error: InternalInvariant")
