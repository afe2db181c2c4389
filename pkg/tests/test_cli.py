import json
import subprocess
import sys

import pytest

from loramoe import cli
from loramoe import data as D
from loramoe import experiments as X


@pytest.fixture
def darwin_csv(tmp_path):
    p = tmp_path / "darwin.csv"
    D.write_darwin(D.synthetic_darwin(24, seed=4), p)
    return p


def write_config(tmp_path, **extra):
    doc = {"spec": "hidden_sweep", "sweep": [3, 5], "repetitions": 1, "record_time": False,
           "train": {"epochs": 2}}
    doc.update(extra)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_list_specs(capsys):
    assert cli.main(["list-specs"]) == 0
    out = capsys.readouterr().out
    assert "vote_by_task" in out and "rank=[1, 2, 3, 4, 5, 6, 7, 8]" in out


@pytest.mark.filterwarnings("ignore:.*full DARWIN")
def test_run_to_file_and_stdout(tmp_path, darwin_csv, capsys, monkeypatch):
    out = tmp_path / "res.csv"
    cfg = write_config(tmp_path, out={"format": "csv", "path": str(out)})
    assert cli.main(["run", str(cfg), "--data", str(darwin_csv), "--efficiency", str(tmp_path / "e.csv")]) == 0
    rows = X.read_csv(out)
    assert len(rows) == 12 and (tmp_path / "e.csv").exists()

    monkeypatch.setenv(X.DATA_ENV, str(darwin_csv))
    cfg2 = write_config(tmp_path, out={"format": "json"})
    capsys.readouterr()
    assert cli.main(["run", str(cfg2)]) == 0
    assert json.loads(capsys.readouterr().out)["spec"]["name"] == "hidden_sweep"


def test_run_without_data_path(tmp_path, monkeypatch):
    monkeypatch.delenv(X.DATA_ENV, raising=False)
    with pytest.raises(SystemExit, match=X.DATA_ENV):
        cli.main(["run", str(write_config(tmp_path))])


def test_param_report(tmp_path, capsys):
    cfg = write_config(tmp_path, fixed={"n_experts": 5, "rank": 4}, sweep=[300])
    assert cli.main(["param-report", str(cfg), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    lm = next(r for r in rows if r["arch"] == "LoRA-MoE")
    assert lm["identity_ok"] and lm["total"] > 0
    assert cli.main(["param-report", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("arch,model,hidden,total")


def test_verify_routing_exit_code(capsys):
    assert cli.main(["verify-routing", "--midpoints", "500"]) == 0
    out = capsys.readouterr().out
    assert "18/18 checks passed" in out and "FAIL" not in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "loramoe", "list-specs"], capture_output=True, text=True)
    assert res.returncode == 0 and "hidden_sweep" in res.stdout
    res = subprocess.run([sys.executable, "-m", "loramoe"], capture_output=True, text=True)
    assert res.returncode == 2
