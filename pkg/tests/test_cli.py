import csv
import subprocess
import sys

import pytest

from csdkit.cli import main
from csdkit.config import default_ini


def _ini(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


TOY2D = """
[mlp]
hidden_widths = 32
[train]
max_steps = 300
[toy2d]
members = 3
[csd]
embed_dim = 16
max_steps = 200
"""


def test_print_defaults(capsys):
    assert main(["verify", "--print-defaults"]) == 0
    assert capsys.readouterr().out == default_ini()


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["verify"]) == 2
    assert main(["verify", "--config", _ini(tmp_path, "[verify]\ncolour = red\n")]) == 2
    assert "colour" in capsys.readouterr().err
    assert main(["verify", "--config", str(tmp_path / "nope.ini")]) == 2
    ini = _ini(tmp_path, "[verify]\nsuites = jitter\n")
    assert main(["verify", "--config", ini, "--seeds", "", "--out", str(tmp_path / "o")]) == 2


def test_verify_jitter_and_injected_fault(tmp_path, capsys):
    out = tmp_path / "o"
    ini = _ini(tmp_path, "[verify]\nsuites = jitter\n")
    assert main(["verify", "--config", ini, "--out", str(out)]) == 0
    first = (out / "verify.csv").read_bytes()
    assert main(["verify", "--config", ini, "--out", str(out)]) == 0
    assert (out / "verify.csv").read_bytes() == first
    rows = _rows(out / "verify.csv")
    assert rows and all(r["pass"] == "1" or r["pass"].lower() == "true" for r in rows)
    assert (out / "resolved_config.ini").exists()
    capsys.readouterr()

    ini = _ini(tmp_path, "[verify]\nsuites = jitter\ninject_fault = no_jitter_ladder\n")
    assert main(["verify", "--config", ini, "--out", str(out)]) == 1
    printed = capsys.readouterr().out
    assert any(line.startswith("FAIL") for line in printed.splitlines())


def test_toy2d_outputs_and_rerun(tmp_path):
    out = tmp_path / "o"
    ini = _ini(tmp_path, TOY2D)
    assert main(["toy2d", "--config", ini, "--seeds", "0", "--out", str(out)]) == 0
    names = ["gp", "ensemble", "csd"]
    for n in names:
        assert (out / f"{n}_var.pgm").read_bytes().startswith(b"P")
        assert len(_rows(out / f"{n}_var.csv")) == 41 * 41
    pairs = [r["pair"] for r in _rows(out / "correlations.csv")]
    assert pairs == ["ensemble_vs_gp", "csd_vs_gp", "ensemble_vs_csd"]
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["toy2d", "--config", ini, "--seeds", "0", "--out", str(out)]) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == before


def test_divergence_exits_3(tmp_path):
    ini = _ini(tmp_path, TOY2D.replace("max_steps = 300", "max_steps = 300\nlearning_rate = 1e6"))
    assert main(["toy2d", "--config", ini, "--seeds", "0", "--out", str(tmp_path / "o")]) == 3


def test_ood_small_run(tmp_path):
    out = tmp_path / "o"
    ini = _ini(tmp_path, """
[data]
params = dim=4, n_train=80, n_test=40, n_ood=40, n_context=20
[ood]
methods = gp_exact,csd
hidden_widths = 32
embed_dim = 16
csd_max_steps = 50
""")
    assert main(["ood", "--config", ini, "--seeds", "0,1", "--out", str(out)]) == 0
    gp, csd = _rows(out / "ood_gp_exact.csv"), _rows(out / "ood_csd.csv")
    assert len(gp) == len(csd) == 4
    assert [r["seed"] for r in gp] == [r["seed"] for r in csd] == ["0", "0", "1", "1"]
    agg = _rows(out / "ood_csd_aggregate.csv")
    assert len(agg) == 2 and {r["n_seeds"] for r in agg} == {"2"}


def test_explore_small_run(tmp_path):
    out = tmp_path / "o"
    ini = _ini(tmp_path, """
[explore]
n_states = 10
frames = 600
retrain_frames = 300
csd_steps = 20
""")
    assert main(["explore", "--config", ini, "--out", str(out)]) == 0
    curves = _rows(out / "explore_curves.csv")
    assert {r["seed"] for r in curves} == {str(s) for s in range(10)}
    summary = _rows(out / "explore_summary.csv")
    assert [r["seed"] for r in summary] == [str(s) for s in range(10)]


@pytest.mark.parametrize("flag", ["--help", "--print-defaults"])
def test_console_entry(flag):
    res = subprocess.run([sys.executable, "-m", "csdkit.cli", "verify", flag], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout
