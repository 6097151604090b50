"""The README's one-command table reproductions, at reduced trial count.

Each documented command runs here with --trials 10 against the shipped
config; assertions check the qualitative features the full-scale runs
reproduce quantitatively (see the acceptance suite for those).
"""
import csv
from pathlib import Path

import numpy as np
import pytest

from adenkf.cli import main

CONFIG = str(Path(__file__).resolve().parents[1] / "configs" / "lorenz96.toml")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _summary(out):
    rows = _read_csv(Path(out) / "summary.csv")
    head = rows[0]
    return {
        r[0]: {head[i]: r[i] for i in range(len(head))} for r in rows[1:]
    }


def _pct(cell: str) -> float:
    return float(cell.rstrip("%"))


@pytest.fixture(scope="module")
def outroot(tmp_path_factory):
    return tmp_path_factory.mktemp("repro")


@pytest.fixture(scope="module")
def f16_out(outroot):
    out = outroot / "f16"
    code = main(["run", "-c", CONFIG, "--regime", "F16", "-o", str(out), "--trials", "10"])
    assert code == 0
    return out


def test_regime_comparison_weak(outroot):
    out = outroot / "f4"
    assert main(["run", "-c", CONFIG, "--regime", "F4", "-o", str(out), "--trials", "10"]) == 0
    table = _summary(out)
    assert set(table) == {"enkf", "enkf-ai", "enkf-ci", "enkf-cai"}
    for variant in table:
        assert _pct(table[variant]["Cata. Div."]) == 0.0
    # constant inflation is accurate in the weak regime
    assert float(table["enkf-ci"]["RMSE"]) < 1.0
    assert float(table["enkf-ci"]["Pattern Cor."]) > 0.9


def test_regime_comparison_moderate(outroot):
    out = outroot / "f8"
    assert main(["run", "-c", CONFIG, "--regime", "F8", "-o", str(out), "--trials", "10"]) == 0
    table = _summary(out)
    for variant in ("enkf-ai", "enkf-ci", "enkf-cai"):
        assert _pct(table[variant]["Cata. Div."]) == 0.0
    assert float(table["enkf-ci"]["RMSE"]) < 7.0  # beats the benchmark


def test_regime_comparison_strong(f16_out):
    table = _summary(f16_out)
    assert _pct(table["enkf"]["Cata. Div."]) >= 90.0
    assert table["enkf"]["RMSE"] == "NaN"
    for variant in ("enkf-ai", "enkf-cai"):
        assert _pct(table[variant]["Cata. Div."]) == 0.0
    # figure data for the statistic distributions is part of the run output
    assert (f16_out / "figures" / "theta_hist_enkf-ai.csv").exists()
    assert (f16_out / "figures" / "xi_hist_enkf-ai.csv").exists()


def test_inflation_strength_sweep(f16_out, outroot):
    out = outroot / "f16-rho"
    # reuse the cached climatology so only the batches rerun
    for name in ("climatology.json", "thresholds.json"):
        out.mkdir(exist_ok=True)
        (out / name).write_text((f16_out / name).read_text())
    code = main(
        ["sweep", "-c", CONFIG, "--regime", "F16", "-o", str(out),
         "--axis", "rho", "--values", "1,0.5,0.2,0.1,0.05,0.02,0.01,0.005",
         "--variants", "enkf-ci,enkf-cai", "--trials", "10"]
    )
    assert code == 0
    rows = _read_csv(out / "sweep_rho.csv")
    assert rows[0] == ["rho", "1", "0.5", "0.2", "0.1", "0.05", "0.02", "0.01", "0.005"]
    div_row = next(r for r in rows if r[0] == "enkf-ci Cata. Div.")
    div = np.array([_pct(c) for c in div_row[1:]])
    # divergence grows as constant inflation is removed (rank trend)
    order = np.argsort(np.argsort(div))
    grid_rank = np.arange(len(div))  # rho is listed largest -> smallest
    spearman = np.corrcoef(order, grid_rank)[0, 1]
    assert spearman > 0  # smaller rho, more divergence
    assert div[-1] >= div[0]


def test_observation_interval_sweep(f16_out, outroot):
    out = outroot / "f16-h"
    out.mkdir(exist_ok=True)
    for name in ("climatology.json", "thresholds.json"):
        (out / name).write_text((f16_out / name).read_text())
    code = main(
        ["sweep", "-c", CONFIG, "--regime", "F16", "-o", str(out),
         "--axis", "h", "--values", "0.01,0.02,0.05,0.1,0.2,0.5",
         "--variants", "enkf-cai", "--trials", "10"]
    )
    assert code == 0
    rows = _read_csv(out / "sweep_h.csv")
    rmse_row = next(r for r in rows if r[0] == "enkf-cai RMSE")
    vals = np.array([float(c) for c in rmse_row[1:]])
    # skill peaks at an interior observation interval
    assert np.nanargmin(vals) not in (0, len(vals) - 1)


def test_integrator_comparison(f16_out, outroot):
    out = outroot / "f16-int"
    out.mkdir(exist_ok=True)
    for name in ("climatology.json", "thresholds.json"):
        (out / name).write_text((f16_out / name).read_text())
    code = main(
        ["sweep", "-c", CONFIG, "--regime", "F16", "-o", str(out),
         "--axis", "integrator",
         "--values", "explicit_euler@1e-4,rk4@2.5e-3,rk45,implicit_euler@1e-2",
         "--variants", "enkf", "--trials", "10"]
    )
    assert code == 0
    rows = _read_csv(out / "sweep_integrator.csv")
    assert rows[0] == ["integrator", "explicit_euler", "rk4", "rk45", "implicit_euler"]
    div_row = next(r for r in rows if r[0] == "enkf Cata. Div.")
    div = {k: _pct(v) for k, v in zip(rows[0][1:], div_row[1:])}
    # stable integrators eliminate catastrophic divergence for plain EnKF
    assert div["explicit_euler"] >= 90.0
    assert div["rk45"] == 0.0
    assert div["implicit_euler"] == 0.0
    time_row = next(r for r in rows if r[0] == "enkf Avg. Time")
    times = {k: float(v) for k, v in zip(rows[0][1:], time_row[1:])}
    # the cheap explicit scheme is far faster than the implicit one
    assert times["explicit_euler"] < times["implicit_euler"]


def test_report_renders_all_artifacts(f16_out):
    assert main(["report", "-o", str(f16_out)]) == 0
    text = (f16_out / "report.md").read_text()
    assert "Batch summary" in text
    assert "m1" in text and "benchmark RMSE" in text
