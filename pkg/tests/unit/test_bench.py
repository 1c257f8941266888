from __future__ import annotations

import csv
import math

import pytest

from nsc.bench import BENCH_COLUMNS, BenchRow, _guarded, linear_gain_sweep, run_suite, write_bench_csv
from nsc.config import NscConfig
from nsc.errors import ConfigurationError
from nsc.systems import make_linear


def test_bench_csv_has_fixed_columns(tmp_out):
    rows = [
        BenchRow("prop1", "square-law", metrics={"n": 100, "fraction_converged": 0.97, "mean_hitting_time": None}),
        BenchRow("prop1", "uncontrolled", status="error", note="boom"),
    ]
    path = write_bench_csv(tmp_out / "bench.csv", rows)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames == BENCH_COLUMNS
        got = list(reader)
    assert got[0]["fraction_converged"] == "0.97"
    assert got[0]["mean_hitting_time"] == ""
    assert got[1]["status"] == "error" and got[1]["note"] == "boom"


def test_failed_method_becomes_error_row():
    def boom() -> BenchRow:
        raise ConfigurationError("no controller")

    row = _guarded("harmonic", "es-icnn", boom)
    assert row.status == "error"
    assert row.note.startswith("ConfigurationError")


def test_unknown_suite():
    with pytest.raises(ConfigurationError):
        run_suite("pendulum", NscConfig())


def test_gain_sweep_on_unstable_line():
    sweep = linear_gain_sweep(make_linear(a=1.0), [0.0, 10.0], [1.0], n=20, dt=1e-3, T=1.0, eps=0.1, workers=1)
    assert sweep.fractions[0] == 0.0
    assert sweep.fractions[1] >= 0.9
    assert sweep.k_star == 10.0
    # Without control x(T) = (1 + dt)^(T/dt).
    assert sweep.mean_log1p[0] == pytest.approx(math.log1p(1.001**1000), rel=1e-9)
