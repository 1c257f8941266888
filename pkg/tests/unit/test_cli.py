from __future__ import annotations

import math

import pytest

from nsc.cli import EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, main
from nsc.lyapunov import QuadraticV, lyapunov_to_dict
from nsc.paths import CONTROLLER, LYAPUNOV, MANIFEST, REPORT, SUMMARY, TRAIN_LOG, trajectory_csv
from nsc.runlog import read_json, write_json


def _simulate(out, *extra: str) -> int:
    return main(["--seed", "3", "simulate", "--system", "gbm", "--n", "3", "--dt", "0.01", "--T", "0.2", *extra, "--out-dir", str(out)])


def test_missing_system_is_a_usage_error(tmp_nsc_home, tmp_out):
    assert main(["simulate", "--out-dir", str(tmp_out)]) == EXIT_USAGE


def test_unknown_system_is_a_usage_error(tmp_nsc_home, tmp_out):
    assert main(["simulate", "--system", "pendulum", "--out-dir", str(tmp_out)]) == EXIT_USAGE


def test_bad_override_is_a_usage_error(tmp_nsc_home, tmp_out):
    assert main(["simulate", "--system", "gbm", "--param", "sigma=1", "--out-dir", str(tmp_out)]) == EXIT_USAGE


def test_version_and_systems(tmp_nsc_home, capsys):
    assert main(["version"]) == EXIT_OK
    assert main(["systems"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "stuart-coupled" in out and "harmonic" in out


def test_linear_bound_without_a_system(tmp_nsc_home, tmp_out):
    code = main(["bounds", "--theorem", "3", "--k", "2", "--L", "1", "--x0", "1", "--eps", "0.1", "--out-dir", str(tmp_out)])
    assert code == EXIT_OK
    report = read_json(tmp_out / REPORT)
    assert report["T_eps"] == pytest.approx(2.302585, abs=1e-6)
    assert report["validity_flags"]["valid"] is True
    assert (tmp_out / MANIFEST).exists()


def test_theorem_4_needs_a_system(tmp_nsc_home, tmp_out):
    assert main(["bounds", "--theorem", "4", "--x0", "1", "--eps", "0.1", "--out-dir", str(tmp_out)]) == EXIT_USAGE


def test_inapplicable_bound_still_writes_a_report(tmp_nsc_home, tmp_out):
    code = main(
        ["bounds", "--system", "linear", "--theorem", "5", "--x0", "1", "--eps", "0.1", "--samples", "500", "--out-dir", str(tmp_out)]
    )
    assert code == EXIT_OK
    report = read_json(tmp_out / REPORT)
    assert report["validity_flags"]["valid"] is False
    assert report["T_eps"] is None
    assert "delta_eps" in report["reason"]


def test_simulate_is_reproducible_and_replayable(tmp_nsc_home, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert _simulate(a) == EXIT_OK
    assert _simulate(b) == EXIT_OK
    for i in range(3):
        assert (a / trajectory_csv(i)).read_bytes() == (b / trajectory_csv(i)).read_bytes()
    assert read_json(a / SUMMARY) == read_json(b / SUMMARY)

    assert main(["replay", str(a / MANIFEST), "--out-dir", str(c)]) == EXIT_OK
    for i in range(3):
        assert (a / trajectory_csv(i)).read_bytes() == (c / trajectory_csv(i)).read_bytes()
    assert read_json(c / MANIFEST)["seeds"] == {"base_seed": 3}


def test_replay_ignores_environment_seed(tmp_nsc_home, tmp_path, monkeypatch):
    a, c = tmp_path / "a", tmp_path / "c"
    assert _simulate(a) == EXIT_OK
    monkeypatch.setenv("NSC_SEED", "99")
    assert main(["replay", str(a / MANIFEST), "--out-dir", str(c)]) == EXIT_OK
    assert (a / trajectory_csv(0)).read_bytes() == (c / trajectory_csv(0)).read_bytes()


def test_simulate_with_a_fixed_start_and_no_csv(tmp_nsc_home, tmp_out):
    code = main(
        ["simulate", "--system", "linear", "--x0", "1.5", "--n", "2", "--dt", "0.01", "--T", "0.1", "--no-csv", "--out-dir", str(tmp_out)]
    )
    assert code == EXIT_OK
    assert not (tmp_out / trajectory_csv(0)).exists()
    assert read_json(tmp_out / SUMMARY)["n"] == 2


def test_short_training_run_reports_non_convergence(tmp_nsc_home, tmp_out):
    code = main(
        [
            "train", "--system", "linear", "--loss", "as", "--controller-kind", "neural_diag",
            "--max-iters", "3", "--n-samples", "16", "--out-dir", str(tmp_out),
        ]
    )
    assert code == EXIT_NOT_CONVERGED
    for name in (CONTROLLER, TRAIN_LOG, SUMMARY, MANIFEST):
        assert (tmp_out / name).exists()
    summary = read_json(tmp_out / SUMMARY)
    assert summary["converged"] is False and summary["iterations"] == 3
    assert read_json(tmp_out / MANIFEST)["config"]["train"]["max_iters"] == 3


def test_trained_controller_feeds_simulate(tmp_nsc_home, tmp_path):
    run, sim = tmp_path / "run", tmp_path / "sim"
    main(["train", "--system", "linear", "--controller-kind", "neural_diag", "--max-iters", "2", "--n-samples", "8", "--out-dir", str(run)])
    code = main(
        ["simulate", "--system", "linear", "--controller", str(run / CONTROLLER), "--n", "2", "--T", "0.05", "--dt", "0.01", "--out-dir", str(sim)]
    )
    assert code == EXIT_OK
    # A 1-D controller does not fit a 2-D system.
    bad = main(
        ["simulate", "--system", "linear", "--param", "d=2", "--controller", str(run / CONTROLLER), "--out-dir", str(sim)]
    )
    assert bad == EXIT_USAGE


def test_unknown_bench_suite(tmp_nsc_home, tmp_out):
    assert main(["bench", "pendulum", "--out-dir", str(tmp_out)]) == EXIT_USAGE


def test_linear_bound_validates_against_its_own_gain(tmp_nsc_home, tmp_out):
    code = main(
        [
            "bounds", "--system", "linear", "--theorem", "3", "--k", "2", "--L", "1", "--x0", "1", "--eps", "0.1",
            "--validate", "--n", "20", "--dt", "0.01", "--out-dir", str(tmp_out),
        ]
    )
    assert code == EXIT_OK
    mc = read_json(tmp_out / REPORT)["monte_carlo"]
    assert mc["n"] == 20 and not mc["trivial"]
    # Uncontrolled paths would grow and all be censored.
    assert mc["censored"] < 20


def test_config_file_step_and_horizon_reach_simulate(tmp_nsc_home, tmp_path):
    (tmp_nsc_home / "config.json").write_text('{"dt": 0.02, "horizon": 0.1}', encoding="utf-8")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--system", "gbm", "--n", "1", "--no-csv", "--out-dir", str(a)]) == EXIT_OK
    summary = read_json(a / SUMMARY)
    assert summary["dt"] == 0.02 and summary["T"] == 0.1

    assert main(["simulate", "--system", "gbm", "--n", "1", "--dt", "0.01", "--no-csv", "--out-dir", str(b)]) == EXIT_OK
    summary = read_json(b / SUMMARY)
    assert summary["dt"] == 0.01 and summary["T"] == 0.1


def test_es_bound_reports_its_estimated_constants(tmp_nsc_home, tmp_path):
    V = QuadraticV(1, [4], eps=1.0, seed=0)
    V.net.zero_()
    lyap = write_json(tmp_path / LYAPUNOV, lyapunov_to_dict(V))
    out = tmp_path / "out"
    code = main(
        [
            "bounds", "--system", "linear", "--param", "a=-1", "--theorem", "4", "--lyapunov", str(lyap),
            "--x0", "1", "--eps", "0.1", "--samples", "200", "--out-dir", str(out),
        ]
    )
    assert code == EXIT_OK
    report = read_json(out / REPORT)
    # V = x^2 under dx = -x dt: c2 = -2, c3 = 0, so T = 2 log(100) / 4.
    assert report["estimates"]["c2"] == pytest.approx(-2.0, rel=1e-9)
    assert report["estimates"]["c3"] == 0.0
    assert report["T_eps"] == pytest.approx(math.log(100.0) / 2.0, rel=1e-9)
