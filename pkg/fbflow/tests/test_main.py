import json

import pytest
from pydantic import ValidationError

from fbflow.app.errors import ConfigError
from fbflow.app.export import read_csv
from fbflow.app.main import EXIT_BUDGET, EXIT_CONFIG, EXIT_CRITERION, EXIT_PASS, main
from fbflow.app.models import EXPERIMENTS, Criterion, ExperimentConfig, RunSummary


def write_config(path, **entries):
    lines = []
    for key, value in entries.items():
        text = value if isinstance(value, str) else json.dumps(value)
        lines.append(f"{key.upper()}={text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def run_cli(experiment, config, out, *extra):
    return main([experiment, "--config", config, "--out", str(out), *extra])


def load_summary(out):
    return json.loads((out / "summary.json").read_text(encoding="utf-8"))


def test_simulate_linear1d(tmp_path):
    cfg = write_config(tmp_path / "sim.env", problem="linear1d", seed=7, k=20)
    out = tmp_path / "out"
    assert run_cli("simulate", cfg, out) == EXIT_PASS
    rows = read_csv(out / "trace.csv")
    assert rows[0] == ["k", "lambda_k", "sigma_k", "tau_k", "e_k", "x", "residual_gap"]
    assert len(rows) == 22
    assert float(rows[2][5]) == pytest.approx(1.0 / 3.0, abs=1e-15)
    summary = load_summary(out)
    assert {c["name"] for c in summary["criteria"]} == {"residual_gap", "replay_exact", "fejer_monotone"}
    assert all(c["passed"] for c in summary["criteria"])


def test_outputs_are_byte_identical_across_runs_and_jobs(tmp_path):
    cfg = write_config(tmp_path / "lemma.env", problem="skew2d", seed=3, trials=250)
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_cli("verify-lemma", cfg, first) == EXIT_PASS
    assert run_cli("verify-lemma", cfg, second, "--jobs", "3") == EXIT_PASS
    for name in ["lemma.csv", "algebra.csv"]:
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert len(read_csv(first / "lemma.csv")) == 1 + 3


def test_seed_override_changes_samples(tmp_path):
    cfg = write_config(tmp_path / "lemma.env", problem="linear1d", seed=3, trials=100)
    assert run_cli("verify-lemma", cfg, tmp_path / "a") == EXIT_PASS
    assert run_cli("verify-lemma", cfg, tmp_path / "b", "--seed", "4") == EXIT_PASS
    assert load_summary(tmp_path / "b")["seed"] == 4
    assert (tmp_path / "a" / "lemma.csv").read_bytes() != (tmp_path / "b" / "lemma.csv").read_bytes()


def test_verify_bounds_lasso(tmp_path):
    cfg = write_config(
        tmp_path / "bounds.env",
        problem="l1_quadratic",
        seed=11,
        k=40,
        l=30,
        schedule={"kind": "power", "c": 0.5, "p": 0.75, "relative": True},
        schedule_hat={"kind": "power", "c": 0.25, "p": 0.6, "relative": True},
        x0=[3.0],
        x0_hat=[-2.0],
        u=[0.5],
    )
    out = tmp_path / "out"
    assert run_cli("verify-bounds", cfg, out) == EXIT_PASS
    rows = read_csv(out / "bounds.csv")
    assert rows[0] == ["lhs", "rhs", "slack", "k", "l", "seed", "problem"]
    assert len(rows) == 42
    assert rows[1][5:] == ["11", "l1_quadratic"]


def test_flow_convergence_linear1d(tmp_path):
    cfg = write_config(
        tmp_path / "flow.env", problem="linear1d", seed=5, m_values=[4, 16, 64], k=20, grid_points=21, trials=50
    )
    out = tmp_path / "out"
    assert run_cli("flow-convergence", cfg, out) == EXIT_PASS
    names = [c["name"] for c in load_summary(out)["criteria"]]
    assert names == ["cauchy_bound", "error_decreasing", "two_grid", "um_vm_gap", "hybrid_bound"]
    assert len(read_csv(out / "flow_convergence.csv")) == 4


def test_flow_convergence_without_closed_form_skips(tmp_path):
    cfg = write_config(
        tmp_path / "flow.env",
        problem="box_projected",
        seed=5,
        m_values=[4, 16],
        k=10,
        grid_points=11,
        trials=20,
        flow_tol=0.1,
    )
    out = tmp_path / "out"
    assert run_cli("flow-convergence", cfg, out) == EXIT_PASS
    criteria = {c["name"]: c for c in load_summary(out)["criteria"]}
    assert criteria["cauchy_bound"]["detail"].startswith("skipped:")
    assert criteria["cauchy_bound"]["status"] == "skipped"
    assert criteria["hybrid_bound"]["passed"]
    assert criteria["hybrid_bound"]["status"] == "verified"
    assert set(load_summary(out)["skipped"]) == {"cauchy_bound", "error_decreasing"}


def test_benilan_linear1d(tmp_path):
    cfg = write_config(tmp_path / "ben.env", problem="linear1d", seed=13, grid_points=51, trials=50)
    out = tmp_path / "out"
    assert run_cli("benilan", cfg, out) == EXIT_PASS
    assert read_csv(out / "trajectory.csv")[0] == ["t", "x", "certified_error", "minnorm_profile"]
    assert len(read_csv(out / "benilan.csv")) == 51


def test_almost_orbit_lasso(tmp_path):
    cfg = write_config(
        tmp_path / "ao.env",
        problem="l1_quadratic",
        seed=17,
        schedule={"kind": "power", "c": 0.5, "p": 0.75, "relative": True},
        t_values=[1, 2, 4],
        h_delta=0.5,
        h_max=2,
        trials=10,
    )
    out = tmp_path / "out"
    assert run_cli("almost-orbit", cfg, out) == EXIT_PASS
    rows = read_csv(out / "almost_orbit.csv")
    assert len(rows) == 1 + 6
    assert {r[-1] for r in rows[1:]} == {"S_vs_T", "T_vs_S"}


def test_equivalence_linear1d(tmp_path):
    cfg = write_config(
        tmp_path / "eq.env",
        problem="linear1d",
        seed=19,
        schedule={"kind": "power", "c": 0.5, "p": 0.75, "relative": True},
        errors={"kind": "power", "scale": 0.01, "decay": 2.0},
        x0_set=[[1.0], [-2.0]],
        t_max=5,
        k_max=500,
    )
    out = tmp_path / "out"
    assert run_cli("equivalence", cfg, out) == EXIT_PASS
    summary = load_summary(out)
    assert summary["partial"] is False
    assert "weak and strong convergence coincide in finite dimension" in summary["notes"]


def test_failed_criterion_exits_with_one(tmp_path):
    cfg = write_config(
        tmp_path / "eq.env",
        problem="linear1d",
        seed=19,
        schedule={"kind": "power", "c": 0.5, "p": 0.75, "relative": True},
        t_max=5,
        k_max=3,
        limit_tol=1e-30,
    )
    out = tmp_path / "out"
    assert run_cli("equivalence", cfg, out) == EXIT_CRITERION
    criteria = {c["name"]: c for c in load_summary(out)["criteria"]}
    assert not criteria["limits_near_zero"]["passed"]
    assert criteria["limits_near_zero"]["status"] == "failed"
    assert criteria["perturbation_shift"]["detail"].startswith("skipped:")


def test_equivalence_with_summable_schedule_is_rejected(tmp_path):
    cfg = write_config(tmp_path / "eq.env", problem="linear1d", seed=1, k_max=10)
    assert run_cli("equivalence", cfg, tmp_path / "out") == EXIT_CONFIG


def test_dry_run_writes_nothing(tmp_path):
    cfg = write_config(tmp_path / "sim.env", problem="skew2d", seed=1)
    out = tmp_path / "out"
    assert run_cli("simulate", cfg, out, "--dry-run") == EXIT_PASS
    assert not out.exists()


@pytest.mark.parametrize(
    "entries",
    [
        {"problem": "linear1d"},
        {"problem": "linear1d", "seed": 1, "colour": "blue"},
        {"problem": "nope", "seed": 1},
        {"problem": "linear1d", "seed": 1, "x0": [1.0, 2.0]},
        {"problem": "box_projected", "seed": 1, "x0": [2.0, 0.0]},
        {"problem": "linear1d", "seed": 1, "m_values": [0, 4]},
    ],
)
def test_bad_configs_exit_with_two(tmp_path, entries):
    cfg = write_config(tmp_path / "bad.env", **entries)
    assert run_cli("simulate", cfg, tmp_path / "out") == EXIT_CONFIG


def test_missing_config_and_bad_jobs(tmp_path):
    assert run_cli("simulate", str(tmp_path / "missing.env"), tmp_path / "out") == EXIT_CONFIG
    cfg = write_config(tmp_path / "sim.env", problem="linear1d", seed=1)
    assert run_cli("simulate", cfg, tmp_path / "out", "--jobs", "0") == EXIT_CONFIG


def test_step_above_theta_exits_with_two(tmp_path):
    cfg = write_config(
        tmp_path / "sim.env", problem="linear1d", seed=1, schedule={"kind": "constant", "lam": 2.0}
    )
    assert run_cli("simulate", cfg, tmp_path / "out") == EXIT_CONFIG


def test_budget_exhaustion_exits_with_three(tmp_path):
    cfg = write_config(tmp_path / "ben.env", problem="box_projected", seed=1, flow_tol=1e-6)
    assert run_cli("benilan", cfg, tmp_path / "out") == EXIT_BUDGET


def test_config_loader_decodes_json(tmp_path):
    path = write_config(
        tmp_path / "c.env",
        experiment="simulate",
        seed=2,
        problem="skew2d",
        params={"omega": 2.0},
        m_values=[64, 4],
    )
    config = ExperimentConfig.from_file(path)
    assert config.params == {"omega": 2.0}
    assert config.m_values == [4, 64]
    assert config.first_length == config.second_length == 100
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.env")


def test_every_experiment_has_a_subcommand():
    from fbflow.app.experiments import HANDLERS
    from fbflow.app.main import build_parser

    assert set(HANDLERS) == set(EXPERIMENTS)
    parser = build_parser()
    for name in EXPERIMENTS:
        args = parser.parse_args([name, "--config", "x.env"])
        assert args.experiment == name


def test_summary_lists_artifact_hashes(tmp_path):
    import hashlib

    cfg = write_config(tmp_path / "sim.env", problem="l1_quadratic", seed=2, k=10)
    out = tmp_path / "out"
    assert run_cli("simulate", cfg, out) == EXIT_PASS
    artifacts = load_summary(out)["artifacts"]
    assert len(artifacts) == 1
    for path, digest in artifacts.items():
        with open(path, "rb") as fh:
            assert hashlib.sha256(fh.read()).hexdigest() == digest


def test_benilan_box_records_the_profile_as_skipped(tmp_path):
    cfg = write_config(tmp_path / "ben.env", problem="box_projected", seed=13, grid_points=11, trials=20, flow_tol=0.1)
    out = tmp_path / "out"
    assert run_cli("benilan", cfg, out) == EXIT_PASS
    summary = load_summary(out)
    criteria = {c["name"]: c for c in summary["criteria"]}
    assert criteria["minnorm_profile"]["status"] == "skipped"
    assert criteria["benilan_defect"]["status"] == "verified"
    assert summary["skipped"] == ["minnorm_profile"]


def test_benilan_lasso_checks_the_profile(tmp_path):
    cfg = write_config(tmp_path / "ben.env", problem="l1_quadratic", seed=13, grid_points=21, trials=20)
    out = tmp_path / "out"
    assert run_cli("benilan", cfg, out) == EXIT_PASS
    summary = load_summary(out)
    criteria = {c["name"]: c for c in summary["criteria"]}
    assert criteria["minnorm_profile"]["status"] == "verified"
    assert summary["skipped"] == []


def test_verify_lemma_checks_the_kappa_inequality(tmp_path):
    cfg = write_config(tmp_path / "lemma.env", problem="skew2d", seed=5, trials=100)
    out = tmp_path / "out"
    assert run_cli("verify-lemma", cfg, out) == EXIT_PASS
    criteria = {c["name"]: c for c in load_summary(out)["criteria"]}
    assert criteria["kappa_inequality"]["status"] == "verified"
    assert read_csv(out / "lemma.csv")[0] == ["block", "lemma_gap_min", "kappa_slack_min"]


def test_config_loader_reads_comma_vectors(tmp_path):
    path = write_config(
        tmp_path / "c.env",
        experiment="verify-bounds",
        seed=2,
        problem="skew2d",
        x0="1.5,0.5",
        x0_hat="-1;2",
        u="[0.0, 0.0]",
    )
    config = ExperimentConfig.from_file(path)
    assert config.x0 == [1.5, 0.5]
    assert config.x0_hat == [-1.0, 2.0]
    assert config.u == [0.0, 0.0]
    one_d = ExperimentConfig.from_file(write_config(tmp_path / "d.env", experiment="simulate", seed=2, x0="3.0"))
    assert one_d.x0 == [3.0]
    with pytest.raises(ValidationError):
        ExperimentConfig.from_file(write_config(tmp_path / "e.env", experiment="simulate", seed=2, x0="1.0,abc"))


def test_criterion_status_must_agree_with_passed():
    with pytest.raises(ValidationError):
        Criterion(name="x", passed=False, worst=1.0, threshold=0.0, status="skipped")
    with pytest.raises(ValidationError):
        Criterion(name="x", passed=True, worst=1.0, threshold=0.0, status="failed")
    summary = RunSummary(
        experiment="simulate",
        problem="linear1d",
        seed=1,
        criteria=[
            Criterion(name="a", passed=True, worst=0.0, threshold=1.0),
            Criterion(name="b", passed=True, worst=0.0, threshold=0.0, detail="skipped: none", status="skipped"),
        ],
    )
    assert summary.passed
    assert summary.skipped == ["b"]
    assert "[skipped] b" in summary.describe()
    assert "skipped" in summary.model_dump()
