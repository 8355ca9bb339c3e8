import json
import shutil

import numpy as np
import pytest

from latflow.harness.cli import main, parse_override
from latflow.harness.config import DEFAULTS, make_config, stage_dir, stage_hash
from latflow.harness.io import demo_from_csv, demo_from_json, demo_to_csv, demo_to_json, format_cloud, parse_cloud
from latflow.harness.pipeline import gen_demos, load_demos, load_latent, load_policy, read_csv
from latflow.harness.report import PolicyResult, ReportError, comparison_rows
from latflow.policy import FrozenWeightsError, build_windows, recon_mse, train_flow
from latflow.numerics.checkpoint import CheckpointError
from latflow.numerics.rng import stream
from latflow.simenv import generate_demonstrations, rollout

TINY = {
    "n_demos": 4, "latent_epochs": 2, "epochs": 2, "batch_size": 64, "eval_seeds": [0, 1], "eval_trials": 2,
    "d_h": 16, "dec_hidden": [16, 16], "flow_hidden": [16, 16], "time_dim": 8, "n_points": 128, "n_centers": 8,
    "n_neighbors": 8, "d_fl": 16, "d_fc": 8,
}


def _run(root, cfg_path, *extra):
    assert main(["run", "--config", str(cfg_path), "--root", str(root), "--set", "task=\"reach\"", *extra]) == 0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg_path = base / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    _run(base / "a", cfg_path)
    _run(base / "b", cfg_path)
    return base, make_config(TINY)


# ----------------------------------------------------------------------- io


def test_cloud_record_round_trip():
    pts = np.random.default_rng(0).standard_normal((5, 3))
    text = format_cloud(pts)
    assert text.splitlines()[0] == "5"
    np.testing.assert_array_equal(parse_cloud(text), pts)
    with pytest.raises(ValueError):
        parse_cloud("3\n0,0,0\n")


def test_demo_json_and_csv_round_trip():
    demo = generate_demonstrations("pick-place", 1, seed=3)[0]
    for back in (demo_from_json(json.loads(json.dumps(demo_to_json(demo)))), demo_from_csv(demo_to_csv(demo))):
        for name in ("actions", "observations", "contexts", "cloud"):
            np.testing.assert_array_equal(getattr(back, name), getattr(demo, name))
        assert back.scene.to_json() == demo.scene.to_json()


# ------------------------------------------------------------------- config


def test_config_overrides_and_hashes():
    cfg = make_config({"epochs": 3})
    assert cfg["epochs"] == 3 and cfg["lr"] == DEFAULTS["lr"]
    assert stage_hash(cfg, "flow") != stage_hash(make_config(), "flow")
    assert stage_hash(cfg, "latent") == stage_hash(make_config(), "latent")
    with pytest.raises(KeyError):
        make_config({"epoch": 3})
    with pytest.raises(ValueError):
        make_config({"horizon": 10})


def test_raw_flow_hash_ignores_latent_knobs():
    a = make_config({"policy": "raw-flow"})
    b = make_config({"policy": "raw-flow", "latent_epochs": 7})
    assert stage_hash(a, "eval") == stage_hash(b, "eval")


def test_parse_override():
    assert parse_override("eval_seeds=[0, 1]") == ("eval_seeds", [0, 1])
    assert parse_override("task=reach") == ("task", "reach")


# -------------------------------------------------------------------- demos


def test_default_demo_set_all_succeed(tmp_path):
    out = gen_demos(make_config(), tmp_path)
    demos = load_demos(make_config(), tmp_path)
    assert len(list(out.glob("demo_*.json"))) == 30
    assert all(rollout(d.scene, d.actions).success() for d in demos)


def test_gen_demos_is_byte_identical(tmp_path):
    cfg = make_config({"n_demos": 3})
    a, b = gen_demos(cfg, tmp_path / "a"), gen_demos(cfg, tmp_path / "b")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


# ----------------------------------------------------------------- pipeline


def test_run_directories_are_named_by_hash(runs):
    base, cfg = runs
    for stage in ("demos", "latent"):
        assert stage_dir(base / "a", cfg, stage).name.endswith(stage_hash(cfg, stage))
        assert (stage_dir(base / "a", cfg, stage)).is_dir()


def test_latent_checkpoint_reload_gives_same_loss(runs):
    base, cfg = runs
    vae, act_norm, obs_norm, meta = load_latent(cfg, base / "a")
    demos = load_demos(cfg, base / "a")
    data = build_windows(demos, cfg, act_norm, obs_norm)
    assert recon_mse(vae, data.subset(meta["extra"]["train_demos"])) == meta["extra"]["train_recon"]


def test_latent_hash_mismatch_aborts(runs):
    base, cfg = runs
    other = dict(cfg, kl_weight=0.5)
    src, dst = stage_dir(base / "a", cfg, "latent"), stage_dir(base / "a", other, "latent")
    shutil.copytree(src, dst)
    try:
        with pytest.raises(CheckpointError):
            load_latent(other, base / "a")
    finally:
        shutil.rmtree(dst)


def test_flow_training_refuses_changed_latent_model(runs):
    base, cfg = runs
    policy = load_policy(cfg, base / "a")
    data = build_windows(load_demos(cfg, base / "a"), cfg, policy.act_norm, policy.obs_norm)
    frozen = policy.vae.param_hash()
    policy.vae.mu_head.bias.data = policy.vae.mu_head.bias.data + 1e-9
    with pytest.raises(FrozenWeightsError):
        train_flow(policy, data, dict(cfg, epochs=1), stream(0, "x"), stream(0, "y"), frozen_hash=frozen)


def test_eval_one_flow_pass_and_decode_per_cycle(runs):
    base, cfg = runs
    for policy in ("latent-flow", "raw-flow"):
        rows = read_csv(stage_dir(base / "a", dict(cfg, policy=policy), "eval") / "trials_core.csv")
        assert len(rows) == 4
        for r in rows:
            assert int(r["flow_evals"]) == int(r["cycles"]) > 0
            assert int(r["decodes"]) == (int(r["cycles"]) if policy == "latent-flow" else 0)
            assert int(r["steps"]) <= 4 * int(r["cycles"])


def test_report_outputs(runs):
    base, _ = runs
    reports = list((base / "a" / "report").iterdir())
    assert len(reports) == 1
    names = {p.name for p in reports[0].iterdir()}
    for f in ("comparison.csv", "comparison_core.csv", "fig_smoothness.csv", "fig_success.csv", "fig_latency.csv",
              "fig_traj_reach.csv", "schema.json", "fig_smoothness.png", "fig_success.png", "fig_latency.png",
              "fig_traj_reach.png"):
        assert f in names
    rows = read_csv(reports[0] / "comparison.csv")
    ref = next(r for r in rows if r["policy"] == "raw-flow")
    assert float(ref["delta_success_pts"]) == 0.0 and float(ref["delta_smooth_pct"]) == 0.0


def test_pipeline_rerun_is_byte_identical(runs):
    base, cfg = runs
    ra, rb = (next((base / x / "report").iterdir()) for x in "ab")
    assert ra.name == rb.name
    for name in ("comparison_core.csv", "fig_smoothness.csv", "fig_success.csv", "fig_traj_reach.csv"):
        assert (ra / name).read_bytes() == (rb / name).read_bytes(), name
    for policy in ("latent-flow", "raw-flow"):
        c = dict(cfg, policy=policy)
        ea, eb = stage_dir(base / "a", c, "eval"), stage_dir(base / "b", c, "eval")
        assert (ea / "trials_core.csv").read_bytes() == (eb / "trials_core.csv").read_bytes()
        for f in sorted((ea / "trajectories").iterdir()):
            assert f.read_bytes() == (eb / "trajectories" / f.name).read_bytes()


# ------------------------------------------------------------------- report


def _result(policy, task="reach", success=(1, 0, 1, 1)):
    trials = [{"seed": str(i // 2), "success": str(s), "s_smooth": "0.3", "s_jerk": "1.0", "s_freq": "0.2"}
              for i, s in enumerate(success)]
    return PolicyResult(task, policy, trials, np.array([1.0, 2.0, 3.0]), 100.0, None)


def test_identical_inputs_give_zero_deltas():
    rows = comparison_rows([_result("raw-flow"), _result("latent-flow")])
    for r in rows:
        assert r["delta_success_pts"] == 0.0 and r["delta_time_pct"] == 0.0 and r["delta_smooth_pct"] == 0.0


def test_deltas_against_named_reference():
    rows = comparison_rows([_result("raw-flow", success=(0, 0, 1, 1)), _result("latent-flow")], "raw-flow")
    latent = next(r for r in rows if r["policy"] == "latent-flow")
    assert latent["delta_success_pts"] == pytest.approx(25.0)
    assert rows[0]["policy"] == "raw-flow"


@pytest.mark.parametrize("results", [
    [_result("raw-flow"), _result("raw-flow")],
    [_result("raw-flow"), _result("latent-flow"), _result("raw-flow", "obstacle-reach")],
    [_result("latent-flow"), _result("other")],
])
def test_report_rejects_inconsistent_inputs(results):
    with pytest.raises(ReportError):
        comparison_rows(results)


# ---------------------------------------------------------------------- CLI


def test_metrics_command(tmp_path, capsys):
    path = tmp_path / "traj.csv"
    path.write_text("step,a0\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate([0.3] * 40)))
    assert main(["metrics", str(path), "--columns", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("s_jerk,s_freq,s_smooth")
    assert [float(v) for v in out[1].split(",")[:3]] == [0.0, 0.0, 0.0]


def test_cli_reports_missing_inputs(tmp_path, capsys):
    assert main(["eval", "--root", str(tmp_path)]) == 1
    assert "run train-flow first" in capsys.readouterr().err


def test_hash_command(capsys):
    assert main(["hash", "--set", "epochs=3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["demos", "latent", "flow", "eval"]
