import json
import os

import numpy as np
import pytest

from geonode import dynamics as dyn
from geonode.cli import SIM_COLUMNS, main, read_csv
from geonode.config import Checkpoint, ConfigError, RunConfig, preset
from geonode.parallel import chunk_bounds, worker_count
from geonode.training import AdamState, TrainState

SMALL = {
    "name": "small",
    "cost": {"weights": [4, 20, 5, 1, 1, 1, 1, 1, 1], "horizon": 0.3},
    "train": {"epochs": 4, "batch_size": 4, "eval_every": 2, "eval_n": 4, "eval_times": 5,
              "restarts": []},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# config


def test_config_round_trip():
    for name in ("quadratic", "nn", "nn-gravity"):
        cfg = preset(name)
        again = RunConfig.from_json(cfg.to_json())
        assert again.to_dict() == cfg.to_dict()
        assert again.hash() == cfg.hash()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({**SMALL, "train": {**SMALL["train"], "epoch": 3}})
    assert "train.epoch" in str(err.value)


def test_config_requires_nine_weights():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({"cost": {"weights": [4, 20, 5, 1, 1, 1, 1, 1]}})
    assert "cost.weights" in str(err.value)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({})


def test_checkpoint_round_trip_is_bit_identical(rng, tmp_path):
    cfg = preset("nn")
    spec = cfg.controller_spec()
    n = spec.controller.n_params
    adam = AdamState(rng.normal(size=n), rng.random(n), 17)
    rng_state = np.random.default_rng(2**63 + 5).bit_generator.state
    st = TrainState(17, rng.normal(size=n), adam, rng_state)
    Checkpoint.from_state(st, spec, cfg).save(tmp_path / "ck.json")
    back = Checkpoint.load(tmp_path / "ck.json").train_state()
    assert back.epoch == 17
    assert back.params.tobytes() == st.params.tobytes()
    assert back.adam.m.tobytes() == adam.m.tobytes()
    assert back.adam.v.tobytes() == adam.v.tobytes()
    assert back.adam.t == 17
    assert back.rng_state == rng_state


def test_checkpoint_parameter_count_checked(tmp_path):
    cfg = preset("quadratic")
    spec = cfg.controller_spec()
    st = TrainState(0, spec.controller.params(), AdamState.zeros(12), {})
    data = json.loads(Checkpoint.from_state(st, spec, cfg).to_json())
    data["params"] = data["optimizer"]["m"] = data["optimizer"]["v"] = {"shape": [0], "data": ""}
    (tmp_path / "bad.json").write_text(json.dumps(data))
    assert run("simulate", "--checkpoint", tmp_path / "bad.json", "--out", tmp_path / "s.csv") == 2


# ---------------------------------------------------------------------------
# train


def test_train_writes_one_row_per_epoch(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out, "--quiet") == 0
    header, rows = read_csv(out / "metrics.csv")
    assert header == ["epoch", "loss", "terminal_loss", "integral_loss", "mean_final_angle",
                      "mean_final_distance", "wall_time"]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4]
    for name in ("checkpoint_000002.json", "checkpoint_000004.json", "checkpoint_final.json",
                 "config.json", "eval_history.csv", "training_progress.png"):
        assert (out / name).exists()


def test_train_epoch_override(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert run("train", "--config", cfg, "--out", tmp_path / "r", "--epochs", 2, "--quiet",
               "--no-plots") == 0
    assert len(read_csv(tmp_path / "r" / "metrics.csv")[1]) == 2


def test_train_missing_weight_exits_2(tmp_path, capsys):
    bad = {**SMALL, "cost": {"weights": [4, 20, 5, 1, 1, 1, 1, 1]}}
    assert run("train", "--config", write_config(tmp_path, bad), "--out", tmp_path / "r") == 2
    assert "cost.weights" in capsys.readouterr().err


def test_train_unknown_key_exits_2(tmp_path):
    bad = {**SMALL, "solver": {"methd": "rk4"}}
    assert run("train", "--config", write_config(tmp_path, bad), "--out", tmp_path / "r") == 2


def test_resume_continues_and_matches(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--config", cfg, "--out", full, "--quiet", "--no-plots") == 0
    assert run("train", "--config", cfg, "--out", part, "--epochs", 2, "--quiet", "--no-plots") == 0
    assert run("train", "--config", cfg, "--out", part, "--quiet", "--no-plots",
               "--resume", part / "checkpoint_000002.json") == 0
    _, a = read_csv(full / "metrics.csv")
    _, b = read_csv(part / "metrics.csv")
    assert [int(r[0]) for r in b] == [1, 2, 3, 4]
    assert [r[:6] for r in a] == [r[:6] for r in b]
    pa = Checkpoint.load(full / "checkpoint_final.json").params
    pb = Checkpoint.load(part / "checkpoint_final.json").params
    assert pa.tobytes() == pb.tobytes()


def test_resume_with_other_config_exits_3(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert run("train", "--config", cfg, "--out", tmp_path / "a", "--epochs", 2, "--quiet",
               "--no-plots") == 0
    other = {**SMALL, "train": {**SMALL["train"], "eta": 5e-3}}
    cfg2 = write_config(tmp_path, other, "other.json")
    assert run("train", "--config", cfg2, "--out", tmp_path / "a", "--quiet", "--no-plots",
               "--resume", tmp_path / "a" / "checkpoint_000002.json") == 3


# ---------------------------------------------------------------------------
# simulate / eval


@pytest.fixture
def free_checkpoint(tmp_path):
    data = {"name": "free", "controller": {"kind": "none"},
            "body": {"inertia": [[2, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0], [0, 0, 3, 0, 0, 0],
                                 [0, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 1]]},
            "cost": {"weights": [4, 20, 5, 1, 1, 1, 1, 1, 1], "horizon": 1.0},
            "sampler": {"alpha_p_max": 1.0},
            "train": {"epochs": 0, "eval_n": 2, "eval_times": 3},
            "solver": {"rtol": 1e-10, "atol": 1e-10}}
    out = tmp_path / "free"
    assert run("train", "--config", write_config(tmp_path, data, "free.json"), "--out", out,
               "--quiet", "--no-plots") == 0
    return out / "checkpoint_final.json"


@pytest.fixture
def quad_checkpoint(tmp_path):
    out = tmp_path / "quad"
    assert run("train", "--config", write_config(tmp_path, {**SMALL, "train": {
        **SMALL["train"], "epochs": 0}}), "--out", out, "--quiet", "--no-plots") == 0
    return out / "checkpoint_final.json"


def test_simulate_zero_duration_single_row(quad_checkpoint, tmp_path):
    out = tmp_path / "s.csv"
    assert run("simulate", "--checkpoint", quad_checkpoint, "--duration", 0, "--out", out) == 0
    header, rows = read_csv(out)
    assert header == SIM_COLUMNS
    assert len(rows) == 1 and float(rows[0][0]) == 0.0


def test_simulate_free_body_conserves_energy(free_checkpoint, tmp_path):
    out = tmp_path / "s.csv"
    assert run("simulate", "--checkpoint", free_checkpoint, "--init", "random:4",
               "--duration", 5, "--out", out) == 0
    header, rows = read_csv(out)
    e = np.array([float(r[header.index("E_total")]) for r in rows])
    assert len(rows) == 501
    assert np.ptp(e) < 1e-6
    assert (tmp_path / "s.png").exists()


def test_simulate_from_goal_stays_put(quad_checkpoint, tmp_path):
    init = tmp_path / "init.csv"
    init.write_text("R11,R12,R13,R21,R22,R23,R31,R32,R33,p1,p2,p3,P1,P2,P3,P4,P5,P6\n"
                    "1,0,0,0,1,0,0,0,1,0,0,0,0,0,0,0,0,0\n")
    out = tmp_path / "s.csv"
    assert run("simulate", "--checkpoint", quad_checkpoint, "--init", init, "--duration", 1,
               "--out", out, "--no-plots") == 0
    header, rows = read_csv(out)
    q = np.array([[float(x) for x in r[2:8]] for r in rows])
    assert np.abs(q).max() < 1e-12


def test_simulate_bad_inputs_exit_2(quad_checkpoint, tmp_path):
    assert run("simulate", "--checkpoint", tmp_path / "nope.json", "--out", tmp_path / "s.csv") == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert run("simulate", "--checkpoint", tmp_path / "junk.json", "--out", tmp_path / "s.csv") == 2
    assert run("simulate", "--checkpoint", quad_checkpoint, "--init", "random:x",
               "--out", tmp_path / "s.csv") == 2


def test_eval_single_trajectory_matches_simulate(quad_checkpoint, tmp_path):
    ev_out = tmp_path / "e.csv"
    assert run("eval", "--checkpoint", quad_checkpoint, "--n", 1, "--seed", 9, "--times", 4,
               "--out", ev_out) == 0
    sim_out = tmp_path / "s.csv"
    assert run("simulate", "--checkpoint", quad_checkpoint, "--init", "random:9",
               "--duration", 0.3, "--dt", 0.1, "--out", sim_out, "--no-plots") == 0
    mh, means = read_csv(ev_out)
    sh, sim = read_csv(sim_out)
    assert len(means) == len(sim) == 4
    for m, s in zip(means, sim):
        assert float(m[0]) == pytest.approx(float(s[0]), abs=1e-15)
        assert float(m[1]) == pytest.approx(float(s[sh.index("angle_to_goal")]), rel=1e-12, abs=1e-14)
        assert float(m[2]) == pytest.approx(float(s[sh.index("distance_to_goal")]), rel=1e-12)
        assert float(m[5]) == pytest.approx(float(s[sh.index("E_total")]), rel=1e-12)
    _, finals = read_csv(tmp_path / "e_trajectories.csv")
    assert len(finals) == 1
    assert (tmp_path / "e.png").exists()


def test_eval_rerun_identical(quad_checkpoint, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("eval", "--checkpoint", quad_checkpoint, "--n", 5, "--seed", 2,
                   "--out", tmp_path / name, "--no-plots") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_trajectories.csv").read_bytes() == (tmp_path / "b_trajectories.csv").read_bytes()


def test_csv_format(quad_checkpoint, tmp_path):
    out = tmp_path / "s.csv"
    assert run("simulate", "--checkpoint", quad_checkpoint, "--duration", 0.2, "--out", out,
               "--no-plots") == 0
    raw = out.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    _, rows = read_csv(out)
    vals = [x for r in rows for x in r]
    assert all("," not in x for x in vals)
    for x in vals:
        if "." in x and "e" not in x:
            assert float(x) == float(format(float(x), ".17g"))
    # full precision: values survive the text round trip exactly
    p = float(rows[-1][SIM_COLUMNS.index("P1")])
    assert repr(p) == repr(float(format(p, ".17g")))


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_default_passes(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "cost": {**SMALL["cost"], "horizon": 0.2}})
    assert run("gradcheck", "--config", cfg, "--samples", 1) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_coarse_eps_fails(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "cost": {**SMALL["cost"], "horizon": 0.2}})
    assert run("gradcheck", "--config", cfg, "--samples", 1, "--eps", 0.1) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_zero_horizon_passes(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "cost": {**SMALL["cost"], "horizon": 0.0}})
    assert run("gradcheck", "--config", cfg, "--samples", 2) == 0


# ---------------------------------------------------------------------------
# worker count


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("GEONODE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("GEONODE_THREADS")
    assert worker_count() == max(1, os.cpu_count() or 1)
    for bad in ("0", "-2", "many"):
        monkeypatch.setenv("GEONODE_THREADS", bad)
        with pytest.raises(ValueError):
            worker_count()


def test_invalid_thread_env_exits_2(monkeypatch, tmp_path):
    monkeypatch.setenv("GEONODE_THREADS", "zero")
    assert run("train", "--config", write_config(tmp_path, SMALL), "--out", tmp_path / "r",
               "--quiet", "--no-plots") in (1, 2)


def test_chunk_bounds_cover_range():
    for n, k in ((10, 3), (2, 8), (0, 4), (7, 1)):
        b = chunk_bounds(n, k)
        assert sum(e - s for s, e in b) == n
        assert all(b[i][1] == b[i + 1][0] for i in range(len(b) - 1))


def test_controller_kinds_from_config():
    assert isinstance(preset("nn").controller_spec().controller, dyn.NNController)
    assert preset("nn").controller_spec().controller.n_params == (12 * 64 + 64 + 64 + 1) + (18 * 64 + 64 + 64 * 6 + 6)
    assert preset("nn-gravity").controller_spec().gravity_compensation
    assert preset("nn-gravity").body().gravity
