"""Command-line entry points: train, simulate, eval, gradcheck.

Exit codes: 0 success, 1 failed check or aborted run, 2 invalid input
(config, checkpoint, init file), 3 resume/config mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import plots
from .config import Checkpoint, CheckpointError, ConfigError, PRESETS, RunConfig, preset
from .errors import GeonodeError
from .gradcheck import gradcheck
from .integrate import SolverConfig
from .lie import Pose, ProductElement, is_rotation, rotation_angle
from .training import (EvalResult, TrainingAborted, energies, evaluate, sample_initial,
                        simulate, train)

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_MISMATCH = 0, 1, 2, 3

METRIC_COLUMNS = ["epoch", "loss", "terminal_loss", "integral_loss", "mean_final_angle",
                  "mean_final_distance", "wall_time"]
SIM_COLUMNS = (["t", "chart_index"] + [f"q{i}" for i in range(1, 7)]
               + [f"P{i}" for i in range(1, 7)]
               + ["angle_to_goal", "distance_to_goal", "E_kin", "E_pot", "E_total"]
               + [f"W{i}" for i in range(1, 7)])

log = logging.getLogger("geonode")


class UsageError(Exception):
    """Bad input that maps to exit code 2."""


def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _load_config(args):
    if args.config in PRESETS:
        return preset(args.config)
    return RunConfig.load(args.config)


def _train_hash(cfg: RunConfig) -> str:
    # extending a run with more epochs keeps the same identity
    raw = cfg.to_dict()
    raw["train"]["epochs"] = None
    return RunConfig(raw).hash()


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_config(args)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.controller_spec()
    tcfg = cfg.train_config()
    state, rows = None, []
    if args.resume:
        ck = Checkpoint.load(args.resume)
        if ck.config_hash != _train_hash(cfg):
            print("error: checkpoint was written for a different configuration", file=sys.stderr)
            return EXIT_MISMATCH
        if ck.architecture != spec.controller.architecture():
            print("error: checkpoint architecture does not match the configuration", file=sys.stderr)
            return EXIT_MISMATCH
        state = ck.train_state()
        spec = spec.with_params(ck.params)
        metrics = out / "metrics.csv"
        if metrics.exists():
            _, old = read_csv(metrics)
            rows = [r for r in old if int(r[0]) <= ck.epoch]
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8", newline="\n")

    history = [[float(x) if i else int(x) for i, x in enumerate(r)] for r in rows]
    h = _train_hash(cfg)

    def save(st, name):
        ck = Checkpoint.from_state(st, spec, cfg)
        ck.config_hash = h
        ck.save(out / name)

    def on_epoch(rec, st, ev):
        history.append([rec.epoch, rec.loss, rec.terminal_loss, rec.integral_loss,
                        rec.mean_final_angle, rec.mean_final_distance, rec.wall_time])
        write_csv(out / "metrics.csv", METRIC_COLUMNS, history)
        if ev is not None:
            save(st, f"checkpoint_{rec.epoch:06d}.json")
        if not args.quiet:
            print(f"epoch {rec.epoch:5d}  loss {rec.loss:+.6f}  angle {rec.mean_final_angle:.4f}"
                  f"  dist {rec.mean_final_distance:.4f}", flush=True)

    try:
        res = train(tcfg, spec, cfg.cost(), cfg.body(), cfg.sampler(), cfg.solver(),
                    state=state, on_epoch=on_epoch)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    save(res.state, "checkpoint_final.json")
    write_csv(out / "metrics.csv", METRIC_COLUMNS, history)
    if res.evals:
        eval_rows = [(e, ev.mean_final_angle, ev.mean_final_distance) for e, ev in res.evals]
        write_csv(out / "eval_history.csv", ["epoch", "mean_final_angle", "mean_final_distance"],
                  eval_rows)
    if not args.no_plots and history:
        a = np.array(history, dtype=float)
        ok = np.isfinite(a[:, 4])
        plots.training_progress(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[ok, 0], a[ok, 4], a[ok, 5],
                                out / "training_progress.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _parse_init(spec_str, cfg: RunConfig):
    """``random:SEED`` or a CSV with columns R11..R33, p1..p3, P1..P6 (first data row)."""
    if spec_str.startswith("random:"):
        try:
            seed = int(spec_str.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --init {spec_str!r}: expected random:SEED") from None
        return sample_initial(cfg.sampler(), np.random.default_rng(seed), 1)
    try:
        _, rows = read_csv(spec_str)
        vals = np.array([float(x) for x in rows[0]])
    except (OSError, StopIteration, IndexError, ValueError) as exc:
        raise UsageError(f"cannot read initial state from {spec_str!r}: {exc}") from None
    if vals.shape != (18,):
        raise UsageError("initial-state file needs 18 columns: R (row-major), p, P")
    R = vals[:9].reshape(3, 3)
    if not is_rotation(R, tol=1e-8):
        raise UsageError("initial rotation is not a rotation matrix")
    return ProductElement(Pose(R[None], vals[9:12][None]), vals[12:][None])


def simulation_rows(spec, body, cost, g0, duration, solver, dt):
    traj = simulate(spec, body, g0, duration, solver)
    n = max(1, int(round(duration / dt))) if duration > 0 else 0
    ts = np.linspace(0.0, duration, n + 1)
    RF, pF = cost.goal
    rows = []
    for t in ts:
        st = traj.dense_eval(t)
        g = traj.dense_element(t)
        ek, ep = energies(spec, body, g.pose, g.mom)
        W = dyn.control_wrench(spec, body, g.pose, g.mom)
        ang = rotation_angle(RF.T @ g.pose.R[0])
        dist = np.linalg.norm(g.pose.p[0] - pF)
        rows.append([float(t), int(st.chart[0]), *st.q[0, :6], *g.mom[0], float(ang), float(dist),
                     float(ek[0]), float(ep[0]), float(ek[0] + ep[0]), *W[0]])
    return rows, bool(traj.failed[0])


def cmd_simulate(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.run_config()
    spec = ck.controller_spec()
    g0 = _parse_init(args.init, cfg)
    if not args.duration >= 0:
        raise UsageError("--duration must be nonnegative")
    rows, failed = simulation_rows(spec, cfg.body(), cfg.cost(), g0, args.duration, cfg.solver(),
                                   args.dt)
    write_csv(args.out, SIM_COLUMNS, rows)
    if not args.no_plots and len(rows) > 1:
        a = np.array(rows)
        plots.single_trajectory(a[:, 0], a[:, 14], a[:, 15], a[:, 16], a[:, 17], a[:, 19:25],
                                Path(args.out).with_suffix(".png"))
    if failed:
        print("error: trajectory failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def eval_tables(ev: EvalResult):
    """(time-binned means, per-trajectory finals) as CSV row lists."""
    ok = ~ev.failed
    ek, ep = ev.mean_e_kin, ev.mean_e_pot
    e0 = ek[0] + ep[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        fk, fp = ek / e0, ep / e0
    means = [[t, a, d, k, p, k + p, x, y] for t, a, d, k, p, x, y in
             zip(ev.t, ev.mean_angle, ev.mean_distance, ek, ep, fk, fp)]
    finals = []
    for i in range(ev.angle.shape[0]):
        finals.append([i, int(ev.failed[i]), ev.angle[i, 0], ev.angle[i, -1], ev.distance[i, 0],
                       ev.distance[i, -1], ev.e_kin[i, -1], ev.e_pot[i, -1],
                       ev.e_kin[i, 0] + ev.e_pot[i, 0]])
    return means, finals, int(ok.sum())


MEAN_COLUMNS = ["t", "mean_angle", "mean_distance", "mean_E_kin", "mean_E_pot", "mean_E_total",
                "E_kin_fraction", "E_pot_fraction"]
FINAL_COLUMNS = ["trajectory", "failed", "initial_angle", "final_angle", "initial_distance",
                 "final_distance", "final_E_kin", "final_E_pot", "initial_E_total"]


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.run_config()
    spec = ck.controller_spec()
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    g0 = sample_initial(cfg.sampler(), np.random.default_rng(args.seed), args.n)
    ev = evaluate(spec, cfg.body(), cfg.cost(), g0, cfg.solver(), args.times)
    means, finals, n_ok = eval_tables(ev)
    out = Path(args.out)
    write_csv(out, MEAN_COLUMNS, means)
    write_csv(out.with_name(out.stem + "_trajectories.csv"), FINAL_COLUMNS, finals)
    if not args.no_plots:
        plots.trajectory_bundle(ev.t, ev.angle, ev.distance, ev.e_kin, ev.e_pot, ev.failed,
                                out.with_suffix(".png"))
    print(f"trajectories {args.n}  failed {args.n - n_ok}  mean final angle "
          f"{ev.mean_final_angle:.6g}  mean final distance {ev.mean_final_distance:.6g}")
    return EXIT_OK if n_ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# gradcheck


def random_controllers(cfg: RunConfig, rng, n):
    """n random parameter draws for the configured controller family."""
    kind = cfg.raw["controller"]["kind"]
    if kind == "quadratic":
        return [dyn.QuadraticController(0.5 * rng.standard_normal(12)) for _ in range(n)]
    if kind == "nn":
        return [dyn.NNController.init(rng) for _ in range(n)]
    return [dyn.NullController() for _ in range(n)]


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    rng = np.random.default_rng(args.seed)
    spec = cfg.controller_spec()
    g0 = sample_initial(cfg.sampler(), rng, args.samples)
    ctrls = random_controllers(cfg, rng, args.samples)
    solver = cfg.solver()
    if args.solver == "rk4":
        # adaptive step selection is not differentiable; the check needs a fixed grid
        solver = SolverConfig(method="rk4", fixed_step=solver.fixed_step)
    rep = gradcheck(cfg.cost(), spec, cfg.body(), g0, solver, eps=args.eps,
                    controllers=ctrls)
    for line in rep.lines():
        print(line)
    print("PASS" if rep.passed else "FAIL")
    if not rep.passed:
        print("block        max_err (threshold %.1e)" % rep.threshold, file=sys.stderr)
        for line in rep.lines():
            print(line, file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="geonode", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimise a controller")
    t.add_argument("--config", required=True, help=f"JSON file or preset ({', '.join(PRESETS)})")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--resume")
    t.add_argument("--no-plots", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="closed-loop trajectory to CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--init", default="random:0", help="random:SEED or an 18-column CSV")
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="metrics over sampled trajectories")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--times", type=int, default=31, help="time samples per trajectory")
    e.add_argument("--out", required=True)
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="adjoint vs finite differences")
    g.add_argument("--config", required=True)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--samples", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--solver", choices=["rk4", "config"], default="rk4",
                   help="fixed-step rk4 (default) or the configured solver")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GeonodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
