"""ODE integration on R^n and on Lie groups through exponential charts.

The Lie integrator runs any R^n scheme on chart coordinates,

    qdot = dexp(q)^-1 f~(g_j exp(hat q), t),

and, after every accepted step, moves batch members whose partition value
in the active chart fell below ``SIGMA_MIN`` to the chart with the largest
partition value.  States carry a leading batch axis internally; callers may
pass unbatched elements and get unbatched results back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import atlas
from .atlas import ChartState
from .errors import NumericError, OutOfChartError, RangeError, StiffnessError
from .lie import Pose, ProductElement, group

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_DP_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_DP_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# quartic continuous extension (Shampine)
_DP_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 5.0


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-4
    max_step: float = math.inf
    initial_step: Optional[float] = None
    fixed_step: float = 1e-3          # rk4 only
    min_step: float = 1e-12
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.fixed_step <= 0:
            raise ValueError("fixed_step must be positive")


# ---------------------------------------------------------------------------
# shared stepping machinery


class _Guard:
    """Wraps a rhs so non-finite rows freeze instead of poisoning the batch."""

    def __init__(self, f, enabled, nrows):
        self.f = f
        self.enabled = enabled
        self.failed = np.zeros(nrows, dtype=bool)
        self.nevals = 0

    def __call__(self, t, x):
        self.nevals += 1
        with np.errstate(all="ignore"):
            out = np.asarray(self.f(t, x), dtype=float)
        bad = ~np.isfinite(out).reshape(out.shape[0], -1).all(axis=1)
        if self.enabled:
            if bad.any():
                self.failed |= bad
            if self.failed.any():
                out = np.where(self.failed[:, None], 0.0, np.nan_to_num(out))
        elif bad.any():
            raise NumericError(f"non-finite right-hand side at t={t:.6g}",
                               dump={"t": t, "x": x.copy()})
        return out


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _initial_step(f, t0, x0, f0, direction, cfg, t_span):
    if cfg.initial_step is not None:
        return min(cfg.initial_step, cfg.max_step, t_span)
    scale = cfg.atol + np.abs(x0) * cfg.rtol
    d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, t_span)
    f1 = f(t0 + direction * h0, x0 + direction * h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, cfg.max_step, t_span)


def _dopri_stages(f, t, x, h, k1):
    K = [k1]
    for i in range(1, 6):
        dx = sum(a * k for a, k in zip(_DP_A[i], K))
        K.append(f(t + _DP_C[i] * h, x + h * dx))
    x_new = x + h * sum(b * k for b, k in zip(_DP_B, K))
    K.append(f(t + h, x_new))
    err = h * sum(e * k for e, k in zip(_DP_E, K))
    return x_new, err, K


def _rk4(f, t, x, h, k1):
    k2 = f(t + h / 2, x + h / 2 * k1)
    k3 = f(t + h / 2, x + h / 2 * k2)
    k4 = f(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


class _Step(NamedTuple):
    t0: float
    h: float
    x0: np.ndarray
    x1: np.ndarray
    f0: np.ndarray
    f1: np.ndarray
    K: Optional[list]


def _drive(f, x0, t0, t1, cfg, on_accept=None, endpoint_ok=None):
    """Integrate x' = f(t, x) from t0 to t1 (either direction).

    ``on_accept(step)`` may return a replacement (x, f) pair for the start of
    the next step; it is how chart switches are applied.  With dopri5, a step
    whose endpoint fails ``endpoint_ok`` is retried at half the size.  Yields
    accepted steps.
    """
    span = abs(t1 - t0)
    direction = 1.0 if t1 >= t0 else -1.0
    x = x0
    if span == 0.0:
        return
    fx = f(t0, x)
    if cfg.method == "rk4":
        n = max(1, int(math.ceil(span / cfg.fixed_step - 1e-9)))
        h = (t1 - t0) / n
        for i in range(n):
            ta = t0 + i * h
            tb = t1 if i == n - 1 else t0 + (i + 1) * h
            x_new = _rk4(f, ta, x, tb - ta, fx)
            f_new = f(tb, x_new)
            step = _Step(ta, tb - ta, x, x_new, fx, f_new, None)
            yield step
            x, fx = x_new, f_new
            if on_accept is not None:
                repl = on_accept(step)
                if repl is not None:
                    x, fx = repl
        return

    t = t0
    h_abs = _initial_step(f, t0, x, fx, direction, cfg, span)
    nsteps = 0
    while direction * (t1 - t) > 0:
        if nsteps >= cfg.max_steps:
            raise StiffnessError(f"exceeded {cfg.max_steps} steps")
        h_abs = min(h_abs, cfg.max_step)
        remaining = abs(t1 - t)
        last = h_abs >= remaining * (1 - 1e-12)
        if last:
            h_abs = remaining
        if h_abs < cfg.min_step:
            raise StiffnessError(f"step size {h_abs:.3g} below minimum at t={t:.6g}")
        h = direction * h_abs
        try:
            x_new, err, K = _dopri_stages(f, t, x, h, fx)
        except OutOfChartError:
            h_abs *= 0.5
            continue
        if endpoint_ok is not None and not endpoint_ok(x_new):
            h_abs *= 0.5
            continue
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        ratio = float(np.max(np.abs(err) / scale)) if err.size else 0.0
        if not np.isfinite(ratio):
            raise NumericError(f"non-finite error estimate at t={t:.6g}",
                               dump={"t": t, "x": x.copy()})
        if ratio <= 1.0:
            t_new = t1 if last else t + h
            step = _Step(t, t_new - t, x, x_new, fx, K[-1], K)
            yield step
            nsteps += 1
            t, x, fx = t_new, x_new, K[-1]
            if on_accept is not None:
                repl = on_accept(step)
                if repl is not None:
                    x, fx = repl
            factor = MAX_FACTOR if ratio == 0 else min(MAX_FACTOR, SAFETY * ratio ** -0.2)
            h_abs *= factor
        else:
            h_abs *= max(MIN_FACTOR, SAFETY * ratio ** -0.2)


def _hermite(step, s):
    """Cubic Hermite interpolant on an accepted step at fraction s."""
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * step.x0 + (s3 - 2 * s2 + s) * step.h * step.f0
            + (-2 * s3 + 3 * s2) * step.x1 + (s3 - s2) * step.h * step.f1)


# ---------------------------------------------------------------------------
# R^n


@dataclass
class RnSolution:
    t: np.ndarray
    x: np.ndarray
    method: str
    failed: np.ndarray
    nfev: int
    _steps: list = field(repr=False, default_factory=list)

    def sol(self, t):
        """Dense output: DP quartic extension for dopri5, cubic Hermite for rk4."""
        ts = self.t
        lo, hi = min(ts[0], ts[-1]), max(ts[0], ts[-1])
        if not (lo - 1e-12 <= t <= hi + 1e-12):
            raise RangeError(f"t={t} outside [{lo}, {hi}]")
        if len(self._steps) == 0:
            return self.x[0].copy()
        forward = ts[-1] >= ts[0]
        key = ts if forward else -ts
        k = int(np.searchsorted(key, t if forward else -t, side="right")) - 1
        k = min(max(k, 0), len(self._steps) - 1)
        st = self._steps[k]
        s = (t - st.t0) / st.h
        if st.K is None:
            return _hermite(st, s)
        powers = np.array([s, s * s, s**3, s**4])
        coeff = _DP_P @ powers
        return st.x0 + st.h * sum(c * k_ for c, k_ in zip(coeff, st.K))


def integrate_rn(rhs: Callable, x0, t0: float, t1: float, cfg: SolverConfig = SolverConfig(),
                 guard: bool = False) -> RnSolution:
    """Solve x' = rhs(t, x) on [t0, t1] (t1 < t0 integrates backwards).

    With ``guard`` set, x0 must be 2-D (batch, n); rows whose derivative turns
    non-finite are frozen and flagged in ``failed`` rather than raising.
    """
    x0 = np.asarray(x0, dtype=float)
    rows = x0.shape[0] if (guard and x0.ndim == 2) else 1
    if guard and x0.ndim != 2:
        raise ValueError("guard=True needs a (batch, n) initial state")
    f = _Guard(rhs, guard, rows)
    ts, xs, steps = [t0], [x0.copy()], []
    for st in _drive(f, x0, t0, t1, cfg):
        steps.append(st)
        ts.append(st.t0 + st.h)
        xs.append(st.x1.copy())
    return RnSolution(np.array(ts), np.array(xs), cfg.method, f.failed, f.nevals, steps)


# ---------------------------------------------------------------------------
# Lie groups


def tree_map(fn, g):
    """Apply ``fn`` to every array leaf of a (nested) group element."""
    if isinstance(g, (Pose, ProductElement)):
        return type(g)(*(tree_map(fn, x) for x in g))
    return fn(np.asarray(g, dtype=float))


def _batched_like(g, G):
    ent = G.entries(g)
    return ent.ndim > 1


def chart_rhs(field_fn, state: ChartState, t, tag):
    """qdot = dexp(q)^-1 f~(from_chart(q, j), t)."""
    G = group(tag)
    _check_in_chart(state.q, G)
    g = atlas.from_chart(state.q, state.chart, G)
    xi = np.asarray(field_fn(t, g), dtype=float)
    return _dexp_solve(G, state.q, xi)


def _check_in_chart(q, G):
    if not G.name.startswith("Vec"):
        theta = np.linalg.norm(q[..., :3], axis=-1)
        # exp stays a local diffeomorphism until dexp degenerates at 2 pi
        if np.any(theta >= 2 * math.pi - 1e-3):
            raise OutOfChartError("chart coordinates reached the dexp singularity")


def _dexp_solve(G, q, xi):
    return G.dexp_solve(q, xi)


@dataclass
class ChartTrajectory:
    group: object
    t: np.ndarray                 # (N+1,)
    chart: np.ndarray             # (N+1, B) chart after any switch at that time
    q: np.ndarray                 # (N+1, B, n)
    aux: Optional[np.ndarray]     # (N+1, B, m)
    step_chart: np.ndarray        # (N, B) chart used during each step
    q0: np.ndarray                # (N, B, n) step start in step chart
    q1: np.ndarray                # (N, B, n) step end in step chart (pre-switch)
    f0: np.ndarray
    f1: np.ndarray
    switch_events: list           # (t, member, old, new)
    failed: np.ndarray            # (B,)
    batched: bool = True
    nfev: int = 0

    @property
    def samples(self):
        return [(float(t), self.state(k)) for k, t in enumerate(self.t)]

    def _out(self, chart, q):
        if self.batched:
            return ChartState(chart, q)
        return ChartState(chart[0], q[0])

    def state(self, k) -> ChartState:
        return self._out(self.chart[k], self.q[k])

    def element(self, k):
        st = ChartState(self.chart[k], self.q[k])
        return self._unbatch(atlas.from_chart(st.q, st.chart, self.group))

    def final_element(self):
        return self.element(len(self.t) - 1)

    def aux_at(self, k):
        if self.aux is None:
            return None
        return self.aux[k] if self.batched else self.aux[k][0]

    def _unbatch(self, g):
        return g if self.batched else tree_map(lambda a: a[0], g)

    def _locate(self, t):
        ts = self.t
        if not (ts[0] - 1e-12 <= t <= ts[-1] + 1e-12):
            raise RangeError(f"t={t} outside trajectory span [{ts[0]}, {ts[-1]}]")
        k = int(np.searchsorted(ts, t, side="right")) - 1
        return min(max(k, 0), len(ts) - 1)

    def dense_eval(self, t) -> ChartState:
        k = self._locate(t)
        n = len(self.t) - 1
        if k >= n or t == self.t[k]:
            return self._out(self.chart[k].copy(), self.q[k].copy())
        h = self.t[k + 1] - self.t[k]
        s = (t - self.t[k]) / h
        s2, s3 = s * s, s * s * s
        q = ((2 * s3 - 3 * s2 + 1) * self.q0[k] + (s3 - 2 * s2 + s) * h * self.f0[k]
             + (-2 * s3 + 3 * s2) * self.q1[k] + (s3 - s2) * h * self.f1[k])
        return self._out(self.step_chart[k].copy(), q)

    def dense_element(self, t):
        st = self.dense_eval(t)
        return atlas.from_chart(st.q, st.chart, self.group)


def lie_integrate(field_fn: Callable, g0, t0: float, t1: float,
                  cfg: SolverConfig = SolverConfig(), tag=None, aux0=None,
                  initial_chart=None, guard: bool = False) -> ChartTrajectory:
    """Integrate g' = g hat(f~(t, g)) with chart switching.

    ``field_fn(t, g)`` returns f~ with shape (B, n); if ``aux0`` is given it
    must return ``(f~, aux_dot)`` and the Euclidean auxiliary state (for
    instance a running-cost quadrature) is integrated alongside.
    """
    G = group(tag) if tag is not None else _guess_group(g0)
    batched = _batched_like(g0, G)
    if not batched:
        g0 = tree_map(lambda a: a[None], g0)
        if aux0 is not None:
            aux0 = np.asarray(aux0, dtype=float)[None]
    n = G.dim
    if initial_chart is None:
        chart = np.asarray(atlas.select_chart(g0, G), dtype=int).reshape(-1)
    else:
        chart = np.broadcast_to(np.asarray(initial_chart, dtype=int),
                                G.entries(g0).shape[:1]).copy()
    q0 = atlas.to_chart(g0, chart, G)
    B = q0.shape[0]
    has_aux = aux0 is not None
    m = np.asarray(aux0).shape[-1] if has_aux else 0
    x0 = np.concatenate([q0, np.asarray(aux0, dtype=float)], axis=-1) if has_aux else q0
    cur = {"chart": chart}

    def rhs(t, x):
        q = x[:, :n]
        _check_in_chart(q, G)
        g = atlas.from_chart(q, cur["chart"], G)
        out = field_fn(t, g)
        if has_aux:
            xi, aux_dot = out
            qd = _dexp_solve(G, q, np.asarray(xi, dtype=float))
            return np.concatenate([qd, np.asarray(aux_dot, dtype=float).reshape(B, m)], axis=-1)
        return _dexp_solve(G, q, np.asarray(out, dtype=float))

    f = _Guard(rhs, guard, B)
    ts, charts, qs, auxs = [t0], [chart.copy()], [q0.copy()], []
    if has_aux:
        auxs.append(np.asarray(aux0, dtype=float).copy())
    step_chart, Q0, Q1, F0, F1, events = [], [], [], [], [], []

    def on_accept(step):
        t_end = step.t0 + step.h
        q_end = step.x1[:, :n]
        step_chart.append(cur["chart"].copy())
        Q0.append(step.x0[:, :n])
        Q1.append(q_end)
        F0.append(step.f0[:, :n])
        F1.append(step.f1[:, :n])
        new_q = q_end
        replacement = None
        if atlas.n_charts(G) > 1:
            g_end = atlas.from_chart(q_end, cur["chart"], G)
            sig = atlas.partition(g_end, G)
            active = np.take_along_axis(sig, cur["chart"][:, None], axis=-1)[:, 0]
            # fixed-step rk4 can still carry q past the principal log domain
            # without sigma dropping; re-chart those too
            wrapped = np.linalg.norm(q_end[:, :3], axis=-1) > np.pi - 1e-6
            switch = ((active < atlas.SIGMA_MIN) | wrapped) & ~f.failed
            if switch.any():
                best = np.argmax(sig, axis=-1)
                if np.any(sig[switch, best[switch]] <= 0):
                    raise RuntimeError("no chart contains the current state")
                idx = np.nonzero(switch)[0]
                sub = tree_map(lambda a: a[idx], g_end)
                new_q = q_end.copy()
                new_q[idx] = atlas.to_chart(sub, best[idx], G)
                for i in idx:
                    events.append((t_end, int(i), int(cur["chart"][i]), int(best[i])))
                cur["chart"] = np.where(switch, best, cur["chart"])
                x_new = step.x1.copy()
                x_new[:, :n] = new_q
                replacement = (x_new, f(t_end, x_new))
        ts.append(t_end)
        charts.append(cur["chart"].copy())
        qs.append(new_q.copy())
        if has_aux:
            auxs.append(step.x1[:, n:].copy())
        return replacement

    def endpoint_ok(x):
        # keep chart coordinates inside the principal log domain so the
        # partition-of-unity test sees every boundary crossing
        if atlas.n_charts(G) == 1:
            return True
        th = np.linalg.norm(x[:, :3], axis=-1)
        return bool(np.all((th < np.pi - 1e-6) | f.failed))

    for _ in _drive(f, x0, t0, t1, cfg, on_accept, endpoint_ok):
        pass

    def stack(lst, shape):
        return np.array(lst) if lst else np.zeros(shape)

    return ChartTrajectory(
        group=G, t=np.array(ts), chart=np.array(charts), q=np.array(qs),
        aux=np.array(auxs) if has_aux else None,
        step_chart=stack(step_chart, (0, B)).astype(int),
        q0=stack(Q0, (0, B, n)), q1=stack(Q1, (0, B, n)),
        f0=stack(F0, (0, B, n)), f1=stack(F1, (0, B, n)),
        switch_events=events, failed=f.failed.copy(), batched=batched, nfev=f.nevals,
    )


def _guess_group(g):
    from .lie import _infer
    return _infer(g)
