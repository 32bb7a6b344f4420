"""Run configuration (JSON, fixed schema) and checkpoint persistence.

A config file is a JSON object.  Unknown keys anywhere are rejected so a
typo never silently falls back to a default.  Only ``cost.weights`` is
mandatory; everything else has the defaults of the pose-control setup.

Checkpoints are JSON envelopes; float arrays are stored as base64 of their
little-endian float64 bytes so reloads are bit-exact.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .adjoint import CostSpec
from .integrate import SolverConfig
from .lie import Pose, is_rotation
from .training import AdamState, SamplerSpec, TrainConfig, TrainState

FORMAT_VERSION = 1
DEFAULT_GRAVITY = [0.0, 0.0, -9.81]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema: section -> {key: default}; REQUIRED marks mandatory keys

REQUIRED = object()

SCHEMA = {
    "name": "run",
    "controller": {
        "kind": "quadratic",            # quadratic | nn | none
        "init": "default",              # default | zero | random
        "init_seed": 0,
        "init_scale": 1.0,
        "gravity_compensation": False,
    },
    "body": {
        "inertia": None,                # None -> identity
        "mass": 1.0,
        "gravity": False,
        "g_vec": DEFAULT_GRAVITY,
    },
    "cost": {
        "weights": REQUIRED,
        "goal_rotation": None,          # None -> identity
        "goal_translation": [0.0, 0.0, 0.0],
        "horizon": 3.0,
    },
    "sampler": {
        "mean_rotation": None,          # None -> goal rotation
        "mean_translation": None,       # None -> goal translation
        "alpha_max": math.pi,
        "d_max": 1.0,
        "alpha_p_max": 0.03,
        "d_p_max": 1.0,
    },
    "train": {
        "epochs": 1200,
        "batch_size": 2048,
        "eta": 1e-3,
        "gamma": 0.999,
        "seed": 0,
        "restarts": [[1000, 1e-2]],
        "eval_every": 10,
        "eval_n": 256,
        "eval_seed": 20240917,
        "eval_times": 31,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "max_drop_fraction": 0.5,
    },
    "solver": {
        "method": "dopri5",
        "rtol": 1e-5,
        "atol": 1e-4,
        "fixed_step": 1e-3,
        "max_step": None,
    },
}


def _merge(schema, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    unknown = sorted(set(data) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = {}
    for key, default in schema.items():
        where = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, data.get(key, {}), where)
        elif key in data:
            out[key] = data[key]
        elif default is REQUIRED:
            raise ConfigError(where, "missing required key")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _num(d, path, key, lo=None, hi=None, integer=False, strict_lo=False):
    v = d[key]
    where = f"{path}.{key}"
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(where, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(where, "must be finite")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(where, f"must be {'>' if strict_lo else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(where, f"must be <= {hi}")
    return int(v) if integer else float(v)


def _array(v, shape, where):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(where, "expected numbers") from None
    if a.shape != shape:
        raise ConfigError(where, f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(where, "must be finite")
    return a


def _rotation(v, where):
    if v is None:
        return np.eye(3)
    R = _array(v, (3, 3), where)
    if not is_rotation(R, tol=1e-9):
        raise ConfigError(where, "not a rotation matrix")
    return R


@dataclass
class RunConfig:
    """Validated run configuration; ``raw`` is the fully expanded JSON form."""

    raw: dict

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        raw = _merge(SCHEMA, data, "")
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
        return cls.from_json(text)

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def to_json(self):
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def with_overrides(self, **train) -> "RunConfig":
        raw = self.to_dict()
        raw["train"].update(train)
        return RunConfig.from_dict(raw)

    # -- validation and builders ------------------------------------------

    def validate(self):
        r = self.raw
        if not isinstance(r["name"], str):
            raise ConfigError("name", "expected a string")
        c = r["controller"]
        if c["kind"] not in ("quadratic", "nn", "none"):
            raise ConfigError("controller.kind", f"unknown controller kind {c['kind']!r}")
        if c["init"] not in ("default", "zero", "random"):
            raise ConfigError("controller.init", f"unknown init {c['init']!r}")
        _num(c, "controller", "init_seed", 0, integer=True)
        _num(c, "controller", "init_scale", 0)
        if not isinstance(c["gravity_compensation"], bool):
            raise ConfigError("controller.gravity_compensation", "expected true or false")
        self.body()
        self.cost()
        self.sampler()
        self.train_config()
        self.solver()

    def body(self) -> dyn.BodyParams:
        b = self.raw["body"]
        inertia = np.eye(6) if b["inertia"] is None else _array(b["inertia"], (6, 6), "body.inertia")
        mass = _num(b, "body", "mass", 0, strict_lo=True)
        if not isinstance(b["gravity"], bool):
            raise ConfigError("body.gravity", "expected true or false")
        g = _array(b["g_vec"], (3,), "body.g_vec") if b["gravity"] else None
        try:
            return dyn.BodyParams(inertia, mass, g)
        except Exception as exc:
            raise ConfigError("body.inertia", str(exc)) from None

    def goal(self) -> Pose:
        c = self.raw["cost"]
        return Pose(_rotation(c["goal_rotation"], "cost.goal_rotation"),
                    _array(c["goal_translation"], (3,), "cost.goal_translation"))

    def cost(self) -> CostSpec:
        c = self.raw["cost"]
        w = c["weights"]
        if not isinstance(w, list) or len(w) != 9:
            n = len(w) if isinstance(w, list) else "a non-list"
            raise ConfigError("cost.weights", f"need exactly 9 weights w1..w9, got {n}")
        w = _array(w, (9,), "cost.weights")
        if np.any(w < 0):
            raise ConfigError("cost.weights", "weights must be nonnegative")
        return CostSpec(self.goal(), w, _num(c, "cost", "horizon", 0))

    def sampler(self) -> SamplerSpec:
        s = self.raw["sampler"]
        goal = self.goal()
        R = goal.R if s["mean_rotation"] is None else _rotation(s["mean_rotation"], "sampler.mean_rotation")
        p = goal.p if s["mean_translation"] is None else _array(
            s["mean_translation"], (3,), "sampler.mean_translation")
        ranges = {k: _num(s, "sampler", k, 0) for k in ("alpha_max", "d_max", "alpha_p_max", "d_p_max")}
        if ranges["alpha_max"] > math.pi:
            raise ConfigError("sampler.alpha_max", "must be <= pi")
        return SamplerSpec(Pose(R, p), **ranges)

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        p = "train"
        restarts = t["restarts"]
        if not isinstance(restarts, list) or not all(
                isinstance(x, list) and len(x) == 2 for x in restarts):
            raise ConfigError("train.restarts", "expected a list of [epoch, eta] pairs")
        parsed = []
        for i, (e, r) in enumerate(restarts):
            pair = {"epoch": e, "eta": r}
            parsed.append((_num(pair, f"train.restarts[{i}]", "epoch", 0, integer=True),
                           _num(pair, f"train.restarts[{i}]", "eta", 0, strict_lo=True)))
        return TrainConfig(
            epochs=_num(t, p, "epochs", 0, integer=True),
            batch_size=_num(t, p, "batch_size", 1, integer=True),
            eta=_num(t, p, "eta", 0, strict_lo=True),
            gamma=_num(t, p, "gamma", 0, 1, strict_lo=True),
            seed=_num(t, p, "seed", 0, 2 ** 64 - 1, integer=True),
            restarts=tuple(parsed),
            eval_every=_num(t, p, "eval_every", 1, integer=True),
            eval_n=_num(t, p, "eval_n", 1, integer=True),
            eval_seed=_num(t, p, "eval_seed", 0, 2 ** 64 - 1, integer=True),
            eval_times=_num(t, p, "eval_times", 2, integer=True),
            beta1=_num(t, p, "beta1", 0, 1),
            beta2=_num(t, p, "beta2", 0, 1),
            adam_eps=_num(t, p, "adam_eps", 0, strict_lo=True),
            max_drop_fraction=_num(t, p, "max_drop_fraction", 0, 1),
        )

    def solver(self) -> SolverConfig:
        s = self.raw["solver"]
        if s["method"] not in ("dopri5", "rk4"):
            raise ConfigError("solver.method", f"unknown method {s['method']!r}")
        max_step = math.inf if s["max_step"] is None else _num(s, "solver", "max_step", 0, strict_lo=True)
        return SolverConfig(method=s["method"],
                            rtol=_num(s, "solver", "rtol", 0, strict_lo=True),
                            atol=_num(s, "solver", "atol", 0, strict_lo=True),
                            fixed_step=_num(s, "solver", "fixed_step", 0, strict_lo=True),
                            max_step=max_step)

    def controller_spec(self) -> dyn.ControllerSpec:
        c = self.raw["controller"]
        kind = c["kind"]
        if kind == "quadratic":
            ctrl = dyn.QuadraticController()
            if c["init"] == "random":
                rng = np.random.default_rng(c["init_seed"])
                ctrl = dyn.QuadraticController(c["init_scale"] * rng.standard_normal(12))
        elif kind == "nn":
            rng = np.random.default_rng(c["init_seed"])
            ctrl = dyn.NNController.init(rng, zero=c["init"] == "zero", scale=c["init_scale"])
        else:
            ctrl = dyn.NullController()
        return dyn.ControllerSpec(ctrl, c["gravity_compensation"])


# ---------------------------------------------------------------------------
# preset configurations for the three training setups

POSE_WEIGHTS = [4, 20, 5, 1, 1, 1, 1, 1, 1]


def preset(name: str) -> RunConfig:
    """Built-in configs: ``quadratic``, ``nn`` and ``nn-gravity``."""
    if name == "quadratic":
        return RunConfig.from_dict({"name": name, "cost": {"weights": POSE_WEIGHTS}})
    if name == "nn":
        return RunConfig.from_dict({
            "name": name, "controller": {"kind": "nn", "init": "random"},
            "cost": {"weights": [4, 10, 5, 1, 1, 1, 1, 1, 1]},
            "train": {"restarts": [[1000, 1e-3]]}})
    if name == "nn-gravity":
        return RunConfig.from_dict({
            "name": name,
            "controller": {"kind": "nn", "init": "random", "gravity_compensation": True},
            "body": {"gravity": True},
            "cost": {"weights": [4, 4, 5, 5e-4, 1, 1, 1, 1e-4, 1],
                     "goal_translation": [0.0, 0.0, -1.0]},
            "train": {"epochs": 1000, "restarts": []}})
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("quadratic", "nn", "nn-gravity")


# ---------------------------------------------------------------------------
# checkpoints


def encode_array(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").astype(float).reshape(d["shape"])


def _jsonable_rng(state):
    # PCG64 state holds ints beyond 2^53; keep them as decimal strings
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, int) and not isinstance(x, bool):
            return {"int": str(x)}
        return x
    return conv(state)


def _rng_from_json(state):
    def conv(x):
        if isinstance(x, dict):
            if set(x) == {"int"}:
                return int(x["int"])
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(state)


@dataclass
class Checkpoint:
    architecture: dict
    params: np.ndarray
    adam: AdamState
    epoch: int
    rng_state: dict
    config_hash: str
    config: dict

    @classmethod
    def from_state(cls, state: TrainState, ctrl_spec: dyn.ControllerSpec, cfg: RunConfig):
        return cls(ctrl_spec.controller.architecture(), state.params.copy(), state.adam,
                   state.epoch, state.rng_state, cfg.hash(), cfg.to_dict())

    def train_state(self) -> TrainState:
        return TrainState(self.epoch, self.params.copy(), self.adam, self.rng_state)

    def to_json(self) -> str:
        env = {
            "format_version": FORMAT_VERSION,
            "architecture": self.architecture,
            "params": encode_array(self.params),
            "optimizer": {"m": encode_array(self.adam.m), "v": encode_array(self.adam.v),
                          "t": self.adam.t, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                          "eps": self.adam.eps},
            "epoch": self.epoch,
            "rng_state": _jsonable_rng(self.rng_state),
            "config_hash": self.config_hash,
            "config": self.config,
        }
        return json.dumps(env, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "Checkpoint":
        try:
            env = json.loads(text)
            if env.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"unsupported format version {env.get('format_version')!r}")
            params = decode_array(env["params"])
            o = env["optimizer"]
            adam = AdamState(decode_array(o["m"]), decode_array(o["v"]), int(o["t"]),
                             float(o["beta1"]), float(o["beta2"]), float(o["eps"]))
            ck = cls(env["architecture"], params, adam, int(env["epoch"]),
                     _rng_from_json(env["rng_state"]), env["config_hash"], env["config"])
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
        n = ck.architecture.get("n_params")
        if n != ck.params.size or ck.adam.m.size != n or ck.adam.v.size != n:
            raise CheckpointError(
                f"parameter count {ck.params.size} does not match architecture ({n})")
        return ck

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CheckpointError(str(exc)) from None
        return cls.from_json(text)

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def controller_spec(self) -> dyn.ControllerSpec:
        spec = self.run_config().controller_spec()
        if spec.controller.architecture() != self.architecture:
            raise CheckpointError("checkpoint architecture does not match its config")
        return spec.with_params(self.params)


__all__ = [
    "FORMAT_VERSION", "ConfigError", "CheckpointError", "SCHEMA", "RunConfig", "preset",
    "PRESETS", "POSE_WEIGHTS", "encode_array", "decode_array", "Checkpoint",
]
