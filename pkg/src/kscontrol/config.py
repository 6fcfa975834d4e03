"""Experiment configuration: a single JSON document, strictly validated.

Unknown keys are rejected everywhere; admissibility constraints of the
control problems (which coupling coefficient must not vanish for which
control channel, when the second initial datum is required) are enforced
here so the CLI can fail with exit code 2 before any numerics run.

See docs/config.md for the documented schema.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlWindow, SystemParams
from .errors import ConfigError

MODELS = (
    "linear-ks-control",
    "linear-elliptic-control",
    "nonlinear-ks",
    "nonlinear-elliptic",
    "eps-parabolic",
)
KS_CHANNEL_MODELS = ("linear-ks-control", "nonlinear-ks")
ELLIPTIC_CHANNEL_MODELS = ("linear-elliptic-control", "nonlinear-elliptic",
                           "eps-parabolic")
NONLINEAR_MODELS = ("nonlinear-ks", "nonlinear-elliptic")

FIELD_KINDS = ("zero", "sine", "bump", "poly-clamped", "random")


def _require_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _number(obj, key, where, *, lo=None, hi=None, lo_open=False, hi_open=False,
            default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ConfigError(f"{where}.{key} is required")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{where}.{key} must be finite")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{where}.{key}={v} below admissible range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{where}.{key}={v} above admissible range")
    return v


def _integer(obj, key, where, *, lo=None, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ConfigError(f"{where}.{key} is required")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where}.{key}={v} must be >= {lo}")
    return v


@dataclass
class FieldSpec:
    kind: str
    amplitude: float = 1.0
    mode: int = 1
    center: float = 0.5
    width: float = 0.1
    normalize: str | None = None   # None, "l2", "neg1", "neg2"

    @classmethod
    def parse(cls, obj, where):
        _require_keys(obj, ("kind", "amplitude", "mode", "center", "width",
                            "normalize"), ("kind",), where)
        kind = obj["kind"]
        if kind not in FIELD_KINDS:
            raise ConfigError(f"{where}.kind must be one of {FIELD_KINDS}")
        normalize = obj.get("normalize")
        if normalize not in (None, "l2", "neg1", "neg2"):
            raise ConfigError(f"{where}.normalize must be null, 'l2', 'neg1' or 'neg2'")
        return cls(
            kind=kind,
            amplitude=_number(obj, "amplitude", where, default=1.0),
            mode=_integer(obj, "mode", where, lo=1, default=1),
            center=_number(obj, "center", where, lo=0.0, hi=1.0, default=0.5),
            width=_number(obj, "width", where, lo=0.0, lo_open=True, default=0.1),
            normalize=normalize,
        )

    def realize(self, grid, rng, realizer=None):
        x = grid.nodes
        if self.kind == "zero":
            return np.zeros(grid.n_interior)
        if self.kind == "sine":
            u = np.sin(self.mode * np.pi * x)
        elif self.kind == "bump":
            u = np.exp(-((x - self.center) / self.width) ** 2)
        elif self.kind == "poly-clamped":
            u = x**2 * (1 - x) ** 2
        elif self.kind == "random":
            u = rng.standard_normal(grid.n_interior)
        else:  # pragma: no cover - guarded in parse
            raise ConfigError(f"unknown field kind {self.kind}")
        if self.normalize is None:
            return self.amplitude * u
        if self.normalize == "l2":
            scale = float(np.sqrt(grid.h * np.sum(u**2)))
        else:
            order = -1 if self.normalize == "neg1" else -2
            scale = realizer.neg_norm(u, order)
        if scale == 0.0:
            raise ConfigError("cannot normalize a zero field")
        return (self.amplitude / scale) * u


@dataclass
class ExperimentConfig:
    model: str
    params: SystemParams
    n_interior: int
    n_steps: int
    window: ControlWindow
    horizon: float
    u0: FieldSpec
    v0: FieldSpec | None
    hum_penalty: float
    hum_cg_tol: float
    hum_cg_maxit: int
    st_q: float
    st_p: float | None
    st_K: object       # float or "fit"
    st_k_max: int
    fp_radius: float
    fp_tol: float
    fp_max_iter: int
    sweep_horizons: list
    sweep_steps_per_unit: int
    eps_ladder: list
    carleman_mu: list
    carleman_lambda: list
    carleman_k: float
    carleman_samples: int
    seed: int
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)


def parse_config(doc):
    """Validate the JSON document and build an ExperimentConfig."""
    top_allowed = ("model", "params", "grid", "window", "horizon", "initial",
                   "hum", "source_term", "fixed_point", "cost_sweep",
                   "eps_sweep", "carleman", "seed", "output_dir")
    _require_keys(doc, top_allowed,
                  ("model", "params", "grid", "window", "horizon", "initial",
                   "seed", "output_dir"), "config")

    model = doc["model"]
    if model not in MODELS:
        raise ConfigError(f"config.model must be one of {MODELS}, got {model!r}")

    pobj = doc["params"]
    _require_keys(pobj, ("gamma1", "gamma2", "a", "b", "c", "eps",
                         "blowup_guard"), ("gamma1", "gamma2", "a", "b", "c"),
                  "params")
    gamma1 = _number(pobj, "gamma1", "params", lo=0.0, lo_open=True)
    gamma2 = _number(pobj, "gamma2", "params", lo=0.0)
    a = _number(pobj, "a", "params")
    b = _number(pobj, "b", "params")
    c = _number(pobj, "c", "params")
    if c <= -np.pi**2:
        raise ConfigError(
            f"params.c={c} violates the admissibility floor c > -pi^2 "
            f"({-np.pi**2:.6f}) for the elliptic operator")
    guard = _number(pobj, "blowup_guard", "params", lo=0.0, lo_open=True,
                    default=1e6)
    eps_raw = pobj.get("eps", "elliptic")
    if model == "eps-parabolic":
        if eps_raw == "elliptic":
            raise ConfigError("eps-parabolic requires params.eps in (0, 1]")
        eps = _number({"eps": eps_raw}, "eps", "params", lo=0.0, hi=1.0,
                      lo_open=True)
    else:
        if eps_raw != "elliptic":
            raise ConfigError(
                f"model {model} runs the elliptic limit; params.eps must be "
                "'elliptic' (or omitted)")
        eps = "elliptic"
    params = SystemParams(gamma1=gamma1, gamma2=gamma2, a=a, b=b, c=c, eps=eps,
                          blowup_guard=guard)

    # admissibility of the control channel
    if model in KS_CHANNEL_MODELS and b == 0.0:
        raise ConfigError(
            f"model {model} drives the control through the fourth-order "
            "equation and needs the coupling b != 0; got b = 0")
    if model in ELLIPTIC_CHANNEL_MODELS and a == 0.0:
        raise ConfigError(
            f"model {model} drives the control through the elliptic/heat "
            "equation and needs the coupling a != 0; got a = 0")

    gobj = doc["grid"]
    _require_keys(gobj, ("n_interior", "n_steps"), ("n_interior", "n_steps"),
                  "grid")
    n_interior = _integer(gobj, "n_interior", "grid", lo=8)
    n_steps = _integer(gobj, "n_steps", "grid", lo=1)

    wobj = doc["window"]
    _require_keys(wobj, ("omega", "target_equation"), ("omega",), "window")
    omega = wobj["omega"]
    if (not isinstance(omega, list) or len(omega) != 2
            or not all(isinstance(v, (int, float)) for v in omega)):
        raise ConfigError("window.omega must be [l1, l2]")
    target = wobj.get("target_equation",
                      "ks" if model in KS_CHANNEL_MODELS else "elliptic")
    expected = "ks" if model in KS_CHANNEL_MODELS else "elliptic"
    if target != expected:
        raise ConfigError(
            f"model {model} controls the {expected} equation; "
            f"window.target_equation={target!r} is inconsistent")
    try:
        window = ControlWindow(omega=(float(omega[0]), float(omega[1])),
                               target_equation=target)
    except ValueError as exc:
        raise ConfigError(f"window: {exc}") from exc

    horizon = _number(doc, "horizon", "config", lo=0.0, lo_open=True, hi=2.0)

    iobj = doc["initial"]
    _require_keys(iobj, ("u0", "v0"), ("u0",), "initial")
    u0 = FieldSpec.parse(iobj["u0"], "initial.u0")
    v0 = None
    if model == "eps-parabolic":
        if "v0" not in iobj:
            raise ConfigError("eps-parabolic carries heat-equation data: "
                              "initial.v0 is required")
        v0 = FieldSpec.parse(iobj["v0"], "initial.v0")
    elif "v0" in iobj:
        raise ConfigError(f"model {model} determines v from u; initial.v0 "
                          "must be omitted")

    hobj = doc.get("hum", {})
    _require_keys(hobj, ("penalty", "cg_tol", "cg_maxit"), (), "hum")
    hum_penalty = _number(hobj, "penalty", "hum", lo=0.0, lo_open=True,
                          default=1e-10)
    hum_cg_tol = _number(hobj, "cg_tol", "hum", lo=0.0, hi=1.0, lo_open=True,
                         hi_open=True, default=1e-8)
    hum_cg_maxit = _integer(hobj, "cg_maxit", "hum", lo=1, default=500)

    sobj = doc.get("source_term", {})
    _require_keys(sobj, ("q", "p", "K", "k_max"), (), "source_term")
    st_q = _number(sobj, "q", "source_term", lo=1.0, hi=float(np.sqrt(2)),
                   lo_open=True, hi_open=True, default=1.2)
    st_p = None
    if "p" in sobj:
        st_p = _number(sobj, "p", "source_term", lo=0.0, lo_open=True)
        if st_p <= st_q**2 / (2 - st_q**2):
            raise ConfigError(
                f"source_term.p={st_p} must exceed q^2/(2-q^2) = "
                f"{st_q**2 / (2 - st_q**2):.6f}")
    st_K = sobj.get("K", "fit")
    if st_K != "fit":
        st_K = _number({"K": st_K}, "K", "source_term", lo=0.0, lo_open=True)
    st_k_max = _integer(sobj, "k_max", "source_term", lo=2, default=8)

    fobj = doc.get("fixed_point", {})
    _require_keys(fobj, ("radius", "tol", "max_iter"), (), "fixed_point")
    fp_radius = _number(fobj, "radius", "fixed_point", lo=0.0, lo_open=True,
                        default=1e-2)
    fp_tol = _number(fobj, "tol", "fixed_point", lo=0.0, lo_open=True,
                     default=1e-10)
    fp_max_iter = _integer(fobj, "max_iter", "fixed_point", lo=1, default=12)

    cobj = doc.get("cost_sweep", {})
    _require_keys(cobj, ("horizons", "steps_per_unit"), (), "cost_sweep")
    sweep_horizons = cobj.get("horizons", [])
    if sweep_horizons:
        if not (isinstance(sweep_horizons, list)
                and all(isinstance(v, (int, float)) for v in sweep_horizons)):
            raise ConfigError("cost_sweep.horizons must be a list of numbers")
        sweep_horizons = [float(v) for v in sweep_horizons]
        if any(not (0.0 < v <= 2.0) for v in sweep_horizons):
            raise ConfigError("cost_sweep.horizons must lie in (0, 2]")
        if any(t0 <= t1 for t0, t1 in zip(sweep_horizons, sweep_horizons[1:])):
            raise ConfigError("cost_sweep.horizons must be strictly decreasing")
    sweep_spu = _integer(cobj, "steps_per_unit", "cost_sweep", lo=1, default=240)

    eobj = doc.get("eps_sweep", {})
    _require_keys(eobj, ("ladder",), (), "eps_sweep")
    eps_ladder = eobj.get("ladder", [1.0, 0.1, 0.01, 0.001])
    if not (isinstance(eps_ladder, list)
            and all(isinstance(v, (int, float)) for v in eps_ladder)):
        raise ConfigError("eps_sweep.ladder must be a list of numbers")
    eps_ladder = [float(v) for v in eps_ladder]
    if any(not (0.0 < v <= 1.0) for v in eps_ladder):
        raise ConfigError("eps_sweep.ladder must lie in (0, 1]")

    kobj = doc.get("carleman", {})
    _require_keys(kobj, ("mu", "lambda", "k", "n_samples"), (), "carleman")
    carleman_mu = kobj.get("mu", [1.0, 2.0, 4.0])
    carleman_lambda = kobj.get("lambda", [1.0])
    for name, arr in (("mu", carleman_mu), ("lambda", carleman_lambda)):
        if not (isinstance(arr, list) and arr
                and all(isinstance(v, (int, float)) and v > 0 for v in arr)):
            raise ConfigError(f"carleman.{name} must be a non-empty list of "
                              "positive numbers")
    carleman_k = _number(kobj, "k", "carleman", lo=1.0, lo_open=True, default=2.0)
    carleman_samples = _integer(kobj, "n_samples", "carleman", lo=1, default=20)

    seed = _integer(doc, "seed", "config", lo=0)
    output_dir = doc["output_dir"]
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("config.output_dir must be a non-empty string")

    return ExperimentConfig(
        model=model, params=params, n_interior=n_interior, n_steps=n_steps,
        window=window, horizon=horizon, u0=u0, v0=v0,
        hum_penalty=hum_penalty, hum_cg_tol=hum_cg_tol,
        hum_cg_maxit=hum_cg_maxit, st_q=st_q, st_p=st_p, st_K=st_K,
        st_k_max=st_k_max, fp_radius=fp_radius, fp_tol=fp_tol,
        fp_max_iter=fp_max_iter, sweep_horizons=[float(v) for v in sweep_horizons],
        sweep_steps_per_unit=sweep_spu, eps_ladder=eps_ladder,
        carleman_mu=[float(v) for v in carleman_mu],
        carleman_lambda=[float(v) for v in carleman_lambda],
        carleman_k=carleman_k, carleman_samples=carleman_samples,
        seed=seed, output_dir=output_dir, raw=doc,
    )


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return parse_config(doc)
