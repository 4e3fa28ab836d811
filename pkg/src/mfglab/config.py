"""Run configuration: TOML parsing, defaults and validation.

Every section except ``[model]`` is optional.  Unknown keys are errors, and
all violations are collected before anything is reported.
"""
import hashlib
import importlib
import json
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigurationError

LQ_KEYS = ("A", "B", "C", "D", "C0", "D0", "Q", "Qbar", "S", "P", "Pbar",
           "QT", "QbarT", "ST", "c1", "c2", "d")
_REQUIRED_LQ = ("A", "B", "Q", "P")


def _num(lo=None, hi=None, integer=False, lo_open=False):
    def check(name, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return f"{name} must be a number"
        if integer and int(v) != v:
            return f"{name} must be an integer"
        if not np.isfinite(v):
            return f"{name} must be finite"
        if lo is not None and (v <= lo if lo_open else v < lo):
            return f"{name} must be {'>' if lo_open else '>='} {lo:g}"
        if hi is not None and v > hi:
            return f"{name} must be <= {hi:g}"
        return None
    return check


def _bool(name, v):
    return None if isinstance(v, bool) else f"{name} must be true or false"


def _choice(*options):
    def check(name, v):
        return None if v in options else f"{name} must be one of {list(options)}"
    return check


def _int_list(name, v):
    if not isinstance(v, list) or not v:
        return f"{name} must be a non-empty list of integers"
    if any(isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in v):
        return f"{name} entries must be integers >= 1"
    return None


def _text(name, v):
    return None if isinstance(v, str) and v else f"{name} must be a non-empty string"


def _formats(name, v):
    if not isinstance(v, list) or not v or any(x != "csv" for x in v):
        return f"{name} must be a list of supported formats ['csv']"
    return None


# section -> key -> (default, checker)
SCHEMA = {
    "grid": {"T": (1.0, _num(0, lo_open=True)), "K": (100, _num(1, integer=True))},
    "initial": {"mean": (0.0, None), "cov": (None, None)},
    "monte_carlo": {
        "worlds": (64, _num(1, integer=True)),
        "particles": (1024, _num(1, integer=True)),
        "repetitions": (256, _num(1, 512, integer=True)),
        "M_aux": (4096, _num(1, integer=True)),
    },
    "solver": {
        "damping": (0.5, _num(0, 1, lo_open=True)),
        "picard_tol": (1e-6, _num(0, lo_open=True)),
        "foc_tol": (1e-6, _num(0, lo_open=True)),
        "max_picard": (200, _num(1, integer=True)),
        "basis": ("affine", _choice("affine", "quadratic")),
        "ridge": (1e-8, _num(0, lo_open=True)),
        "adaptive_damping": (True, _bool),
    },
    "continuation": {
        "enabled": (True, _bool),
        "eta0": (0.25, _num(0, 1, lo_open=True)),
        "min_step": (1e-4, _num(0, 1, lo_open=True)),
    },
    "monotonicity": {
        "trials": (10000, _num(1, integer=True)),
        "atoms_per_cloud": (0, _num(0, integer=True)),
    },
    "experiment": {"N": ([4, 8, 16, 32], _int_list), "seed": (0, _num(0, 2 ** 64 - 1,
                                                                      integer=True))},
    "output": {"dir": ("out", _text), "formats": (["csv"], _formats)},
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``sections`` holds plain values with defaults filled."""

    model: dict
    sections: dict
    source: str = ""

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def seed(self):
        return int(self.sections["experiment"]["seed"])

    def with_seed(self, seed):
        sec = {k: dict(v) for k, v in self.sections.items()}
        sec["experiment"]["seed"] = int(seed)
        return RunConfig(self.model, sec, self.source)

    def to_dict(self):
        return {"model": self.model, **self.sections}

    def digest(self):
        """SHA-256 of the resolved configuration (canonical JSON)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # builders -------------------------------------------------------------
    def grid(self):
        from .noise import make_time_grid
        g = self.sections["grid"]
        return make_time_grid(float(g["T"]), int(g["K"]))

    def initial_law(self):
        from .noise import InitialLaw
        ini = self.sections["initial"]
        mean = np.atleast_1d(np.asarray(ini["mean"], dtype=float))
        if ini["cov"] is None:
            return InitialLaw.point(mean)
        cov = np.asarray(ini["cov"], dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(mean.size)
        return InitialLaw.gaussian(mean, cov)

    def lq(self):
        from .model import LQCoefficients
        kw = {k: v for k, v in self.model.items() if k in LQ_KEYS}
        return LQCoefficients.build(**kw)

    def coefficients(self, require_valid=True):
        from .model import lq_coefficients
        if self.model["type"] == "custom":
            mod, _, fn = self.model["factory"].partition(":")
            return getattr(importlib.import_module(mod), fn)()
        return lq_coefficients(self.lq(), self.grid(), require_valid=require_valid)

    def mkv_config(self, worlds=None, particles=None):
        from .mkv import ContinuationConfig, MkvConfig
        s, mc, cc = self.sections["solver"], self.sections["monte_carlo"], \
            self.sections["continuation"]
        return MkvConfig(self.grid(), int(worlds or mc["worlds"]), int(particles or mc["particles"]),
                         damping=s["damping"], picard_tol=s["picard_tol"],
                         max_picard=int(s["max_picard"]),
                         continuation=ContinuationConfig(cc["enabled"], cc["eta0"], cc["min_step"]),
                         basis=s["basis"], ridge=s["ridge"],
                         adaptive_damping=s["adaptive_damping"])

    def ne_config(self):
        from .nplayer import NeConfig
        s = self.sections["solver"]
        return NeConfig(self.grid(), int(self.sections["monte_carlo"]["repetitions"]),
                        damping=s["damping"], picard_tol=s["picard_tol"],
                        max_picard=int(s["max_picard"]), foc_tol=s["foc_tol"],
                        basis=s["basis"], ridge=s["ridge"],
                        adaptive_damping=s["adaptive_damping"])


def _check_model(model, errors):
    if not isinstance(model, dict):
        errors.append("model must be a table")
        return {}
    out = dict(model)
    kind = out.setdefault("type", "lq")
    if kind == "custom":
        allowed = {"type", "factory"}
        if not isinstance(out.get("factory"), str) or ":" not in out.get("factory", ""):
            errors.append("model.factory must be 'module:function' for a custom model")
    elif kind == "lq":
        allowed = {"type", *LQ_KEYS}
        for key in _REQUIRED_LQ:
            if key not in out:
                errors.append(f"model.{key} is required")
        for key in LQ_KEYS:
            if key in out and not _numeric_tree(out[key]):
                errors.append(f"model.{key} must be a number or a nested list of numbers")
        if "d" in out and _num(1, integer=True)("model.d", out["d"]):
            errors.append("model.d must be an integer >= 1")
    else:
        errors.append(f"model.type must be 'lq' or 'custom', got {kind!r}")
        allowed = set(out)
    for key in out:
        if key not in allowed:
            errors.append(f"unknown key 'model.{key}'")
    return out


def _numeric_tree(v):
    if isinstance(v, bool):
        return False
    if isinstance(v, (int, float)):
        return bool(np.isfinite(v))
    if isinstance(v, list) and v:
        return all(_numeric_tree(x) for x in v)
    return False


def validate(raw, source=""):
    """Validate a parsed mapping and fill defaults.

    Raises
    ------
    ConfigurationError
        With ``violations`` listing every problem found.
    """
    errors = []
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a table", ["configuration must be a table"])
    for key in raw:
        if key != "model" and key not in SCHEMA:
            errors.append(f"unknown key '{key}'")
    if "model" not in raw:
        errors.append("missing [model] section")
        model = {}
    else:
        model = _check_model(raw["model"], errors)
    sections = {}
    for sec, spec in SCHEMA.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            errors.append(f"{sec} must be a table")
            given = {}
        vals = {}
        for key, v in given.items():
            if key not in spec:
                errors.append(f"unknown key '{sec}.{key}'")
        for key, (default, check) in spec.items():
            v = given.get(key, default)
            if check is not None and key in given:
                msg = check(f"{sec}.{key}", v)
                if msg:
                    errors.append(msg)
            vals[key] = v
        sections[sec] = vals
    ini = sections["initial"]
    if not _numeric_tree(ini["mean"]):
        errors.append("initial.mean must be a number or a list of numbers")
    if ini["cov"] is not None and not _numeric_tree(ini["cov"]):
        errors.append("initial.cov must be a number or a matrix")
    Ns = sections["experiment"]["N"]
    Ns = [x for x in Ns if isinstance(x, int)] if isinstance(Ns, list) else []
    m_aux = sections["monte_carlo"]["M_aux"]
    if Ns and max(Ns) > 32:
        errors.append("experiment.N entries must be <= 32")
    if Ns and isinstance(m_aux, int) and max(Ns) > m_aux:
        errors.append("monte_carlo.M_aux must be >= max(experiment.N)")
    if errors:
        raise ConfigurationError("invalid configuration: " + "; ".join(errors), errors)
    cfg = RunConfig(model, sections, source)
    if model.get("type") == "lq":
        try:
            cfg.lq()
        except ConfigurationError as err:
            raise ConfigurationError(f"invalid configuration: {err}", [str(err)]) from None
    return cfg


def loads(text, source="<string>"):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigurationError(f"{source}: {err}", [str(err)]) from None
    return validate(raw, source)


def parse_config(path):
    """Read and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as err:
        raise ConfigurationError(f"cannot read {path}: {err.strerror}",
                                 [f"cannot read {path}"]) from None
    return loads(text, str(path))
