"""Flat key=value configuration files and the plain-text model file."""

from __future__ import annotations

import hashlib
from dataclasses import replace

import numpy as np

from . import ep
from .model import HalfStudentTPrior, ModelConfig

__all__ = ["parse_config", "read_config", "model_config", "save_model", "load_model",
           "MODEL_FORMAT", "data_digest"]

MODEL_FORMAT = "csgpc-model 1"

# key -> (section, attribute, parser)
_KEYS = {
    "kind": ("model", "kind", str),
    "jitter": ("model", "jitter", float),
    "warm_start": ("model", "warm_start", None),
    "warm_start_radius": ("model", "warm_start_radius", float),
    "backend": ("model", "backend", str),
    "seed": ("model", "seed", int),
    "prior": ("prior", None, str),
    "prior_dof": ("prior", "degrees_of_freedom", float),
    "prior_scale": ("prior", "scale", float),
    "tol": ("ep", "tol", float),
    "max_sweeps": ("ep", "max_sweeps", int),
    "min_sweeps": ("ep", "min_sweeps", int),
    "damping": ("ep", "damping", float),
    "site_order": ("ep", "site_order", str),
    "clamp_policy": ("ep", "clamp_policy", str),
    "max_iterations": ("opt", "max_iterations", int),
    "gtol": ("opt", "gtol", float),
    "ftol": ("opt", "ftol", float),
    "c1": ("opt", "c1", float),
    "c2": ("opt", "c2", float),
    "max_step": ("opt", "max_step", float),
    "initial_theta": ("opt", "initial_theta", None),
}


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, later keys win."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"{source}:{no}: empty key")
        out[k] = v
    return out


def read_config(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def model_config(values: dict[str, str], base: ModelConfig | None = None, *,
                 ignore: tuple = ()) -> ModelConfig:
    """Apply recognized keys to ``base``; unknown keys raise unless ignored."""
    cfg = base or ModelConfig()
    groups = {"model": {}, "prior": {}, "ep": {}, "opt": {}}
    prior_off = False
    for k, v in values.items():
        if k in ignore:
            continue
        if k not in _KEYS:
            raise ValueError(f"unknown configuration key {k!r}")
        sec, attr, conv = _KEYS[k]
        if k == "prior":
            if v.lower() in ("none", "off", "flat"):
                prior_off = True
            elif v.lower() not in ("half-t", "half_student_t"):
                raise ValueError(f"unknown prior {v!r}")
            continue
        if k == "warm_start":
            val = _bool(v)
        elif k == "initial_theta":
            val = np.array([float(t) for t in v.replace(",", " ").split()])
        else:
            try:
                val = conv(v)
            except ValueError:
                raise ValueError(f"bad value for {k}: {v!r}") from None
        groups[sec][attr] = val
    prior = cfg.prior
    if prior_off:
        prior = None
    elif groups["prior"]:
        prior = replace(prior or HalfStudentTPrior(), **groups["prior"])
    return replace(cfg, prior=prior, ep=replace(cfg.ep, **groups["ep"]),
                   optimizer=replace(cfg.optimizer, **groups["opt"]), **groups["model"])


def data_digest(X, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()


def _floats(a) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(a))


def save_model(path, *, kind: str, theta, jitter: float, sites: ep.SiteParams, X, y,
               training_path: str = "", standardization=None) -> None:
    """Write hyperparameters, sites and a reference to the training inputs."""
    lines = [MODEL_FORMAT, "", "[hyperparameters]", f"kind = {kind}", f"theta = {_floats(theta)}",
             f"jitter = {jitter!r}", "", "[training]", f"path = {training_path}",
             f"n = {len(y)}", f"d = {np.atleast_2d(X).shape[1]}", f"sha256 = {data_digest(X, y)}"]
    if standardization is not None:
        lines += [f"mean = {_floats(standardization.mean)}", f"scale = {_floats(standardization.scale)}"]
    lines += ["", "[sites]", "# nu_tilde tau_tilde"]
    lines += [f"{float(a)!r} {float(b)!r}" for a, b in zip(sites.nu_tilde, sites.tau_tilde)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> dict:
    """Parse a model file into a dict of its sections."""
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT!r} file")
    sections: dict[str, list[str]] = {}
    cur = None
    for line in text[1:]:
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1]
            sections[cur] = []
        elif cur is None:
            raise ValueError(f"{path}: content outside a section")
        else:
            sections[cur].append(s)
    for need in ("hyperparameters", "training", "sites"):
        if need not in sections:
            raise ValueError(f"{path}: missing [{need}] section")
    hyp = parse_config("\n".join(sections["hyperparameters"]))
    train = parse_config("\n".join(sections["training"]))
    sites = np.array([[float(v) for v in s.split()] for s in sections["sites"]]).reshape(-1, 2)
    out = {
        "kind": hyp["kind"],
        "theta": np.array([float(v) for v in hyp["theta"].split()]),
        "jitter": float(hyp["jitter"]),
        "training_path": train.get("path", ""),
        "n": int(train["n"]),
        "d": int(train["d"]),
        "sha256": train["sha256"],
        "mean": np.array([float(v) for v in train["mean"].split()]) if "mean" in train else None,
        "scale": np.array([float(v) for v in train["scale"].split()]) if "scale" in train else None,
        "nu_tilde": sites[:, 0].copy(),
        "tau_tilde": sites[:, 1].copy(),
    }
    if out["nu_tilde"].size != out["n"]:
        raise ValueError(f"{path}: {out['nu_tilde'].size} sites for {out['n']} training points")
    return out
