"""Declarative experiment configuration.

A config file is YAML (JSON also parses) with an optional ``kind`` and any
subset of the parameters of that kind; everything missing comes from
``DEFAULTS``. The fully resolved spec is written next to the results.

Targets and models are small mappings::

    target: {type: sum-he, degree: 2}            # sum_i He_k(z_i)
    target: {type: terms, terms: [[1.0, [1, 4, 0, 0]], ...]}
    target: {type: pathological}                 # z_1^2 - z_2^2
    target: {type: linear}                       # sum_i z_i / sqrt(L)
    target: {type: positional-semantic, omega: 0.5, a: 1.0}
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError
from ..hermite import LinkFunction, hermite_sum_link
from ..models import AttentionModel, NetworkModel, ReductionMap, get_activation, positional_semantic_link

__all__ = [
    "KINDS",
    "FORMATS",
    "DEFAULTS",
    "ExperimentSpec",
    "load_spec",
    "spec_hash",
    "build_target",
    "target_terms",
    "derive_seed",
]

KINDS = ("sie", "landscape", "sgd-run", "gain", "phase", "ode")
FORMATS = ("csv", "json")

GOLDEN_SIE = [
    {"name": "sum", "L": 4, "terms": [[1.0, [1, 0, 0, 0]], [1.0, [0, 1, 0, 0]], [1.0, [0, 0, 1, 0]], [1.0, [0, 0, 0, 1]]]},
    {"name": "product", "L": 2, "terms": [[1.0, [1, 1]]]},
    {"name": "four-token", "L": 4, "terms": [[1.0, [1, 4, 0, 0]], [1.0, [0, 0, 2, 2]]]},
    {"name": "separable-product", "L": 2, "terms": [[1.0, [2, 3]]]},
]

DEFAULTS: dict = {
    "sie": {"targets": GOLDEN_SIE, "k_max": 6, "tol": 1e-7},
    "landscape": {
        "omega": [0.0, 0.3, 0.5, 0.64, 0.75, 0.9, 1.0],
        "a": [1.0],
        "n_int": 19,
        "n_theta": 360,
        "transition": True,
    },
    "sgd-run": {
        "d": 1000,
        "L": 2,
        "model": {"type": "network", "activation": "relu", "tied": True},
        "target": {"type": "sum-he", "degree": 2},
        "lr": 4e-4,
        "t_max": 20_000_000,
        "eta": 0.3,
        "replicas": 4,
        "backend": "reduced",
        "stop": "recovery",
        "sign_randomize": False,
    },
    "gain": {
        "d": 1000,
        "L": [2, 4, 8, 16],
        "replicas": 8,
        "activation": "relu",
        "target": {"type": "sum-he", "degree": 2},
        "policy": "optimal",
        "scale_tied": 2e-4,
        "scale_untied": 2.5e-3,
        "gamma0": 0.005,
        "eta": 0.3,
        "t_max": 40_000_000,
        "backend": "reduced",
    },
    "phase": {
        "omega": [round(0.4 + 0.05 * i, 2) for i in range(13)],
        "a": [1.0],
        "d": 1000,
        "replicas": 32,
        "lr": 0.1,
        "t_max": 2_000_000,
        "semantic_threshold": 0.9,
        "n_int": 19,
        "n_theta": 360,
    },
    "ode": {
        "d": [100, 1000, 10000],
        "L": 2,
        "tied": True,
        "activation": "relu",
        "target": {"type": "sum-he", "degree": 2},
        "kappa": 1.0,
        "eta": 0.3,
        "dt": 1e-3,
        "horizon": 200.0,
        "lr": 0.0,
        "grad_norm": 0.0,
    },
}

GAIN_POLICIES = {
    "optimal": ("optimal-tied", "optimal-untied"),
    "constant": ("constant", "constant"),
    "over-scaled": ("constant", "over-scaled"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Resolved experiment: kind, parameters and run options.

    ``workers`` and ``out`` do not enter the hash, so serial and parallel
    runs of the same spec share records.
    """

    kind: str
    params: dict
    out: Path
    seed: int = 0
    workers: int = 1
    format: str = "csv"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        _validate(self.kind, self.params)

    @property
    def hash(self) -> str:
        return spec_hash(self)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "seed": self.seed,
            "workers": self.workers,
            "format": self.format,
            "out": str(self.out),
        }


def spec_hash(spec: ExperimentSpec) -> str:
    """SHA-256 of the canonical JSON of kind, parameters and seed."""
    payload = {"kind": spec.kind, "params": spec.params, "seed": spec.seed}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def derive_seed(base: int, index: int) -> int:
    """Replica seed from the base seed and a run index."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(2, np.uint64)[0] >> 1)


def _grid(params: dict, key: str, cast=float) -> None:
    val = params[key]
    if not isinstance(val, (list, tuple)):
        val = [val]
    if len(val) == 0:
        raise ConfigError(f"grid {key!r} is empty")
    try:
        params[key] = [cast(v) for v in val]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid {key!r} has invalid entries") from exc


def _positive(params: dict, *keys, cast=float) -> None:
    for key in keys:
        try:
            val = cast(params[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be a number") from exc
        if not val > 0:
            raise ConfigError(f"{key} must be positive")
        params[key] = val


def _validate(kind: str, p: dict) -> None:
    if kind == "sie":
        if not p["targets"]:
            raise ConfigError("no targets given")
        for t in p["targets"]:
            if "L" not in t or "terms" not in t:
                raise ConfigError("each SIE target needs L and terms")
            target_terms({"type": "terms", "terms": t["terms"]}, int(t["L"]))
        return
    if kind in ("landscape", "phase"):
        _grid(p, "omega")
        _grid(p, "a")
        if any(not 0 <= w <= 1 for w in p["omega"]):
            raise ConfigError("omega must lie in [0, 1]")
        _positive(p, "n_int", "n_theta", cast=int)
    if kind == "phase":
        _positive(p, "d", "replicas", "t_max", cast=int)
        _positive(p, "lr")
    if kind == "sgd-run":
        _positive(p, "d", "L", "replicas", "t_max", cast=int)
        _positive(p, "lr")
        build_model(p["model"], p["L"])
        build_target(p["target"], p["L"])
    if kind == "gain":
        _grid(p, "L", int)
        _positive(p, "d", "replicas", "t_max", cast=int)
        _positive(p, "scale_tied", "scale_untied", "gamma0")
        if p["policy"] not in GAIN_POLICIES:
            raise ConfigError(f"policy must be one of {sorted(GAIN_POLICIES)}")
        get_activation(p["activation"])
        for L in p["L"]:
            build_target(p["target"], L)
    if kind == "ode":
        _grid(p, "d", int)
        _positive(p, "L", cast=int)
        _positive(p, "kappa", "dt", "horizon")
        build_target(p["target"], p["L"])
        get_activation(p["activation"])
    if "eta" in p and not 0 < float(p["eta"]) < 1:
        raise ConfigError("eta must lie in (0, 1)")


def target_terms(tspec: dict, L: int) -> list:
    """Hermite-product terms ``[(coef, degrees), ...]`` of a target mapping."""
    if not isinstance(tspec, dict) or "type" not in tspec:
        raise ConfigError("target must be a mapping with a 'type'")
    kind = tspec["type"]
    if kind == "sum-he":
        k = int(tspec.get("degree", 2))
        coef = float(tspec.get("coef", 1.0))
        return [(coef, tuple(k if j == i else 0 for j in range(L))) for i in range(L)]
    if kind == "linear":
        return [(1.0 / math.sqrt(L), tuple(1 if j == i else 0 for j in range(L))) for i in range(L)]
    if kind == "pathological":
        if L < 2:
            raise ConfigError("the pathological target needs L >= 2")
        return [(1.0, (2,) + (0,) * (L - 1)), (-1.0, (0, 2) + (0,) * (L - 2))]
    if kind == "terms":
        try:
            return [(float(c), tuple(int(n) for n in deg)) for c, deg in tspec["terms"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("terms must be a list of [coef, degrees]") from exc
    raise ConfigError(f"unknown target type {kind!r}")


def build_target(tspec: dict, L: int) -> LinkFunction:
    if isinstance(tspec, dict) and tspec.get("type") == "positional-semantic":
        if L != 2:
            raise ConfigError("the positional/semantic target needs L = 2")
        return positional_semantic_link(float(tspec.get("omega", 0.5)), float(tspec.get("a", 1.0)))
    return hermite_sum_link(target_terms(tspec, L), L, name=str(tspec.get("type")))


def build_model(mspec: dict, L: int):
    if not isinstance(mspec, dict):
        raise ConfigError("model must be a mapping")
    kind = mspec.get("type", "network")
    if kind == "network":
        return NetworkModel(get_activation(mspec.get("activation", "relu")), tied=bool(mspec.get("tied", True)))
    if kind == "attention":
        red = mspec.get("reduction", "trace")
        reduction = {"trace": ReductionMap.trace, "full": ReductionMap.full}.get(red)
        if reduction is None:
            raise ConfigError(f"unknown reduction {red!r}")
        return AttentionModel(reduction(), mspec.get("layout", "none"))
    raise ConfigError(f"unknown model type {kind!r}")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def load_spec(
    kind: str,
    path: str | os.PathLike | None = None,
    out: str | os.PathLike | None = None,
    seed: int | None = None,
    workers: int | None = None,
    fmt: str | None = None,
    overrides: dict | None = None,
) -> ExperimentSpec:
    """Resolve a spec from defaults, an optional file and explicit options.

    Explicit arguments win over the file, which wins over the defaults.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    raw = dict(raw)
    file_kind = raw.pop("kind", kind)
    if file_kind != kind:
        raise ConfigError(f"config is for {file_kind!r}, not {kind!r}")
    opts = {k: raw.pop(k) for k in ("out", "seed", "workers", "format") if k in raw}
    params = raw.pop("params", None)
    if params is None:
        params, raw = raw, {}
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    params = _merge(DEFAULTS[kind], params, kind)
    if overrides:
        params = _merge(params, overrides, kind)
    out = out if out is not None else opts.get("out", f"results/{kind}")
    try:
        spec = ExperimentSpec(
            kind,
            params,
            Path(out),
            int(seed if seed is not None else opts.get("seed", 0)),
            int(workers if workers is not None else opts.get("workers", 1)),
            fmt if fmt is not None else opts.get("format", "csv"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    _ensure_writable(spec.out)
    return spec


def _ensure_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
