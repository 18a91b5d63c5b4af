"""Run configuration: JSON documents to frozen dataclasses and back.

Unknown keys and wrong value types raise ConfigError naming the dotted key path.
"""
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from . import crve, inference, simlab
from .errors import ConfigError
from .model_frame import Constraint, ModelSpec

COMMANDS = ("fit", "test", "simulate")
OUTPUTS = ("json", "csv", "table")
WORKING_KINDS = ("identity", "compound_symmetric", "user")
WEIGHTINGS = ("given", "inverse_working")
THREADS_ENV = "CLUSTER_KEEPER_THREADS"


@dataclass(frozen=True)
class WorkingModelSpec:
    kind: str = "identity"
    rho: Union[float, str, None] = None  # number or "estimate"
    blocks: Optional[Tuple[Tuple[str, Tuple[Tuple[float, ...], ...]], ...]] = None
    scale: float = 1.0


@dataclass(frozen=True)
class ConstraintRow:
    coefficients: Tuple[Tuple[str, float], ...]
    value: float = 0.0


@dataclass(frozen=True)
class NamedConstraint:
    name: str
    rows: Tuple[ConstraintRow, ...]

    def to_constraint(self, names) -> Constraint:
        return Constraint.from_names(
            names,
            [dict(row.coefficients) for row in self.rows],
            [row.value for row in self.rows],
            self.name,
        )


@dataclass(frozen=True)
class RunConfig:
    command: Optional[str] = None
    data_path: Optional[str] = None
    model: Optional[ModelSpec] = None
    working_model: WorkingModelSpec = field(default_factory=WorkingModelSpec)
    weighting: str = "given"
    vcov: str = "CR2"
    absorbed_shortcut: bool = False
    cr1s_absorbed_p: bool = False
    tests: Tuple[NamedConstraint, ...] = ()
    method: str = "AHT"
    level: float = 0.95
    output: str = "json"
    seed: Optional[int] = None
    threads: Optional[int] = None
    simulate: Optional[simlab.SimConfig] = None


def _check_keys(doc: Mapping, allowed, path: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key {path + '.' if path else ''}{key}")


def _type_error(path: str, expected: str, value: Any) -> ConfigError:
    return ConfigError(f"{path}: expected {expected}, got {type(value).__name__}")


def _str(value, path: str) -> str:
    if not isinstance(value, str):
        raise _type_error(path, "string", value)
    return value


def _bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise _type_error(path, "boolean", value)
    return value


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _type_error(path, "number", value)
    return float(value)


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _type_error(path, "integer", value)
    return value


def _list(value, path: str, item, scalar_ok: bool = False) -> tuple:
    if scalar_ok and not isinstance(value, list):
        value = [value]
    if not isinstance(value, list):
        raise _type_error(path, "list", value)
    return tuple(item(v, f"{path}[{k}]") for k, v in enumerate(value))


def _choice(value, path: str, choices) -> str:
    value = _str(value, path)
    if value not in choices:
        raise ConfigError(f"{path}: {value!r} is not one of {', '.join(choices)}")
    return value


def _object(value, path: str) -> Mapping:
    if not isinstance(value, dict):
        raise _type_error(path, "object", value)
    return value


def _parse_model(doc, path: str) -> ModelSpec:
    doc = _object(doc, path)
    _check_keys(doc, ("outcome", "covariates", "cluster", "absorb_between", "absorb_within",
                      "weights", "intercept", "within_deviations"), path)
    for key in ("outcome", "cluster"):
        if key not in doc:
            raise ConfigError(f"{path}.{key} is required")
    weights = doc.get("weights")
    return ModelSpec(
        outcome=_str(doc["outcome"], f"{path}.outcome"),
        covariates=_list(doc.get("covariates", []), f"{path}.covariates", _str),
        cluster=_str(doc["cluster"], f"{path}.cluster"),
        absorb_between=_list(doc.get("absorb_between", []), f"{path}.absorb_between", _str),
        absorb_within=_list(doc.get("absorb_within", []), f"{path}.absorb_within", _str),
        weights=None if weights is None else _str(weights, f"{path}.weights"),
        intercept=_bool(doc.get("intercept", False), f"{path}.intercept"),
        within_deviations=_list(doc.get("within_deviations", []), f"{path}.within_deviations", _str),
    )


def _parse_working(doc, path: str) -> WorkingModelSpec:
    doc = _object(doc, path)
    _check_keys(doc, ("kind", "rho", "blocks", "scale"), path)
    kind = _choice(doc.get("kind", "identity"), f"{path}.kind", WORKING_KINDS)
    rho = doc.get("rho")
    if rho is not None and rho != "estimate":
        rho = _number(rho, f"{path}.rho")
    if kind == "compound_symmetric" and rho is None:
        raise ConfigError(f"{path}.rho is required for a compound_symmetric working model")
    blocks = None
    if "blocks" in doc:
        raw = _object(doc["blocks"], f"{path}.blocks")
        blocks = tuple(
            (str(cid), _list(mat, f"{path}.blocks.{cid}", lambda row, p: _list(row, p, _number)))
            for cid, mat in raw.items()
        )
    if kind == "user" and not blocks:
        raise ConfigError(f"{path}.blocks is required for a user working model")
    scale = _number(doc.get("scale", 1.0), f"{path}.scale")
    if scale <= 0:
        raise ConfigError(f"{path}.scale must be positive")
    return WorkingModelSpec(kind, rho, blocks, scale)


def _parse_tests(doc, path: str) -> Tuple[NamedConstraint, ...]:
    out = []
    for k, item in enumerate(_list(doc, path, lambda v, p: v)):
        p = f"{path}[{k}]"
        item = _object(item, p)
        _check_keys(item, ("name", "constraints"), p)
        name = _str(item.get("name", f"test{k + 1}"), f"{p}.name")
        rows = []
        for j, row in enumerate(_list(item.get("constraints", []), f"{p}.constraints", lambda v, q: v)):
            rp = f"{p}.constraints[{j}]"
            row = _object(row, rp)
            _check_keys(row, ("coefficients", "value"), rp)
            coefs = _object(row.get("coefficients", {}), f"{rp}.coefficients")
            if not coefs:
                raise ConfigError(f"{rp}.coefficients must name at least one coefficient")
            pairs = tuple((str(n), _number(v, f"{rp}.coefficients.{n}")) for n, v in coefs.items())
            rows.append(ConstraintRow(pairs, _number(row.get("value", 0.0), f"{rp}.value")))
        if not rows:
            raise ConfigError(f"{p}.constraints must not be empty")
        out.append(NamedConstraint(name, tuple(rows)))
    return tuple(out)


def _parse_simulate(doc, path: str, seed: Optional[int]) -> simlab.SimConfig:
    doc = _object(doc, path)
    _check_keys(doc, ("designs", "m", "n", "tau2", "rho", "sigma_delta2", "reps", "alphas", "methods",
                      "hypotheses", "period_effects", "full_grid", "dataset_out"), path)
    base = simlab.SimConfig()
    kwargs: Dict[str, Any] = {"seed": 1 if seed is None else seed}
    for key in ("designs", "m", "n"):
        if key in doc:
            kwargs[key] = _list(doc[key], f"{path}.{key}", _int, scalar_ok=True)
    for key in ("tau2", "rho", "sigma_delta2", "alphas"):
        if key in doc:
            kwargs[key] = _list(doc[key], f"{path}.{key}", _number, scalar_ok=True)
    if "reps" in doc:
        kwargs["reps"] = _int(doc["reps"], f"{path}.reps")
    if "methods" in doc:
        kwargs["methods"] = _list(doc["methods"], f"{path}.methods",
                                  lambda v, p: _choice(v, p, inference.METHODS), scalar_ok=True)
    if "hypotheses" in doc:
        kwargs["hypotheses"] = _list(doc["hypotheses"], f"{path}.hypotheses",
                                     lambda v, p: _choice(v, p, tuple(simlab.HYPOTHESES)), scalar_ok=True)
    if "period_effects" in doc:
        kwargs["period_effects"] = _choice(doc["period_effects"], f"{path}.period_effects", ("shared", "by_outcome"))
    if "full_grid" in doc:
        kwargs["full_grid"] = _bool(doc["full_grid"], f"{path}.full_grid")
    if doc.get("dataset_out") is not None:
        kwargs["dataset_out"] = _str(doc["dataset_out"], f"{path}.dataset_out")
    sim = simlab.SimConfig(**{**base.__dict__, **kwargs})
    if sim.reps < 1:
        raise ConfigError(f"{path}.reps must be at least 1")
    return sim


TOP_KEYS = ("command", "data", "model", "working_model", "weighting", "vcov", "absorbed_shortcut",
            "cr1s_absorbed_p", "tests", "method", "level", "output", "seed", "threads", "simulate")


def parse_config(document: Union[str, Mapping]) -> RunConfig:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    doc = _object(document, "config")
    _check_keys(doc, TOP_KEYS, "")

    command = doc.get("command")
    if command is not None:
        command = _choice(command, "command", COMMANDS)
    seed = doc.get("seed")
    if seed is not None:
        seed = _int(seed, "seed")
        if seed < 0:
            raise ConfigError("seed must be non-negative")
    threads = doc.get("threads")
    if threads is not None:
        threads = _int(threads, "threads")
        if threads < 1:
            raise ConfigError("threads must be at least 1")
    level = _number(doc.get("level", 0.95), "level")
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")

    config = RunConfig(
        command=command,
        data_path=None if doc.get("data") is None else _str(doc["data"], "data"),
        model=None if doc.get("model") is None else _parse_model(doc["model"], "model"),
        working_model=_parse_working(doc.get("working_model", {}), "working_model"),
        weighting=_choice(doc.get("weighting", "given"), "weighting", WEIGHTINGS),
        vcov=_choice(doc.get("vcov", "CR2"), "vcov", crve.KINDS),
        absorbed_shortcut=_bool(doc.get("absorbed_shortcut", False), "absorbed_shortcut"),
        cr1s_absorbed_p=_bool(doc.get("cr1s_absorbed_p", False), "cr1s_absorbed_p"),
        tests=_parse_tests(doc.get("tests", []), "tests"),
        method=_choice(doc.get("method", "AHT"), "method", inference.METHODS),
        level=level,
        output=_choice(doc.get("output", "json"), "output", OUTPUTS),
        seed=seed,
        threads=threads,
        simulate=None if doc.get("simulate") is None else _parse_simulate(doc["simulate"], "simulate", seed),
    )
    validate_names(config)
    return config


def validate_names(config: RunConfig) -> None:
    """Constraint coefficients must be focal covariates of the model."""
    if config.model is None:
        if config.tests:
            raise ConfigError("tests need a model section")
        return
    known = set(config.model.focal_names())
    for test in config.tests:
        for row in test.rows:
            for name, _ in row.coefficients:
                if name not in known:
                    raise ConfigError(f"test {test.name!r} names unknown coefficient {name!r}")


def require(config: RunConfig, command: str) -> None:
    if config.data_path is None and command != "simulate":
        raise ConfigError(f"{command} needs a data path")
    if config.model is None and command != "simulate":
        raise ConfigError(f"{command} needs a model section")
    if command == "test" and not config.tests:
        raise ConfigError("test needs at least one entry under tests")


def serialize_config(config: RunConfig) -> dict:
    out: Dict[str, Any] = {}
    if config.command is not None:
        out["command"] = config.command
    if config.data_path is not None:
        out["data"] = config.data_path
    if config.model is not None:
        m = config.model
        out["model"] = {
            "outcome": m.outcome,
            "covariates": list(m.covariates),
            "cluster": m.cluster,
            "absorb_between": list(m.absorb_between),
            "absorb_within": list(m.absorb_within),
            "weights": m.weights,
            "intercept": m.intercept,
            "within_deviations": list(m.within_deviations),
        }
    wm = config.working_model
    wdoc: Dict[str, Any] = {"kind": wm.kind, "scale": wm.scale}
    if wm.rho is not None:
        wdoc["rho"] = wm.rho
    if wm.blocks is not None:
        wdoc["blocks"] = {cid: [list(row) for row in mat] for cid, mat in wm.blocks}
    out["working_model"] = wdoc
    out.update({
        "weighting": config.weighting,
        "vcov": config.vcov,
        "absorbed_shortcut": config.absorbed_shortcut,
        "cr1s_absorbed_p": config.cr1s_absorbed_p,
        "tests": [
            {"name": t.name,
             "constraints": [{"coefficients": dict(r.coefficients), "value": r.value} for r in t.rows]}
            for t in config.tests
        ],
        "method": config.method,
        "level": config.level,
        "output": config.output,
    })
    if config.seed is not None:
        out["seed"] = config.seed
    if config.threads is not None:
        out["threads"] = config.threads
    if config.simulate is not None:
        s = config.simulate
        sim = {
            "designs": list(s.designs), "m": list(s.m), "n": list(s.n),
            "tau2": list(s.tau2), "rho": list(s.rho), "sigma_delta2": list(s.sigma_delta2),
            "reps": s.reps, "alphas": list(s.alphas), "methods": list(s.methods),
            "hypotheses": list(s.hypotheses), "period_effects": s.period_effects, "full_grid": s.full_grid,
        }
        if s.dataset_out is not None:
            sim["dataset_out"] = s.dataset_out
        out["simulate"] = sim
    return out
