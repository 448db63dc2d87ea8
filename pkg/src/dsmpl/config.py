"""Experiment configuration: YAML documents, named presets, dotted overrides.

Validation errors carry the source line of the offending key when the value
came from a file, e.g. ``exp.yaml:7: algorithm.beta must lie in (0, 1]``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

PRESETS_NAMES = (
    "synthetic",
    "synthetic-gamma-sweep",
    "synthetic-Teps",
    "synthetic-n-sweep",
    "synthetic-lambda-sweep",
    "trajectory",
    "custom",
)
SWEEP_AXES = ("gamma", "n", "lambda", "epsilon")
EPSILONS = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]


class ConfigError(ValueError):
    pass


_SYNTHETIC = {
    "problem": {"kind": "quartic", "noise_std": 1.0},
    "graph": {"n": 10, "target_lambda": 0.4, "tol": 0.02},
    "algorithm": {
        "variant": "SCAMPL",
        "schedule": "explicit",
        "alpha": 0.05,
        "mu": 5000.0,
        "beta": 3.5e-6,
        "gamma": 2000.0,
        "b0": 1,
        "T": 5000,
    },
    "x0": [0.0],
    "seeds": list(range(10)),
    "epsilon": EPSILONS,
}

_PRESETS = {
    "synthetic": _SYNTHETIC,
    "synthetic-gamma-sweep": {
        **_SYNTHETIC,
        "algorithm": {**_SYNTHETIC["algorithm"], "T": 2000},
        "seeds": [0, 1, 2],
        "sweep": {"axis": "gamma", "values": [1.0, 1000.0, 2000.0, 10000.0, 100000.0]},
    },
    "synthetic-Teps": {
        **_SYNTHETIC,
        "algorithm": {"variant": "SCAMPL", "schedule": "theory", "mu": 5000.0, "gamma": 2000.0, "T": 1000},
        "seeds": [0, 1, 2, 3, 4],
        "sweep": {"axis": "epsilon", "values": EPSILONS},
    },
    "synthetic-n-sweep": {
        **_SYNTHETIC,
        "algorithm": {"variant": "SCAMPL", "schedule": "theory", "mu": 5000.0, "gamma": 2000.0, "T": 1000},
        "seeds": [0, 1, 2],
        "sweep": {"axis": "n", "values": [50, 60, 70, 80, 90, 100]},
    },
    "synthetic-lambda-sweep": {
        **_SYNTHETIC,
        "algorithm": {"variant": "SCAMPL", "schedule": "theory", "mu": 5000.0, "gamma": 2000.0, "T": 1000},
        "seeds": [0, 1, 2],
        "sweep": {"axis": "lambda", "values": [0.3, 0.5, 0.7, 0.9]},
    },
    "trajectory": {
        "problem": {"kind": "trajectory", "scale": "desk"},
        "graph": {"n": 3, "topology": "path"},
        "algorithm": {
            "variant": "SCAMPL",
            "schedule": "explicit",
            "alpha": 0.5,
            "mu": 20.0,
            "eta": 0.05,
            "beta": 0.1,
            "gamma": 100.0,
            "b0": 1,
            "T": 200,
        },
        "seeds": list(range(10)),
    },
    "custom": {},
}

_ALGO_KEYS = {"variant", "schedule", "eta", "alpha", "mu", "beta", "gamma", "b0", "T", "strict"}
_GRAPH_KEYS = {"n", "target_lambda", "tol", "seed", "topology", "W", "radius"}
_PROBLEM_KEYS = {
    "kind", "noise_std", "seed", "scale", "N", "T_wp", "T_f", "v_max", "noise_sigma",
    "center_jitter", "field_seed", "mc_budget", "starts", "goals", "formation", "vortices", "mc_seed",
}
_TOP_KEYS = {"preset", "problem", "graph", "algorithm", "seeds", "output_dir", "sweep", "x0", "epsilon",
             "threads", "timing", "overrides"}


def preset(name: str) -> dict:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS_NAMES)}")
    doc = copy.deepcopy(_PRESETS[name])
    doc["preset"] = name
    return doc


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_index(node, prefix: tuple = (), out: dict | None = None) -> dict:
    """Map dotted key paths to 1-based source lines using composed YAML nodes."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[".".join(path)] = key_node.start_mark.line + 1
            _line_index(value_node, path, out)
    return out


@dataclass
class ExperimentConfig:
    preset: str
    problem: dict
    graph: dict
    algorithm: dict
    seeds: list
    output_dir: str = "out"
    sweep: dict = field(default_factory=dict)
    x0: list | None = None
    epsilon: list = field(default_factory=lambda: list(EPSILONS))
    threads: int = 1
    timing: bool = True
    overrides: dict = field(default_factory=dict)
    source: str | None = field(default=None, compare=False)
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "problem": self.problem,
            "graph": self.graph,
            "algorithm": self.algorithm,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
            "sweep": self.sweep,
            "x0": self.x0,
            "epsilon": self.epsilon,
            "threads": self.threads,
            "timing": self.timing,
            "overrides": self.overrides,
        }


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value ({exc})") from None
    if "." not in key:
        if key in _ALGO_KEYS:
            key = "algorithm." + key
        elif key not in _TOP_KEYS:
            raise ConfigError(f"override key {key!r} is ambiguous; use a dotted path such as algorithm.{key}")
    return key, value


def _set_path(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = doc
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def load_config(path: str | Path | None = None, preset_name: str | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Resolve preset, file and overrides (later wins) and validate the result."""
    lines: dict = {}
    source = None
    doc: dict = {}
    if path is not None:
        source = str(path)
        text = Path(path).read_text(encoding="utf-8")
        try:
            node = yaml.compose(text)
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark is not None else source
            raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}:1: top level must be a mapping")
        if "resolved_config" in raw:
            # a run manifest: replay its resolved configuration verbatim
            raw = raw["resolved_config"]
            node = None
        lines = _line_index(node) if node is not None else {}
        doc = raw
    name = preset_name or doc.get("preset") or "custom"
    base = preset(name) if name in _PRESETS else None
    if base is None:
        where = f"{source}:{lines.get('preset', 1)}" if source else "preset"
        raise ConfigError(f"{where}: unknown preset {name!r}; choose from {', '.join(PRESETS_NAMES)}")
    merged = _merge(base, doc)
    merged["preset"] = name
    applied = dict(merged.get("overrides") or {})
    origin = {}
    for text in overrides or []:
        key, value = parse_override(text)
        _set_path(merged, key, value)
        applied[key] = value
        origin[key] = text
    merged["overrides"] = applied
    return validate(merged, source=source, lines=lines, origin=origin)


def validate(doc: dict, source: str | None = None, lines: dict | None = None,
             origin: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    origin = origin or {}

    def fail(key: str, message: str):
        if key in origin:
            raise ConfigError(f"override {origin[key]!r}: {message}")
        if source is not None:
            line = lines.get(key)
            parts = key.split(".")
            while line is None and len(parts) > 1:
                parts = parts[:-1]
                line = lines.get(".".join(parts))
            raise ConfigError(f"{source}:{line or 1}: {message}")
        raise ConfigError(message)

    for key in doc:
        if key not in _TOP_KEYS:
            fail(key, f"unknown top-level key {key!r}")
    for section, allowed in (("algorithm", _ALGO_KEYS), ("graph", _GRAPH_KEYS), ("problem", _PROBLEM_KEYS)):
        sec = doc.get(section)
        if sec is None:
            fail(section, f"missing required section {section!r}")
        if not isinstance(sec, dict):
            fail(section, f"{section} must be a mapping")
        for key in sec:
            if key not in allowed:
                fail(f"{section}.{key}", f"unknown key {section}.{key}")

    algo = doc["algorithm"]

    def num(key, cond, msg, section="algorithm", required=False):
        sec = doc[section]
        if key not in sec or sec[key] is None:
            if required:
                fail(f"{section}.{key}", f"{section}.{key} is required")
            return
        val = sec[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            fail(f"{section}.{key}", f"{section}.{key} must be a number, got {val!r}")
        if not cond(val):
            fail(f"{section}.{key}", f"{section}.{key} {msg}, got {val!r}")

    variant = str(algo.get("variant", "SCAMPL")).upper()
    if variant not in ("SMPL", "SCAMPL"):
        fail("algorithm.variant", f"algorithm.variant must be SMPL or SCAMPL, got {algo.get('variant')!r}")
    algo["variant"] = variant
    schedule = algo.get("schedule", "explicit")
    if schedule not in ("explicit", "theory"):
        fail("algorithm.schedule", "algorithm.schedule must be 'explicit' or 'theory'")
    explicit = schedule == "explicit"
    num("beta", lambda v: 0 < v <= 1, "must lie in (0, 1]", required=explicit)
    num("gamma", lambda v: v >= 0, "must be nonnegative", required=True)
    num("T", lambda v: v >= 1 and float(v).is_integer(), "must be a positive integer", required=True)
    num("b0", lambda v: v >= 1 and float(v).is_integer(), "must be a positive integer")
    num("eta", lambda v: v > 0, "must be positive", required=explicit and variant == "SMPL")
    num("alpha", lambda v: 0 < v <= 1, "must lie in (0, 1]", required=explicit and variant == "SCAMPL")
    num("mu", lambda v: v > 0, "must be positive", required=variant == "SCAMPL")

    num("n", lambda v: v >= 1 and float(v).is_integer(), "must be a positive integer", section="graph", required=True)
    num("target_lambda", lambda v: 0 <= v < 1, "must lie in [0, 1)", section="graph")
    num("tol", lambda v: v > 0, "must be positive", section="graph")
    topo = doc["graph"].get("topology", "geometric")
    if topo not in ("geometric", "path", "complete", "star", "explicit"):
        fail("graph.topology", f"graph.topology must be geometric, path, complete, star or explicit, got {topo!r}")
    if topo == "geometric" and doc["graph"].get("target_lambda") is None and doc["graph"].get("radius") is None:
        fail("graph", "geometric graphs need graph.target_lambda or graph.radius")
    if "W" in doc["graph"] and topo not in ("explicit", "geometric"):
        fail("graph.W", "graph.W requires graph.topology: explicit")

    kind = doc["problem"].get("kind")
    if kind not in ("quartic", "trajectory"):
        fail("problem.kind", f"problem.kind must be quartic or trajectory, got {kind!r}")
    num("noise_std", lambda v: v >= 0, "must be nonnegative", section="problem")
    if kind == "trajectory":
        scale = doc["problem"].get("scale", "desk")
        if scale not in ("desk", "paper"):
            fail("problem.scale", "problem.scale must be desk or paper")

    seeds = doc.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        fail("seeds", "seeds must be a non-empty list")
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            fail("seeds", f"seeds must be nonnegative integers, got {s!r}")

    sweep = doc.get("sweep") or {}
    if sweep:
        if sweep.get("axis") not in SWEEP_AXES:
            fail("sweep.axis", f"sweep.axis must be one of {', '.join(SWEEP_AXES)}")
        if not isinstance(sweep.get("values"), list) or not sweep["values"]:
            fail("sweep.values", "sweep.values must be a non-empty list")

    eps = doc.get("epsilon", EPSILONS)
    if not isinstance(eps, list) or not all(isinstance(e, (int, float)) and e > 0 for e in eps):
        fail("epsilon", "epsilon must be a list of positive numbers")
    threads = doc.get("threads", 1)
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        fail("threads", "threads must be a positive integer")

    return ExperimentConfig(
        preset=doc.get("preset", "custom"),
        problem=doc["problem"],
        graph=doc["graph"],
        algorithm=algo,
        seeds=list(seeds),
        output_dir=str(doc.get("output_dir", "out")),
        sweep=sweep,
        x0=doc.get("x0"),
        epsilon=list(eps),
        threads=threads,
        timing=bool(doc.get("timing", True)),
        overrides=doc.get("overrides") or {},
        source=source,
        lines=lines,
    )


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
