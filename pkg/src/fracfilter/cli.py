"""Command-line runner for the named experiments.

Usage::

    fracfilter --config run.yaml [--experiment NAME] [--seed N] [--threads N] [--out DIR]
    fracfilter --experiment NAME            # packaged default config

Exit status: 0 when the acceptance bound is met, 2 when it is not, 1 on
invalid configuration or a runtime error.
"""

import argparse
import inspect
import json
import os
import sys
from importlib import resources

import jsonschema
import numpy as np
import yaml

from ._validation import FilteringError
from .control import ControlProblem
from .experiments import EXPERIMENTS, QUBIT_A
from .generators import GeneratorSpec

__all__ = ["CONFIG_SCHEMA", "ConfigError", "load_config", "build_kwargs", "main"]

_MATRIX = {
    "type": "object",
    "properties": {
        "re": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "im": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    },
    "required": ["re"],
    "additionalProperties": False,
}
_NUM_OR_LIST = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]}
_BETA = {"oneOf": [{"type": ["number", "null"]},
                   {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 1}]}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": sorted(EXPERIMENTS)},
        "model": {
            "type": "object",
            "properties": {
                "A": _MATRIX,
                "B": _MATRIX,
                "channels": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "properties": {"C": _MATRIX, "phi": {"type": "number"}},
                        "required": ["C"],
                        "additionalProperties": False,
                    },
                },
            },
            "required": ["A", "channels"],
            "additionalProperties": False,
        },
        "numeric": {
            "type": "object",
            "properties": {
                "h": _NUM_OR_LIST,
                "dt": _NUM_OR_LIST,
                "n_paths": {"type": "integer", "minimum": 2},
                "beta": _BETA,
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "s": {"type": "number", "exclusiveMinimum": 0},
                "n_grid": {"type": "integer", "minimum": 3},
            },
            "additionalProperties": False,
        },
        "control": {
            "type": "object",
            "properties": {
                "H1": _MATRIX,
                "H2": _MATRIX,
                "J": _MATRIX,
                "F": _MATRIX,
                "T": {"type": "number", "exclusiveMinimum": 0},
                "U": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "V": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {
                "dir": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["experiment"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the field (and line when known)."""


def _line_of(node, path):
    """Line number (1-based) of the YAML node at ``path``, or None."""
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = [v for k, v in node.value if k.value == key]
            if not nxt:
                break
            node = nxt[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    return node.start_mark.line + 1 if node is not None else None


def _field(path):
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def load_config(text, source="<config>"):
    """Parse and schema-validate a YAML config; raise :class:`ConfigError` with diagnostics."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            path = list(e.absolute_path)
            line = _line_of(node, path)
            where = f"{source}:{line}" if line else source
            msgs.append(f"{where}: {_field(path)}: {e.message}")
        raise ConfigError("\n".join(msgs))
    return data


def _matrix(d, where):
    try:
        re_ = np.asarray(d["re"], dtype=float)
        im_ = np.asarray(d["im"], dtype=float) if "im" in d else np.zeros_like(re_)
    except ValueError as exc:
        raise ConfigError(f"{where}: rows of unequal length ({exc})") from exc
    if re_.ndim != 2 or re_.shape[0] != re_.shape[1] or re_.shape[0] == 0:
        raise ConfigError(f"{where}.re: expected a square matrix, got shape {re_.shape}")
    if im_.shape != re_.shape:
        raise ConfigError(f"{where}.im: shape {im_.shape} does not match re shape {re_.shape}")
    return re_ + 1j * im_


def _spec(model):
    A = _matrix(model["A"], "model.A")
    chans = []
    for j, ch in enumerate(model["channels"]):
        C = _matrix(ch["C"], f"model.channels[{j}].C")
        if C.shape != A.shape:
            raise ConfigError(f"model.channels[{j}].C: shape {C.shape} does not match A {A.shape}")
        chans.append((C, float(ch.get("phi", 0.0))))
    B = _matrix(model["B"], "model.B") if "B" in model else None
    if B is not None and B.shape != A.shape:
        raise ConfigError(f"model.B: shape {B.shape} does not match A {A.shape}")
    try:
        return GeneratorSpec(A, chans), B
    except (FilteringError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_kwargs(cfg, seed=None, threads=None):
    """Experiment name and keyword arguments from a validated config."""
    name = cfg["experiment"]
    fn = EXPERIMENTS[name]
    params = inspect.signature(fn).parameters
    kw = {}
    if "model" in cfg:
        spec, B = _spec(cfg["model"])
        kw["model"] = spec
        if B is not None:
            if "B" not in params:
                raise ConfigError(f"model.B: experiment {name!r} does not use a probe-block Hamiltonian")
            kw["B"] = B
    for key, val in cfg.get("numeric", {}).items():
        if key not in params:
            raise ConfigError(f"numeric.{key}: not used by experiment {name!r}")
        kw[key] = val
    if "control" in cfg:
        if name != "control":
            raise ConfigError("control: only the 'control' experiment takes a control block")
        c = cfg["control"]
        H0 = kw["model"].A if "model" in kw else QUBIT_A
        n = H0.shape[0]
        mats = {k: (_matrix(c[k], f"control.{k}") if k in c else None) for k in ("H1", "H2", "J", "F")}
        for k, M in mats.items():
            if M is not None and M.shape != (n, n):
                raise ConfigError(f"control.{k}: shape {M.shape} does not match the model dimension {n}")
        try:
            kw["problem"] = ControlProblem(H0, mats["H1"], mats["H2"], (0.0,), (0.0,), mats["J"], mats["F"],
                                           float(c.get("T", 1.0)))
        except (FilteringError, ValueError) as exc:
            raise ConfigError(f"control: {exc}") from exc
        if "U" in c:
            kw["U_big"] = tuple(c["U"])
        if "V" in c:
            kw["V_big"] = tuple(c["V"])
    if seed is not None and "seed" in params:  # deterministic experiments ignore it
        kw["seed"] = int(seed)
    if threads is not None and "threads" in params:
        kw["threads"] = int(threads)
    if "beta" in kw and isinstance(kw["beta"], list) and name != "control":
        raise ConfigError(f"numeric.beta: experiment {name!r} takes a single value")
    if name == "control" and "beta" in kw and not isinstance(kw["beta"], list):
        kw["beta"] = [kw["beta"]]
    return name, kw


def default_config_text(name):
    return resources.files("fracfilter").joinpath("configs").joinpath(f"{name}.yaml").read_text()


def _write_outputs(result, out, formats):
    os.makedirs(out, exist_ok=True)
    written = []
    if "csv" in formats:
        for tname, text in result.tables.items():
            path = os.path.join(out, f"{tname}.csv")
            with open(path, "w", newline="") as fh:
                fh.write(text)
            written.append(path)
    if "json" in formats:
        path = os.path.join(out, f"{result.name}.json")
        with open(path, "w") as fh:
            json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written


def main(argv=None):
    ap = argparse.ArgumentParser(prog="fracfilter", description="Run a named filtering experiment.")
    ap.add_argument("--config", help="YAML experiment config")
    ap.add_argument("--experiment", choices=sorted(EXPERIMENTS),
                    help="experiment name (overrides the config; alone, runs the packaged config)")
    ap.add_argument("--seed", type=int, help="random seed (overrides numeric.seed)")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker threads for ensembles (results do not depend on it)")
    ap.add_argument("--out", help="output directory (default: output.dir or ./results)")
    args = ap.parse_args(argv)
    try:
        if args.config is None and args.experiment is None:
            raise ConfigError("give --config or --experiment")
        if args.config is not None:
            with open(args.config) as fh:
                text = fh.read()
            source = args.config
        else:
            text, source = default_config_text(args.experiment), f"{args.experiment}.yaml"
        cfg = load_config(text, source)
        if args.experiment is not None:
            cfg["experiment"] = args.experiment
        name, kw = build_kwargs(cfg, args.seed, args.threads)
        out_cfg = cfg.get("output", {})
        out = args.out or out_cfg.get("dir", "results")
        formats = out_cfg.get("formats", ["csv", "json"])
        result = EXPERIMENTS[name](**kw)
        _write_outputs(result, out, formats)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FilteringError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(result.summary_line())
    return 0 if result.passed else 2


if __name__ == "__main__":
    sys.exit(main())
