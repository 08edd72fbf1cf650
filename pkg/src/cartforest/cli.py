"""Command line runner: JSON config in, CSV/JSON reports out.

Exit codes: 0 ok, 1 invalid config, 2 a checked bound was violated,
3 runtime failure. Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import copy
import inspect
import json
import os
import sys
from pathlib import Path

import jsonschema

from . import __version__
from .data import generate_sample, load_csv
from .evaluation import (SweepConfig, bias_variance_decompose, check_prop2_bounds,
                         check_theorem2_relevance, rows_to_csv, rows_to_json,
                         run_convergence_sweep)
from .forest import ForestConfig, fit_forest, serialize_tree
from .models import REGISTRY, UnknownModelError, make_model
from .population import estimate_sid_alpha

OUTPUT_ENV = "CARTFOREST_OUTPUT_DIR"
SID_RTOL = 1e-9  # float slack when comparing the estimate to the claim
COMMANDS = ["train", "decompose", "sweep", "sid-check", "prop2", "relevance"]

DEFAULTS = {
    "seed": 0,
    "workers": os.cpu_count() or 1,
    "output_dir": "out",
    "model": {"id": "binary-linear", "params": {}},
    "data": {"n": 1000, "csv": None},
    "forest": {"k": 3, "gamma0": 1.0, "b": 1.0, "B": 1, "M": 10, "splitter": "auto"},
    "n_test": 2000,
    "sid": {"budget": 2000, "max_depth": 8},
    "prop2": {"s_star": 4, "beta": 1.0, "p": 10, "gamma0": 1.0, "n": 5000,
              "k_grid": [0, 1, 2, 3, 4], "noise": 0.0, "M": 50},
    "relevance": {"j": 0},
    "sweep": {"models": [{"id": "binary-linear", "params": {}}], "n_grid": [1000, 2000],
              "gamma0_grid": [1.0], "c_height": 0.125},
}

_pos_int = {"type": "integer", "minimum": 1}
_model_schema = {
    "type": "object",
    "properties": {"id": {"type": "string"}, "params": {"type": "object"}},
    "required": ["id"],
    "additionalProperties": False,
}
SCHEMA = {
    "type": "object",
    "properties": {
        "command": {"enum": COMMANDS},
        "seed": {"type": "integer", "minimum": 0},
        "workers": _pos_int,
        "output_dir": {"type": "string"},
        "model": _model_schema,
        "data": {
            "type": "object",
            "properties": {"n": _pos_int, "csv": {"type": ["string", "null"]}},
            "additionalProperties": False,
        },
        "forest": {
            "type": "object",
            "properties": {
                "k": {"type": "integer", "minimum": 0},
                "gamma0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "b": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "B": _pos_int,
                "M": _pos_int,
                "splitter": {"enum": ["auto", "cart", "binary"]},
            },
            "additionalProperties": False,
        },
        "n_test": _pos_int,
        "sid": {
            "type": "object",
            "properties": {"budget": _pos_int, "max_depth": _pos_int},
            "additionalProperties": False,
        },
        "prop2": {
            "type": "object",
            "properties": {
                "s_star": _pos_int, "beta": {"type": "number"}, "p": _pos_int,
                "gamma0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "n": _pos_int,
                "k_grid": {"type": "array", "items": {"type": "integer", "minimum": 0},
                           "minItems": 1},
                "noise": {"type": "number", "minimum": 0},
                "M": _pos_int,
            },
            "additionalProperties": False,
        },
        "relevance": {
            "type": "object",
            "properties": {"j": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "models": {"type": "array", "items": _model_schema},
                "n_grid": {"type": "array", "items": _pos_int},
                "gamma0_grid": {"type": "array",
                                "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "c_height": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "required": ["command"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class BoundViolation(RuntimeError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}", dotted)
    node[keys[-1]] = value


def resolve_config(command, config_path=None, overrides=(), seed=None, workers=None,
                   output_dir=None) -> dict:
    cfg = {}
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}", "config") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object", "config")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), raw)
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    cfg["command"] = command
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.path) or "(root)"
        raise ConfigError(f"{path}: {e.message}", path)
    resolved = _merge(DEFAULTS, cfg)
    if resolved["model"]["id"] not in REGISTRY and command not in ("prop2", "sweep"):
        err = UnknownModelError(resolved["model"]["id"])
        raise ConfigError(str(err), "model.id")
    return resolved


def _model(cfg):
    try:
        return make_model(cfg["model"]["id"], **cfg["model"].get("params", {}))
    except UnknownModelError as e:
        raise ConfigError(str(e), "model.id") from None
    except TypeError as e:
        raise ConfigError(f"model.params: {e}", "model.params") from None


def _forest_config(cfg, model=None, exclude=()):
    f = cfg["forest"]
    splitter = f["splitter"]
    if splitter == "auto":
        splitter = "binary" if model is not None and model.features == "bernoulli" else "cart"
    return ForestConfig(f["k"], f["gamma0"], f["b"], f["B"], f["M"], cfg["seed"], splitter, exclude)


def _report_config(cfg):
    # execution-only keys stay out of reports so they are identical across runs
    return {k: v for k, v in cfg.items() if k not in ("workers", "output_dir")}


def _write(out_dir: Path, name: str, text: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text, encoding="utf-8")


def _emit(cfg, rows, extra=None):
    out = Path(cfg["output_dir"])
    echo = json.dumps(_report_config(cfg), sort_keys=True, separators=(",", ":"))
    _write(out, "report.csv", f"# cartforest {__version__} config={echo}\n" + rows_to_csv(rows))
    _write(out, "report.json", rows_to_json(rows, _report_config(cfg), extra))


def cmd_train(cfg):
    model = None
    if cfg["data"]["csv"]:
        data = load_csv(cfg["data"]["csv"])
    else:
        model = _model(cfg)
        data = generate_sample(model, cfg["data"]["n"], cfg["seed"])
    config = _forest_config(cfg, model)
    forest = fit_forest(config, data, workers=cfg["workers"])
    pred = forest.predict(data.x)
    mse = float(((pred - data.y) ** 2).mean())
    out = Path(cfg["output_dir"])
    trees = [json.loads(serialize_tree(t)) for row in forest.trees for t in row]
    _write(out, "trees.json", json.dumps({"version": __version__, "trees": trees},
                                         sort_keys=True) + "\n")
    row = {"model_id": cfg["model"]["id"] if model else "csv", "n": data.n, "p": data.p,
           "k": config.k, "gamma0": config.gamma0, "b": config.b, "B": config.B,
           "M": config.M, "train_mse": mse}
    _emit(cfg, [row])
    return 0


def cmd_decompose(cfg):
    model = _model(cfg)
    data = generate_sample(model, cfg["data"]["n"], cfg["seed"])
    rep = bias_variance_decompose(model, data, _forest_config(cfg, model), cfg["n_test"],
                                  cfg["workers"])
    _emit(cfg, [rep], {"coherent": rep.coherent})
    return 0 if rep.coherent else 2


def cmd_sweep(cfg):
    s = cfg["sweep"]
    f = cfg["forest"]
    sc = SweepConfig(s["models"], s["n_grid"], s["gamma0_grid"], s["c_height"], f["b"], f["B"],
                     f["M"], cfg["n_test"], cfg["seed"],
                     "cart" if f["splitter"] == "auto" else f["splitter"])
    res = run_convergence_sweep(sc, cfg["workers"])
    _emit(cfg, res.rows, {"slopes": res.slopes, "errors": res.errors})
    return 0


def cmd_sid(cfg):
    model = _model(cfg)
    cert = estimate_sid_alpha(model, cfg["sid"]["budget"], cfg["seed"], cfg["sid"]["max_depth"])
    doc = {"version": __version__, "config": _report_config(cfg), "certificate": cert.to_dict()}
    _write(Path(cfg["output_dir"]), "sid.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if model.sid_alpha is not None and cert.alpha_hat > model.sid_alpha * (1 + SID_RTOL):
        raise BoundViolation(f"estimated alpha {cert.alpha_hat} exceeds the claimed {model.sid_alpha}")
    return 0


def cmd_prop2(cfg):
    q = cfg["prop2"]
    table = check_prop2_bounds(q["s_star"], q["beta"], q["p"], q["gamma0"], q["n"], q["k_grid"],
                               q["noise"], q["M"], cfg["seed"], cfg["n_test"], cfg["workers"])
    _emit(cfg, table.rows, {"passed": table.passed})
    if not table.passed:
        raise BoundViolation("a bias or variance bound on the binary model was exceeded")
    return 0


def cmd_relevance(cfg):
    model = _model(cfg)
    j = cfg["relevance"]["j"]
    if j >= model.p:
        raise ConfigError(f"relevance.j: feature {j} out of range for p={model.p}", "relevance.j")
    res = check_theorem2_relevance(model, j, _forest_config(cfg, model), cfg["data"]["n"],
                                   cfg["n_test"], cfg["seed"], cfg["workers"])
    _emit(cfg, [res.report], {"iota": res.iota, "loss": res.loss, "loss_se": res.loss_se,
                              "passed": res.passed})
    if not res.passed:
        raise BoundViolation("forest without a relevant feature beat the relevance floor")
    return 0


HANDLERS = {"train": cmd_train, "decompose": cmd_decompose, "sweep": cmd_sweep,
            "sid-check": cmd_sid, "prop2": cmd_prop2, "relevance": cmd_relevance}


def describe_models(model_id=None, as_json=False, stream=None) -> int:
    stream = stream or sys.stdout
    if model_id is not None and model_id not in REGISTRY:
        err = UnknownModelError(model_id)
        _error("unknown-model", str(err), suggestions=err.suggestions)
        return 1
    ids = [model_id] if model_id else list(REGISTRY)
    listing = []
    for mid in ids:
        entry = REGISTRY[mid]
        model = entry.builder()
        params = {name: _jsonable(par.default)
                  for name, par in inspect.signature(entry.builder).parameters.items()
                  if par.default is not inspect.Parameter.empty}
        listing.append({"id": mid, "summary": entry.summary, "sid_claim": entry.sid_claim,
                        "parameters": params, "defaults": model.describe()})
    if as_json:
        stream.write(json.dumps({"version": __version__, "models": listing}, indent=2,
                                sort_keys=True) + "\n")
    else:
        for item in listing:
            alpha = item["defaults"]["sid_alpha"]
            stream.write(f"{item['id']:<24} {item['summary']}\n"
                         f"{'':<24} SID constant: {item['sid_claim']}"
                         f"{'' if alpha is None else f' (= {alpha:.6g} at defaults)'}\n")
    return 0


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if v is None or isinstance(v, (bool, int, float, str)):
        return v
    return repr(v)


def _error(kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def build_parser():
    ap = argparse.ArgumentParser(prog="cartforest", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. forest.gamma0=0.5 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--output-dir")
    mp = sub.add_parser("models", help="list registered regression models")
    mp.add_argument("id", nargs="?")
    mp.add_argument("--json", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "models":
        return describe_models(args.id, args.json)
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed, args.workers,
                             args.output_dir)
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(
            json.dumps({"version": __version__, **cfg}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        return HANDLERS[args.command](cfg)
    except ConfigError as e:
        _error("validation", str(e), field=e.field)
        return 1
    except BoundViolation as e:
        _error("bound-violated", str(e))
        return 2
    except Exception as e:  # anything else is a runtime failure
        _error("runtime", f"{type(e).__name__}: {e}")
        return 3
