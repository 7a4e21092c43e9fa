"""Experiment configuration: JSON schema, defaults, and dotted overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Iterable, Mapping

import jsonschema

from .errors import ConfigInvalid


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_NNINT = {"type": "integer", "minimum": 0}

SCHEMA = _obj({
    "seeds": {"type": "array", "items": _NNINT, "minItems": 1},
    "out": {"type": "string"},
    "graph": _obj({
        "structure": {"enum": ["chain", "random"]},
        "n": {"type": "integer", "minimum": 1, "maximum": 63},
        "sparsity": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "strength": {"enum": ["weak", "medium", "strong"]},
        "nonlinearity": {"enum": ["identity", "tanh"]},
    }),
    "anomaly": _obj({
        "patterns": _POSINT,
        "shift": _NUM,
        "scale": _POS,
        "samples_per_pattern": _POSINT,
        "normal_samples": _POSINT,
        "test_per_pattern": _POSINT,
        "test_normal": _POSINT,
        "threshold_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }),
    "cluster": _obj({
        "K": {"anyOf": [_POSINT, {"type": "null"}, {"const": "auto"}]},
        "k_min": _POSINT,
        "k_max": _POSINT,
        "mode": {"enum": ["all", "y_abnormal", "flagged"]},
        "covariance": {"enum": ["full", "diag"]},
        "restarts": _POSINT,
    }),
    "train": _obj({
        "batch_size": _POSINT,
        "epochs": _POSINT,
        "hidden": {"anyOf": [_POSINT, {"type": "null"}]},
        "depth": _POSINT,
        "lr": _POS,
        "kl_weight": {"type": "number", "minimum": 0},
        "obs_var": _POS,
        "prior_parents": {"type": "boolean"},
        "decoder_label": {"type": "boolean"},
    }),
    "decision": _obj({
        "iota": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "threshold": {"anyOf": [_NUM, {"type": "null"}]},
        "samples": _POSINT,
        "tau": {"anyOf": [_POS, {"type": "null"}]},
        "restarts": _NNINT,
        "max_iter": _POSINT,
        "step_tol": _POS,
        "constraint_tol": _POS,
        "verify_rounds": _POSINT,
        "rows": _NNINT,
    }),
    "cost": _obj({
        "costs": {"anyOf": [{"type": "array", "items": {"type": "number", "minimum": 0}},
                            {"type": "null"}]},
        "p": {"enum": [1, 2]},
        "l0": {"type": "number", "minimum": 0},
    }),
    "eval": _obj({
        "variants": {"type": "array", "items": {"enum": ["full", "no_u", "no_graph"]},
                     "minItems": 1, "uniqueItems": True},
        "metrics": {"type": "array", "items": {"enum": ["f1", "n_cost", "ndcg", "r_mse_cf",
                                                        "r_mse_recon"]}, "uniqueItems": True},
        "ndcg_k": {"type": "array", "items": _POSINT, "minItems": 1},
        "cf_deltas": {"type": "array", "items": _NUM, "minItems": 1},
        "cf_rows": _POSINT,
    }),
})

DEFAULTS = {
    "seeds": [0],
    "out": "runs/default",
    "graph": {"structure": "chain", "n": 5, "sparsity": 0.3, "strength": "medium",
              "nonlinearity": "identity"},
    "anomaly": {"patterns": 2, "shift": 4.0, "scale": 1.0, "samples_per_pattern": 1500,
                "normal_samples": 6000, "test_per_pattern": 100, "test_normal": 200,
                "threshold_quantile": 0.95},
    # K: null -> the configured pattern count, "auto" -> BIC over [k_min, k_max]
    "cluster": {"K": None, "k_min": 1, "k_max": 6, "mode": "all", "covariance": "full",
                "restarts": 5},
    "train": {"batch_size": 64, "epochs": 20, "hidden": None, "depth": 3, "lr": 1e-3,
              "kl_weight": 1.0, "obs_var": 0.01, "prior_parents": False,
              "decoder_label": True},
    "decision": {"iota": 0.9, "threshold": None, "samples": 64, "tau": None, "restarts": 8,
                 "max_iter": 200, "step_tol": 1e-6, "constraint_tol": 1e-4,
                 "verify_rounds": 4, "rows": 20},
    "cost": {"costs": None, "p": 2, "l0": 0.0},
    "eval": {"variants": ["full", "no_u", "no_graph"],
             "metrics": ["f1", "n_cost", "ndcg", "r_mse_cf", "r_mse_recon"],
             "ndcg_k": [1, 3, 5], "cf_deltas": [-2.0, -1.0, 1.0, 2.0], "cf_rows": 200},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: Mapping) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigInvalid(f"config invalid at {path}: {e.message}") from None
    k = cfg.get("cluster", {})
    if k.get("k_min", 1) > k.get("k_max", 6):
        raise ConfigInvalid("config invalid at cluster: k_min exceeds k_max")


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs: Iterable[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigInvalid(f"override {pair!r} is not KEY=VALUE")
        key, raw = pair.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(raw)
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> dict:
    """Validated config: user file over defaults, then ``--set`` overrides."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigInvalid(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigInvalid("config invalid at <root>: must be an object")
    # validate the raw file too, so unknown keys are reported against it
    validate(user)
    cfg = apply_overrides(_merge(DEFAULTS, user), overrides)
    validate(cfg)
    return cfg
