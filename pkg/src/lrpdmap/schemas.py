"""JSON Schemas for every file the CLI reads or writes, plus load/dump helpers.

All coordinates are meters; polylines are arrays of ``[x, y]`` pairs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema


class SchemaError(ValueError):
    """A document does not match its schema or violates a domain invariant."""


_number = {"type": "number"}
_point = {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}
_polyline = {"type": "array", "items": _point, "minItems": 2}
_vector = {"type": "array", "items": _number}
_matrix = {"type": "array", "items": _vector}

LRPD_PARAMS = {
    "type": "object",
    "required": ["mu", "log_d", "L", "kappa", "n_points", "rank"],
    "properties": {
        "mu": _vector,
        "log_d": _vector,
        "L": _matrix,
        "kappa": {"type": "number", "minimum": 0},
        "n_points": {"type": "integer", "minimum": 1},
        "rank": {"type": "integer", "minimum": 0},
    },
}

SCENARIO = {
    "type": "object",
    "required": ["gt_elements", "agents", "metadata"],
    "properties": {
        "gt_elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "points"],
                "properties": {"class": {"type": "integer", "minimum": 0}, "points": _polyline},
            },
        },
        "agents": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["history", "future"],
                "properties": {"history": _polyline, "future": _polyline},
            },
        },
        "metadata": {"type": "object"},
        "samples": {"type": "array", "items": _matrix},
    },
}

PROB_MAP = {
    "type": "object",
    "required": ["elements"],
    "properties": {
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["probs", "params"],
                "properties": {
                    "class": {"type": "integer", "minimum": 0},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "probs": _vector,
                    "params": LRPD_PARAMS,
                },
            },
        }
    },
}

MAP_PREDICTIONS = {
    "type": "object",
    "required": ["elements"],
    "properties": {
        "scene": {"type": "string"},
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "score"],
                "properties": {
                    "class": {"type": "integer", "minimum": 0},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "points": _polyline,
                    "params": LRPD_PARAMS,
                },
                "anyOf": [{"required": ["points"]}, {"required": ["params"]}],
            },
        },
    },
}

TRAJECTORIES = {
    "type": "object",
    "required": ["agents"],
    "properties": {
        "agents": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["modes", "probs"],
                "properties": {"modes": {"type": "array", "items": _polyline}, "probs": _vector},
            },
        }
    },
}

FILM_WEIGHTS = {
    "type": "object",
    "required": ["embed_w", "embed_b", "gamma_w", "gamma_b", "beta_w", "beta_b"],
    "properties": {
        "embed_w": _matrix,
        "embed_b": _vector,
        "gamma_w": _vector,
        "gamma_b": _vector,
        "beta_w": _vector,
        "beta_b": _vector,
    },
}

NOISE_MODEL = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["independent", "translation", "curvature", "range-growth", "composite"]},
        "marginal_std": {"type": "number", "minimum": 0},
        "correlation_length": {"type": "number", "minimum": 1},
        "range_growth_rate": {"type": "number", "minimum": 0},
        "components": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["weight", "model"],
                "properties": {"weight": {"type": "number", "exclusiveMinimum": 0}, "model": {"$ref": "#"}},
            },
        },
    },
}


def validate(doc, schema: dict, what: str = "document") -> dict:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"{what}: {exc.message} (at /{path})") from None
    return doc


def load_json(path, schema: dict | None = None) -> dict:
    """Read and optionally validate a JSON file. Missing files raise ``FileNotFoundError``."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return validate(doc, schema, str(path)) if schema is not None else doc


def dumps(doc) -> str:
    """Canonical serialization: sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=True) + "\n"


def write_json(path, doc) -> None:
    Path(path).write_text(dumps(doc))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
