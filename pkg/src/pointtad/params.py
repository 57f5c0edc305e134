"""Flat parameter container and its JSON/base64 checkpoint format."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .autograd import Parameter

FORMAT = "pointtad-params"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in entry["shape"])
        raw = base64.b64decode(entry["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array entry: {exc}") from None
    a = np.frombuffer(raw, dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"payload holds {a.size} values, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape).astype(np.float64)


class ParameterStore:
    """Ordered mapping of unique names to :class:`Parameter` objects."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(np.array(value, dtype=np.float64), name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self._params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.data = v.copy()

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "arrays": {k: encode_array(v) for k, v in arrays.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}, expected {VERSION}")
    arrays = {k: decode_array(v) for k, v in doc["arrays"].items()}
    return arrays, doc.get("meta", {})
