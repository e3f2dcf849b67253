"""Text tensor container used for model checkpoints.

A checkpoint is a single JSON document: a manifest of named tensors, each
with its shape and row-major float64 values, plus a free-form ``meta``
section (normalization statistics, class names, config).  Floats are
serialized with ``repr`` semantics, so load(save(x)) is bit-exact.
"""

from __future__ import annotations

import json
from typing import Any, Dict, Mapping, Tuple

import numpy as np

FORMAT_NAME = "neurotwin-tensors"
FORMAT_VERSION = 1


def save_tensors(path: str, tensors: Mapping[str, np.ndarray],
                 meta: Dict[str, Any] | None = None) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": [
            {
                "name": name,
                "shape": list(np.asarray(arr).shape),
                "data": [float(v) for v in np.asarray(arr, dtype=np.float64).ravel()],
            }
            for name, arr in tensors.items()
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_tensors(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file: {path}")
    tensors = {}
    for entry in doc["tensors"]:
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = arr
    return tensors, doc.get("meta", {})
