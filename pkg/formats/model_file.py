"""
Model file format (UTF-8 JSON):

{
  "config":     {num_layers, num_heads, seq_len, hidden_size, head_dim, ffn_hidden,
                 num_classes, pooling, use_output_projection, norm_eps},
  "layers":     [{W_Q, b_Q, W_K, b_K, W_V, b_V, W_O, b_O, norm1_gamma, norm1_beta,
                  W_1, b_1, W_2, b_2, norm2_gamma, norm2_beta}, ...],
  "pooler":     {"W": [[...]], "b": [...]} | null,
  "classifier": {"W": [[...]], "b": [...]}
}

Matrices are row-major nested arrays of doubles, written as shortest round-trip
decimals so that save -> load reproduces every weight bit-exactly.
"""
import json
import math
from pathlib import Path
from typing import Any, Sequence

import torch

from bounds import DTYPE
from errors import NonFiniteError, ParseError, ShapeError


def encode_tensor(tensor: torch.Tensor) -> Any:
    return tensor.detach().to(DTYPE).tolist()


def decode_tensor(obj: Any, name: str, shape: Sequence[int]) -> torch.Tensor:
    """Converts a nested list to a float64 tensor, checking shape and finiteness."""
    try:
        tensor = torch.tensor(obj, dtype=DTYPE)
    except (TypeError, ValueError) as exc:
        # ragged rows or non-numeric entries
        raise ShapeError(name, shape, _ragged_shape(obj)) from exc
    if tuple(tensor.shape) != tuple(shape):
        raise ShapeError(name, shape, tensor.shape)
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(name)
    return tensor


def _ragged_shape(obj: Any) -> tuple:
    shape = []
    while isinstance(obj, list):
        shape.append(len(obj))
        obj = obj[0] if obj else None
    return tuple(shape)


def require(doc: dict, key: str, path: str, context: str = "") -> Any:
    if not isinstance(doc, dict) or key not in doc:
        where = f"{context}.{key}" if context else key
        raise ParseError(path, f"missing field '{where}'")
    return doc[key]


def read_document(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(path), str(exc)) from exc
    if not isinstance(doc, dict):
        raise ParseError(str(path), "top level must be a JSON object")
    return doc


def write_document(path: str | Path, doc: dict):
    for value in _floats(doc):
        if not math.isfinite(value):
            raise NonFiniteError(str(path))
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def _floats(obj: Any):
    if isinstance(obj, float):
        yield obj
    elif isinstance(obj, dict):
        for value in obj.values():
            yield from _floats(value)
    elif isinstance(obj, list):
        for value in obj:
            yield from _floats(value)
