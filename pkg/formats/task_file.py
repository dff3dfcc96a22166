"""
Input file format (UTF-8 JSON): {"X": [[...], ...], "label": k}

X is the clean n x m input, row-major. label is the 0-based class index the model is
expected to predict for X; it may be omitted, in which case the prediction is used.
"""
from pathlib import Path
from typing import Optional, Tuple

import torch

from errors import ParseError
from formats.model_file import decode_tensor, encode_tensor, read_document, require, write_document


def load_input(path: str | Path, shape: Tuple[int, int]) -> Tuple[torch.Tensor, Optional[int]]:
    path = str(path)
    doc = read_document(path)
    X = decode_tensor(require(doc, "X", path), "X", shape)
    label = doc.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise ParseError(path, f"label must be an integer, got {label!r}")
    return X, label


def save_input(path: str | Path, X: torch.Tensor, label: Optional[int]):
    doc = {"X": encode_tensor(X)}
    if label is not None:
        doc["label"] = int(label)
    write_document(path, doc)
