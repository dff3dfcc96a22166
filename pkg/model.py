# Encoder-only transformer: configuration, weights, exact inference and the model file codec.

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from errors import DomainError, NonFiniteError, ParseError, ShapeError
from formats.model_file import DTYPE, decode_tensor, encode_tensor, read_document, require, write_document
from interpreter import Interpreter
from symbols import AttentionBlock, Dense, FeedForwardBlock, Network, Pooling, PoolingMode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    seq_len: int
    hidden_size: int
    head_dim: int
    ffn_hidden: int
    num_classes: int
    pooling: PoolingMode = PoolingMode.MEAN
    use_output_projection: bool = True
    # kept for file-format stability; the norm has no variance term
    norm_eps: float = 0.0

    def __post_init__(self):
        if isinstance(self.pooling, str):
            object.__setattr__(self, "pooling", PoolingMode(self.pooling))
        for name in ("num_layers", "num_heads", "seq_len", "hidden_size", "head_dim", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.hidden_size != self.num_heads * self.head_dim:
            raise DomainError(
                f"hidden_size {self.hidden_size} != num_heads {self.num_heads} x head_dim {self.head_dim}"
            )
        if self.norm_eps < 0:
            raise DomainError(f"norm_eps must be >= 0, got {self.norm_eps}")

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["pooling"] = self.pooling.value
        return doc

    @classmethod
    def from_dict(cls, doc: dict, path: str = "<memory>") -> "ModelConfig":
        values = {f.name: doc[f.name] for f in fields(cls) if f.name in doc}
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ParseError(path, f"config: {exc}") from exc


@dataclass
class LayerWeights:
    W_Q: torch.Tensor
    b_Q: torch.Tensor
    W_K: torch.Tensor
    b_K: torch.Tensor
    W_V: torch.Tensor
    b_V: torch.Tensor
    W_O: torch.Tensor
    b_O: torch.Tensor
    norm1_gamma: torch.Tensor
    norm1_beta: torch.Tensor
    W_1: torch.Tensor
    b_1: torch.Tensor
    W_2: torch.Tensor
    b_2: torch.Tensor
    norm2_gamma: torch.Tensor
    norm2_beta: torch.Tensor

    @staticmethod
    def shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        m, f = config.hidden_size, config.ffn_hidden
        return {
            "W_Q": (m, m), "b_Q": (m,),
            "W_K": (m, m), "b_K": (m,),
            "W_V": (m, m), "b_V": (m,),
            "W_O": (m, m), "b_O": (m,),
            "norm1_gamma": (m,), "norm1_beta": (m,),
            "W_1": (m, f), "b_1": (f,),
            "W_2": (f, m), "b_2": (m,),
            "norm2_gamma": (m,), "norm2_beta": (m,),
        }


@dataclass
class Model:
    config: ModelConfig
    layers: List[LayerWeights]
    classifier_W: torch.Tensor
    classifier_b: torch.Tensor
    pool_W: Optional[torch.Tensor] = None
    pool_b: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        config = self.config
        if len(self.layers) != config.num_layers:
            raise ShapeError("layers", (config.num_layers,), (len(self.layers),))
        expected = LayerWeights.shapes(config)
        for index, layer in enumerate(self.layers):
            for name, shape in expected.items():
                _check(f"layers[{index}].{name}", getattr(layer, name), shape)
        m, c = config.hidden_size, config.num_classes
        if (self.pool_W is None) != (self.pool_b is None):
            raise ShapeError("pooler", (m,), (0,))
        if self.pool_W is not None:
            _check("pooler.W", self.pool_W, (m, m))
            _check("pooler.b", self.pool_b, (m,))
        _check("classifier.W", self.classifier_W, (m, c))
        _check("classifier.b", self.classifier_b, (c,))

    def network(self) -> Network:
        """Lowers the model to the op sequence walked by the interpreter and the bound engine."""
        config = self.config
        ops = []
        for index, layer in enumerate(self.layers):
            ops.append(AttentionBlock(
                layer=index, num_heads=config.num_heads, head_dim=config.head_dim,
                W_Q=layer.W_Q, b_Q=layer.b_Q, W_K=layer.W_K, b_K=layer.b_K,
                W_V=layer.W_V, b_V=layer.b_V, W_O=layer.W_O, b_O=layer.b_O,
                norm_gamma=layer.norm1_gamma, norm_beta=layer.norm1_beta,
            ))
            ops.append(FeedForwardBlock(
                layer=index, W_1=layer.W_1, b_1=layer.b_1, W_2=layer.W_2, b_2=layer.b_2,
                norm_gamma=layer.norm2_gamma, norm_beta=layer.norm2_beta,
            ))
        ops.append(Pooling(config.pooling))
        if self.pool_W is not None:
            ops.append(Dense("pooler", self.pool_W, self.pool_b))
        ops.append(Dense("classifier", self.classifier_W, self.classifier_b))
        return Network(ops)


def _check(name: str, tensor: torch.Tensor, shape: Tuple[int, ...]):
    if tuple(tensor.shape) != tuple(shape):
        raise ShapeError(name, shape, tensor.shape)
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(name)


def forward(model: Model, X: torch.Tensor) -> torch.Tensor:
    """Exact logits for X of shape (n, m), or (batch, n, m)."""
    X = torch.as_tensor(X, dtype=DTYPE)
    expected = (model.config.seq_len, model.config.hidden_size)
    if X.dim() < 2 or tuple(X.shape[-2:]) != expected:
        raise ShapeError("X", expected, X.shape)
    return Interpreter().evaluate(model.network(), X)


def predict(model: Model, X: torch.Tensor) -> int:
    return int(torch.argmax(forward(model, X)).item())


def generate_random_model(config: ModelConfig, seed: int, with_pooler: bool = False) -> Model:
    """
    Every weight matrix and bias is drawn from U[-s, s] with s = 1/sqrt(hidden_size), in the
    order of `LayerWeights.shapes` per layer, then the pooler (optional) and the classifier.
    Norm gammas are 1 and betas 0; W_O is the identity (b_O zero) without output projection.
    """
    generator = torch.Generator().manual_seed(seed)
    scale = 1.0 / math.sqrt(config.hidden_size)

    def uniform(*shape):
        return (torch.rand(*shape, dtype=DTYPE, generator=generator) * 2.0 - 1.0) * scale

    m = config.hidden_size
    layers = []
    for _ in range(config.num_layers):
        values = {}
        for name, shape in LayerWeights.shapes(config).items():
            if name.startswith("norm"):
                values[name] = torch.ones(shape, dtype=DTYPE) if name.endswith("gamma") \
                    else torch.zeros(shape, dtype=DTYPE)
            elif name in ("W_O", "b_O") and not config.use_output_projection:
                values[name] = torch.eye(m, dtype=DTYPE) if name == "W_O" else torch.zeros(m, dtype=DTYPE)
            else:
                values[name] = uniform(*shape)
        layers.append(LayerWeights(**values))
    pool_W = pool_b = None
    if with_pooler:
        pool_W, pool_b = uniform(m, m), uniform(m)
    classifier_W = uniform(m, config.num_classes)
    classifier_b = uniform(config.num_classes)
    logger.debug("generated model seed=%d layers=%d hidden=%d", seed, config.num_layers, m)
    return Model(config, layers, classifier_W, classifier_b, pool_W, pool_b)


def random_input(config: ModelConfig, seed: int) -> torch.Tensor:
    """Clean input ~ U[-1, 1]^(n x m) from its own generator seeded with `seed`."""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(config.seq_len, config.hidden_size, dtype=DTYPE, generator=generator) * 2.0 - 1.0


def save_model(model: Model, path: str | Path):
    layers = [
        {name: encode_tensor(getattr(layer, name)) for name in LayerWeights.shapes(model.config)}
        for layer in model.layers
    ]
    pooler = None
    if model.pool_W is not None:
        pooler = {"W": encode_tensor(model.pool_W), "b": encode_tensor(model.pool_b)}
    doc = {
        "config": model.config.to_dict(),
        "layers": layers,
        "pooler": pooler,
        "classifier": {"W": encode_tensor(model.classifier_W), "b": encode_tensor(model.classifier_b)},
    }
    write_document(path, doc)


def load_model(path: str | Path) -> Model:
    path = str(path)
    doc = read_document(path)
    config_doc = require(doc, "config", path)
    if not isinstance(config_doc, dict):
        raise ParseError(path, "config must be an object")
    config = ModelConfig.from_dict(config_doc, path)
    layer_docs = require(doc, "layers", path)
    if not isinstance(layer_docs, list):
        raise ParseError(path, "layers must be an array")
    if len(layer_docs) != config.num_layers:
        raise ShapeError("layers", (config.num_layers,), (len(layer_docs),))
    shapes = LayerWeights.shapes(config)
    layers = []
    for index, layer_doc in enumerate(layer_docs):
        prefix = f"layers[{index}]"
        values = {
            name: decode_tensor(require(layer_doc, name, path, prefix), f"{prefix}.{name}", shape)
            for name, shape in shapes.items()
        }
        layers.append(LayerWeights(**values))
    m, c = config.hidden_size, config.num_classes
    pool_W = pool_b = None
    pooler = doc.get("pooler")
    if pooler is not None:
        pool_W = decode_tensor(require(pooler, "W", path, "pooler"), "pooler.W", (m, m))
        pool_b = decode_tensor(require(pooler, "b", path, "pooler"), "pooler.b", (m,))
    classifier = require(doc, "classifier", path)
    classifier_W = decode_tensor(require(classifier, "W", path, "classifier"), "classifier.W", (m, c))
    classifier_b = decode_tensor(require(classifier, "b", path, "classifier"), "classifier.b", (c,))
    logger.info("loaded model %s (%d layers, hidden %d)", path, config.num_layers, m)
    return Model(config, layers, classifier_W, classifier_b, pool_W, pool_b)
