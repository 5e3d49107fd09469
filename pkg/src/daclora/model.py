"""Dual-encoder few-shot classifier with LoRA adapters.

The image side is a small ReLU MLP whose every linear layer carries a
low-rank residual ``gamma * B @ A``. The "text" side is a frozen table of
class embeddings, optionally passed through its own adapted projection.
Logits are temperature-scaled cosine similarities.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

DEFAULT_TAU = 10.0


class LoraLinear:
    """``h = x W^T + bias + gamma * (x A^T) B^T``.

    ``W`` is ``(d_out, d_in)``, ``A`` is ``(rank, d_in)``, ``B`` is
    ``(d_out, rank)``; only ``A`` and ``B`` are meant to train.
    """

    def __init__(self, W: np.ndarray, bias: np.ndarray | None, A: np.ndarray, B: np.ndarray, gamma: float = 1.0):
        W = np.asarray(W, dtype=np.float64)
        d_out, d_in = W.shape
        rank = np.shape(A)[0]
        if np.shape(A) != (rank, d_in) or np.shape(B) != (d_out, rank):
            raise ag.ShapeError(f"LoRA factors A{np.shape(A)} B{np.shape(B)} do not fit W{W.shape}")
        if bias is not None and np.shape(bias) != (d_out,):
            raise ag.ShapeError(f"bias shape {np.shape(bias)} does not match d_out={d_out}")
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.W = Tensor(W)
        self.bias = None if bias is None else Tensor(bias)
        self.A = Tensor(A, requires_grad=True)
        self.B = Tensor(B, requires_grad=True)
        self.gamma = float(gamma)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def __call__(self, x) -> Tensor:
        return lora_forward(self, x)


def lora_forward(layer: LoraLinear, x) -> Tensor:
    x = ag.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != layer.d_in:
        raise ag.ShapeError(f"input of shape {x.shape} does not match d_in={layer.d_in}")
    h = ag.matmul(x, layer.W.T)
    if layer.bias is not None:
        h = ag.add_bias(h, layer.bias)
    if layer.gamma != 0.0:
        low = ag.matmul(ag.matmul(x, layer.A.T), layer.B.T)
        h = ag.add(h, ag.scale(low, layer.gamma))
    return h


def init_lora(d_in: int, d_out: int, rank: int = 4, gamma: float = 1.0, seed: int = 0,
              W: np.ndarray | None = None, bias: np.ndarray | None = None) -> LoraLinear:
    """Wrap a (pretrained) weight with a fresh adapter: ``A ~ N(0, 1/d_in)``, ``B = 0``.

    Without ``W`` a He-initialised weight is drawn from the same seed, which
    is how an untrained backbone is built before pretraining.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in))
    if W is None:
        W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        bias = np.zeros(d_out) if bias is None else bias
    return LoraLinear(np.array(W, dtype=np.float64), None if bias is None else np.array(bias, dtype=np.float64),
                      A, np.zeros((d_out, rank)), gamma)


def make_class_embeddings(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Seeded, mutually orthogonal (when ``C <= D``) unit-norm class anchors."""
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(max(num_classes, dim), dim))
    q, _ = np.linalg.qr(g)
    emb = q[:num_classes] if num_classes <= dim else g[:num_classes]
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


@dataclass
class ParamPartition:
    frozen: list[Tensor] = field(default_factory=list)
    trainable: list[Tensor] = field(default_factory=list)


class DualEncoderModel:
    def __init__(self, layers: list[LoraLinear], class_embeddings: np.ndarray, tau: float = DEFAULT_TAU,
                 text_adapter: LoraLinear | None = None):
        if not layers:
            raise ValueError("image encoder needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ag.ShapeError(f"layer widths {prev.d_out} -> {nxt.d_in} do not chain")
        emb = np.asarray(class_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != layers[-1].d_out:
            raise ag.ShapeError(f"class embeddings {emb.shape} do not match embed dim {layers[-1].d_out}")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.layers = layers
        self.class_embeddings = Tensor(emb)
        self.tau = float(tau)
        self.text_adapter = text_adapter

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def d_pixels(self) -> int:
        return self.layers[0].d_in

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].d_out

    def lora_layers(self) -> list[LoraLinear]:
        return self.layers + ([self.text_adapter] if self.text_adapter is not None else [])

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.lora_layers():
            out.append(layer.W)
            if layer.bias is not None:
                out.append(layer.bias)
            out.extend([layer.A, layer.B])
        out.append(self.class_embeddings)
        return out

    def copy(self) -> DualEncoderModel:
        return copy.deepcopy(self)


def build_model(d_pixels: int, num_classes: int, hidden: tuple[int, ...] = (64, 64), embed_dim: int = 32,
                rank: int = 4, gamma: float = 1.0, tau: float = DEFAULT_TAU, seed: int = 0,
                adapt_text: bool = False, class_embeddings: np.ndarray | None = None) -> DualEncoderModel:
    """Randomly initialised backbone with zero-initialised adapters."""
    widths = [d_pixels, *hidden, embed_dim]
    ss = np.random.SeedSequence(seed)
    layer_seeds = ss.spawn(len(widths))
    layers = [init_lora(d_in, d_out, rank, gamma, seed=int(s.generate_state(1)[0]))
              for d_in, d_out, s in zip(widths[:-1], widths[1:], layer_seeds[:-1])]
    if class_embeddings is None:
        class_embeddings = make_class_embeddings(num_classes, embed_dim, int(layer_seeds[-1].generate_state(1)[0]))
    text_adapter = None
    if adapt_text:
        text_adapter = init_lora(embed_dim, embed_dim, rank, gamma, seed=int(layer_seeds[-1].generate_state(2)[1]),
                                 W=np.eye(embed_dim), bias=None)
    return DualEncoderModel(layers, class_embeddings, tau, text_adapter)


def reset_adapters(model: DualEncoderModel, seed: int) -> None:
    """Give every adapter a fresh ``A`` and zero ``B``; frozen weights are kept."""
    ss = np.random.SeedSequence(seed)
    for layer, s in zip(model.lora_layers(), ss.spawn(len(model.lora_layers()))):
        fresh = init_lora(layer.d_in, layer.d_out, layer.rank, layer.gamma, seed=int(s.generate_state(1)[0]),
                          W=layer.W.data)
        layer.A = Tensor(fresh.A.data, requires_grad=layer.A.requires_grad)
        layer.B = Tensor(fresh.B.data, requires_grad=layer.B.requires_grad)


def encode_image(model: DualEncoderModel, x) -> Tensor:
    h = ag.as_tensor(x)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = lora_forward(layer, h)
        if i < last:
            h = ag.relu(h)
    return ag.row_normalize(h)


def encode_classes(model: DualEncoderModel) -> Tensor:
    e = model.class_embeddings
    if model.text_adapter is not None:
        e = lora_forward(model.text_adapter, e)
    return ag.row_normalize(e)


def logits(model: DualEncoderModel, x) -> Tensor:
    img = encode_image(model, x)
    return ag.scale(ag.matmul(img, ag.transpose(encode_classes(model))), model.tau)


def predict(model: DualEncoderModel, x) -> np.ndarray:
    return logits(model, x).data.argmax(axis=1)


def partition_params(model: DualEncoderModel) -> ParamPartition:
    """Split parameters into frozen backbone and trainable adapters, setting flags to match."""
    part = partition_params_view(model)
    for t in part.frozen:
        t.requires_grad = False
        t.grad = None
    for t in part.trainable:
        t.requires_grad = True
    return part


def unfreeze_backbone(model: DualEncoderModel) -> list[Tensor]:
    """Weights and biases of the image encoder, marked trainable (pretraining only)."""
    params = []
    for layer in model.layers:
        params.append(layer.W)
        if layer.bias is not None:
            params.append(layer.bias)
    for layer in model.lora_layers():
        layer.A.requires_grad = False
        layer.B.requires_grad = False
    for p in params:
        p.requires_grad = True
    return params


def frozen_hash(model: DualEncoderModel) -> str:
    h = hashlib.sha256()
    for t in partition_params_view(model).frozen:
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def partition_params_view(model: DualEncoderModel) -> ParamPartition:
    """Like :func:`partition_params` but leaves ``requires_grad`` flags alone."""
    part = ParamPartition()
    for layer in model.lora_layers():
        part.frozen.append(layer.W)
        if layer.bias is not None:
            part.frozen.append(layer.bias)
        part.trainable.extend([layer.A, layer.B])
    part.frozen.append(model.class_embeddings)
    return part
