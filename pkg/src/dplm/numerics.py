"""Dense kernels for the feedforward LM: forward, loss, exact gradients.

Parameters live in one flat float64 vector with a named layout so the
optimizer and the checkpoint format can treat the model as a single array.
The network embeds each of the k context tokens, concatenates the
embeddings, applies ReLU hidden layers and a softmax output layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class ShapeMismatchError(ValueError):
    """Parameter vector extents do not match the architecture."""


@dataclass(frozen=True)
class Architecture:
    """Layer shapes of the feedforward LM; fully determines the param layout."""

    vocab_size: int
    context_len: int = 20
    embed_dim: int = 64
    hidden: tuple[int, ...] = (500, 250, 50)

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ValueError("vocab_size must include the four special tokens")
        if self.context_len < 1:
            raise ValueError("context length must be positive")
        if self.embed_dim < 1:
            raise ValueError("embedding dim must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be a non-empty list of positive ints")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer, output layer last."""
        sizes = [self.context_len * self.embed_dim, *self.hidden, self.vocab_size]
        return list(zip(sizes[:-1], sizes[1:]))

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        entries: list[tuple[str, tuple[int, ...]]] = [
            ("embed", (self.vocab_size, self.embed_dim))
        ]
        dims = self.layer_dims()
        for i, (fan_in, fan_out) in enumerate(dims[:-1]):
            entries.append((f"w{i}", (fan_in, fan_out)))
            entries.append((f"b{i}", (fan_out,)))
        fan_in, fan_out = dims[-1]
        entries.append(("w_out", (fan_in, fan_out)))
        entries.append(("b_out", (fan_out,)))
        return entries

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_layout())


@dataclass
class ParamVector:
    """Flat float64 parameter (or gradient) vector plus its layout.

    Gradients reuse this type: a gradient of a model shares the model's
    layout entry for entry.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...], int], ...]

    @classmethod
    def zeros(cls, arch: Architecture) -> "ParamVector":
        layout = []
        offset = 0
        for name, shape in arch.param_layout():
            layout.append((name, shape, offset))
            offset += int(np.prod(shape))
        return cls(np.zeros(offset, dtype=np.float64), tuple(layout))

    def view(self, name: str) -> np.ndarray:
        """Writable reshaped view of one named block."""
        for entry, shape, offset in self.layout:
            if entry == name:
                size = int(np.prod(shape))
                return self.values[offset:offset + size].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def blocks(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, shape, offset in self.layout:
            size = int(np.prod(shape))
            yield name, self.values[offset:offset + size].reshape(shape)


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamVector:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params = ParamVector.zeros(arch)
    for name, block in params.blocks():
        if name.startswith("b"):
            continue
        fan_in, fan_out = block.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        block[...] = rng.uniform(-bound, bound, size=block.shape)
    return params


def check_shapes(params: ParamVector, arch: Architecture) -> None:
    expected = arch.param_count
    actual = params.values.size
    if expected != actual:
        raise ShapeMismatchError(
            f"parameter vector has {actual} entries, architecture needs {expected}"
        )


def _forward_cached(
    params: ParamVector, context: np.ndarray, arch: Architecture
) -> tuple[list[np.ndarray], np.ndarray]:
    """Activations of every layer (input first) and the output logits."""
    check_shapes(params, arch)
    embed = params.view("embed")
    h = embed[np.asarray(context, dtype=np.int64)].reshape(-1)
    acts = [h]
    for i in range(len(arch.hidden)):
        h = np.maximum(h @ params.view(f"w{i}") + params.view(f"b{i}"), 0.0)
        acts.append(h)
    logits = h @ params.view("w_out") + params.view("b_out")
    return acts, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis; rows sum to 1 within 1e-12."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(params: ParamVector, context: np.ndarray, arch: Architecture) -> np.ndarray:
    """Probability vector over the vocabulary for one context."""
    _, logits = _forward_cached(params, context, arch)
    return softmax(logits)


def example_loss(
    params: ParamVector, context: np.ndarray, target: int, arch: Architecture
) -> float:
    """-log p(target | context), computed from logits without underflow."""
    _, logits = _forward_cached(params, context, arch)
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[target])


def example_grad(
    params: ParamVector, context: np.ndarray, target: int, arch: Architecture
) -> ParamVector:
    """Exact gradient of example_loss with respect to every parameter."""
    context = np.asarray(context, dtype=np.int64)
    acts, logits = _forward_cached(params, context, arch)
    grad = ParamVector.zeros(arch)

    dlogits = softmax(logits)
    dlogits[target] -= 1.0
    grad.view("b_out")[...] = dlogits
    grad.view("w_out")[...] = np.outer(acts[-1], dlogits)
    dh = params.view("w_out") @ dlogits
    for i in reversed(range(len(arch.hidden))):
        dpre = dh * (acts[i + 1] > 0.0)
        grad.view(f"b{i}")[...] = dpre
        grad.view(f"w{i}")[...] = np.outer(acts[i], dpre)
        dh = params.view(f"w{i}") @ dpre
    dx = dh.reshape(arch.context_len, arch.embed_dim)
    np.add.at(grad.view("embed"), context, dx)
    return grad


def finite_diff_grad(
    params: ParamVector,
    context: np.ndarray,
    target: int,
    arch: Architecture,
    h: float = 1e-5,
) -> ParamVector:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    grad = ParamVector.zeros(arch)
    theta = params.values
    for i in range(theta.size):
        saved = theta[i]
        theta[i] = saved + h
        up = example_loss(params, context, target, arch)
        theta[i] = saved - h
        down = example_loss(params, context, target, arch)
        theta[i] = saved
        grad.values[i] = (up - down) / (2.0 * h)
    return grad


def _batch_forward_cached(
    params: ParamVector, contexts: np.ndarray, arch: Architecture
) -> tuple[list[np.ndarray], np.ndarray]:
    check_shapes(params, arch)
    embed = params.view("embed")
    n = contexts.shape[0]
    h = embed[contexts].reshape(n, arch.context_len * arch.embed_dim)
    acts = [h]
    for i in range(len(arch.hidden)):
        h = np.maximum(h @ params.view(f"w{i}") + params.view(f"b{i}"), 0.0)
        acts.append(h)
    logits = h @ params.view("w_out") + params.view("b_out")
    return acts, logits


def batch_forward(
    params: ParamVector, contexts: np.ndarray, arch: Architecture
) -> np.ndarray:
    """Row-wise probability vectors for a matrix of contexts."""
    _, logits = _batch_forward_cached(params, contexts, arch)
    return softmax(logits)


def batch_nll(
    params: ParamVector,
    contexts: np.ndarray,
    targets: np.ndarray,
    arch: Architecture,
) -> np.ndarray:
    """Per-example -log p(target | context) for a whole batch."""
    _, logits = _batch_forward_cached(params, contexts, arch)
    m = np.max(logits, axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    return lse - logits[np.arange(logits.shape[0]), targets]


def batch_mean_grad(
    params: ParamVector,
    contexts: np.ndarray,
    targets: np.ndarray,
    arch: Architecture,
) -> tuple[float, ParamVector]:
    """Mean loss and mean (unclipped) gradient over a batch, vectorized."""
    n = contexts.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts, logits = _batch_forward_cached(params, contexts, arch)
    m = np.max(logits, axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    mean_loss = float(np.mean(lse - logits[np.arange(n), targets]))

    grad = ParamVector.zeros(arch)
    dlogits = softmax(logits)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    grad.view("b_out")[...] = dlogits.sum(axis=0)
    grad.view("w_out")[...] = acts[-1].T @ dlogits
    dh = dlogits @ params.view("w_out").T
    for i in reversed(range(len(arch.hidden))):
        dpre = dh * (acts[i + 1] > 0.0)
        grad.view(f"b{i}")[...] = dpre.sum(axis=0)
        grad.view(f"w{i}")[...] = acts[i].T @ dpre
        dh = dpre @ params.view(f"w{i}").T
    dx = dh.reshape(n * arch.context_len, arch.embed_dim)
    np.add.at(grad.view("embed"), contexts.reshape(-1), dx)
    return mean_loss, grad


CHECKPOINT_MAGIC = "dplm-checkpoint v1"


def save_checkpoint(path: str | Path, arch: Architecture, params: ParamVector) -> None:
    """Text header with the architecture, then raw little-endian float64."""
    check_shapes(params, arch)
    header = (
        f"{CHECKPOINT_MAGIC}\n"
        f"vocab_size={arch.vocab_size}\n"
        f"context_len={arch.context_len}\n"
        f"embed_dim={arch.embed_dim}\n"
        f"hidden={','.join(str(h) for h in arch.hidden)}\n"
        f"params={params.values.size}\n"
        "end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(params.values.astype("<f8", copy=False).tobytes())


def load_checkpoint(path: str | Path) -> tuple[Architecture, ParamVector]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise IOError(f"{path}: not a parameter checkpoint")
        fields: dict[str, str] = {}
        while True:
            line = fh.readline().decode("utf-8").rstrip("\n")
            if line == "end":
                break
            if not line or "=" not in line:
                raise IOError(f"{path}: malformed checkpoint header line {line!r}")
            key, value = line.split("=", 1)
            fields[key] = value
        arch = Architecture(
            vocab_size=int(fields["vocab_size"]),
            context_len=int(fields["context_len"]),
            embed_dim=int(fields["embed_dim"]),
            hidden=tuple(int(h) for h in fields["hidden"].split(",")),
        )
        count = int(fields["params"])
        raw = fh.read(count * 8)
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if values.size != count or values.size != arch.param_count:
        raise IOError(f"{path}: checkpoint payload truncated or inconsistent")
    params = ParamVector.zeros(arch)
    params.values[...] = values
    return arch, params
