"""The feedforward language model: presets, evaluation, generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corpus, numerics
from .corpus import ContextWindowDataset, Vocabulary
from .numerics import Architecture, ParamVector

#: Hidden layer sizes of the two architectures studied; both use a
#: 20-token context window.
PRESETS = {
    "small": (500, 250, 50),
    "large": (10000, 5000, 1000),
}


def preset(name: str, vocab_size: int, embed_dim: int = 64) -> Architecture:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return Architecture(
        vocab_size=vocab_size,
        context_len=20,
        embed_dim=embed_dim,
        hidden=PRESETS[name],
    )


@dataclass
class LanguageModel:
    arch: Architecture
    params: ParamVector

    @classmethod
    def initialized(cls, arch: Architecture, rng: np.random.Generator) -> "LanguageModel":
        return cls(arch, numerics.init_params(arch, rng))


def batch_loss(model: LanguageModel, contexts: np.ndarray, targets: np.ndarray) -> float:
    """Arithmetic mean of the per-example losses."""
    if len(contexts) == 0:
        raise ValueError("empty batch")
    nll = numerics.batch_nll(model.params, contexts, targets, model.arch)
    return float(np.mean(nll))


def perplexity(
    model: LanguageModel, dataset: ContextWindowDataset, chunk_size: int = 4096
) -> float:
    """exp of the mean per-token negative log-likelihood over the dataset.

    Evaluates in fixed-order chunks so results are identical regardless of
    available memory; a diverged model yields +inf rather than an error.
    """
    n = dataset.n
    if n == 0:
        raise ValueError("perplexity of an empty dataset is undefined")
    total = 0.0
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        nll = numerics.batch_nll(
            model.params, dataset.contexts[start:stop], dataset.targets[start:stop],
            model.arch,
        )
        total += float(np.sum(nll))
    with np.errstate(over="ignore"):
        return float(np.exp(total / n))


def generate(
    model: LanguageModel,
    vocab: Vocabulary,
    prompt: str,
    length: int,
    mode: str = "sample",
    seed: int = 0,
    temperature: float = 1.0,
) -> str:
    """Emit exactly `length` tokens conditioned on the rolling context window.

    PAD can never be emitted (its probability mass is renormalized away) and
    an EOS draw does not stop emission. Deterministic given (seed, mode).
    """
    if length < 1:
        raise ValueError("generation length must be positive")
    if mode not in ("greedy", "sample"):
        raise ValueError("mode must be 'greedy' or 'sample'")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    k = model.arch.context_len
    prompt_ids = corpus.encode(prompt, vocab)[:-1]  # condition without the EOS
    window = [corpus.PAD_ID] * k + prompt_ids
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(length):
        context = np.asarray(window[-k:], dtype=np.int64)
        probs = numerics.forward(model.params, context, model.arch)
        if mode == "sample" and temperature != 1.0:
            probs = probs ** (1.0 / temperature)
        probs[corpus.PAD_ID] = 0.0
        probs = probs / probs.sum()
        if mode == "greedy":
            token = int(np.argmax(probs))
        else:
            token = int(rng.choice(model.arch.vocab_size, p=probs))
        out.append(token)
        window.append(token)
    return corpus.decode(out, vocab)
