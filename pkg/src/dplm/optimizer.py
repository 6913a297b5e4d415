"""Training loops: non-private Adam/SGD baselines and DPSGD.

DPSGD clips every example's gradient to l2 norm at most C, sums the clipped
gradients, adds one zero-mean Gaussian draw with per-coordinate standard
deviation sigma*C to the sum, and averages. The noisy mean gradient equals
the mean clipped gradient in expectation. Every DPSGD step records a
(q, sigma, 1) entry in a privacy ledger for the accountant.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import numerics
from .accountant import (
    PER_EXAMPLE_NOISE_ASSUMPTION,
    STANDARD_ASSUMPTION,
    PrivacyLedger,
)
from .corpus import ContextWindowDataset
from .model import LanguageModel
from .numerics import ParamVector


class TrainingError(ValueError):
    """Raised for invalid training configurations or diverged gradients."""


@dataclass(frozen=True)
class PrivacySpec:
    """Parameters governing one differentially private training run.

    sigma = 0 marks a run as non-private: the ledger is still kept but no
    epsilon may be reported for it. `per_example_noise` switches to the
    reading where every clipped gradient gets its own Gaussian draw before
    averaging; the resulting ledger is tagged non-standard.
    """

    sigma: float
    clip_norm: float
    delta: float
    gamma: int = 1
    per_example_noise: bool = False

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise TrainingError("sigma must be nonnegative")
        if self.clip_norm <= 0:
            raise TrainingError("clip norm must be positive")
        if not (0.0 < self.delta < 1.0):
            raise TrainingError("delta must lie in (0, 1)")
        if self.gamma < 1:
            raise TrainingError("gamma must be a positive integer")

    @property
    def assumption(self) -> str:
        return PER_EXAMPLE_NOISE_ASSUMPTION if self.per_example_noise else STANDARD_ASSUMPTION


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    epochs: int
    learning_rate: float
    seed: int
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise TrainingError("batch size must be positive")
        if self.epochs < 0:
            raise TrainingError("epochs must be nonnegative")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd", "dpsgd"):
            raise TrainingError("optimizer must be one of adam, sgd, dpsgd")


def clip_gradient(grad: ParamVector, clip_norm: float) -> ParamVector:
    """g / max(1, ||g||_2 / C): norm capped at C, direction preserved."""
    if clip_norm <= 0:
        raise TrainingError("clip norm must be positive")
    if not np.all(np.isfinite(grad.values)):
        raise TrainingError("divergent gradient")
    norm = float(np.linalg.norm(grad.values))
    if norm <= clip_norm:
        return grad.copy()
    return ParamVector(grad.values * (clip_norm / norm), grad.layout)


def noisy_batch_gradient(
    model: LanguageModel,
    contexts: np.ndarray,
    targets: np.ndarray,
    spec: PrivacySpec,
    rng: np.random.Generator,
) -> ParamVector:
    """Average of clipped per-example gradients plus scaled Gaussian noise.

    One aggregate draw with per-coordinate std sigma*C is added to the sum
    of clipped gradients before dividing by the batch size (L independent
    per-example draws when `spec.per_example_noise` is set).
    """
    n = len(contexts)
    if n == 0:
        raise TrainingError("empty batch")
    total = ParamVector.zeros(model.arch)
    noise_std = spec.sigma * spec.clip_norm
    for i in range(n):
        grad = numerics.example_grad(model.params, contexts[i], int(targets[i]), model.arch)
        if not np.all(np.isfinite(grad.values)):
            raise TrainingError(f"divergent gradient at batch index {i}")
        total.values += clip_gradient(grad, spec.clip_norm).values
        if spec.per_example_noise and noise_std > 0:
            total.values += rng.normal(0.0, noise_std, size=total.values.size)
    if not spec.per_example_noise and noise_std > 0:
        total.values += rng.normal(0.0, noise_std, size=total.values.size)
    total.values /= n
    return total


def dpsgd_step(
    model: LanguageModel,
    contexts: np.ndarray,
    targets: np.ndarray,
    spec: PrivacySpec,
    lr: float,
    rng: np.random.Generator,
    dataset_size: int,
    ledger: PrivacyLedger,
) -> LanguageModel:
    """One descent step on the noisy mean gradient; always consumes privacy."""
    grad = noisy_batch_gradient(model, contexts, targets, spec, rng)
    model.params.values -= lr * grad.values
    ledger.record(q=len(contexts) / dataset_size, sigma=spec.sigma, steps=1)
    return model


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values))


def adam_step(
    model: LanguageModel,
    contexts: np.ndarray,
    targets: np.ndarray,
    lr: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[LanguageModel, AdamState]:
    """Standard Adam update with bias correction on the batch mean gradient."""
    if state.m.size != model.params.values.size:
        raise TrainingError("Adam state layout does not match the parameters")
    _, grad = numerics.batch_mean_grad(model.params, contexts, targets, model.arch)
    if not np.all(np.isfinite(grad.values)):
        raise TrainingError("divergent gradient")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad.values
    state.v = beta2 * state.v + (1.0 - beta2) * grad.values**2
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    model.params.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return model, state


def sgd_step(
    model: LanguageModel, contexts: np.ndarray, targets: np.ndarray, lr: float
) -> LanguageModel:
    _, grad = numerics.batch_mean_grad(model.params, contexts, targets, model.arch)
    if not np.all(np.isfinite(grad.values)):
        raise TrainingError("divergent gradient")
    model.params.values -= lr * grad.values
    return model


MetricRow = tuple[int, int, str, str, float]


def train(
    model: LanguageModel,
    data: ContextWindowDataset,
    config: TrainConfig,
    spec: PrivacySpec | None = None,
    dev_data: ContextWindowDataset | None = None,
    eval_interval: int = 200,
) -> tuple[LanguageModel, list[MetricRow], PrivacyLedger | None]:
    """Run epochs x ceil(N/L) steps with epoch-wise shuffling.

    Records (step, train loss, dev perplexity) every `eval_interval` steps;
    a diverged dev perplexity is recorded as +inf, never raised. Returns
    the trained model, the metric rows, and (for dpsgd) the full ledger.
    """
    if config.optimizer == "dpsgd" and spec is None:
        raise TrainingError("dpsgd training requires a PrivacySpec")
    n = data.n
    if config.epochs > 0 and config.batch_size > n:
        raise TrainingError(f"batch size {config.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(config.seed)
    metrics: list[MetricRow] = []
    ledger = PrivacyLedger(assumption=spec.assumption) if config.optimizer == "dpsgd" else None
    adam_state = AdamState.zeros_like(model.params) if config.optimizer == "adam" else None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            contexts, targets = data.contexts[idx], data.targets[idx]
            step += 1
            record = eval_interval > 0 and step % eval_interval == 0
            if record:
                metrics.append(
                    (step, epoch, "train", "loss", model_mod.batch_loss(model, contexts, targets))
                )
            if config.optimizer == "adam":
                model, adam_state = adam_step(
                    model, contexts, targets, config.learning_rate, adam_state
                )
            elif config.optimizer == "sgd":
                model = sgd_step(model, contexts, targets, config.learning_rate)
            else:
                assert spec is not None
                model = dpsgd_step(
                    model, contexts, targets, spec, config.learning_rate, rng, n, ledger
                )
            if record and dev_data is not None:
                pp = model_mod.perplexity(model, dev_data)
                metrics.append((step, epoch, "dev", "perplexity", pp))
    return model, metrics, ledger


METRICS_HEADER = "step,epoch,split,metric,value"


def write_metrics_csv(rows: list[MetricRow], path: str | Path) -> None:
    """CSV with `value` as the shortest round-trip decimal."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for step, epoch, split_name, metric, value in rows:
            fh.write(f"{step},{epoch},{split_name},{metric},{value!r}\n")


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    rows: list[MetricRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise IOError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            step, epoch, split_name, metric, value = line.rstrip("\n").split(",")
            rows.append((int(step), int(epoch), split_name, metric, float(value)))
    return rows
