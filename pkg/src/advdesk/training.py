"""Minibatch gradient-descent training loops.

Plain SGD, fixed learning rate, seeded shuffling: the same seed always
produces the same parameters. Defense-specific training (adversarial
augmentation, denoiser objectives) composes these helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ArchitectureDescriptor, build_model, forward


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0


class DivergedError(ArithmeticError):
    """Training loss became non-finite."""


def sgd_step(params: dict, learning_rate: float) -> None:
    for t in params.values():
        if t.grad is not None:
            t.data -= learning_rate * t.grad
            t.grad = None


def iterate_minibatches(n: int, batch_size: int, epochs: int, seed: int):
    """Yields (epoch, index-array) with a fresh seeded shuffle per epoch."""
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, order[start:start + batch_size]


def train_model(desc: ArchitectureDescriptor, images: np.ndarray, targets: np.ndarray,
                loss_fn: Callable[[dict, np.ndarray, np.ndarray], Tensor],
                config: TrainConfig,
                params: Optional[dict] = None,
                batch_hook: Optional[Callable] = None) -> dict:
    """Generic loop: loss_fn(params, batch_images, batch_targets) -> scalar Tensor."""
    if params is None:
        params = build_model(desc, config.seed)
    for _, idx in iterate_minibatches(len(images), config.batch_size,
                                      config.epochs, config.seed + 1):
        xb, tb = images[idx], targets[idx]
        if batch_hook is not None:
            xb, tb = batch_hook(params, xb, tb)
        loss = loss_fn(params, xb, tb)
        if not np.isfinite(loss.data).all():
            raise DivergedError(f"non-finite training loss {loss.data}")
        ad.backward(loss)
        sgd_step(params, config.learning_rate)
    return params


def train_classifier(desc: ArchitectureDescriptor, images: np.ndarray,
                     labels: np.ndarray, config: TrainConfig,
                     params: Optional[dict] = None,
                     batch_hook: Optional[Callable] = None) -> dict:
    def loss_fn(p, xb, yb):
        return ad.cross_entropy(forward(p, Tensor(xb), desc), yb)

    return train_model(desc, images, labels, loss_fn, config, params=params,
                       batch_hook=batch_hook)


def train_segmenter(desc: ArchitectureDescriptor, images: np.ndarray,
                    masks: np.ndarray, config: TrainConfig,
                    params: Optional[dict] = None) -> dict:
    def loss_fn(p, xb, mb):
        return ad.binary_cross_entropy(forward(p, Tensor(xb), desc), mb)

    return train_model(desc, images, masks, loss_fn, config, params=params)
