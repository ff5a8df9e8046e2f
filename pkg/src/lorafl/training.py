"""Plain minibatch SGD over a flat trainable layout."""

from __future__ import annotations

import numpy as np

from .model import Batch, flat_loss_and_grad


def sgd(layout, vec, params, adapters, data, epochs, lr, batch_size, rng):
    """Run ``epochs`` shuffled passes over ``data``; returns ``(vec, mean loss per epoch)``."""
    vec = np.array(vec, dtype=np.float64)
    n = len(data)
    losses = []
    if n == 0:
        return vec, losses
    for epoch in range(epochs):
        order = rng.derive("epoch", epoch).generator().permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, g = flat_loss_and_grad(layout, vec, params, adapters, Batch(data.images[idx], data.labels[idx]))
            total += loss * idx.size
            if lr != 0.0:
                vec -= lr * g
        losses.append(total / n)
    return vec, losses


def local_train(global_vec, layout, params, adapters, data, epochs, lr, batch_size, rng) -> np.ndarray:
    """Train from the global snapshot and return the update ``theta_k - theta_S``."""
    global_vec = np.asarray(global_vec, dtype=np.float64)
    if epochs <= 0 or lr == 0.0:
        return np.zeros_like(global_vec)
    vec, _ = sgd(layout, global_vec, params, adapters, data, epochs, lr, batch_size, rng)
    return vec - global_vec


def full_batch_steps(layout, vec, params, adapters, data, steps, lr):
    """``steps`` gradient steps on the whole of ``data`` (no shuffling)."""
    vec = np.array(vec, dtype=np.float64)
    batch = Batch(data.images, data.labels)
    for _ in range(steps):
        _, g = flat_loss_and_grad(layout, vec, params, adapters, batch)
        vec -= lr * g
    return vec
