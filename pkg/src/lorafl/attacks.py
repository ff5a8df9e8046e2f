"""Backdoor attacker behaviours: baseline, DBA, Neurotoxin and A3FL."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, apply_trigger, poison
from .errors import ConfigError
from .model import input_grad, target_loss
from .numkit import RngStream
from .training import full_batch_steps, local_train

ATTACK_KINDS = ("none", "baseline", "dba", "neurotoxin", "a3fl")


@dataclass(frozen=True)
class AttackKind:
    kind: str = "baseline"
    p_mask: float = 0.05
    alpha: float = 0.5
    trigger_steps: int = 20
    trigger_lr: float = 0.1
    adv_steps: int = 10
    adv_lr: float = 0.01

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}", "attack.kind")
        if not 0.0 < self.p_mask < 1.0:
            raise ConfigError(f"p_mask must be in (0, 1), got {self.p_mask}", "attack.p_mask")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}", "attack.alpha")


# --------------------------------------------------------------------------
# Neurotoxin
# --------------------------------------------------------------------------


def neurotoxin_mask(theta_t, theta_prev, p_mask: float) -> np.ndarray:
    """Boolean mask of the ``ceil(p_mask * dim)`` coordinates that moved most.

    Ties go to the lower index. Without a previous model the mask is empty.
    """
    theta_t = np.asarray(theta_t, dtype=np.float64)
    if theta_prev is None:
        return np.zeros(theta_t.size, dtype=bool)
    diff = np.abs(theta_t - np.asarray(theta_prev, dtype=np.float64))
    k = math.ceil(p_mask * diff.size)
    mask = np.zeros(diff.size, dtype=bool)
    mask[np.argsort(-diff, kind="stable")[:k]] = True
    return mask


def mask_update(delta, mask) -> np.ndarray:
    out = np.array(delta, dtype=np.float64)
    out[np.asarray(mask, dtype=bool)] = 0.0
    return out


# --------------------------------------------------------------------------
# DBA
# --------------------------------------------------------------------------


def dba_round_trigger(attacker: int, round_idx: int, rng: RngStream, quadrants):
    """Uniform seeded pick of one quadrant for this (attacker, round)."""
    choice = rng.derive("dba", round_idx, attacker).generator().integers(len(quadrants))
    return quadrants[int(choice)]


# --------------------------------------------------------------------------
# A3FL
# --------------------------------------------------------------------------


def _triggered(images, t):
    return apply_trigger(images, t)


def a3fl_combined_loss(t, params, adapters, adv_params, adv_adapters, images, alpha):
    x = _triggered(images, t)
    loss = target_loss(params, adapters, x, t.target)
    if alpha:
        loss += alpha * target_loss(adv_params, adv_adapters, x, t.target)
    return loss


def _patch_grad(t, params, adapters, images):
    g = input_grad(params, adapters, _triggered(images, t), t.target)
    patch = g[:, t.row : t.row + t.height, t.col : t.col + t.width, :]
    # the trigger is shared by every sample, so its gradient sums the per-sample ones
    return patch.sum(axis=0)


def a3fl_optimize(t, params, adapters, adv_params, adv_adapters, images, alpha, steps, lr,
                  max_halvings: int = 5):
    """Gradient descent on the trigger pixels against the global and adversarial models.

    Each step is accepted only if the combined loss does not increase; the
    step size is halved up to ``max_halvings`` times before giving up.
    Returns ``(trigger, loss_history)``.
    """
    images = np.asarray(images, dtype=np.float64)
    current = a3fl_combined_loss(t, params, adapters, adv_params, adv_adapters, images, alpha)
    history = [current]
    for _ in range(steps):
        g = _patch_grad(t, params, adapters, images)
        if alpha:
            g = g + alpha * _patch_grad(t, adv_params, adv_adapters, images)
        if not np.any(g):
            break
        step = lr
        accepted = False
        for _ in range(max_halvings + 1):
            cand = t.with_pattern(t.pattern - step * g)
            loss = a3fl_combined_loss(cand, params, adapters, adv_params, adv_adapters, images, alpha)
            if loss <= current:
                t, current, accepted = cand, loss, True
                break
            step *= 0.5
        history.append(current)
        if not accepted:
            break
    return t, history


def a3fl_adv_train(global_vec, layout, params, adapters, t, data: Dataset, steps, lr):
    """Harden a copy of the global model against ``t``: fit triggered inputs to their true labels."""
    if steps <= 0:
        return np.array(global_vec, dtype=np.float64)
    hardened = Dataset(_triggered(data.images, t), data.labels, data.n_classes)
    return full_batch_steps(layout, global_vec, params, adapters, hardened, steps, lr)


# --------------------------------------------------------------------------
# Per-round attacker behaviour
# --------------------------------------------------------------------------


@dataclass
class AttackState:
    """State shared by all attackers of one experiment (single writer per round)."""

    trigger: object
    quadrants: list = field(default_factory=list)
    trigger_history: list = field(default_factory=list)


def refresh_a3fl_trigger(state: AttackState, kind: AttackKind, global_vec, layout, params, adapters,
                         data: Dataset):
    """Update the shared A3FL trigger from one attacker's local data."""
    adv_vec = a3fl_adv_train(global_vec, layout, params, adapters, state.trigger, data, kind.adv_steps, kind.adv_lr)
    p, a = layout.unpack(global_vec, params, adapters)
    pa, aa = layout.unpack(adv_vec, params, adapters)
    state.trigger, _ = a3fl_optimize(
        state.trigger, p, a, pa, aa, data.images, kind.alpha, kind.trigger_steps, kind.trigger_lr
    )
    return state.trigger


@dataclass
class ClientContext:
    client_id: int
    round_idx: int
    data: Dataset
    global_vec: np.ndarray
    prev_global_vec: object
    layout: object
    params: object
    adapters: object
    epochs: int
    lr: float
    batch_size: int
    poison_ratio: float
    rng: RngStream


def attacker_round(kind: AttackKind, ctx: ClientContext, state: AttackState) -> np.ndarray:
    """Local update of a malicious client acting inside the attack window."""
    train_rng = ctx.rng.derive("train", ctx.round_idx, ctx.client_id)
    if kind.kind == "none":
        data = ctx.data
    else:
        if kind.kind == "dba":
            trigger = dba_round_trigger(ctx.client_id, ctx.round_idx, ctx.rng, state.quadrants)
        else:
            trigger = state.trigger
        data, _ = poison(ctx.data, trigger, ctx.poison_ratio, ctx.rng.derive("poison", ctx.client_id))
    delta = local_train(ctx.global_vec, ctx.layout, ctx.params, ctx.adapters, data, ctx.epochs, ctx.lr,
                        ctx.batch_size, train_rng)
    if kind.kind == "neurotoxin":
        delta = mask_update(delta, neurotoxin_mask(ctx.global_vec, ctx.prev_global_vec, kind.p_mask))
    return delta
