"""LoRA adapters: PiSSA / standard initialization and the progressive reset."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .numkit import RngStream, svd

_NEVER = np.iinfo(np.int64).min // 2


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank factors for one weight matrix ``W = W_res + A @ B``.

    ``A0``/``B0`` hold the initial factors for the reset defense. The
    ``*_order`` permutations fix the order in which rows of ``A`` and
    columns of ``B`` are visited by :func:`apply_reset`; ``*_last`` record
    the round at which each slice was last restored.
    """

    target: str
    A: np.ndarray
    B: np.ndarray
    W_res: np.ndarray
    A0: np.ndarray
    B0: np.ndarray
    row_order: np.ndarray
    col_order: np.ndarray
    row_last: np.ndarray
    col_last: np.ndarray
    row_cursor: int = 0
    col_cursor: int = 0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self):
        return self.W_res.shape

    def effective_weight(self) -> np.ndarray:
        return self.W_res + self.A @ self.B

    def with_factors(self, A, B) -> "LoraAdapter":
        return replace(self, A=A, B=B)


@dataclass(frozen=True)
class ResetSchedule:
    period: int = 5
    fraction: float = 0.01
    cooldown: int = 500
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"reset fraction must be in (0, 1], got {self.fraction}", "reset.fraction")
        if self.period < 1:
            raise ConfigError(f"reset period must be >= 1, got {self.period}", "reset.period")
        if self.cooldown < 0:
            raise ConfigError(f"reset cooldown must be >= 0, got {self.cooldown}", "reset.cooldown")


def _check_rank(w0, r):
    m, n = w0.shape
    if isinstance(r, bool) or not isinstance(r, (int, np.integer)) or r < 1:
        raise ConfigError(f"LoRA rank must be a positive integer, got {r!r}", "lora.rank")
    if r > min(m, n):
        raise ConfigError(f"LoRA rank {r} exceeds min{w0.shape} = {min(m, n)}", "lora.rank")


def _make(target, w0, A, B, W_res, rng):
    m, n = w0.shape
    if rng is None:
        row_order, col_order = np.arange(m), np.arange(n)
    else:
        gen = rng.generator()
        row_order, col_order = gen.permutation(m), gen.permutation(n)
    return LoraAdapter(
        target=target,
        A=A,
        B=B,
        W_res=W_res,
        A0=A.copy(),
        B0=B.copy(),
        row_order=row_order,
        col_order=col_order,
        row_last=np.full(m, _NEVER, dtype=np.int64),
        col_last=np.full(n, _NEVER, dtype=np.int64),
    )


def pissa_init(w0, r: int, *, target: str = "", rng: RngStream | None = None) -> LoraAdapter:
    """Initialize from the top-``r`` singular triplets of ``w0``.

    ``rng`` only seeds the reset visiting order; the factors themselves are
    deterministic.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    _check_rank(w0, r)
    U, S, V = svd(w0)
    root = np.sqrt(S[:r])
    A = U[:, :r] * root
    B = root[:, None] * V[:, :r].T
    W_res = w0 - A @ B
    return _make(target, w0, A, B, W_res, rng)


def standard_init(w0, r: int, rng: RngStream, *, target: str = "") -> LoraAdapter:
    """Classic LoRA: ``B = 0`` and Gaussian ``A`` so the effective weight is ``w0``."""
    w0 = np.asarray(w0, dtype=np.float64)
    _check_rank(w0, r)
    m, n = w0.shape
    A = rng.derive("A").generator().normal(0.0, 1.0 / math.sqrt(m), size=(m, r))
    B = np.zeros((r, n))
    return _make(target, w0, A, B, w0.copy(), rng.derive("order"))


def effective_weight(ad: LoraAdapter) -> np.ndarray:
    return ad.effective_weight()


def trainable_count(adapters) -> int:
    return sum(ad.rank * (ad.shape[0] + ad.shape[1]) for ad in adapters.values())


def _pick(order, last, cursor, k, round_idx, cooldown):
    size = order.size
    picked = []
    new_cursor = cursor
    for step in range(size):
        pos = (cursor + step) % size
        idx = order[pos]
        if round_idx - last[idx] >= cooldown:
            picked.append(idx)
            new_cursor = (pos + 1) % size
            if len(picked) == k:
                break
    return np.array(picked, dtype=np.int64), new_cursor


def apply_reset(ad: LoraAdapter, schedule: ResetSchedule, round_idx: int) -> LoraAdapter:
    """Restore the next slices of ``A`` (rows) and ``B`` (columns) to their initial values.

    A no-op unless the schedule is enabled and ``round_idx`` is a positive
    multiple of the period. Slices are visited in the adapter's fixed order
    and a restored slice stays ineligible for ``cooldown`` rounds.
    """
    if not schedule.enabled or round_idx <= 0 or round_idx % schedule.period:
        return ad
    m, n = ad.shape
    rows, row_cursor = _pick(
        ad.row_order, ad.row_last, ad.row_cursor, math.ceil(schedule.fraction * m), round_idx, schedule.cooldown
    )
    cols, col_cursor = _pick(
        ad.col_order, ad.col_last, ad.col_cursor, math.ceil(schedule.fraction * n), round_idx, schedule.cooldown
    )
    A = ad.A.copy()
    B = ad.B.copy()
    row_last = ad.row_last.copy()
    col_last = ad.col_last.copy()
    A[rows, :] = ad.A0[rows, :]
    B[:, cols] = ad.B0[:, cols]
    row_last[rows] = round_idx
    col_last[cols] = round_idx
    return replace(
        ad, A=A, B=B, row_last=row_last, col_last=col_last, row_cursor=row_cursor, col_cursor=col_cursor
    )
