"""ACC / ASR evaluation and time-series metrics (lifespan, convergence time)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .model import forward, predict


@dataclass(frozen=True)
class MetricSeries:
    rounds: tuple
    values: tuple
    horizon: int

    def __post_init__(self):
        rounds = tuple(int(r) for r in self.rounds)
        values = tuple(float(v) for v in self.values)
        if len(rounds) != len(values):
            raise InvalidInputError("rounds and values differ in length")
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise InvalidInputError("rounds must be strictly increasing")
        object.__setattr__(self, "rounds", rounds)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_values(cls, values, horizon=None, start=0):
        values = list(values)
        rounds = range(start, start + len(values))
        return cls(tuple(rounds), tuple(values), horizon if horizon is not None else start + len(values))


class Censored(NamedTuple):
    """The quantity had not ended by ``horizon`` (reported as ``>horizon``)."""

    horizon: int

    def __str__(self):
        return f">{self.horizon}"


def lifespan(s: MetricSeries, x: float):
    """Last round with value > ``x``.

    Returns ``Censored(horizon)`` if the final sample still exceeds ``x``
    and ``None`` if no sample ever does.
    """
    last = None
    for r, v in zip(s.rounds, s.values):
        if v > x:
            last = r
    if last is None:
        return None
    if s.values[-1] > x:
        return Censored(s.horizon)
    return last


def convergence_time(s: MetricSeries, x: float):
    """First round with value > ``x``; ``None`` if never reached."""
    for r, v in zip(s.rounds, s.values):
        if v > x:
            return r
    return None


def format_round(value) -> str:
    """CSV rendering: integers as-is, censored as ``>T``, absent as empty."""
    if value is None:
        return ""
    return str(value)


def accuracy(params, adapters, ds) -> float:
    if len(ds) == 0:
        raise InvalidInputError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, adapters, ds.images) == ds.labels))


def attack_success_rate(params, adapters, poisoned, target: int) -> float:
    """Fraction of the poisoned test set classified as ``target``."""
    if len(poisoned) == 0:
        raise InvalidInputError("empty poisoned test set")
    return float(np.mean(predict(params, adapters, poisoned.images) == int(target)))


def export_features(params, adapters, ds, path, poisoned_mask=None, chunk: int = 512) -> None:
    """Write ``sample_id,label,poisoned,f0..f{d-1}`` rows of penultimate features."""
    if poisoned_mask is None:
        poisoned_mask = np.zeros(len(ds), dtype=bool)
    poisoned_mask = np.asarray(poisoned_mask, dtype=bool)
    feats = []
    for start in range(0, len(ds), chunk):
        _, f = forward(params, adapters, ds.images[start : start + chunk])
        feats.append(f)
    feats = np.concatenate(feats) if feats else np.zeros((0, params.config.feature_dim))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "poisoned"] + [f"f{j}" for j in range(feats.shape[1])])
        for i in range(len(ds)):
            w.writerow([i, int(ds.labels[i]), int(poisoned_mask[i])] + [repr(float(v)) for v in feats[i]])


def read_features(path):
    """Inverse of :func:`export_features`: ``(ids, labels, poisoned, features)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    poisoned = np.array([r[2] == "1" for r in body], dtype=bool)
    feats = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(rows[0]) - 3)
    return ids, labels, poisoned, feats
