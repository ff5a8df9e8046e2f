import numpy as np
import pytest

from lorafl.data import Dataset, apply_trigger, solid_trigger
from lorafl.errors import InvalidInputError
from lorafl.metrics import (
    Censored,
    MetricSeries,
    accuracy,
    attack_success_rate,
    convergence_time,
    export_features,
    format_round,
    lifespan,
    read_features,
)
from lorafl.model import forward, predict


def brute_lifespan(rounds, values, x, horizon):
    above = [r for r, v in zip(rounds, values) if v > x]
    if not above:
        return None
    return Censored(horizon) if values[-1] > x else max(above)


def brute_convergence(rounds, values, x):
    above = [r for r, v in zip(rounds, values) if v > x]
    return min(above) if above else None


def test_lifespan_examples():
    s = MetricSeries.from_values([0.1, 0.7, 0.8, 0.5, 0.65, 0.4])
    assert lifespan(s, 0.6) == 4
    assert lifespan(MetricSeries.from_values([0.1, 0.2]), 0.6) is None
    cens = lifespan(MetricSeries.from_values([0.1, 0.9], horizon=1500), 0.6)
    assert cens == Censored(1500) and str(cens) == ">1500"


def test_convergence_examples():
    assert convergence_time(MetricSeries.from_values([0.5, 0.96, 0.97]), 0.95) == 1
    assert convergence_time(MetricSeries.from_values([0.5, 0.6]), 0.95) is None
    assert convergence_time(MetricSeries.from_values([0.0, 0.0, 0.3]), 0.0) == 2


def test_metrics_match_brute_force():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        n = int(gen.integers(1, 40))
        rounds = np.sort(gen.choice(500, size=n, replace=False)).tolist()
        values = gen.random(n).round(2).tolist()
        x = float(gen.choice([0.0, 0.3, 0.6, 0.95, 1.0]))
        s = MetricSeries(tuple(rounds), tuple(values), 500)
        ls, ct = lifespan(s, x), convergence_time(s, x)
        assert ls == brute_lifespan(rounds, values, x, 500)
        assert ct == brute_convergence(rounds, values, x)
        if ls is not None and ct is not None and not isinstance(ls, Censored):
            assert ls >= ct


def test_lifespan_stable_after_appending_below_threshold():
    gen = np.random.default_rng(1)
    for _ in range(200):
        values = gen.random(20).tolist()
        s = MetricSeries.from_values(values)
        ext = MetricSeries.from_values(values + [0.0] * 5)
        ls = lifespan(s, 0.5)
        if not isinstance(ls, Censored):
            assert lifespan(ext, 0.5) == ls
        assert convergence_time(ext, 0.5) == convergence_time(s, 0.5)


def test_series_validation():
    with pytest.raises(InvalidInputError):
        MetricSeries((0, 0), (0.1, 0.2), 2)
    with pytest.raises(InvalidInputError):
        MetricSeries((0,), (0.1, 0.2), 2)


def test_format_round():
    assert format_round(None) == ""
    assert format_round(12) == "12"
    assert format_round(Censored(300)) == ">300"


def test_accuracy_zero_head_tie_break(toy):
    p = toy.params.replace(**{"head.w": np.zeros_like(toy.params["head.w"]), "head.b": np.zeros(3)})
    assert accuracy(p, None, toy.data) == pytest.approx(np.mean(toy.data.labels == 0))


def test_accuracy_matches_per_sample_loop(toy):
    loop = np.mean([np.argmax(forward(toy.params, None, img[None])[0][0]) == y
                    for img, y in zip(toy.data.images, toy.data.labels)])
    assert accuracy(toy.params, None, toy.data) == pytest.approx(loop)


def test_accuracy_all_correct(toy):
    preds = predict(toy.params, None, toy.data.images)
    relabelled = Dataset(toy.data.images, preds, 3)
    assert accuracy(toy.params, None, relabelled) == 1.0


def test_asr_hardwired_and_empty(toy):
    b = np.array([0.0, 0.0, 1e6])
    p = toy.params.replace(**{"head.b": b})
    poisoned = Dataset(apply_trigger(toy.data.images[:10], toy.trigger), np.zeros(10, dtype=int), 3)
    assert attack_success_rate(p, None, poisoned, 2) == 1.0
    with pytest.raises(InvalidInputError):
        attack_success_rate(p, None, Dataset(np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int), 3), 2)


def test_export_features_roundtrip(toy, tmp_path):
    mask = np.zeros(len(toy.data), dtype=bool)
    mask[::7] = True
    path = tmp_path / "f.csv"
    export_features(toy.params, None, toy.data, path, mask, chunk=13)
    ids, labels, poisoned, feats = read_features(path)
    _, want = forward(toy.params, None, toy.data.images)
    assert feats.shape[1] == toy.config.feature_dim
    np.testing.assert_array_equal(feats, want)
    np.testing.assert_array_equal(poisoned, mask)
    np.testing.assert_array_equal(labels, toy.data.labels)
    np.testing.assert_array_equal(ids, np.arange(len(toy.data)))
