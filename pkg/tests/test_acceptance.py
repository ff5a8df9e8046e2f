"""Acceptance criteria: exact property suites and desk-scale trend experiments.

Each criterion is one test and also records a ``criterion N: PASS|FAIL``
line that is printed at the end of the pytest session. Trend experiments
share their runs; set ``LORAFL_ACCEPT_CACHE=<dir>`` to keep finished runs
on disk between sessions (keyed by config digest). Run directly with
``python3 tests/test_acceptance.py`` to get the lines without pytest.
"""

import itertools
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np

from lorafl.config import load_config
from lorafl.data import dba_split, solid_trigger
from lorafl.federation import (
    RoundRecord, RunResult, aggregate, clip_update, median_post_window_sigma, post_window, run_experiment,
    telemetry_csv, value_at,
)
from lorafl.attacks import mask_update, neurotoxin_mask
from lorafl.lora import pissa_init
from lorafl.metrics import Censored, MetricSeries, convergence_time, lifespan
from lorafl.model import Batch, ModelConfig, TrainableLayout, build, flat_loss_and_grad, lora_target_names
from lorafl.numkit import RngStream, finite_diff_grad

REFERENCE = Path(__file__).resolve().parent.parent / "configs" / "reference.toml"
SEEDS = (1, 2, 3, 4, 5)
RANKS = (2, 8, "full")
SHORT_AW, MID_AW, LONG_AW = (0, 30), (0, 60), (0, 150)

RESULTS = {}
SUITE_SECONDS = []


def suite_time_line():
    return f"property suites 1-6 wall time: {sum(SUITE_SECONDS):.1f}s (budget 60s)"


def timed(fn):
    def wrapper():
        t0 = time.perf_counter()
        try:
            fn()
        finally:
            SUITE_SECONDS.append(time.perf_counter() - t0)
    wrapper.__name__ = fn.__name__
    return wrapper


def report(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


# --------------------------------------------------------------------------
# Run sharing
# --------------------------------------------------------------------------

_RUNS = {}


def reference():
    return load_config(REFERENCE)


def experiment(seed, rank, window, reset=False):
    cfg = reference().with_overrides([
        f"experiment.seed={seed}",
        f"lora.rank={json.dumps(rank)}",
        f"attack.window=[{window[0]}, {window[1]}]",
        f"reset.enabled={'true' if reset else 'false'}",
    ])
    digest = cfg.digest()
    if digest in _RUNS:
        return cfg, _RUNS[digest]
    cache = os.environ.get("LORAFL_ACCEPT_CACHE")
    path = Path(cache) / f"{digest}.json" if cache else None
    if path is not None and path.exists():
        rows = json.loads(path.read_text())
        records = [RoundRecord(r[0], (), 0, r[1], r[2], r[3]) for r in rows]
    else:
        records = run_experiment(cfg).records
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps([[r.round, r.acc, r.asr, r.sigma] for r in records]))
    _RUNS[digest] = RunResult(records, None, None, None)
    return cfg, _RUNS[digest]


def _rank_key(v):
    """Total order for lifespans: absent < finite < censored."""
    if v is None:
        return (0, 0)
    if isinstance(v, Censored):
        return (2, v.horizon)
    return (1, v)


def lower_median(values, key=lambda v: v):
    ordered = sorted(values, key=key)
    return ordered[(len(ordered) - 1) // 2]


def life_post(cfg, res):
    return post_window(lifespan(res.series("asr"), 0.6), cfg.attack.window[1])


# --------------------------------------------------------------------------
# Property suites
# --------------------------------------------------------------------------


def _best_rank(w, r):
    vals, vecs = np.linalg.eigh(w.T @ w)
    top = vecs[:, np.argsort(vals)[::-1][:r]]
    return w @ top @ top.T


@timed
def test_c01_pissa_exactness():
    gen = np.random.default_rng(101)
    worst_rec = worst_opt = 0.0
    for _ in range(50):
        m, n = (int(v) for v in gen.integers(1, 65, size=2))
        w = gen.standard_normal((m, n))
        for r in sorted({r for r in (1, 2, 8, min(m, n)) if r <= min(m, n)}):
            ad = pissa_init(w, r)
            worst_rec = max(worst_rec, np.abs(w - (ad.W_res + ad.A @ ad.B)).max())
            oracle = _best_rank(w, r)
            worst_opt = max(worst_opt, np.linalg.norm(ad.A @ ad.B - oracle) / np.linalg.norm(oracle))
    ok = worst_rec <= 1e-9 and worst_opt <= 1e-7
    assert report(1, ok, f"max reconstruction {worst_rec:.1e} (<=1e-9), max rank-r error {worst_opt:.1e} (<=1e-7)")


def _rel(g, fd):
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-5)


def _jitter(params, gen):
    return params.replace(**{k: v + 0.3 * gen.standard_normal(v.shape) for k, v in params.tensors.items()})


@timed
def test_c02_gradient_oracle():
    gen = np.random.default_rng(202)
    acts = ("gelu", "relu", "tanh")
    worst = 0.0
    for case in range(20):
        if case % 4 == 3:
            cfg = ModelConfig(backbone="mlp", image_shape=(3, 3, 1), hidden=(3, 4), n_classes=3,
                              activation=acts[case % 3])
            targets = ("hidden",)
        else:
            h = 1 + case % 2
            cfg = ModelConfig(image_shape=(4, 4, 1 + case % 2), patch=2, dim=2 * h, heads=h, blocks=1 + (case // 2) % 2,
                              mlp_ratio=2, n_classes=2 + case % 2, activation=acts[case % 3])
            targets = ("q", "k", "v", "o", "mlp")
        p = _jitter(build(cfg, RngStream(case)), gen)
        b = Batch(gen.random((3,) + cfg.image_shape), gen.integers(0, cfg.n_classes, 3))
        ads = {}
        for name in lora_target_names(cfg, targets):
            ad = pissa_init(p[name], 1)
            ads[name] = ad.with_factors(ad.A + 0.2 * gen.standard_normal(ad.A.shape),
                                        ad.B + 0.2 * gen.standard_normal(ad.B.shape))
        for adapters in (None, ads):
            layout = TrainableLayout(p, adapters, extra=("head.w", "head.b") if adapters else ())
            vec = layout.pack(p, adapters)
            _, g = flat_loss_and_grad(layout, vec, p, adapters, b)
            # two steps per coordinate: a ReLU kink inside one step spoils only that step
            f = lambda v: flat_loss_and_grad(layout, v, p, adapters, b)[0]
            rel = np.minimum(*(_rel(g, finite_diff_grad(f, vec, eps)) for eps in (1e-5, 1e-6)))
            worst = max(worst, rel.max())
    assert report(2, worst <= 1e-4, f"max relative error {worst:.1e} over 20 configs, base and LoRA (<=1e-4)")


@timed
def test_c03_aggregation_and_clipping():
    gen = np.random.default_rng(303)
    agg = norm = cos = 0.0
    for _ in range(200):
        dim = int(gen.integers(1, 200))
        base = gen.standard_normal(dim)
        ups = [gen.standard_normal(dim) * 10 ** gen.uniform(-3, 2) for _ in range(int(gen.integers(1, 12)))]
        clipped = [clip_update(u, 1.0) for u in ups]
        lr = float(gen.uniform(0.1, 2.0))
        got = aggregate(base, dict(enumerate(clipped)), lr)
        oracle = base + lr * np.mean(clipped, axis=0)
        agg = max(agg, np.abs(got - oracle).max())
        for u, c in zip(ups, clipped):
            norm = max(norm, np.linalg.norm(c))
            cos = max(cos, abs(1.0 - c @ u / (np.linalg.norm(c) * np.linalg.norm(u))))
    ok = agg <= 1e-12 and norm <= 1.0 and cos <= 1e-12
    assert report(3, ok, f"mean-oracle error {agg:.1e}, max clipped norm {norm:.15f}, cosine defect {cos:.1e}")


@timed
def test_c04_neurotoxin_mask():
    gen = np.random.default_rng(404)
    bad = 0
    for _ in range(100):
        n = int(gen.integers(1, 500))
        a, b = gen.standard_normal(n), gen.standard_normal(n)
        p = float(gen.uniform(0.01, 0.5))
        diff = np.abs(a - b)
        k = math.ceil(p * n)
        oracle = set(sorted(range(n), key=lambda i: (-diff[i], i))[:k])
        mask = neurotoxin_mask(a, b, p)
        delta = gen.standard_normal(n)
        out = mask_update(delta, mask)
        if set(np.flatnonzero(mask).tolist()) != oracle or np.any(out[mask] != 0.0):
            bad += 1
    assert report(4, bad == 0, f"{100 - bad}/100 vectors match the sort oracle with exact zeros")


@timed
def test_c05_dba_decomposition():
    bad = []
    for h, w in itertools.product(range(2, 8), repeat=2):
        t = solid_trigger(0, 0, h, w, (1.0, 0.0, 0.0), 2)
        feet = [q.footprint() for q in dba_split(t)]
        disjoint = all(not (x & y) for x, y in itertools.combinations(feet, 2))
        if not disjoint or set().union(*feet) != t.footprint():
            bad.append((h, w))
    assert report(5, not bad, f"36 patch sizes 2x2..7x7, failures: {bad or 'none'}")


def _brute(rounds, values, x, horizon):
    above = [r for r, v in zip(rounds, values) if v > x]
    life = None if not above else Censored(horizon) if values[-1] > x else max(above)
    return life, (min(above) if above else None)


@timed
def test_c06_metric_functions():
    gen = np.random.default_rng(606)
    bad = censored = absent = 0
    for _ in range(1000):
        n = int(gen.integers(1, 50))
        rounds = sorted(gen.choice(400, size=n, replace=False).tolist())
        values = gen.random(n).round(2).tolist()
        x = float(gen.choice([0.0, 0.5, 0.6, 0.9, 1.0]))
        s = MetricSeries(tuple(rounds), tuple(values), 400)
        want = _brute(rounds, values, x, 400)
        got = (lifespan(s, x), convergence_time(s, x))
        bad += got != want
        censored += isinstance(want[0], Censored)
        absent += want[1] is None
    assert report(6, bad == 0 and censored and absent,
                  f"{1000 - bad}/1000 match brute force ({censored} censored, {absent} absent cases)")


def test_c07_determinism():
    cfg = reference()
    t0 = time.perf_counter()
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    c = run_experiment(cfg, jobs=4)
    elapsed = time.perf_counter() - t0
    same = telemetry_csv(a.records) == telemetry_csv(b.records)
    par = telemetry_csv(a.records) == telemetry_csv(c.records)
    fa, fc = a.layout.pack(a.params, a.adapters), c.layout.pack(c.params, c.adapters)
    ok = same and par and np.array_equal(fa, fc)
    assert report(7, ok, f"repeat identical={same}, parallel(4)==serial={par}, "
                         f"three {cfg.federation.rounds}-round runs in {elapsed:.0f}s")


# --------------------------------------------------------------------------
# Trend experiments
# --------------------------------------------------------------------------


def _fmt(v):
    return "none" if v is None else str(v)


def test_c08_moderate_fitting():
    parts, ok = [], True
    for rank in RANKS:
        acc_tc, asr_tc = [], []
        for seed in SEEDS:
            _, res = experiment(seed, rank, LONG_AW)
            acc_tc.append(convergence_time(res.series("acc"), 0.9))
            asr_tc.append(convergence_time(res.series("asr"), 0.9))
        key = lambda v: (1, 0) if v is None else (0, v)
        m_acc, m_asr = lower_median(acc_tc, key), lower_median(asr_tc, key)
        ok &= m_acc is not None and key(m_asr) > key(m_acc)
        parts.append(f"r={rank}: tcACC90={_fmt(m_acc)} tcASR90={_fmt(m_asr)}")
    assert report(8, ok, "; ".join(parts))


def test_c09_rank_slows_injection():
    med = {}
    for rank in RANKS:
        vals = []
        for seed in SEEDS:
            cfg, res = experiment(seed, rank, SHORT_AW)
            vals.append(value_at(res.series("asr"), SHORT_AW[1] - 1))
        med[rank] = statistics.median(vals)
    ok = med[2] <= med[8] <= med["full"] and med["full"] - med[2] >= 0.02
    assert report(9, ok, "ASR at end of AW=[0,30]: " + ", ".join(f"r={k}: {v:.3f}" for k, v in med.items()))


def test_c10_lifespan_reversal():
    med, reached = {}, True
    for rank in RANKS:
        lives = []
        for seed in SEEDS:
            cfg, res = experiment(seed, rank, LONG_AW)
            asr = res.series("asr")
            peak = max(v for r, v in zip(asr.rounds, asr.values) if r < LONG_AW[1])
            reached &= peak >= 0.95
            lives.append(life_post(cfg, res))
        med[rank] = lower_median(lives, _rank_key)
    order = [_rank_key(med[r]) for r in RANKS]
    ok = reached and order[0] > order[1] > order[2]
    assert report(10, ok, f"all reach 95% in AW={reached}; median post-AW lifespan60: "
                          + ", ".join(f"r={k}: {_fmt(v)}" for k, v in med.items()))


def test_c11_sigma_ordering():
    med = {}
    for rank in RANKS:
        vals = []
        for seed in SEEDS:
            cfg, res = experiment(seed, rank, LONG_AW)
            vals.append(median_post_window_sigma(res, LONG_AW[1], cfg.eval.sigma_lag))
        med[rank] = statistics.median(vals)
    ok = med[2] < med[8] < med["full"]
    assert report(11, ok, "median post-AW sigma: " + ", ".join(f"r={k}: {v:.3e}" for k, v in med.items()))


def test_c12_iterative_reset():
    lows, ctrl_asr, reset_acc, ctrl_acc, below = [], [], [], [], []
    for seed in SEEDS:
        _, ctrl = experiment(seed, 2, LONG_AW)
        _, rst = experiment(seed, 2, LONG_AW, reset=True)
        ra = rst.series("asr")
        post = [(r, v) for r, v in zip(ra.rounds, ra.values) if r >= LONG_AW[1]]
        lows.append(min(v for _, v in post))
        below.append(next((r for r, v in post if v < 0.2), None))
        ctrl_asr.append(ctrl.series("asr").values[-1])
        reset_acc.append(rst.series("acc").values[-1])
        ctrl_acc.append(ctrl.series("acc").values[-1])
    low, c_asr = statistics.median(lows), statistics.median(ctrl_asr)
    gap = abs(statistics.median(reset_acc) - statistics.median(ctrl_acc))
    ok = low < 0.2 and c_asr > 0.6 and gap <= 0.02
    assert report(12, ok, f"lowest post-AW ASR with reset {low:.3f} (<0.2), final control ASR {c_asr:.3f} (>0.6), "
                          f"final ACC gap {gap:.3f} (<=0.02); first round below 20% per seed: {below}")


def test_c13_injection_quality():
    med = {}
    for aw in (SHORT_AW, MID_AW, LONG_AW):
        lives = [life_post(*experiment(seed, "full", aw)) for seed in SEEDS]
        med[aw[1]] = lower_median(lives, _rank_key)
    keys = [_rank_key(v) for v in med.values()]
    ok = keys[0] < keys[1] < keys[2]
    assert report(13, ok, "full fine-tune median post-AW lifespan60 by AW end: "
                          + ", ".join(f"{k}: {_fmt(v)}" for k, v in med.items()))


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except AssertionError:
                pass
            print(RESULTS.get(int(name[6:8]), f"{name}: error"), flush=True)
            if name.startswith("test_c06"):
                print(suite_time_line(), flush=True)
