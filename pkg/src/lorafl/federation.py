"""FedAvg orchestration: sampling, local training, clipping, aggregation, reset, evaluation."""

from __future__ import annotations

import csv
import functools
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .attacks import AttackState, ClientContext, attacker_round, refresh_a3fl_trigger
from .data import (
    Dataset, SynthTask, build_poisoned_testset, dba_split, dirichlet_partition, flip_labels, occlude, solid_trigger, synth_generate,
)
from .errors import InvalidInputError, LoraFLError, ProtocolError
from .lora import apply_reset, pissa_init, standard_init
from .metrics import Censored, MetricSeries, accuracy, attack_success_rate, convergence_time, format_round, lifespan
from .model import (
    TrainableLayout, effective_tensors, lora_target_names, pretrain, probe_head, save_checkpoint, transfer,
)
from .numkit import RngStream
from .training import local_train

TELEMETRY_HEADER = ("round", "acc", "asr", "sigma", "n_attackers_selected", "selected_ids")
SUMMARY_HEADER = ("attack", "rank", "aw_end", "tc95_acc", "tc95_asr", "lifespan60_abs", "lifespan60_post_aw")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple
    n_attackers: int
    acc: float | None = None
    asr: float | None = None
    sigma: float | None = None
    wall_time: float = 0.0


# --------------------------------------------------------------------------
# Server-side primitives
# --------------------------------------------------------------------------


def select_clients(round_idx: int, n_clients: int, per_round: int, rng: RngStream) -> np.ndarray:
    """Sorted uniform sample of ``per_round`` distinct client ids."""
    if not 1 <= per_round <= n_clients:
        raise InvalidInputError(f"cannot sample {per_round} of {n_clients} clients")
    gen = rng.derive("select", round_idx).generator()
    return np.sort(gen.choice(n_clients, size=per_round, replace=False))


def clip_update(delta, tau: float) -> np.ndarray:
    """Scale ``delta`` down to L2 norm ``tau`` when it is longer."""
    if not tau > 0:
        raise InvalidInputError(f"clip threshold must be positive, got {tau}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    if norm <= tau:
        return delta.copy()
    scale = tau / norm
    out = delta * scale
    while np.linalg.norm(out) > tau:  # rounding can leave the norm an ulp above tau
        scale = np.nextafter(scale, 0.0)
        out = delta * scale
    return out


def aggregate(base, updates, server_lr: float = 1.0) -> np.ndarray:
    """``base + server_lr * mean(updates)``.

    ``updates`` is a sequence of flat updates or a mapping ``client id -> update``;
    a mapping is summed in sorted-id order. The sum is compensated, so the
    result does not depend on which client finished first.
    """
    if isinstance(updates, dict):
        updates = [updates[k] for k in sorted(updates)]
    if len(updates) == 0:
        raise ProtocolError("aggregate needs at least one update")
    base = np.asarray(base, dtype=np.float64)
    rows = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    if rows.shape[1:] != base.shape:
        raise InvalidInputError(f"update shape {rows.shape[1:]} does not match model shape {base.shape}")
    total = _kernels.compensated_sum(rows.reshape(rows.shape[0], -1)).reshape(base.shape)
    return base + (server_lr / rows.shape[0]) * total


def update_sigma(theta_t, theta_lag) -> float:
    """Population standard deviation of ``theta_t - theta_lag``."""
    a = np.asarray(theta_t, dtype=np.float64)
    b = np.asarray(theta_lag, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.std(a - b))


# --------------------------------------------------------------------------
# Experiment setup
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def pretrained_backbone(model_cfg, pre, data):
    """Backbone trained on a wider synthetic class family (cached per process)."""
    task = SynthTask(pre.n_classes, tuple(data.image_shape), data.n_components, data.max_freq, data.amplitude,
                     pre.noise, pre.mix, pre.pattern_seed)
    root = RngStream(pre.seed, ("pretrain",))
    train = synth_generate(task, pre.train_per_class, root.derive("train"))
    if pre.occlusion:
        train = occlude(train, pre.occlusion, pre.occlusion_size, root.derive("occlude"))
    val = synth_generate(task, pre.val_per_class, root.derive("val"))
    return pretrain(model_cfg, train, pre.epochs, pre.lr, root.derive("sgd"), val=val, floor=pre.floor,
                    batch_size=pre.batch_size)


@functools.lru_cache(maxsize=8)
def task_data(data):
    task = SynthTask(data.n_classes, tuple(data.image_shape), data.n_components, data.max_freq, data.amplitude,
                     data.noise, data.mix, data.pattern_seed)
    root = RngStream(data.seed, ("data",))
    train = synth_generate(task, data.train_per_class, root.derive("train"))
    if data.occlusion:
        train = occlude(train, data.occlusion, data.occlusion_size, root.derive("occlude"))
    if data.label_noise:
        train = flip_labels(train, data.label_noise, root.derive("label-noise"))
    return train, synth_generate(task, data.test_per_class, root.derive("test"))


@functools.lru_cache(maxsize=8)
def probed_base(model_cfg, pre, data):
    """Pretrained backbone with a head fitted to the downstream training set."""
    base = transfer(pretrained_backbone(replace(model_cfg, n_classes=pre.n_classes), pre, data), model_cfg)
    train, _ = task_data(data)
    return probe_head(base, train, pre.probe_epochs, pre.probe_lr, RngStream(pre.seed, ("probe",)), pre.batch_size)


def build_adapters(cfg, params, rng: RngStream):
    if cfg.full_finetune:
        return None
    names = lora_target_names(params.config, cfg.lora.targets)
    out = {}
    for name in names:
        w0 = params[name]
        if cfg.lora.init == "pissa":
            out[name] = pissa_init(w0, cfg.lora.rank, target=name, rng=rng.derive("reset-order", name))
        else:
            out[name] = standard_init(w0, cfg.lora.rank, rng.derive("init", name), target=name)
    return out


def eval_rounds(T: int, dense_until: int, period: int, forced=()) -> set:
    rounds = {t for t in range(T) if t < dense_until or (t - dense_until) % period == 0}
    return rounds | {t for t in forced if 0 <= t < T}


@dataclass
class RunResult:
    records: list
    params: object
    adapters: object
    layout: object
    trigger_history: list = field(default_factory=list)

    def series(self, metric: str) -> MetricSeries:
        pts = [(r.round, getattr(r, metric)) for r in self.records if getattr(r, metric) is not None]
        horizon = self.records[-1].round + 1 if self.records else 0
        return MetricSeries(tuple(p[0] for p in pts), tuple(p[1] for p in pts), horizon)


class Simulation:
    """One configured federated run; :meth:`run` advances it to the horizon."""

    def __init__(self, cfg):
        self.cfg = cfg
        f, a, d = cfg.federation, cfg.attack, cfg.data
        root = RngStream(cfg.experiment.seed, ("experiment",))
        self.rng = root
        self.train, self.test = task_data(d)
        if cfg.pretrain.head_init == "probe":
            self.base = probed_base(cfg.model_config(), cfg.pretrain, d)
        else:
            head_rng = RngStream(cfg.pretrain.seed, ("head",)) if cfg.pretrain.head_init == "random" else None
            self.base = transfer(pretrained_backbone(cfg.pretrain_model_config(), cfg.pretrain, d),
                                 cfg.model_config(), head_rng)
        self.adapters = build_adapters(cfg, self.base, root.derive("lora"))
        extra = tuple(cfg.lora.train_extra) if self.adapters else ()
        self.layout = TrainableLayout(self.base, self.adapters, extra)
        self.partition = dirichlet_partition(self.train, f.n_clients, d.alpha, tuple(d.size_bounds),
                                             root.derive("partition"))
        self.client_data = [self.train.subset(ix) for ix in self.partition.clients]
        order = root.derive("attackers").generator().permutation(f.n_clients)
        self.attackers = frozenset(int(i) for i in order[: a.n_attackers]) if a.kind != "none" else frozenset()
        self.kind = cfg.attack_kind()
        trigger = solid_trigger(a.trigger_row, a.trigger_col, a.trigger_size, a.trigger_size, a.trigger_color,
                                a.target)
        if a.kind == "a3fl":
            trigger = trigger.with_pattern(np.full_like(trigger.pattern, 0.5))
        self.state = AttackState(trigger, dba_split(trigger) if a.kind == "dba" else [], [])
        self.eval_trigger = solid_trigger(a.trigger_row, a.trigger_col, a.trigger_size, a.trigger_size,
                                          a.trigger_color, a.target)
        self.poisoned_test = build_poisoned_testset(self.test, self.eval_trigger)
        self.schedule = cfg.reset_schedule()

    def in_window(self, t: int) -> bool:
        lo, hi = self.cfg.attack.window
        return lo <= t < hi

    def _client_update(self, cid, t, theta, prev_theta, params, adapters):
        f = self.cfg.federation
        ctx = ClientContext(cid, t, self.client_data[cid], theta, prev_theta, self.layout, params, adapters,
                            f.local_epochs, f.lr, f.batch_size, self.cfg.attack.poison_ratio, self.rng)
        if cid in self.attackers and self.in_window(t):
            return attacker_round(self.kind, ctx, self.state)
        return local_train(theta, self.layout, params, adapters, ctx.data, f.local_epochs, f.lr, f.batch_size,
                           self.rng.derive("train", t, cid))

    def _snapshot(self, theta, params, adapters):
        if self.cfg.eval.sigma_space == "trainable":
            return theta.copy()
        eff = effective_tensors(params, adapters)
        return np.concatenate([eff[n].reshape(-1) for n in params.names()])

    def _asr(self, params, adapters):
        if self.cfg.attack.kind == "a3fl":
            testset = build_poisoned_testset(self.test, self.state.trigger)
        else:
            testset = self.poisoned_test
        if len(testset) == 0:
            return None
        return attack_success_rate(params, adapters, testset, self.cfg.attack.target)

    def run(self, jobs: int = 1, on_round=None, checkpoint_dir=None) -> RunResult:
        cfg, f, ev = self.cfg, self.cfg.federation, self.cfg.eval
        T = f.rounds
        forced = {cfg.attack.window[1] - 1, T - 1}
        to_eval = eval_rounds(T, ev.dense_until, ev.period, forced)
        params, adapters = self.base, self.adapters
        theta = self.layout.pack(params, adapters)
        history = {0: self._snapshot(theta, params, adapters)}
        prev_theta = None
        records = []
        pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
        try:
            for t in range(T):
                start = time.perf_counter()
                try:
                    selected = select_clients(t, f.n_clients, f.per_round, self.rng)
                    acting = [int(c) for c in selected if c in self.attackers and self.in_window(t)]
                    if self.kind.kind == "a3fl":
                        for cid in sorted(acting):
                            refresh_a3fl_trigger(self.state, self.kind, theta, self.layout, params, adapters,
                                                 self.client_data[cid])
                        self.state.trigger_history.append((t, self.state.trigger))
                    args = [(int(c), t, theta, prev_theta, params, adapters) for c in selected]
                    if pool is None:
                        deltas = [self._client_update(*a) for a in args]
                    else:
                        deltas = list(pool.map(lambda a: self._client_update(*a), args))
                    clipped = {}
                    for (cid, *_), d in zip(args, deltas):
                        c = clip_update(d, f.clip)
                        if np.linalg.norm(c) > f.clip * (1.0 + 1e-12):
                            raise ProtocolError(f"clipped update of client {cid} exceeds {f.clip}")
                        clipped[cid] = c
                    prev_theta = theta
                    theta = aggregate(theta, clipped, f.server_lr)
                    params, adapters = self.layout.unpack(theta, params, adapters)
                    if adapters and self.schedule.enabled:
                        adapters = {n: apply_reset(ad, self.schedule, t + 1) for n, ad in adapters.items()}
                        theta = self.layout.pack(params, adapters)
                    history[t + 1] = self._snapshot(theta, params, adapters)
                    history.pop(t + 1 - ev.sigma_lag - 1, None)
                    acc = asr = sigma = None
                    if t in to_eval:
                        acc = accuracy(params, adapters, self.test)
                        asr = self._asr(params, adapters)
                    if (t + 1) % ev.sigma_period == 0 and (t + 1 - ev.sigma_lag) in history:
                        sigma = update_sigma(history[t + 1], history[t + 1 - ev.sigma_lag])
                    if checkpoint_dir is not None and t + 1 in ev.checkpoint_rounds:
                        save_checkpoint(f"{checkpoint_dir}/round{t + 1}.ckpt", params, adapters,
                                        cfg.digest().encode())
                except LoraFLError as exc:
                    raise type(exc)(f"round {t}: {exc}") from exc
                rec = RoundRecord(t, tuple(int(c) for c in selected), len(acting), acc, asr, sigma,
                                  time.perf_counter() - start)
                records.append(rec)
                if on_round is not None:
                    on_round(rec)
        finally:
            if pool is not None:
                pool.shutdown()
        return RunResult(records, params, adapters, self.layout, list(self.state.trigger_history))


def run_experiment(cfg, jobs: int = 1, on_round=None, checkpoint_dir=None) -> RunResult:
    return Simulation(cfg).run(jobs=jobs, on_round=on_round, checkpoint_dir=checkpoint_dir)


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------


def _fmt(v, spec):
    return "" if v is None else format(v, spec)


def telemetry_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TELEMETRY_HEADER)
    for r in records:
        w.writerow([r.round, _fmt(r.acc, ".6f"), _fmt(r.asr, ".6f"), _fmt(r.sigma, ".9e"), r.n_attackers,
                    ";".join(str(c) for c in r.selected)])
    return buf.getvalue()


def post_window(value, aw_end: int):
    """Lifespan measured in rounds after the window end (censoring is kept)."""
    if value is None or isinstance(value, Censored):
        return value
    return value - aw_end


def summarize(cfg, result: RunResult) -> dict:
    acc, asr = result.series("acc"), result.series("asr")
    aw_end = cfg.attack.window[1]
    life = lifespan(asr, 0.6)
    return {
        "attack": cfg.attack.kind,
        "rank": cfg.lora.rank,
        "aw_end": aw_end,
        "tc95_acc": convergence_time(acc, 0.95),
        "tc95_asr": convergence_time(asr, 0.95),
        "lifespan60_abs": life,
        "lifespan60_post_aw": post_window(life, aw_end),
    }


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in rows:
        w.writerow([format_round(row[k]) if k not in ("attack", "rank") else row[k] for k in SUMMARY_HEADER])
    return buf.getvalue()


def value_at(series: MetricSeries, round_idx: int):
    """Step-function read-out: the last sample at or before ``round_idx``."""
    out = None
    for r, v in zip(series.rounds, series.values):
        if r > round_idx:
            break
        out = v
    return out


def median_post_window_sigma(result: RunResult, aw_end: int, lag: int = 50) -> float:
    """Median of the sigma samples whose lag interval starts after the window."""
    vals = [r.sigma for r in result.records if r.sigma is not None and r.round + 1 - lag >= aw_end]
    return float(np.median(vals)) if vals else math.nan
