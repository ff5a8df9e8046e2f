"""Small numpy classifiers with analytic gradients.

Two backbones are provided: a tiny vision transformer (patch embedding,
pre-norm attention blocks, mean-pooled head) and a plain MLP. Weight
matrices act on row vectors, ``y = x @ W`` with ``W`` of shape
``(fan_in, fan_out)``, so a LoRA factorization ``W = W_res + A @ B`` has
``A`` of shape ``(fan_in, r)``.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ConfigError, FormatError, InvalidInputError
from .lora import LoraAdapter
from .numkit import RngStream

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "transformer"
    image_shape: tuple = (16, 16, 3)
    patch: int = 4
    dim: int = 32
    heads: int = 4
    blocks: int = 1
    mlp_ratio: int = 4
    n_classes: int = 5
    activation: str = "gelu"
    hidden: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        self.validate()

    def validate(self):
        if self.backbone not in ("transformer", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}", "model.backbone")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be (H, W, C), got {self.image_shape}", "model.image_shape")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", "model.n_classes")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", "model.activation")
        if self.backbone == "transformer":
            H, W, _ = self.image_shape
            if self.patch < 1 or H % self.patch or W % self.patch:
                raise ConfigError(f"image {H}x{W} not divisible by patch size {self.patch}", "model.patch")
            if self.heads < 1 or self.dim % self.heads:
                raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}", "model.heads")
            if not 1 <= self.blocks <= 2:
                raise ConfigError(f"blocks must be 1 or 2, got {self.blocks}", "model.blocks")
            if self.mlp_ratio < 1:
                raise ConfigError("mlp_ratio must be >= 1", "model.mlp_ratio")

    @property
    def n_tokens(self) -> int:
        H, W, _ = self.image_shape
        return (H // self.patch) * (W // self.patch)

    @property
    def feature_dim(self) -> int:
        if self.backbone == "transformer":
            return self.dim
        return self.hidden[-1] if self.hidden else int(np.prod(self.image_shape))

    def digest(self) -> bytes:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).digest()


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


class ModelParams:
    """Ordered collection of named float64 tensors."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self):
        return list(self.tensors)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tensors.values()])

    def unflatten(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} values, got {vec.size}")
        out, offset = {}, 0
        for name, t in self.tensors.items():
            out[name] = vec[offset : offset + t.size].reshape(t.shape).copy()
            offset += t.size
        return ModelParams(self.config, out)

    def replace(self, **updates) -> "ModelParams":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelParams(self.config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def _shapes(config: ModelConfig):
    H, W, C = config.image_shape
    if config.backbone == "mlp":
        shapes = []
        fan_in = H * W * C
        for i, width in enumerate(config.hidden):
            shapes += [(f"layers.{i}.w", (fan_in, width)), (f"layers.{i}.b", (width,))]
            fan_in = width
        shapes += [("head.w", (fan_in, config.n_classes)), ("head.b", (config.n_classes,))]
        return shapes
    d, P = config.dim, config.patch
    hidden = d * config.mlp_ratio
    shapes = [("patch.w", (P * P * C, d)), ("patch.b", (d,)), ("pos", (config.n_tokens, d))]
    for i in range(config.blocks):
        pre = f"blocks.{i}."
        shapes += [
            (pre + "ln1.g", (d,)),
            (pre + "ln1.b", (d,)),
            (pre + "attn.wq", (d, d)),
            (pre + "attn.wk", (d, d)),
            (pre + "attn.wv", (d, d)),
            (pre + "attn.wo", (d, d)),
            (pre + "ln2.g", (d,)),
            (pre + "ln2.b", (d,)),
            (pre + "mlp.w1", (d, hidden)),
            (pre + "mlp.b1", (hidden,)),
            (pre + "mlp.w2", (hidden, d)),
            (pre + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, config.n_classes)), ("head.b", (config.n_classes,))]
    return shapes


def build(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases, unit norm scales."""
    gen = rng.generator()
    tensors = {}
    for name, shape in _shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = gen.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return ModelParams(config, tensors)


def lora_target_names(config: ModelConfig, targets) -> list:
    """Map short target names (q, k, v, o, mlp, hidden) to parameter names."""
    names = []
    if config.backbone == "transformer":
        table = {"q": ["attn.wq"], "k": ["attn.wk"], "v": ["attn.wv"], "o": ["attn.wo"], "mlp": ["mlp.w1", "mlp.w2"]}
        for i in range(config.blocks):
            for t in targets:
                if t not in table:
                    raise ConfigError(f"unknown LoRA target {t!r} for transformer", "lora.targets")
                names += [f"blocks.{i}.{leaf}" for leaf in table[t]]
    else:
        for t in targets:
            if t != "hidden":
                raise ConfigError(f"unknown LoRA target {t!r} for mlp", "lora.targets")
        names = [f"layers.{i}.w" for i in range(len(config.hidden))]
    return names


# --------------------------------------------------------------------------
# Activations and layer pieces
# --------------------------------------------------------------------------


def _gelu(x):
    return _kernels.gelu(x)


def _gelu_grad(x, dy):
    return dy


def _relu(x):
    return np.maximum(x, 0.0), None


def _relu_grad(x, _):
    return (x > 0).astype(np.float64)


def _tanh(x):
    t = np.tanh(x)
    return t, t


def _tanh_grad(x, t):
    return 1.0 - t * t


_ACTIVATIONS = {"gelu": (_gelu, _gelu_grad), "relu": (_relu, _relu_grad), "tanh": (_tanh, _tanh_grad)}


def _ln_forward(x, g, b):
    shape = x.shape
    y, xhat, rstd = _kernels.layernorm_forward(x.reshape(-1, shape[-1]), g, b, LN_EPS)
    return y.reshape(shape), (xhat, rstd, g)


def _ln_backward(dy, cache):
    xhat, rstd, g = cache
    shape = dy.shape
    dx, dg, db = _kernels.layernorm_backward(dy.reshape(-1, shape[-1]), xhat, rstd, g)
    return dx.reshape(shape), dg, db


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _images(batch):
    images = batch.images if hasattr(batch, "images") else batch
    return np.asarray(images, dtype=np.float64)


def effective_tensors(params: ModelParams, adapters=None) -> dict:
    if not adapters:
        return params.tensors
    eff = dict(params.tensors)
    for name, ad in adapters.items():
        eff[name] = ad.effective_weight()
    return eff


def _check_input(config, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != config.image_shape:
        raise InvalidInputError(f"expected images of shape (N, {config.image_shape}), got {x.shape}")
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")


def _patchify(config, x):
    B, H, W, C = x.shape
    P = config.patch
    p = x.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(B, config.n_tokens, P * P * C)


def _unpatchify(config, dp):
    B = dp.shape[0]
    H, W, C = config.image_shape
    P = config.patch
    x = dp.reshape(B, H // P, W // P, P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def _forward_transformer(config, T, x):
    act, _ = _ACTIVATIONS[config.activation]
    B = x.shape[0]
    h = config.heads
    dh = config.dim // h
    scale = 1.0 / math.sqrt(dh)
    patches = _patchify(config, x)
    z = patches @ T["patch.w"] + T["patch.b"] + T["pos"]
    cache = {"patches": patches, "blocks": []}
    ntok = config.n_tokens
    for i in range(config.blocks):
        pre = f"blocks.{i}."
        y, ln1 = _ln_forward(z, T[pre + "ln1.g"], T[pre + "ln1.b"])
        q = (y @ T[pre + "attn.wq"]).reshape(B, ntok, h, dh).transpose(0, 2, 1, 3)
        k = (y @ T[pre + "attn.wk"]).reshape(B, ntok, h, dh).transpose(0, 2, 1, 3)
        v = (y @ T[pre + "attn.wv"]).reshape(B, ntok, h, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        p = _kernels.softmax_rows(s.reshape(-1, ntok)).reshape(s.shape)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(B, ntok, config.dim)
        z = z + o @ T[pre + "attn.wo"]
        y2, ln2 = _ln_forward(z, T[pre + "ln2.g"], T[pre + "ln2.b"])
        u = y2 @ T[pre + "mlp.w1"] + T[pre + "mlp.b1"]
        a, aux = act(u)
        z = z + a @ T[pre + "mlp.w2"] + T[pre + "mlp.b2"]
        cache["blocks"].append((y, ln1, q, k, v, p, o, y2, ln2, u, aux, a))
    zf, lnf = _ln_forward(z, T["ln_f.g"], T["ln_f.b"])
    features = zf.mean(axis=1)
    logits = features @ T["head.w"] + T["head.b"]
    cache["lnf"] = lnf
    cache["features"] = features
    return logits, features, cache


def _backward_transformer(config, T, cache, dlogits, need_input):
    _, act_grad = _ACTIVATIONS[config.activation]
    B = dlogits.shape[0]
    h = config.heads
    dh = config.dim // h
    ntok = config.n_tokens
    scale = 1.0 / math.sqrt(dh)
    g = {}
    feats = cache["features"]
    g["head.w"] = feats.T @ dlogits
    g["head.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ T["head.w"].T
    dzf = np.repeat(dfeat[:, None, :] / ntok, ntok, axis=1)
    dz, g["ln_f.g"], g["ln_f.b"] = _ln_backward(dzf, cache["lnf"])
    for i in reversed(range(config.blocks)):
        pre = f"blocks.{i}."
        y, ln1, q, k, v, p, o, y2, ln2, u, aux, a = cache["blocks"][i]
        # MLP branch
        g[pre + "mlp.b2"] = dz.reshape(-1, config.dim).sum(axis=0)
        g[pre + "mlp.w2"] = _wgrad(a, dz)
        du = (dz @ T[pre + "mlp.w2"].T) * act_grad(u, aux)
        g[pre + "mlp.b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        g[pre + "mlp.w1"] = _wgrad(y2, du)
        dy2 = du @ T[pre + "mlp.w1"].T
        dln, g[pre + "ln2.g"], g[pre + "ln2.b"] = _ln_backward(dy2, ln2)
        dz = dz + dln
        # attention branch
        g[pre + "attn.wo"] = _wgrad(o, dz)
        do = (dz @ T[pre + "attn.wo"].T).reshape(B, ntok, h, dh).transpose(0, 2, 1, 3)
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = _kernels.softmax_rows_backward(p.reshape(-1, ntok), dp.reshape(-1, ntok)).reshape(p.shape) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq = dq.transpose(0, 2, 1, 3).reshape(B, ntok, config.dim)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, ntok, config.dim)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, ntok, config.dim)
        g[pre + "attn.wq"] = _wgrad(y, dq)
        g[pre + "attn.wk"] = _wgrad(y, dk)
        g[pre + "attn.wv"] = _wgrad(y, dv)
        dy = dq @ T[pre + "attn.wq"].T + dk @ T[pre + "attn.wk"].T + dv @ T[pre + "attn.wv"].T
        dln, g[pre + "ln1.g"], g[pre + "ln1.b"] = _ln_backward(dy, ln1)
        dz = dz + dln
    g["pos"] = dz.sum(axis=0)
    g["patch.b"] = dz.reshape(-1, config.dim).sum(axis=0)
    g["patch.w"] = _wgrad(cache["patches"], dz)
    dx = _unpatchify(config, dz @ T["patch.w"].T) if need_input else None
    return g, dx


def _forward_mlp(config, T, x):
    act, _ = _ACTIVATIONS[config.activation]
    a = x.reshape(x.shape[0], -1)
    layers = []
    for i in range(len(config.hidden)):
        u = a @ T[f"layers.{i}.w"] + T[f"layers.{i}.b"]
        out, aux = act(u)
        layers.append((a, u, aux))
        a = out
    logits = a @ T["head.w"] + T["head.b"]
    return logits, a, {"layers": layers, "features": a}


def _backward_mlp(config, T, cache, dlogits, need_input):
    _, act_grad = _ACTIVATIONS[config.activation]
    g = {}
    a = cache["features"]
    g["head.w"] = a.T @ dlogits
    g["head.b"] = dlogits.sum(axis=0)
    da = dlogits @ T["head.w"].T
    for i in reversed(range(len(config.hidden))):
        a_in, u, aux = cache["layers"][i]
        du = da * act_grad(u, aux)
        g[f"layers.{i}.w"] = a_in.T @ du
        g[f"layers.{i}.b"] = du.sum(axis=0)
        da = du @ T[f"layers.{i}.w"].T
    dx = da.reshape((-1,) + config.image_shape) if need_input else None
    return g, dx


def _run_forward(params, adapters, x):
    config = params.config
    _check_input(config, x)
    T = effective_tensors(params, adapters)
    if config.backbone == "transformer":
        logits, feats, cache = _forward_transformer(config, T, x)
    else:
        logits, feats, cache = _forward_mlp(config, T, x)
    return T, logits, feats, cache


def _run_backward(params, T, cache, dlogits, need_input=False):
    if params.config.backbone == "transformer":
        return _backward_transformer(params.config, T, cache, dlogits, need_input)
    return _backward_mlp(params.config, T, cache, dlogits, need_input)


def forward(params: ModelParams, adapters, batch):
    """Return ``(logits, features)``; features are the penultimate-layer outputs."""
    _, logits, feats, _ = _run_forward(params, adapters, _images(batch))
    return logits, feats


def predict(params: ModelParams, adapters, images, chunk: int = 512) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    x = _images(images)
    out = []
    for start in range(0, x.shape[0], chunk):
        logits, _ = forward(params, adapters, x[start : start + chunk])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _xent(logits, labels, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError("label outside class range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def trainable_keys(params: ModelParams, adapters=None, extra=()) -> list:
    """Names of the trainable tensors: adapter factors under LoRA, everything otherwise."""
    if adapters:
        keys = []
        for name in adapters:
            keys += [name + ".lora_A", name + ".lora_B"]
        return keys + [n for n in params.names() if n in set(extra)]
    return params.names()


def _adapter_grads(grads, adapters):
    for name, ad in adapters.items():
        dW = grads[name]
        grads[name + ".lora_A"] = dW @ ad.B.T
        grads[name + ".lora_B"] = ad.A.T @ dW


def loss_and_grad(params: ModelParams, adapters, batch, trainable=None):
    """Mean softmax cross-entropy and its gradient over the trainable tensors.

    ``trainable`` defaults to :func:`trainable_keys`; the gradient is a dict
    keyed by tensor name (``<target>.lora_A`` / ``.lora_B`` for adapters).
    """
    x = _images(batch)
    T, logits, _, cache = _run_forward(params, adapters, x)
    loss, dlogits = _xent(logits, batch.labels, params.config.n_classes)
    grads, _ = _run_backward(params, T, cache, dlogits)
    if adapters:
        _adapter_grads(grads, adapters)
    keys = trainable_keys(params, adapters) if trainable is None else trainable
    return float(loss), {k: grads[k] for k in keys}


def input_grad(params: ModelParams, adapters, batch, target_label: int) -> np.ndarray:
    """Gradient of the mean cross-entropy toward ``target_label`` w.r.t. the input pixels."""
    x = _images(batch)
    T, logits, _, cache = _run_forward(params, adapters, x)
    labels = np.full(x.shape[0], int(target_label))
    _, dlogits = _xent(logits, labels, params.config.n_classes)
    _, dx = _run_backward(params, T, cache, dlogits, need_input=True)
    return dx


def target_loss(params: ModelParams, adapters, images, target_label: int) -> float:
    logits, _ = forward(params, adapters, images)
    labels = np.full(logits.shape[0], int(target_label))
    return float(_xent(logits, labels, params.config.n_classes)[0])


# --------------------------------------------------------------------------
# Flat trainable layout
# --------------------------------------------------------------------------


class TrainableLayout:
    """Packs the trainable tensors of (params, adapters) into one flat vector."""

    def __init__(self, params: ModelParams, adapters=None, extra=()):
        self.keys = trainable_keys(params, adapters, extra)
        self.shapes = []
        for key in self.keys:
            if key.endswith(".lora_A"):
                self.shapes.append(adapters[key[: -len(".lora_A")]].A.shape)
            elif key.endswith(".lora_B"):
                self.shapes.append(adapters[key[: -len(".lora_B")]].B.shape)
            else:
                self.shapes.append(params[key].shape)
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])

    def _slices(self):
        for i, key in enumerate(self.keys):
            yield key, self.shapes[i], slice(self.offsets[i], self.offsets[i + 1])

    def pack(self, params: ModelParams, adapters=None) -> np.ndarray:
        out = np.empty(self.size)
        for key, _, sl in self._slices():
            if key.endswith(".lora_A"):
                out[sl] = adapters[key[:-7]].A.reshape(-1)
            elif key.endswith(".lora_B"):
                out[sl] = adapters[key[:-7]].B.reshape(-1)
            else:
                out[sl] = params[key].reshape(-1)
        return out

    def unpack(self, vec, params: ModelParams, adapters=None):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise InvalidInputError(f"expected {self.size} trainable values, got {vec.size}")
        base, factors = {}, {}
        for key, shape, sl in self._slices():
            if key.endswith(".lora_A") or key.endswith(".lora_B"):
                factors.setdefault(key[:-7], {})[key[-1]] = vec[sl].reshape(shape)
            else:
                base[key] = vec[sl].reshape(shape)
        new_params = params.replace(**base) if base else params
        new_adapters = adapters
        if factors:
            new_adapters = dict(adapters)
            for name, ab in factors.items():
                new_adapters[name] = adapters[name].with_factors(ab["A"], ab["B"])
        return new_params, new_adapters

    def grad_vector(self, grads: dict) -> np.ndarray:
        out = np.empty(self.size)
        for key, _, sl in self._slices():
            out[sl] = grads[key].reshape(-1)
        return out


def flat_loss_and_grad(layout: TrainableLayout, vec, params, adapters, batch):
    p, a = layout.unpack(vec, params, adapters)
    loss, grads = loss_and_grad(p, a, batch, layout.keys)
    return loss, layout.grad_vector(grads)


# --------------------------------------------------------------------------
# Pre-training
# --------------------------------------------------------------------------


class PretrainWarning(UserWarning):
    pass


def accuracy_of(params, adapters, images, labels) -> float:
    return float(np.mean(predict(params, adapters, images) == np.asarray(labels)))


def pretrain(config: ModelConfig, dataset, epochs: int, lr: float, rng: RngStream, *, val=None,
             floor: float = 0.9, batch_size: int = 16) -> ModelParams:
    """Plain SGD on every parameter, returning the best epoch by validation accuracy.

    Emits :class:`PretrainWarning` if the best accuracy stays below ``floor``.
    """
    params = build(config, rng.derive("init"))
    if epochs <= 0:
        return params
    val = dataset if val is None else val
    layout = TrainableLayout(params)
    vec = layout.pack(params)
    best_vec, best_acc = vec.copy(), accuracy_of(params, None, val.images, val.labels)
    n = len(dataset.labels)
    for epoch in range(epochs):
        order = rng.derive("shuffle", epoch).generator().permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = Batch(dataset.images[idx], dataset.labels[idx])
            _, g = flat_loss_and_grad(layout, vec, params, None, batch)
            vec = vec - lr * g
        current, _ = layout.unpack(vec, params)
        acc = accuracy_of(current, None, val.images, val.labels)
        if acc > best_acc:
            best_vec, best_acc = vec.copy(), acc
    if best_acc < floor:
        warnings.warn(f"pretraining reached {best_acc:.3f} < floor {floor:.3f}", PretrainWarning, stacklevel=2)
    best, _ = layout.unpack(best_vec, params)
    return best.copy()


def transfer(params: ModelParams, config: ModelConfig, rng: RngStream | None = None) -> ModelParams:
    """Carry a pretrained backbone over to ``config`` with a fresh classification head.

    The head is zero unless ``rng`` is given, in which case its weight is
    drawn like :func:`build` draws it.
    """
    fresh = dict(params.tensors)
    for name, shape in _shapes(config):
        if name == "head.w" and rng is not None:
            fresh[name] = rng.generator().normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif name.startswith("head."):
            fresh[name] = np.zeros(shape)
        elif fresh[name].shape != shape:
            raise ConfigError(f"pretrained {name} has shape {fresh[name].shape}, target needs {shape}", "model")
    return ModelParams(config, fresh)


def probe_head(params: ModelParams, dataset, epochs: int, lr: float, rng: RngStream, batch_size: int = 16):
    """Fit only the head by SGD on frozen penultimate features (a linear probe)."""
    feats = np.concatenate([forward(params, None, dataset.images[s : s + 512])[1]
                            for s in range(0, len(dataset), 512)])
    w, b = params["head.w"].copy(), params["head.b"].copy()
    n = feats.shape[0]
    for epoch in range(epochs):
        order = rng.derive("shuffle", epoch).generator().permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            f = feats[idx]
            _, dlogits = _xent(f @ w + b, dataset.labels[idx], params.config.n_classes)
            w -= lr * (f.T @ dlogits)
            b -= lr * dlogits.sum(axis=0)
    return params.replace(**{"head.w": w, "head.b": b})


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"LRFLCKPT"
CKPT_VERSION = 1

_ADAPTER_FIELDS = ("A", "B", "W_res", "A0", "B0", "row_order", "col_order", "row_last", "col_last")


def _checkpoint_tensors(params, adapters):
    items = list(params.tensors.items())
    for name, ad in (adapters or {}).items():
        for fld in _ADAPTER_FIELDS:
            items.append((f"{name}.lora_{fld}", getattr(ad, fld)))
        items.append((f"{name}.lora_cursor", np.array([ad.row_cursor, ad.col_cursor])))
    return items


def save_checkpoint(path, params: ModelParams, adapters=None, config_digest: bytes = b"") -> None:
    """Write ``params`` (and adapters) as a flat little-endian binary file.

    Layout: magic (8 bytes), version (u32), digest length (u32) + digest,
    tensor count (u32), then per tensor: name length (u16) + utf-8 name,
    ndim (u8), dims (u32 each) and the float64 values in C order.
    """
    digest = config_digest or params.config.digest()
    items = _checkpoint_tensors(params, adapters)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint")
    return data


def read_checkpoint(path):
    """Return ``(digest, {name: array})`` in file order."""
    with open(path, "rb") as fh:
        if _read(fh, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, dlen = struct.unpack("<II", _read(fh, 8))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        digest = _read(fh, dlen)
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return digest, tensors


def load_checkpoint(path, config: ModelConfig):
    """Rebuild ``(params, adapters)`` from a checkpoint written by :func:`save_checkpoint`."""
    digest, tensors = read_checkpoint(path)
    names = [n for n, _ in _shapes(config)]
    missing = [n for n in names if n not in tensors]
    if missing:
        raise FormatError(f"{path}: checkpoint lacks tensors {missing[:3]}")
    params = ModelParams(config, {n: tensors[n] for n in names})
    adapters = {}
    for key in tensors:
        if key.endswith(".lora_A"):
            name = key[:-7]
            kw = {f: tensors[f"{name}.lora_{f}"] for f in _ADAPTER_FIELDS}
            for f in ("row_order", "col_order", "row_last", "col_last"):
                kw[f] = kw[f].astype(np.int64)
            cursor = tensors[f"{name}.lora_cursor"].astype(np.int64)
            adapters[name] = LoraAdapter(target=name, row_cursor=int(cursor[0]), col_cursor=int(cursor[1]), **kw)
    return params, adapters, digest
