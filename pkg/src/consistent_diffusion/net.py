"""Small conv encoder-decoder denoiser with hand-written backprop.

Layout for ``depth`` stages and ``base`` channels (every conv is k x k,
stride 1, zero 'same' padding, SiLU after all but the last)::

    stem   : [x_t, y_0, t/T] -> base
    down i : avgpool2 -> conv ch(i-1) -> ch(i)          ch(i) = base * 2**i
    up i   : upsample2, concat skip ch(i-1) -> conv -> ch(i-1)
    out    : conv base -> image channels  (zero-initialised)

All arrays are batched NCHW internally. The compute dtype follows the
parameter dtype, so the gradient checker can run the same code in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Rng, ShapeError, normal_sample


@dataclass(frozen=True)
class NetConfig:
    image_channels: int = 1
    base: int = 16
    depth: int = 2
    kernel: int = 3
    activation: str = "silu"
    zero_final: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.base < 1 or self.image_channels < 1:
            raise ValueError(f"invalid net config {self}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.activation != "silu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels + 1

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        k = self.kernel
        ch = [self.base * 2**i for i in range(self.depth + 1)]
        shapes = [("stem.w", (ch[0], self.in_channels, k, k)), ("stem.b", (ch[0],))]
        for i in range(1, self.depth + 1):
            shapes += [(f"down{i}.w", (ch[i], ch[i - 1], k, k)), (f"down{i}.b", (ch[i],))]
        for i in range(self.depth, 0, -1):
            shapes += [(f"up{i}.w", (ch[i - 1], ch[i] + ch[i - 1], k, k)), (f"up{i}.b", (ch[i - 1],))]
        shapes += [("out.w", (self.image_channels, ch[0], k, k)), ("out.b", (self.image_channels,))]
        return shapes


@dataclass(frozen=True)
class OptimConfig:
    max_lr: float = 1e-4
    total_steps: int = 5000
    ema_decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")


@dataclass
class NetParams:
    config: NetConfig
    weights: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "NetParams":
        cp = lambda d: {k: a.copy() for k, a in d.items()}
        return NetParams(self.config, cp(self.weights), cp(self.ema), cp(self.m), cp(self.v), self.step)

    def astype(self, dtype) -> "NetParams":
        cast = lambda d: {k: a.astype(dtype) for k, a in d.items()}
        return NetParams(self.config, cast(self.weights), cast(self.ema), cast(self.m), cast(self.v), self.step)

    @property
    def num_weights(self) -> int:
        return sum(a.size for a in self.weights.values())


def net_init(cfg: NetConfig, rng: Rng) -> NetParams:
    weights = {}
    for name, shape in cfg.layer_shapes():
        if name.endswith(".b") or (name == "out.w" and cfg.zero_final):
            weights[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = normal_sample(rng.child(name), shape, 0.0, math.sqrt(2.0 / fan_in))
    zeros = lambda: {k: np.zeros_like(a) for k, a in weights.items()}
    ema = {k: a.copy() for k, a in weights.items()}
    return NetParams(cfg, weights, ema, zeros(), zeros(), 0)


# -- layers -----------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv(x, w, b):
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    n, cin, h, wd = x_shape
    cout, _, k, _ = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(cout, -1)).reshape(n, h, wd, cin, k, k)
    p = k // 2
    dxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for a in range(k):
        for c in range(k):
            dxp[:, :, a : a + h, c : c + wd] += dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + wd], dw, db


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_backward(dy, z, s):
    return dy * s * (1.0 + z * (1.0 - s))


def _pool(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * dy.dtype.type(0.25)


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- forward / backward -----------------------------------------------------


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _forward(weights, cfg: NetConfig, x_state, y_cond, t_norm, keep_cache: bool):
    x, single = _as_batch(x_state)
    y, _ = _as_batch(y_cond)
    if x.shape != y.shape:
        raise ShapeError(f"state {x.shape} and condition {y.shape} differ")
    n, c, h, w = x.shape
    if c != cfg.image_channels:
        raise ShapeError(f"net expects {cfg.image_channels} channels, got {c}")
    if h % 2**cfg.depth or w % 2**cfg.depth:
        raise ShapeError(f"spatial size {h}x{w} not divisible by 2**{cfg.depth}")
    t = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (n,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t_norm must lie in [0, 1]")
    dtype = weights["stem.w"].dtype
    tmap = np.broadcast_to(t.astype(dtype)[:, None, None, None], (n, 1, h, w))
    inp = np.concatenate([x.astype(dtype), y.astype(dtype), tmap], axis=1)

    cache = []
    def layer(name, a, act=True):
        z, cols = _conv(a, weights[name + ".w"], weights[name + ".b"])
        if not act:
            cache.append((name, cols, a.shape, None, None))
            return z
        out, s = _silu(z)
        cache.append((name, cols, a.shape, z, s))
        return out

    skips = [layer("stem", inp)]
    for i in range(1, cfg.depth + 1):
        skips.append(layer(f"down{i}", _pool(skips[-1])))
    u = skips[-1]
    for i in range(cfg.depth, 0, -1):
        u = layer(f"up{i}", np.concatenate([_upsample(u), skips[i - 1]], axis=1))
    out = layer("out", u, act=False)
    if single:
        out = out[0]
    return out, ({"cache": cache, "single": single} if keep_cache else None)


def net_forward(p: NetParams, x_state, y_cond, t_norm, use_ema: bool = False):
    """Predict GT_t. Accepts one (C,H,W) tensor or an (N,C,H,W) batch with
    per-item ``t_norm``. Pure: never mutates ``p``."""
    weights = p.ema if use_ema else p.weights
    out, _ = _forward(weights, p.config, x_state, y_cond, t_norm, keep_cache=False)
    return out


def net_forward_cached(p: NetParams, x_state, y_cond, t_norm):
    """Forward with raw weights, also returning the activation cache."""
    return _forward(p.weights, p.config, x_state, y_cond, t_norm, keep_cache=True)


class CacheError(RuntimeError):
    pass


def net_backward(p: NetParams, cache, dout) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given dLoss/dOutput."""
    if not cache:
        raise CacheError("net_backward needs the cache of a forward pass")
    cfg = p.config
    layers = {entry[0]: entry for entry in cache["cache"]}
    d = np.asarray(dout)
    if cache["single"]:
        d = d[None]
    grads = {}

    def back(name, dy, need_dx=True):
        _, cols, in_shape, z, s = layers[name]
        if z is not None:
            dy = _silu_backward(dy, z, s)
        dx, grads[name + ".w"], grads[name + ".b"] = _conv_backward(
            dy, cols, p.weights[name + ".w"], in_shape, need_dx)
        return dx

    du = back("out", d.astype(p.weights["out.w"].dtype))
    dskip = [None] * (cfg.depth + 1)
    for i in range(1, cfg.depth + 1):
        dcat = back(f"up{i}", du)
        ch_prev = cfg.base * 2 ** (i - 1)
        dup, dskip[i - 1] = dcat[:, :-ch_prev], dcat[:, -ch_prev:]
        du = _upsample_backward(dup)
    # du now holds the gradient reaching the deepest encoder output
    dh = du
    for i in range(cfg.depth, 0, -1):
        dpool = back(f"down{i}", dh)
        dh = _pool_backward(dpool) + dskip[i - 1]
    back("stem", dh, need_dx=False)
    return {name: grads[name] for name in p.weights}


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


# -- optimisation -----------------------------------------------------------


def adam_step(p: NetParams, grads, lr: float, cfg: OptimConfig = OptimConfig()) -> NetParams:
    """In-place Adam with bias correction. Returns ``p`` for chaining."""
    p.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**p.step
    c2 = 1.0 - b2**p.step
    for name, w in p.weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m, v = p.m[name], p.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            w -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(w.dtype)
    return p


def ema_update(p: NetParams, decay: float) -> NetParams:
    if not 0 <= decay < 1:
        raise ValueError("EMA decay must be in [0, 1)")
    for name, w in p.weights.items():
        e = p.ema[name]
        e *= decay
        e += (1 - decay) * w
    return p


def cosine_lr(step: int, cfg: OptimConfig) -> float:
    step = min(max(step, 0), cfg.total_steps)
    return 0.5 * cfg.max_lr * (1.0 + math.cos(math.pi * step / cfg.total_steps))
