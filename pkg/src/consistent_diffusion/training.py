"""Training loop shared by the six input-construction modes.

Every mode trains the same thing: one network application f(x_in, y0, t)
regressed onto GT_t with MSE. Modes differ only in how x_in is built:

  traditional         x_t^forw ~ q(x_t | x_0)
  data_consistent     x_t^back from the sampler, run T -> t with current weights
  efficient           f(x_{t+1}^forw) + (T - t) * e,  e = f(x_{t+1}^forw) - GT_{t+1}
  efficient_no_amp    f(x_{t+1}^forw)
  efficient_rand_amp  f(x_{t+1}^forw) + lam * e,  lam ~ U{0..T-t}
  nll_reg             traditional term plus f(x_t^back) -> x_{t-1}^forw

Input construction is outside the gradient: only the final application
is differentiated.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    NetDenoiser,
    backward_chain,
    forward_batch,
    gt_batch,
    make_schedule,
)
from .net import (
    NetConfig,
    NetParams,
    OptimConfig,
    adam_step,
    cosine_lr,
    ema_update,
    mse_loss,
    net_backward,
    net_forward_cached,
    net_init,
)
from .tensor import DTYPE, NumericError, Rng


class TrainMode(str, enum.Enum):
    TRADITIONAL = "traditional"
    DATA_CONSISTENT = "data_consistent"
    EFFICIENT = "efficient"
    EFFICIENT_NO_AMP = "efficient_no_amp"
    EFFICIENT_RAND_AMP = "efficient_rand_amp"
    NLL_REG = "nll_reg"

    @classmethod
    def parse(cls, value) -> "TrainMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"dc": "data_consistent", "datconsistent": "data_consistent",
                   "noamp": "efficient_no_amp", "randamp": "efficient_rand_amp", "nllreg": "nll_reg"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown training mode {value!r}; choose from {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = TrainMode.TRADITIONAL
    T: int = 15
    kappa: float = 1.0
    power: float = 2.0
    net: NetConfig = NetConfig()
    optim: OptimConfig = OptimConfig()
    seed: int = 0
    chain_stochastic: bool = True
    chain_use_ema: bool = False

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.T, self.kappa, self.power)


@dataclass
class TrainState:
    params: NetParams
    config: TrainConfig
    schedule: DiffusionSchedule


@dataclass
class StepInfo:
    step: int
    loss: float
    lr: float
    t: np.ndarray
    inputs: list = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    params = net_init(cfg.net, Rng(cfg.seed).child("init"))
    return TrainState(params, cfg, cfg.schedule())


# -- input construction -----------------------------------------------------


def one_step_error(denoiser, x0, y0, s: DiffusionSchedule, t, rng: Rng):
    """Return ``(e, f_out)`` with f_out = f(x_{t+1}^forw) and
    e = f_out - GT_{t+1}. No gradients are tracked here."""
    t = np.asarray(t)
    if np.any(t > s.T - 1) or np.any(t < 1):
        raise ValueError(f"one-step error needs t in 1..{s.T - 1}, got {t}")
    x_next = forward_batch(x0, y0, s, t + 1, rng)
    f_out = np.asarray(_call(denoiser, x_next, y0, t + 1), dtype=DTYPE)
    return (f_out - gt_batch(x0, y0, s, t + 1)).astype(DTYPE), f_out


def _call(denoiser, x, y, t):
    if np.ndim(x) == 3:
        return np.asarray(denoiser(x[None], np.asarray(y)[None], np.atleast_1d(t)))[0]
    return denoiser(x, y, np.broadcast_to(t, (len(x),)))


def _bcast(v, ndim):
    v = np.asarray(v)
    return v if v.ndim == 0 or ndim == 3 else v.reshape(-1, *([1] * (ndim - 1)))


def make_training_input(mode, denoiser, x0, y0, s: DiffusionSchedule, t, rng: Rng,
                        chain_stochastic: bool = True):
    """Build ``[(input, target), ...]`` for iteration(s) ``t``.

    One pair for every mode except ``nll_reg`` (two). ``x0``/``y0`` may be a
    batch with per-item ``t``.
    """
    mode = TrainMode.parse(mode)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"iteration {t} outside 1..{s.T}")
    target = gt_batch(x0, y0, s, t)

    if mode is TrainMode.TRADITIONAL:
        return [(forward_batch(x0, y0, s, t, rng), target)]

    if mode is TrainMode.DATA_CONSISTENT:
        return [(backward_chain(denoiser, s, y0, rng, t, stochastic=chain_stochastic), target)]

    if mode is TrainMode.NLL_REG:
        x_forw = forward_batch(x0, y0, s, t, rng)
        x_back = backward_chain(denoiser, s, y0, rng, t, stochastic=chain_stochastic)
        prev_target = forward_batch(x0, y0, s, t - 1, rng, allow_zero=True)
        return [(x_forw, target), (x_back, prev_target)]

    # efficient family; t = T has no iteration T+1, so those items use x_T^forw
    x0, y0 = np.asarray(x0), np.asarray(y0)
    batched = x0.ndim == 4
    tb = np.atleast_1d(t)
    inner = np.flatnonzero(tb < s.T)
    xb0 = x0 if batched else x0[None]
    yb0 = y0 if batched else y0[None]
    tb = np.broadcast_to(tb, (len(xb0),))
    inputs = np.empty_like(xb0, dtype=DTYPE)
    edge = np.flatnonzero(tb == s.T)
    if len(edge):
        inputs[edge] = forward_batch(xb0[edge], yb0[edge], s, tb[edge], rng)
    if len(inner):
        ti = tb[inner]
        e, f_out = one_step_error(denoiser, xb0[inner], yb0[inner], s, ti, rng)
        if mode is TrainMode.EFFICIENT:
            lam = s.T - ti
        elif mode is TrainMode.EFFICIENT_NO_AMP:
            lam = np.zeros_like(ti)
        elif mode is TrainMode.EFFICIENT_RAND_AMP:
            lam = np.array([rng.integers(0, s.T - int(k)) for k in ti])
        else:
            raise ValueError(f"unhandled mode {mode}")
        inputs[inner] = (f_out + _bcast(lam.astype(DTYPE), 4) * e).astype(DTYPE)
    return [(inputs if batched else inputs[0], target)]


# -- optimisation -----------------------------------------------------------


def batch_arrays(pairs):
    return (np.stack([p.x0 for p in pairs]).astype(DTYPE),
            np.stack([p.y0 for p in pairs]).astype(DTYPE))


def sample_iterations(rng: Rng, T: int, n: int) -> np.ndarray:
    """One iteration per batch item, uniform over 1..T."""
    return rng.integers(1, T, n)


def step_gradients(state: TrainState, batch, rng: Rng):
    """Draw per-item iterations, build inputs and return
    ``(loss, grads, t, built)`` without touching the parameters."""
    if not batch:
        raise ValueError("empty batch")
    cfg, s, p = state.config, state.schedule, state.params
    x0, y0 = batch_arrays(batch)
    t = sample_iterations(rng, s.T, len(batch))
    denoiser = NetDenoiser(p, s.T, use_ema=cfg.chain_use_ema)
    built = make_training_input(cfg.mode, denoiser, x0, y0, s, t, rng, cfg.chain_stochastic)

    total = 0.0
    grads = None
    for x_in, target in built:
        out, cache = net_forward_cached(p, x_in, y0, t / s.T)
        loss, dout = mse_loss(out, target)
        g = net_backward(p, cache, dout)
        total += loss
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, grads, t, built


def train_step(state: TrainState, batch, rng: Rng, keep_inputs: bool = False) -> StepInfo:
    """One optimisation step on ``batch`` (list of RestorationPair)."""
    p = state.params
    total, grads, t, built = step_gradients(state, batch, rng)
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss at step {p.step}")
    lr = cosine_lr(p.step, state.config.optim)
    step = p.step
    adam_step(p, grads, lr, state.config.optim)
    ema_update(p, state.config.optim.ema_decay)
    return StepInfo(step, total, lr, t, [x for x, _ in built] if keep_inputs else [])


def batch_indices(step: int, n_items: int, batch_size: int, root: Rng) -> list[int]:
    """Items for ``step``: consecutive slices of per-epoch shuffles, so the
    sequence depends only on (root seed, step)."""
    out = []
    pos = step * batch_size
    perm_cache = {}
    for k in range(pos, pos + batch_size):
        epoch, j = divmod(k, n_items)
        if epoch not in perm_cache:
            perm_cache[epoch] = root.child(f"epoch{epoch}").permutation(n_items)
        out.append(int(perm_cache[epoch][j]))
    return out


@dataclass
class LogRow:
    step: int
    mode: str
    t: str
    loss: float
    lr: float
    seconds: float

    def csv(self) -> str:
        return f"{self.step},{self.mode},{self.t},{self.loss:.9g},{self.lr:.9g}"


LOSS_CSV_HEADER = "step,mode,t,loss,lr"


def train_loop(cfg: TrainConfig, dataset, state: TrainState | None = None, steps: int | None = None,
               on_step=None, checkpoint_every: int = 0, checkpoint_fn=None) -> tuple[NetParams, list[LogRow]]:
    """Run training from ``state`` (fresh if None) up to ``steps`` total
    (default ``cfg.optim.total_steps``).

    ``on_step(state, row)`` is called after each step; ``checkpoint_fn(state)``
    every ``checkpoint_every`` steps.
    """
    if not dataset:
        raise ValueError("empty dataset")
    state = state or init_state(cfg)
    root = Rng(cfg.seed)
    end = cfg.optim.total_steps if steps is None else steps
    log = []
    while state.params.step < end:
        k = state.params.step
        batch = [dataset[i] for i in batch_indices(k, len(dataset), cfg.optim.batch_size, root)]
        t0 = time.perf_counter()
        info = train_step(state, batch, root.child(f"step{k}"))
        row = LogRow(k + 1, cfg.mode.value, ";".join(str(int(v)) for v in info.t), info.loss, info.lr,
                     time.perf_counter() - t0)
        log.append(row)
        if on_step:
            on_step(state, row)
        if checkpoint_fn and checkpoint_every and state.params.step % checkpoint_every == 0:
            checkpoint_fn(state)
    return state.params, log
