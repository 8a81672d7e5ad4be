"""Residual-shifting diffusion: schedule, forward kernel, backward sampler.

The forward kernel moves the clean image toward the degraded one while
adding noise::

    q(x_t | x_0) = N(x_0 + eta_t * r_0, kappa^2 * eta_t * I),   r_0 = y_0 - x_0

and the per-iteration regression target is GT_t = x_0 + eta_{t-1} * r_0.
The backward transition used everywhere (testing and data-consistent
training alike) is N(f(x_t, y_0, t), kappa^2 * eta_{t-1} * I), which is
deterministic at t = 1 because eta_0 = 0.

A *denoiser* is any callable ``f(x, y, t) -> prediction`` on batched
``(N, C, H, W)`` arrays with integer iterations ``t`` of shape ``(N,)``.
:class:`NetDenoiser` adapts trained parameters; :class:`OracleDenoiser`
returns GT_t exactly and is used to test the algebra.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .net import NetParams, net_forward
from .tensor import DTYPE, Rng, ShapeError, check_same_shape, normal_sample

Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    kappa: float
    power: float
    eta: np.ndarray = field(repr=False, compare=False)

    def sqrt_eta(self, t):
        return np.sqrt(self.eta[t])


def make_schedule(T: int = 15, kappa: float = 1.0, p: float = 2.0) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not p > 0:
        raise ValueError(f"schedule power must be positive, got {p}")
    eta = (np.arange(T + 1, dtype=np.float64) / T) ** p
    eta[0], eta[T] = 0.0, 1.0
    eta.setflags(write=False)
    return DiffusionSchedule(int(T), float(kappa), float(p), eta)


def with_kappa(s: DiffusionSchedule, kappa: float) -> DiffusionSchedule:
    """Same eta sequence, different noise scale. ``kappa=0`` is allowed here
    to build the noiseless limit used by exactness checks."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return DiffusionSchedule(s.T, float(kappa), s.power, s.eta)


@dataclass
class RestorationPair:
    x0: np.ndarray
    y0: np.ndarray
    task: str = ""

    def __post_init__(self):
        check_same_shape(self.x0, self.y0)

    @property
    def residue(self) -> np.ndarray:
        return self.y0 - self.x0


def _check_t(s: DiffusionSchedule, t, lo: int = 1, hi: int | None = None):
    hi = s.T if hi is None else hi
    t_arr = np.asarray(t)
    if np.any(t_arr < lo) or np.any(t_arr > hi):
        raise ValueError(f"iteration {t} outside {lo}..{hi}")


def _col(values, ndim):
    """Per-item scalars shaped to broadcast over (N, C, H, W) or scalar."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0 or ndim == 3:
        return v
    return v.reshape(-1, *([1] * (ndim - 1)))


def _interp(x0, y0, eta):
    # x0 + eta * r0 written so that eta = 0 and eta = 1 hit x0 and y0 exactly
    eta = _col(eta, np.ndim(x0))
    return ((1.0 - eta) * np.asarray(x0, np.float64) + eta * np.asarray(y0, np.float64)).astype(DTYPE)


def gt_batch(x0, y0, s: DiffusionSchedule, t) -> np.ndarray:
    """GT_t = x0 + eta_{t-1} (y0 - x0); ``t`` may be a per-item array."""
    _check_t(s, t)
    return _interp(x0, y0, s.eta[np.asarray(t) - 1])


def gt_at(pair: RestorationPair, s: DiffusionSchedule, t: int) -> np.ndarray:
    return gt_batch(pair.x0, pair.y0, s, t)


def forward_mean(x0, y0, s: DiffusionSchedule, t) -> np.ndarray:
    return _interp(x0, y0, s.eta[np.asarray(t)])


def forward_sample(pair: RestorationPair, s: DiffusionSchedule, t: int, rng: Rng) -> np.ndarray:
    """Draw x_t^forw ~ q(x_t | x_0)."""
    return forward_batch(pair.x0, pair.y0, s, t, rng)


def forward_batch(x0, y0, s: DiffusionSchedule, t, rng: Rng, allow_zero: bool = False) -> np.ndarray:
    """:func:`forward_sample` on arrays; ``x0``/``y0`` may be batched.
    ``allow_zero`` admits t = 0, where the kernel collapses onto x0."""
    _check_t(s, t, lo=0 if allow_zero else 1)
    check_same_shape(np.asarray(x0), np.asarray(y0))
    t = np.asarray(t)
    mean = forward_mean(x0, y0, s, t)
    std = _col(s.kappa * np.sqrt(s.eta[t]), mean.ndim)
    if s.kappa == 0:
        return mean
    return (mean + std * normal_sample(rng, mean.shape)).astype(DTYPE)


def init_xT(y0, s: DiffusionSchedule, rng: Rng) -> np.ndarray:
    """Chain start x_T = y0 + kappa * eps (eta_T = 1, so x0 drops out).
    Takes the degraded image (or a batch of them) or a pair."""
    if isinstance(y0, RestorationPair):
        y0 = y0.y0
    y0 = np.asarray(y0, dtype=DTYPE)
    if s.kappa == 0:
        return y0.copy()
    return (y0 + s.kappa * normal_sample(rng, y0.shape)).astype(DTYPE)


# -- denoisers --------------------------------------------------------------


class NetDenoiser:
    def __init__(self, params: NetParams, T: int, use_ema: bool = False):
        self.params = params
        self.T = T
        self.use_ema = use_ema

    def __call__(self, x, y, t):
        t_norm = np.asarray(t, dtype=np.float64) / self.T
        return net_forward(self.params, x, y, t_norm, use_ema=self.use_ema)


class OracleDenoiser:
    """Returns GT_t exactly for every known pair, looked up by its y0.
    ``offset`` adds a constant, to build 'GT_t + c' stubs."""

    def __init__(self, pairs, s: DiffusionSchedule, offset: float = 0.0):
        self.s = s
        self.offset = offset
        self._x0 = {np.ascontiguousarray(p.y0, dtype=DTYPE).tobytes(): p.x0 for p in pairs}

    def __call__(self, x, y, t):
        y = np.asarray(y, dtype=DTYPE)
        single = y.ndim == 3
        yb = y[None] if single else y
        tb = np.broadcast_to(np.asarray(t), (yb.shape[0],))
        x0 = np.stack([self._x0[np.ascontiguousarray(yi).tobytes()] for yi in yb])
        out = gt_batch(x0, yb, self.s, tb) + DTYPE(self.offset)
        return out[0] if single else out


def _apply(denoiser: Denoiser, x, y, t):
    x = np.asarray(x)
    if x.ndim == 3:
        return np.asarray(denoiser(x[None], np.asarray(y)[None], np.atleast_1d(t)))[0]
    return np.asarray(denoiser(x, y, np.broadcast_to(np.asarray(t), (x.shape[0],))))


def backward_step(denoiser: Denoiser, s: DiffusionSchedule, x_t, y0, t, rng: Rng,
                  stochastic: bool = True) -> np.ndarray:
    """One transition x_t -> x_{t-1}; ``t`` scalar or per-item."""
    _check_t(s, t)
    if np.shape(x_t) != np.shape(y0):
        raise ShapeError(f"state {np.shape(x_t)} and condition {np.shape(y0)} differ")
    mean = _apply(denoiser, x_t, y0, t).astype(DTYPE)
    if not stochastic or s.kappa == 0:
        return mean
    std = _col(s.kappa * np.sqrt(s.eta[np.asarray(t) - 1]), mean.ndim)
    if np.all(std == 0):
        return mean
    return (mean + std * normal_sample(rng, mean.shape)).astype(DTYPE)


def backward_chain(denoiser: Denoiser, s: DiffusionSchedule, y0, rng: Rng, t_stop=0,
                   keep_trajectory: bool = False, stochastic: bool = True):
    """Run the sampler from x_T down to x_{t_stop}.

    ``y0`` may be a batch with per-item ``t_stop``; items stop advancing once
    they reach their own iteration. With ``keep_trajectory`` the states
    x_T, ..., x_{t_stop + 1} are also returned (single-item use only), i.e.
    ``T - t_stop`` states, each one the input of a network application.
    """
    y0 = np.asarray(y0, dtype=DTYPE)
    batched = y0.ndim == 4
    t_stop = np.asarray(t_stop)
    if np.any(t_stop < 0) or np.any(t_stop > s.T):
        raise ValueError(f"t_stop {t_stop} outside 0..{s.T}")
    x = init_xT(y0, s, rng)
    traj = []
    for t in range(s.T, int(np.min(t_stop)), -1):
        if keep_trajectory:
            traj.append(x.copy())
        if batched:
            active = np.flatnonzero(np.broadcast_to(t_stop, (len(y0),)) < t)
            if len(active) == len(y0):
                x = backward_step(denoiser, s, x, y0, t, rng, stochastic)
            else:
                x[active] = backward_step(denoiser, s, x[active], y0[active], t, rng, stochastic)
        else:
            x = backward_step(denoiser, s, x, y0, t, rng, stochastic)
    return (x, traj) if keep_trajectory else x
