"""Per-iteration error analysis of a trained sampler.

For each iteration t = 1..T this measures

  modular      D(f(x_t^forw), GT_t)       error of one network application
  input        D(x_t^back, x_t^forw)      how far sampler states drift from q
  cumulative   D(f(x_t^back), GT_t)       error after running the chain T -> t
  mu           (cumu_t - mod_t) / cumu_{t+1}

D compares two *sets* of samples per dataset item (the sample axis is the
Monte-Carlo axis of the chain/forward noise); item-level values are
averaged and their standard error is kept alongside.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule, forward_batch, gt_batch, init_xT
from .tensor import DTYPE, Rng, ShapeError, atomic_write, normal_sample

VAR_FLOOR = 1e-6
MU_EPS = 1e-9
CSV_HEADER = "t,modular,input,cumulative,mu,mu_defined"


class DivergenceMetric(str, enum.Enum):
    KL = "kl"
    MSE = "mse"

    @classmethod
    def parse(cls, value) -> "DivergenceMetric":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        if key in ("kl", "kldiaggaussian", "kl_diag_gaussian"):
            return cls.KL
        if key == "mse":
            return cls.MSE
        raise ValueError(f"unknown divergence metric {value!r}")


def _stack(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2:
        raise ShapeError("samples must be a sequence of tensors")
    return arr


def divergence(metric, samples_a, samples_b) -> float:
    """Divergence between two sample sets (leading axis = sample index).

    KL fits an independent Gaussian per pixel on each side (variance floored
    at 1e-6) and returns the pixel mean of KL(a || b). MSE compares the
    per-pixel means only.
    """
    metric = DivergenceMetric.parse(metric)
    a, b = _stack(samples_a), _stack(samples_b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"sample shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    if metric is DivergenceMetric.MSE:
        return float(np.mean((ma - mb) ** 2))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("KL estimate needs at least 2 samples per side")
    va = np.maximum(a.var(axis=0, ddof=1), VAR_FLOOR)
    vb = np.maximum(b.var(axis=0, ddof=1), VAR_FLOOR)
    kl = 0.5 * (np.log(vb / va) + (va + (ma - mb) ** 2) / vb - 1.0)
    return float(max(np.mean(kl), 0.0))


def _per_item(metric, a, b):
    """Divergence for each item; ``a``/``b`` shaped (items, samples, C, H, W)."""
    vals = np.array([divergence(metric, ai, bi) for ai, bi in zip(a, b)])
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return float(vals.mean()), float(se)


def estimate_mu(cumu_t: float, mod_t: float, cumu_next: float):
    """Propagation factor, or None when the next cumulative error vanishes."""
    if abs(cumu_next) < MU_EPS:
        return None
    return (cumu_t - mod_t) / cumu_next


# -- sampling helpers -------------------------------------------------------


def _chunked(denoiser, x, y, t, chunk=64):
    t = np.broadcast_to(np.asarray(t), (len(x),))
    out = [np.asarray(denoiser(x[i : i + chunk], y[i : i + chunk], t[i : i + chunk]))
           for i in range(0, len(x), chunk)]
    return np.concatenate(out).astype(DTYPE)


def _tile(pairs, samples):
    if not pairs:
        raise ValueError("empty dataset")
    x0 = np.repeat(np.stack([p.x0 for p in pairs]), samples, axis=0).astype(DTYPE)
    y0 = np.repeat(np.stack([p.y0 for p in pairs]), samples, axis=0).astype(DTYPE)
    return x0, y0


def _split(arr, items):
    return arr.reshape(items, -1, *arr.shape[1:])


def _chain_states(denoiser, s, y0, rng, t_stop, stochastic=True):
    """Yield (t, x_t^back, f(x_t^back)) for t = T..t_stop, advancing the chain."""
    x = init_xT(y0, s, rng)
    for t in range(s.T, t_stop - 1, -1):
        pred = _chunked(denoiser, x, y0, t)
        yield t, x, pred
        if t == t_stop:
            break
        x = pred
        if stochastic and s.kappa > 0:
            x = (pred + s.kappa * np.sqrt(s.eta[t - 1]) * normal_sample(rng, pred.shape)).astype(DTYPE)


def measure_modular(denoiser, dataset, s: DiffusionSchedule, t: int, source: str = "forward",
                    metric="kl", samples: int = 64, rng: Rng | None = None) -> float:
    """D(f(x_t), GT_t) with x_t drawn from q ('forward') or the sampler ('backward')."""
    if not 1 <= t <= s.T:
        raise ValueError(f"iteration {t} outside 1..{s.T}")
    rng = rng or Rng(0)
    x0, y0 = _tile(dataset, samples)
    gt = gt_batch(x0, y0, s, t)
    if source == "forward":
        pred = _chunked(denoiser, forward_batch(x0, y0, s, t, rng), y0, t)
    elif source == "backward":
        *_, (_, _, pred) = _chain_states(denoiser, s, y0, rng, t)
    else:
        raise ValueError(f"unknown input source {source!r}")
    return _per_item(metric, _split(pred, len(dataset)), _split(gt, len(dataset)))[0]


def measure_input_error(denoiser, dataset, s: DiffusionSchedule, t: int, metric="kl",
                        samples: int = 64, rng: Rng | None = None) -> float:
    """D(x_t^back, x_t^forw); zero at t = T where the chain starts from q."""
    if not 1 <= t <= s.T:
        raise ValueError(f"iteration {t} outside 1..{s.T}")
    if t == s.T:
        return 0.0
    rng = rng or Rng(0)
    x0, y0 = _tile(dataset, samples)
    *_, (_, x_back, _) = _chain_states(denoiser, s, y0, rng.child("chain"), t)
    x_forw = forward_batch(x0, y0, s, t, rng.child("forward"))
    return _per_item(metric, _split(x_back, len(dataset)), _split(x_forw, len(dataset)))[0]


def measure_cumulative(denoiser, dataset, s: DiffusionSchedule, t: int, metric="kl",
                       samples: int = 64, rng: Rng | None = None) -> float:
    """D(f(x_t^back), GT_t): chain T -> t, then one more network application."""
    return measure_modular(denoiser, dataset, s, t, "backward", metric, samples, rng)


# -- reports ----------------------------------------------------------------


@dataclass
class ErrorReport:
    metric: str
    modular: list
    input: list
    cumulative: list
    mu: list
    mu_defined: list
    modular_se: list = field(default_factory=list)
    input_se: list = field(default_factory=list)
    cumulative_se: list = field(default_factory=list)
    samples: int = 0
    items: int = 0
    seed: int = 0
    mode: str = ""

    @property
    def T(self) -> int:
        return len(self.modular)

    def row(self, t: int):
        i = t - 1
        return self.modular[i], self.input[i], self.cumulative[i], self.mu[i], self.mu_defined[i]

    def residual(self, t: int) -> float:
        """cumu_t - (mod_t + mu_t * cumu_{t+1}); 0 wherever mu_t is defined."""
        i = t - 1
        if t >= self.T or not self.mu_defined[i]:
            return 0.0
        return self.cumulative[i] - (self.modular[i] + self.mu[i] * self.cumulative[i + 1])


def error_report(denoiser, dataset, s: DiffusionSchedule, metric="kl", samples_per_t: int = 64,
                 max_items: int = 16, seed: int = 0, mode: str = "",
                 stochastic: bool = True) -> ErrorReport:
    """Full sweep t = T..1. One sampler run per (item, sample) supplies x_t^back
    for every t at once; forward samples are drawn fresh per t."""
    metric = DivergenceMetric.parse(metric)
    items = list(dataset)[:max_items]
    n = len(items)
    root = Rng(seed)
    x0, y0 = _tile(items, samples_per_t)
    T = s.T
    mod, inp, cum = np.zeros(T), np.zeros(T), np.zeros(T)
    mod_se, inp_se, cum_se = np.zeros(T), np.zeros(T), np.zeros(T)
    for t, x_back, pred_back in _chain_states(denoiser, s, y0, root.child("chain"), 1, stochastic):
        gt = _split(gt_batch(x0, y0, s, t), n)
        x_forw = forward_batch(x0, y0, s, t, root.child(f"forward{t}"))
        pred_forw = _chunked(denoiser, x_forw, y0, t)
        mod[t - 1], mod_se[t - 1] = _per_item(metric, _split(pred_forw, n), gt)
        cum[t - 1], cum_se[t - 1] = _per_item(metric, _split(pred_back, n), gt)
        if t < T:
            inp[t - 1], inp_se[t - 1] = _per_item(metric, _split(x_back, n), _split(x_forw, n))
    mu, defined = [], []
    for t in range(1, T + 1):
        m = estimate_mu(cum[t - 1], mod[t - 1], cum[t]) if t < T else None
        mu.append(0.0 if m is None else float(m))
        defined.append(m is not None)
    return ErrorReport(metric.value, mod.tolist(), inp.tolist(), cum.tolist(), mu, defined,
                       mod_se.tolist(), inp_se.tolist(), cum_se.tolist(),
                       samples_per_t, n, seed, mode)


def report_csv(report: ErrorReport) -> str:
    lines = [CSV_HEADER]
    for t in range(1, report.T + 1):
        m, i, c, mu, d = report.row(t)
        lines.append(f"{t},{m:.9g},{i:.9g},{c:.9g},{mu:.9g},{int(d)}")
    return "\n".join(lines) + "\n"


def write_report(path, report: ErrorReport) -> None:
    path = Path(path)
    atomic_write(path, report_csv(report))
    side = {k: v for k, v in asdict(report).items() if k not in ("modular", "input", "cumulative", "mu", "mu_defined")}
    atomic_write(path.with_suffix(".json"), json.dumps(side, indent=1, sort_keys=True))


def read_report_csv(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().strip().splitlines()
    if lines[0].strip() != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {lines[0]!r}")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {name: rows[:, k] for k, name in enumerate(CSV_HEADER.split(","))}


def compare_reports(a, b) -> str:
    """Per-t differences ``b - a`` as CSV text."""
    if len(a["t"]) != len(b["t"]) or np.any(a["t"] != b["t"]):
        raise ValueError("reports cover different iterations")
    lines = ["t,d_modular,d_input,d_cumulative,d_mu"]
    for k in range(len(a["t"])):
        lines.append(f"{int(a['t'][k])},{b['modular'][k] - a['modular'][k]:.9g},{b['input'][k] - a['input'][k]:.9g},"
                     f"{b['cumulative'][k] - a['cumulative'][k]:.9g},{b['mu'][k] - a['mu'][k]:.9g}")
    return "\n".join(lines) + "\n"
