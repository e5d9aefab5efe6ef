"""Gaussian diffusion: schedule, forward process, losses, and samplers.

Timesteps are 1-indexed in every public signature (t in [1, T]) and stored
0-indexed internally; the cumulative signal fraction uses the convention
alpha_bar(0) = 1. Schedule arrays are float64 so closed-form quantities stay
accurate enough for oracle comparisons; they are cast to the data dtype at
the point of use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import IndexOutOfRange, InvalidSchedule, InvalidStepCount
from .layout import PaddedLayout, null_layout
from .rng import torch_generator

# model signature: (x_t, t, layouts) -> eps prediction, t an int or batch tensor
DenoiseFn = Callable[[torch.Tensor, torch.Tensor, Sequence[PaddedLayout]], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    posterior_mean_coef_x0: np.ndarray = field(init=False)
    posterior_mean_coef_xt: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidSchedule("beta must be a non-empty 1-D array")
        if not ((beta > 0).all() and (beta < 1).all()):
            raise InvalidSchedule("beta values must lie strictly in (0, 1)")
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        # previous-step cumulative, with alpha_bar(0) = 1
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        coef_x0 = np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
        coef_xt = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_variance", posterior_variance)
        object.__setattr__(self, "posterior_mean_coef_x0", coef_x0)
        object.__setattr__(self, "posterior_mean_coef_xt", coef_xt)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check_t(self, t, lo: int = 1):
        t_arr = np.asarray(t)
        if (t_arr < lo).any() or (t_arr > self.T).any():
            raise IndexOutOfRange(f"t={t} outside [{lo}, {self.T}]")

    def beta_at(self, t):
        self._check_t(t)
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        self._check_t(t)
        return self.alpha[np.asarray(t) - 1]

    def alpha_bar_at(self, t):
        """Cumulative signal fraction; accepts t in [0, T] with value 1 at 0."""
        self._check_t(t, lo=0)
        t_arr = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t_arr]

    def posterior_variance_at(self, t):
        self._check_t(t)
        return self.posterior_variance[np.asarray(t) - 1]

    def to_json(self) -> dict:
        return {
            "kind": "explicit",
            "timesteps": self.T,
            "beta": [float(b) for b in self.beta],
        }


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly interpolated from beta_start to beta_end inclusive."""
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(beta)


def _coef(values, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-timestep scalars and broadcast against a data tensor."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return torch.tensor(float(arr), dtype=like.dtype, device=like.device)
    out = torch.from_numpy(arr).to(dtype=like.dtype, device=like.device)
    return out.reshape(-1, *([1] * (like.dim() - 1)))


def _as_index(t) -> np.ndarray | int:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return t


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noisy sample at step t: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    t = _as_index(t)
    a_bar = schedule.alpha_bar_at(t)
    return _coef(np.sqrt(a_bar), t, x0) * x0 + _coef(np.sqrt(1.0 - a_bar), t, x0) * eps


def q_posterior(x0: torch.Tensor, x_t: torch.Tensor, t, schedule: NoiseSchedule):
    """Mean and variance of the reverse-step posterior given clean data."""
    t = _as_index(t)
    schedule._check_t(t)
    mean = (
        _coef(schedule.posterior_mean_coef_x0[np.asarray(t) - 1], t, x0) * x0
        + _coef(schedule.posterior_mean_coef_xt[np.asarray(t) - 1], t, x_t) * x_t
    )
    variance = schedule.posterior_variance_at(t)
    return mean, variance


def mu_from_eps(x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Posterior mean recovered from a noise prediction."""
    t = _as_index(t)
    alpha = schedule.alpha_at(t)
    a_bar = schedule.alpha_bar_at(t)
    scale = _coef(1.0 / np.sqrt(alpha), t, x_t)
    shift = _coef((1.0 - alpha) / np.sqrt(1.0 - a_bar), t, x_t)
    return scale * (x_t - shift * eps_hat)


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance scale plus the empty layout used for the unconditional branch."""

    scale: float
    null_layout: PaddedLayout
    form: str = "interp"  # interp: (1-s) uncond + s cond; extrapolate: cond + s (cond - uncond)

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.form not in ("interp", "extrapolate"):
            raise ValueError(f"unknown guidance form {self.form!r}")
        if self.null_layout.n_real != 0:
            raise ValueError("null layout must contain no user objects")


def guided_eps(
    model: DenoiseFn,
    x_t: torch.Tensor,
    t,
    layout: PaddedLayout,
    guidance: GuidanceSpec,
) -> torch.Tensor:
    """Combine unconditional and conditional noise predictions."""
    eps_uncond = model(x_t, t, guidance.null_layout)
    eps_cond = model(x_t, t, layout)
    s = guidance.scale
    if guidance.form == "interp":
        return (1.0 - s) * eps_uncond + s * eps_cond
    return eps_cond + s * (eps_cond - eps_uncond)


def training_loss(
    x0_batch: torch.Tensor,
    layouts: Sequence[PaddedLayout],
    model: DenoiseFn,
    schedule: NoiseSchedule,
    p_uncond: float,
    rng: torch.Generator,
) -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    Per sample: t ~ Uniform[1, T], eps ~ N(0, I); with probability p_uncond
    the conditioning layout is replaced by the empty layout.
    """
    if not (0.0 <= p_uncond <= 1.0):
        raise ValueError(f"p_uncond must be in [0, 1], got {p_uncond}")
    n = x0_batch.shape[0]
    if len(layouts) != n:
        raise ValueError(f"batch size {n} != number of layouts {len(layouts)}")
    t = torch.randint(1, schedule.T + 1, (n,), generator=rng)
    eps = torch.randn(
        x0_batch.shape, generator=rng, dtype=x0_batch.dtype, device=x0_batch.device
    )
    drop = torch.rand((n,), generator=rng) < p_uncond
    conditioned = [
        null_layout(l.k, l.num_categories) if drop[i] else l
        for i, l in enumerate(layouts)
    ]
    x_t = q_sample(x0_batch, t, eps, schedule)
    eps_hat = model(x_t, t, conditioned)
    return torch.mean((eps - eps_hat) ** 2)


def _init_noise(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    gen = torch_generator(seed, "init")
    return torch.randn(shape, generator=gen, dtype=dtype)


@torch.no_grad()
def ancestral_sample(
    model: DenoiseFn,
    layout: PaddedLayout,
    guidance: GuidanceSpec,
    schedule: NoiseSchedule,
    seed: int,
    shape,
    zero_noise: bool = False,
    progress: Optional[Callable[[int, int], None]] = None,
) -> torch.Tensor:
    """Full reverse chain from pure noise; deterministic given the seed.

    zero_noise suppresses the per-step z draw (diagnostic hook used to
    compare against deterministic samplers).
    """
    x = _init_noise(seed, shape)
    step_gen = torch_generator(seed, "steps")
    for t in range(schedule.T, 0, -1):
        eps_hat = guided_eps(model, x, t, layout, guidance)
        mean = mu_from_eps(x, t, eps_hat, schedule)
        if t > 1 and not zero_noise:
            z = torch.randn(x.shape, generator=step_gen, dtype=x.dtype)
            sigma = math.sqrt(float(schedule.posterior_variance_at(t)))
            x = mean + sigma * z
        else:
            x = mean
        if progress is not None:
            progress(schedule.T - t + 1, schedule.T)
    return x.clamp(-1.0, 1.0)


def _log_snr(schedule: NoiseSchedule, t: int) -> float:
    a_bar = float(schedule.alpha_bar_at(t))
    return 0.5 * (math.log(a_bar) - math.log(1.0 - a_bar))


def _jump(x: torch.Tensor, eps: torch.Tensor, t: int, t_next: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic move from step t to t_next < t using one noise estimate."""
    if t_next == t - 1:
        # single-step jump is exactly the noise-free reverse step
        return mu_from_eps(x, t, eps, schedule)
    a_bar_t = float(schedule.alpha_bar_at(t))
    x0_hat = (x - math.sqrt(1.0 - a_bar_t) * eps) / math.sqrt(a_bar_t)
    if t_next == 0:
        return x0_hat
    a_bar_next = float(schedule.alpha_bar_at(t_next))
    ratio = a_bar_t / a_bar_next
    coef_x0 = math.sqrt(a_bar_next) * (1.0 - ratio) / (1.0 - a_bar_t)
    coef_xt = math.sqrt(ratio) * (1.0 - a_bar_next) / (1.0 - a_bar_t)
    return coef_x0 * x0_hat + coef_xt * x


def fast_sample_timesteps(T: int, n_steps: int) -> list[int]:
    """Strictly decreasing subsequence of length n_steps starting at T."""
    if not (1 <= n_steps <= T):
        raise InvalidStepCount(f"n_steps={n_steps} outside [1, {T}]")
    if n_steps == 1:
        return [T]
    ts = np.linspace(T, 1, n_steps)
    out = [int(round(v)) for v in ts]
    if any(later >= earlier for earlier, later in zip(out, out[1:])):
        raise InvalidStepCount(f"could not build a strict subsequence for {n_steps}")
    return out


@torch.no_grad()
def fast_sample(
    model: DenoiseFn,
    layout: PaddedLayout,
    guidance: GuidanceSpec,
    schedule: NoiseSchedule,
    n_steps: int,
    seed: int,
    shape,
    progress: Optional[Callable[[int, int], None]] = None,
) -> torch.Tensor:
    """Deterministic subsequence sampler.

    Intermediate jumps use a midpoint correction: a provisional move to the
    timestep nearest the log-SNR midpoint refines the noise estimate before
    the full jump. Unit jumps and the final jump to the clean image stay
    first order, so at n_steps = T the trajectory coincides with the
    zero-noise ancestral chain.
    """
    timesteps = fast_sample_timesteps(schedule.T, n_steps)
    x = _init_noise(seed, shape)
    for i, t in enumerate(timesteps):
        t_next = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps_hat = guided_eps(model, x, t, layout, guidance)
        if t_next == 0 or t - t_next <= 1:
            x = _jump(x, eps_hat, t, t_next, schedule)
        else:
            target = 0.5 * (_log_snr(schedule, t) + _log_snr(schedule, t_next))
            candidates = np.arange(t_next + 1, t)
            lam = np.array([_log_snr(schedule, int(s)) for s in candidates])
            mid = int(candidates[int(np.argmin(np.abs(lam - target)))])
            x_mid = _jump(x, eps_hat, t, mid, schedule)
            eps_mid = guided_eps(model, x_mid, mid, layout, guidance)
            x = _jump(x, eps_mid, t, t_next, schedule)
        if progress is not None:
            progress(i + 1, len(timesteps))
    return x.clamp(-1.0, 1.0)
