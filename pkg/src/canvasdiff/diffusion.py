"""Noise schedule, forward noising, reverse-step parameterization, losses,
guidance transforms, and the deterministic subsampled sampler.

Schedule arrays are float64 numpy indexed 1..T (index 0 is the clean endpoint)
and are cast to the image dtype where they meet tensors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .world import InvalidConfigError


class GuidanceUnavailableError(RuntimeError):
    """Similarity guidance requested but no trained noisy-image encoder exists."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray            # [T+1], alpha[0] = 1 unused
    alpha_bar: np.ndarray        # [T+1], alpha_bar[0] = 1
    beta: np.ndarray             # [T+1], beta[0] = 0
    beta_tilde: np.ndarray       # [T+1], beta_tilde[1] = 0 by definition
    log_beta: np.ndarray         # [T+1], log_beta[0] = 0 unused
    log_beta_tilde: np.ndarray   # [T+1], index 1 floored with the t=2 value

    def gather(self, name: str, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Pick per-element schedule values and broadcast against an image batch."""
        arr = getattr(self, name)
        vals = torch.as_tensor(arr, dtype=like.dtype, device=like.device)[t]
        return vals.reshape(-1, *([1] * (like.dim() - 1)))


def _cosine_s(t: np.ndarray, T: int) -> np.ndarray:
    return np.cos((t / T + 0.008) / 1.008 * (math.pi / 2)) ** 2


def build_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule; alpha_t is the ratio of squared cosines at t and t-1."""
    if T < 1:
        raise InvalidConfigError(f"T must be >= 1, got {T}")
    t = np.arange(0, T + 1, dtype=np.float64)
    s = _cosine_s(t, T)
    alpha = np.ones(T + 1)
    alpha[1:] = s[1:] / s[:-1]
    # the squared cosine vanishes at t = T; cap the noise increment at 0.999
    # (the schedule's source convention) so reverse-step math stays finite
    alpha = np.maximum(alpha, 1.0 - 0.999)
    alpha_bar = np.cumprod(alpha)
    beta = 1.0 - alpha
    beta[0] = 0.0
    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    log_beta = np.zeros(T + 1)
    log_beta[1:] = np.log(beta[1:])
    # beta_tilde_1 is exactly 0; floor its log with the t=2 value so the t=1
    # decoder variance stays positive
    log_beta_tilde = np.zeros(T + 1)
    if T >= 2:
        log_beta_tilde[1] = np.log(beta_tilde[2])
        log_beta_tilde[2:] = np.log(beta_tilde[2:])
    else:
        log_beta_tilde[1] = log_beta[1]
    return NoiseSchedule(T, alpha, alpha_bar, beta, beta_tilde, log_beta, log_beta_tilde)


@dataclass(frozen=True)
class GuidanceConfig:
    phi: float = 3.0               # classifier-free scale
    lam: float = 0.2               # condition-drop probability during training
    psi: float = 2.0               # similarity-guidance scale
    inference_steps: int = 50
    ascend_similarity: bool = True  # move the step mean toward higher similarity

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.inference_steps < 1:
            raise InvalidConfigError("inference_steps must be >= 1")


# ---------------------------------------------------------------------------
# forward / reverse step math

def q_sample(sched: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noisy image at step t injected directly from the clean image."""
    ab = sched.gather("alpha_bar", t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def posterior(sched: NoiseSchedule, x0: torch.Tensor, x_t: torch.Tensor,
              t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of the true reverse conditional for t >= 2."""
    ab = sched.gather("alpha_bar", t, x_t)
    ab_prev = sched.gather("alpha_bar", t - 1, x_t)
    a = sched.gather("alpha", t, x_t)
    b = sched.gather("beta", t, x_t)
    mean = ab_prev.sqrt() * b / (1.0 - ab) * x0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * x_t
    var = sched.gather("beta_tilde", t, x_t).expand_as(mean)
    return mean, var


def mean_from_eps(sched: NoiseSchedule, x_t: torch.Tensor, t: torch.Tensor,
                  eps_hat: torch.Tensor) -> torch.Tensor:
    a = sched.gather("alpha", t, x_t)
    ab = sched.gather("alpha_bar", t, x_t)
    b = sched.gather("beta", t, x_t)
    return (x_t - b / (1.0 - ab).sqrt() * eps_hat) / a.sqrt()


def eps_from_mean(sched: NoiseSchedule, x_t: torch.Tensor, t: torch.Tensor,
                  mu: torch.Tensor) -> torch.Tensor:
    """Invert the mean parameterization back to a noise prediction."""
    a = sched.gather("alpha", t, x_t)
    ab = sched.gather("alpha_bar", t, x_t)
    b = sched.gather("beta", t, x_t)
    return (x_t - a.sqrt() * mu) * (1.0 - ab).sqrt() / b


def var_from_rho(sched: NoiseSchedule, t: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Log-space interpolation between beta_t (rho=1) and beta_tilde_t (rho=0)."""
    lb = sched.gather("log_beta", t, rho)
    lbt = sched.gather("log_beta_tilde", t, rho)
    return torch.exp(rho * lb + (1.0 - rho) * lbt)


# ---------------------------------------------------------------------------
# variational term

def gaussian_kl(mean1: torch.Tensor, var1: torch.Tensor, mean2: torch.Tensor,
                var2: torch.Tensor) -> torch.Tensor:
    """KL(N(mean1, var1) || N(mean2, var2)), elementwise."""
    return 0.5 * (torch.log(var2 / var1) + (var1 + (mean1 - mean2) ** 2) / var2 - 1.0)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_nll(x0: torch.Tensor, mean: torch.Tensor,
                             var: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of x0 under 256 uniform bins spanning [-1, 1].

    Edge bins extend to +-infinity so the density integrates to one.
    """
    std = var.sqrt()
    idx = torch.clamp(torch.floor((x0 + 1.0) * 128.0), 0, 255)
    lower = idx / 128.0 - 1.0
    upper = (idx + 1.0) / 128.0 - 1.0
    cdf_upper = torch.where(idx >= 255, torch.ones_like(x0), _std_normal_cdf((upper - mean) / std))
    cdf_lower = torch.where(idx <= 0, torch.zeros_like(x0), _std_normal_cdf((lower - mean) / std))
    prob = (cdf_upper - cdf_lower).clamp(min=1e-12)
    return -torch.log(prob)


def vlb_term(sched: NoiseSchedule, x0: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
             mu_pred: torch.Tensor, var_pred: torch.Tensor) -> torch.Tensor:
    """Per-element variational term, averaged over pixels: KL for t >= 2,
    discretized decoder NLL at t = 1."""
    if (var_pred <= 0).any():
        raise ValueError("predicted variance must be positive")
    is_first = (t == 1).reshape(-1, *([1] * (x0.dim() - 1)))
    mean_post, var_post = posterior(sched, x0, x_t, t)
    # the t=1 posterior variance is exactly 0; substitute a safe value under
    # the mask so the unselected KL branch stays finite in the backward pass
    var_post = torch.where(is_first, torch.ones_like(var_post), var_post)
    kl = gaussian_kl(mean_post, var_post, mu_pred, var_pred)
    nll = discretized_gaussian_nll(x0, mu_pred, var_pred)
    per_pixel = torch.where(is_first, nll, kl)
    return per_pixel.flatten(1).mean(dim=1)


def cdd_losses(sched: NoiseSchedule, x0: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
               eps: torch.Tensor, eps_hat: torch.Tensor, rho: torch.Tensor,
               gamma: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mse, vlb, combined) losses for one batch.

    The variational term sees the noise prediction through a gradient stop, so
    it only trains the variance head; the combined loss is mse + gamma * vlb.
    """
    l_mse = ((eps - eps_hat) ** 2).flatten(1).mean(dim=1).mean()
    mu_pred = mean_from_eps(sched, x_t, t, eps_hat.detach())
    var_pred = var_from_rho(sched, t, rho)
    l_vlb = vlb_term(sched, x0, x_t, t, mu_pred, var_pred).mean()
    return l_mse, l_vlb, l_mse + gamma * l_vlb


# ---------------------------------------------------------------------------
# guidance transforms

def cfg_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, phi: float) -> torch.Tensor:
    """Classifier-free extrapolation between conditional and unconditional noise."""
    return phi * eps_cond + (1.0 - phi) * eps_uncond


def icm_guided_mean(mu: torch.Tensor, var: torch.Tensor, grad: torch.Tensor,
                    psi: float) -> torch.Tensor:
    """Shift a reverse-step mean along a similarity gradient, scaled by the variance."""
    return mu + psi * var * grad


# ---------------------------------------------------------------------------
# deterministic subsampled sampler

def sampling_timesteps(T: int, inference_steps: int) -> list[int]:
    if inference_steps > T:
        raise InvalidConfigError(f"inference_steps {inference_steps} > T {T}")
    if T % inference_steps != 0:
        raise InvalidConfigError(
            f"inference_steps {inference_steps} must evenly subsample T {T}"
        )
    stride = T // inference_steps
    return list(range(T, 0, -stride))


def ddim_update(sched: NoiseSchedule, x_t: torch.Tensor, t: torch.Tensor,
                t_prev: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """One deterministic reverse jump t -> t_prev with the clean estimate clamped.

    The direction term reuses the noise prediction re-derived from the clamped
    estimate, so guidance overshoot clipped out of x0_hat cannot re-enter the
    trajectory (with an in-range estimate the two predictions coincide).
    """
    ab = sched.gather("alpha_bar", t, x_t)
    ab_prev = sched.gather("alpha_bar", t_prev, x_t)
    x0_hat = ((x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()).clamp(-1.0, 1.0)
    eps_consistent = (x_t - ab.sqrt() * x0_hat) / (1.0 - ab).sqrt()
    return ab_prev.sqrt() * x0_hat + (1.0 - ab_prev).sqrt() * eps_consistent


def sample(denoise_fn, ref_shape: tuple, sched: NoiseSchedule, guidance: GuidanceConfig,
           rng_seed: int, guidance_grad_fn=None, device="cpu") -> torch.Tensor:
    """Run the reverse process over a uniformly spaced subset of steps.

    denoise_fn(x_t, t, conditional: bool) -> (eps, rho); the caller closes over
    the conditioning context and its zeroed variant. guidance_grad_fn(x_t) must
    return the gradient of the single-sample matching loss wrt x_t, or be None
    when the noisy encoder is untrained (psi is then treated as 0).
    """
    steps = sampling_timesteps(sched.T, guidance.inference_steps)
    gen = torch.Generator(device=device).manual_seed(rng_seed)
    x = torch.randn(ref_shape, generator=gen, device=device)
    psi = guidance.psi
    if psi > 0 and guidance_grad_fn is None:
        warnings.warn("similarity guidance unavailable; sampling with psi=0")
        psi = 0.0
    for i, t_int in enumerate(steps):
        t_prev_int = steps[i + 1] if i + 1 < len(steps) else 0
        t = torch.full((x.shape[0],), t_int, dtype=torch.long, device=device)
        t_prev = torch.full((x.shape[0],), t_prev_int, dtype=torch.long, device=device)
        eps_cond, rho = denoise_fn(x, t, True)
        if guidance.phi != 1.0:
            eps_uncond, _ = denoise_fn(x, t, False)
            eps_hat = cfg_eps(eps_cond, eps_uncond, guidance.phi)
        else:
            eps_hat = eps_cond
        if psi > 0:
            mu = mean_from_eps(sched, x, t, eps_hat)
            var = var_from_rho(sched, t, rho)
            grad = guidance_grad_fn(x)
            direction = -grad if guidance.ascend_similarity else grad
            mu = icm_guided_mean(mu, var, direction, psi)
            eps_hat = eps_from_mean(sched, x, t, mu)
        x = ddim_update(sched, x, t, t_prev, eps_hat)
    return x


def schedule_csv(sched: NoiseSchedule) -> str:
    lines = ["t,alpha,alpha_bar,beta,beta_tilde"]
    for t in range(1, sched.T + 1):
        lines.append(f"{t},{sched.alpha[t]:.12g},{sched.alpha_bar[t]:.12g},"
                     f"{sched.beta[t]:.12g},{sched.beta_tilde[t]:.12g}")
    return "\n".join(lines) + "\n"
