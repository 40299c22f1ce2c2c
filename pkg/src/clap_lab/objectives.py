"""Loss terms: the two evidence lower bounds, KL terms, and group sparsity.

The combined training objective (to be maximized) is

    L = L_pred + L_concept - lambda * rho_surrogate(B, C)

where L_pred uses the label-free encoder, a Gaussian-mixture prior over all
latents, and a classification term weighted by ``beta_pred``; L_concept uses
the label-conditioned encoder with a per-label diagonal core prior and a
fixed standard-normal style prior. ``rho_surrogate`` is the convex group
penalty over stacked decoder/classifier core columns; the non-differentiable
indicator form is exposed separately for evaluation only.

All estimators are deterministic given (parameters, batch, seed): one
reparameterized draw per Monte Carlo sample is reused by every term that
needs it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import CLAPModel, GaussianPosterior, sample_posterior


@dataclass
class ObjectiveConfig:
    """Weights and estimator settings for the combined objective."""

    lambda_sparsity: float = 0.0
    beta_pred: float = 1.0
    mc_samples: int = 1
    sparsity_mode: str = "surrogate"   # "surrogate" | "indicator-eval-only"
    lambda_decay: str = "none"         # "none" | "linear" (handled by the trainer)

    def __post_init__(self):
        if self.lambda_sparsity < 0:
            raise ValueError("lambda_sparsity must be >= 0")
        if self.beta_pred <= 0:
            raise ValueError("beta_pred must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.sparsity_mode not in ("surrogate", "indicator-eval-only"):
            raise ValueError(f"unknown sparsity_mode {self.sparsity_mode!r}")
        if self.lambda_decay not in ("none", "linear"):
            raise ValueError(f"unknown lambda_decay {self.lambda_decay!r}")


def _as_generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def kl_diag_gaussians(q_mean, q_var, p_mean, p_var) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last dim."""
    q_mean, q_var, p_mean, p_var = (torch.as_tensor(t, dtype=torch.float64)
                                    if not torch.is_tensor(t) else t
                                    for t in (q_mean, q_var, p_mean, p_var))
    if torch.any(q_var <= 0) or torch.any(p_var <= 0):
        raise ValueError("variances must be strictly positive")
    return 0.5 * (torch.log(p_var / q_var)
                  + (q_var + (q_mean - p_mean) ** 2) / p_var
                  - 1.0).sum(-1)


def kl_to_mixture(q: GaussianPosterior, model: CLAPModel, seed,
                  mc_samples: int = 1) -> torch.Tensor:
    """Monte Carlo estimate of KL(q || mixture prior), per row.

    Unbiased for E_q[log q(z) - log p(z)]; deterministic given the seed.
    """
    if not torch.isfinite(model.mixture_logweights).any():
        raise ValueError("mixture prior has no active components")
    gen = _as_generator(seed)
    total = 0.0
    for _ in range(mc_samples):
        z = sample_posterior(q, gen)
        total = total + q.log_density(z) - model.prior_p_log_density(z)
    return total / mc_samples


def elbo_p(model: CLAPModel, x: torch.Tensor, y: torch.Tensor,
           config: ObjectiveConfig, seed):
    """Prediction-branch bound per row; returns (elbo, term dict)."""
    q = model.encode_p(x)
    return _elbo_p_from_posterior(model, q, x, y, config, _as_generator(seed))


def _elbo_p_from_posterior(model, q, x, y, config, gen):
    recon = pred = kl = 0.0
    for _ in range(config.mc_samples):
        z = sample_posterior(q, gen)
        recon = recon + model.log_likelihood(x, z)
        pred = pred + model.label_log_prob(z[:, :model.dims.k_c], y)
        kl = kl + q.log_density(z) - model.prior_p_log_density(z)
    recon = recon / config.mc_samples
    pred = pred / config.mc_samples
    kl = kl / config.mc_samples
    elbo = recon + config.beta_pred * pred - kl
    return elbo, {"recon_p": recon, "pred": pred, "kl_p": kl, "elbo_p": elbo}


def elbo_cl(model: CLAPModel, x: torch.Tensor, y: torch.Tensor,
            config: ObjectiveConfig, seed):
    """Concept-branch bound per row; returns (elbo, term dict)."""
    q = model.encode_cl(x, y)
    return _elbo_cl_from_posterior(model, q, x, y, config, _as_generator(seed))


def _elbo_cl_from_posterior(model, q, x, y, config, gen):
    recon = 0.0
    for _ in range(config.mc_samples):
        z = sample_posterior(q, gen)
        recon = recon + model.log_likelihood(x, z)
    recon = recon / config.mc_samples
    prior_mean, prior_var = model.prior_cl_params(y)
    kl_core = kl_diag_gaussians(q.core_mean, q.core_var, prior_mean, prior_var)
    if model.dims.k_s > 0:
        kl_style = kl_diag_gaussians(
            q.style_mean, q.style_var,
            torch.zeros_like(q.style_mean), torch.ones_like(q.style_var))
    else:
        kl_style = torch.zeros_like(kl_core)
    kl = kl_core + kl_style
    elbo = recon - kl
    return elbo, {"recon_cl": recon, "kl_cl": kl, "elbo_cl": elbo}


def sparsity_surrogate(B: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """Sum of L2 norms of stacked (B_col; C_col) over the core columns."""
    k_c = C.shape[1]
    if k_c > B.shape[1]:
        raise ValueError(
            f"classifier has {k_c} columns but the bottleneck only {B.shape[1]}")
    stacked = torch.cat([B[:, :k_c], C], dim=0)
    return torch.linalg.vector_norm(stacked, dim=0).sum()


def sparsity_count(B: torch.Tensor, C: torch.Tensor, tol: float | None = None) -> int:
    """Indicator form: number of columns with stacked norm above ``tol``.

    Core columns stack (B; C); style columns use B alone. With ``tol=None``
    the threshold is 1e-2 times the largest column norm.
    """
    k_c = C.shape[1]
    stacked = torch.cat([B[:, :k_c], C], dim=0)
    core_norms = torch.linalg.vector_norm(stacked, dim=0)
    style_norms = torch.linalg.vector_norm(B[:, k_c:], dim=0)
    norms = torch.cat([core_norms, style_norms])
    if tol is None:
        tol = 1e-2 * norms.max().item()
    elif tol < 0:
        raise ValueError("tol must be >= 0")
    return int((norms > tol).sum().item())


def clap_loss(model: CLAPModel, batch, config: ObjectiveConfig, seed):
    """Batch-mean combined objective (value to maximize) plus named terms.

    ``batch`` is an (x, y) pair of tensors. The returned total is a scalar
    tensor suitable for backprop; the term dict maps each named component to
    a detached float, with ``sparsity`` holding the penalty actually
    subtracted (zero when the config disables it).
    """
    x, y = batch
    gen = _as_generator(seed)
    q_p, q_cl = model.encode_pair(x, y)
    ep, terms_p = _elbo_p_from_posterior(model, q_p, x, y, config, gen)
    ec, terms_c = _elbo_cl_from_posterior(model, q_cl, x, y, config, gen)
    surrogate = sparsity_surrogate(model.bottleneck, model.classifier_C)
    if config.sparsity_mode == "surrogate":
        penalty = config.lambda_sparsity * surrogate
    else:
        penalty = torch.zeros((), dtype=ep.dtype)
    total = ep.mean() + ec.mean() - penalty

    terms = {name: t.mean().item() for name, t in {**terms_p, **terms_c}.items()}
    terms["sparsity"] = float(penalty.detach())
    terms["sparsity_surrogate"] = float(surrogate.detach())
    terms["total"] = float(total.detach())
    return total, terms
