"""Conjugate-exponential arithmetic for the variational updates and the ELBO.

Scalar-facing helpers take the small parameter records defined here; the
``*_array`` helpers operate on stacked numpy parameters along the last axis
and are what the engine calls in its inner loops.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .kernels import digamma

LOG_2PI = float(np.log(2.0 * np.pi))


def _positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class DirichletParams:
    concentration: tuple

    def __post_init__(self):
        conc = tuple(float(a) for a in self.concentration)
        if not conc:
            raise ValueError("Dirichlet needs at least one category")
        _positive("concentration", conc)
        object.__setattr__(self, "concentration", conc)

    @property
    def alpha(self):
        return np.asarray(self.concentration)


@dataclass(frozen=True)
class GaussianMeanParams:
    """Variational posterior N(mean, variance) over a component mean."""

    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError(f"variance must be >= 0, got {self.variance!r}")


@dataclass(frozen=True)
class GammaParams:
    """Gamma(shape, rate) over a component precision."""

    shape: float
    rate: float

    def __post_init__(self):
        _positive("shape", self.shape)
        _positive("rate", self.rate)


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        _positive("a", self.a)
        _positive("b", self.b)


@dataclass(frozen=True)
class DiscreteDist:
    probabilities: tuple

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probabilities", tuple(float(v) for v in p))


# -- vectorized moments --------------------------------------------------


def dirichlet_elog_array(alpha):
    """E[log pi] for Dirichlet concentrations stacked along the last axis."""
    alpha = np.asarray(alpha, dtype=float)
    return digamma(alpha) - digamma(alpha.sum(axis=-1, keepdims=True))


def gamma_moments_array(shape, rate):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    return shape / rate, digamma(shape) - np.log(rate)


def gaussian_elog_array(x, mean, var, e_tau, e_log_tau):
    """Expected log N(x | mu, 1/tau) under q(mu)q(tau); broadcasts."""
    x = np.asarray(x, dtype=float)
    sq = x * x - 2.0 * x * mean + mean * mean + var
    return 0.5 * (e_log_tau - LOG_2PI - e_tau * sq)


def beta_elog_array(a, b):
    """(E[log p], E[log(1 - p)]) for Beta parameters."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    total = digamma(a + b)
    return digamma(a) - total, digamma(b) - total


def kl_dirichlet_array(prior, post):
    """KL(Dir(post) || Dir(prior)) along the last axis."""
    prior = np.asarray(prior, dtype=float)
    post = np.asarray(post, dtype=float)
    if prior.shape[-1] != post.shape[-1]:
        raise ValueError(f"Dirichlet dimension mismatch: {prior.shape[-1]} vs {post.shape[-1]}")
    s_post = post.sum(axis=-1)
    s_prior = prior.sum(axis=-1)
    elog = digamma(post) - digamma(s_post)[..., None]
    return (gammaln(s_post) - gammaln(post).sum(axis=-1)
            - gammaln(s_prior) + gammaln(prior).sum(axis=-1)
            + ((post - prior) * elog).sum(axis=-1))


def kl_gaussian_array(prior_mean, prior_prec, mean, var):
    """KL(N(mean, var) || N(prior_mean, 1/prior_prec))."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    diff = mean - prior_mean
    return 0.5 * (prior_prec * (var + diff * diff) - 1.0 - np.log(prior_prec * var))


def kl_gamma_array(prior_shape, prior_rate, shape, rate):
    """KL(Gamma(shape, rate) || Gamma(prior_shape, prior_rate))."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    return ((shape - prior_shape) * digamma(shape) - gammaln(shape) + gammaln(prior_shape)
            + prior_shape * (np.log(rate) - np.log(prior_rate))
            + shape * (prior_rate - rate) / rate)


def kl_beta_array(prior_a, prior_b, a, b):
    """KL(Beta(a, b) || Beta(prior_a, prior_b))."""
    post = np.stack(np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float)), axis=-1)
    prior = np.stack(np.broadcast_arrays(np.asarray(prior_a, float),
                                         np.asarray(prior_b, float)), axis=-1)
    return kl_dirichlet_array(prior, post)


# -- scalar API -----------------------------------------------------------


def dirichlet_expected_log(d):
    """E[log pi_k] = psi(alpha_k) - psi(sum alpha)."""
    return dirichlet_elog_array(d.alpha)


def gamma_moments(g):
    """Return (E[tau], E[log tau])."""
    mean, mean_log = gamma_moments_array(g.shape, g.rate)
    return float(mean), float(mean_log)


def gaussian_expected_loglik(x, mu, tau):
    e_tau, e_log_tau = gamma_moments(tau)
    return float(gaussian_elog_array(x, mu.mean, mu.variance, e_tau, e_log_tau))


def beta_expected_loglik(x, p):
    e_log_p, e_log_q = beta_elog_array(p.a, p.b)
    return float(e_log_p if x else e_log_q)


def discrete_expected_loglik(x, d):
    alpha = d.alpha
    if not 0 <= x < len(alpha):
        raise IndexError(f"category {x} out of range for {len(alpha)} levels")
    return float(dirichlet_elog_array(alpha)[x])


def kl_terms(prior, posterior):
    """KL(posterior || prior) for a matching pair of parameter records.

    Gaussian-mean priors are given as a GaussianMeanParams whose variance is
    the prior variance (1 / precision).
    """
    if type(prior) is not type(posterior):
        raise TypeError(f"family mismatch: {type(prior).__name__} vs {type(posterior).__name__}")
    if isinstance(prior, DirichletParams):
        return float(kl_dirichlet_array(prior.alpha, posterior.alpha))
    if isinstance(prior, GammaParams):
        return float(kl_gamma_array(prior.shape, prior.rate, posterior.shape, posterior.rate))
    if isinstance(prior, BetaParams):
        return float(kl_beta_array(prior.a, prior.b, posterior.a, posterior.b))
    if isinstance(prior, GaussianMeanParams):
        if prior.variance <= 0 or posterior.variance <= 0:
            raise ValueError("KL between Gaussian means needs positive variances")
        return float(kl_gaussian_array(prior.mean, 1.0 / prior.variance,
                                       posterior.mean, posterior.variance))
    raise TypeError(f"no KL for {type(prior).__name__}")
