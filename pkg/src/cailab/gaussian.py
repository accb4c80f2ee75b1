"""Divergences between diagonal Gaussians and Gaussian mixtures.

All quantities are in nats. The mixture KL approximations take a single
Gaussian ``f`` against a mixture ``g`` and sandwich the true KL between a
product-based lower bound and a variational upper bound.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("mean and var must be finite")
        if np.any(var <= 0):
            raise ValueError("var must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) ** 2 / self.var
        return -0.5 * np.sum(LOG_2PI + np.log(self.var) + z, axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class GaussMixture:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        comps = tuple(self.components)
        if len(comps) == 0 or w.shape != (len(comps),):
            raise ValueError("need one weight per component and at least one component")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie in (0, 1] and sum to 1")
        if len({c.dim for c in comps}) != 1:
            raise ValueError("all components must share a dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def uniform(cls, components: Sequence[DiagGaussian]) -> "GaussMixture":
        n = len(components)
        return cls(np.full(n, 1.0 / n), tuple(components))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def vars(self) -> np.ndarray:
        return np.stack([c.var for c in self.components])

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        logs = np.stack([c.logpdf(x) for c in self.components], axis=-1)
        return logsumexp(logs + np.log(self.weights), axis=-1)


def _check_dims(f: DiagGaussian, dim: int) -> None:
    if f.dim != dim:
        raise ValueError(f"dimension mismatch: {f.dim} vs {dim}")


# -- array kernels ---------------------------------------------------------
# These broadcast over leading axes; the last axis is the event dimension.

def entropy_arr(var):
    var = np.maximum(var, VAR_FLOOR)
    return 0.5 * np.sum(LOG_2PI + 1.0 + np.log(var), axis=-1)


def kl_arr(mean_f, var_f, mean_g, var_g):
    var_f = np.maximum(var_f, VAR_FLOOR)
    var_g = np.maximum(var_g, VAR_FLOOR)
    diff = mean_g - mean_f
    terms = np.log(var_g) - np.log(var_f) + (var_f + diff * diff) / var_g - 1.0
    return 0.5 * np.sum(terms, axis=-1)


def log_prod_norm_arr(mean_f, var_f, mean_g, var_g):
    tot = np.maximum(var_f, VAR_FLOOR) + np.maximum(var_g, VAR_FLOOR)
    diff = mean_g - mean_f
    return -0.5 * np.sum(LOG_2PI + np.log(tot) + diff * diff / tot, axis=-1)


def kl_mixture_bounds_arr(mean_f, var_f, mean_g, var_g, log_w):
    """Lower and upper KL bounds of each ``f`` against the mixture ``g``.

    ``mean_f``/``var_f`` have shape (..., d); ``mean_g``/``var_g`` have shape
    (..., B, d) and ``log_w`` shape (..., B).
    """
    mf = mean_f[..., None, :]
    vf = var_f[..., None, :]
    log_t = log_prod_norm_arr(mf, vf, mean_g, var_g)
    kls = kl_arr(mf, vf, mean_g, var_g)
    lower = -logsumexp(log_w + log_t, axis=-1) - entropy_arr(var_f)
    upper = -logsumexp(log_w - kls, axis=-1)
    return lower, upper


def self_mixture_kl_terms(mean, var):
    """Thresholded mean-approximation KL of each component to the uniform
    mixture of all components along axis -2.

    ``mean``/``var`` have shape (..., K, d); returns shape (..., K).
    """
    k = mean.shape[-2]
    mf = mean[..., :, None, :]
    vf = var[..., :, None, :]
    mg = mean[..., None, :, :]
    vg = var[..., None, :, :]
    log_w = -np.log(k)
    log_t = log_prod_norm_arr(mf, vf, mg, vg)
    kls = kl_arr(mf, vf, mg, vg)
    lower = -logsumexp(log_t, axis=-1) - log_w - entropy_arr(var)
    upper = -logsumexp(-kls, axis=-1) - log_w
    return np.maximum(0.0, 0.5 * (lower + upper))


# -- public operations -----------------------------------------------------

def entropy(g: DiagGaussian) -> float:
    return float(entropy_arr(g.var))


def kl_exact(f: DiagGaussian, g: DiagGaussian) -> float:
    _check_dims(f, g.dim)
    return float(kl_arr(f.mean, f.var, g.mean, g.var))


def log_prod_norm(f: DiagGaussian, g: DiagGaussian) -> float:
    """Log of the integral of ``f(x) g(x)`` over x."""
    _check_dims(f, g.dim)
    return float(log_prod_norm_arr(f.mean, f.var, g.mean, g.var))


def _bounds(f: DiagGaussian, g: GaussMixture):
    _check_dims(f, g.dim)
    return kl_mixture_bounds_arr(f.mean, f.var, g.means, g.vars, np.log(g.weights))


def kl_mixture_lower(f: DiagGaussian, g: GaussMixture) -> float:
    return float(_bounds(f, g)[0])


def kl_mixture_upper(f: DiagGaussian, g: GaussMixture) -> float:
    return float(_bounds(f, g)[1])


def kl_mixture_mean(f: DiagGaussian, g: GaussMixture) -> float:
    """Average of the two bounds, clamped at zero since it can go negative."""
    lower, upper = _bounds(f, g)
    return float(max(0.0, 0.5 * (lower + upper)))
