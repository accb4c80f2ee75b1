"""Causal action influence scores from a Gaussian transition model.

The influence of the action on the target components in state ``s`` is the
conditional mutual information between action and next target state. It is
estimated by sampling ``K`` actions uniformly from the action box, querying
the model for each, and averaging the KL of every action-conditioned Gaussian
to the uniform mixture of all ``K`` of them.

Any model exposing ``predict_dist(X) -> (mean, var)`` on rows ``[s, a]``
can be scored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .gaussian import entropy_arr, self_mixture_kl_terms

_CHUNK_ROWS = 65536
# elements per K x K x d kernel call; bounds peak memory
_CHUNK_PAIRS = 1 << 20


@dataclass
class CaiConfig:
    n_actions: int = 64
    action_low: tuple = (-1.0,)
    action_high: tuple = (1.0,)
    seed: int = 0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.action_low, dtype=float))
        hi = np.atleast_1d(np.asarray(self.action_high, dtype=float))
        if self.n_actions < 2:
            raise ValueError("n_actions must be at least 2")
        if lo.shape != hi.shape or not np.all(np.isfinite(lo)) or not np.all(lo < hi):
            raise ValueError("action bounds must be finite with low < high")
        self.action_low = tuple(lo.tolist())
        self.action_high = tuple(hi.tolist())

    @property
    def action_dim(self):
        return len(self.action_low)

    def sample_actions(self, rng, n_states):
        """Uniform actions of shape (n_states, n_actions, action_dim)."""
        lo = np.asarray(self.action_low)
        hi = np.asarray(self.action_high)
        return rng.uniform(lo, hi, size=(n_states, self.n_actions, self.action_dim))


def _as_states(states):
    states = np.asarray(states, dtype=float)
    return (states[None, :], True) if states.ndim == 1 else (states, False)


def predict_components(model, states, actions):
    """Model means/variances for every (state, sampled action) pair.

    ``states`` is (n, d_s), ``actions`` is (n, K, d_a); returns two arrays of
    shape (n, K, d_j).
    """
    n, k, da = actions.shape
    X = np.concatenate([np.repeat(states, k, axis=0), actions.reshape(n * k, da)], axis=1)
    means, vars_ = [], []
    for start in range(0, len(X), _CHUNK_ROWS):
        mu, var = model.predict_dist(X[start:start + _CHUNK_ROWS])
        means.append(mu)
        vars_.append(var)
    mu = np.concatenate(means).reshape(n, k, -1)
    var = np.concatenate(vars_).reshape(n, k, -1)
    return mu, var


def influence_terms(mu, var):
    """Per-action KL contributions, shape (n, K)."""
    n, k, d = mu.shape
    step = max(1, _CHUNK_PAIRS // (k * k * d))
    out = np.empty((n, k))
    for start in range(0, n, step):
        out[start:start + step] = self_mixture_kl_terms(mu[start:start + step], var[start:start + step])
    return out


def cai_scores(model, states, cfg: CaiConfig, rng=None, actions=None):
    """Batched influence scores for an (n, d_s) array of states."""
    states, _ = _as_states(states)
    if actions is None:
        actions = cfg.sample_actions(rng, len(states))
    mu, var = predict_components(model, states, actions)
    return influence_terms(mu, var).mean(axis=1)


def cai_and_entropy_scores(model, states, cfg: CaiConfig, rng=None, actions=None):
    """Influence and conditional-entropy scores sharing one set of model calls."""
    states, _ = _as_states(states)
    if actions is None:
        actions = cfg.sample_actions(rng, len(states))
    mu, var = predict_components(model, states, actions)
    return influence_terms(mu, var).mean(axis=1), entropy_arr(var).mean(axis=1)


def entropy_scores(model, states, cfg: CaiConfig, rng=None, actions=None):
    states, _ = _as_states(states)
    if actions is None:
        actions = cfg.sample_actions(rng, len(states))
    _, var = predict_components(model, states, actions)
    return entropy_arr(var).mean(axis=1)


def cai_score(model, s, cfg: CaiConfig, rng) -> float:
    return float(cai_scores(model, np.asarray(s, dtype=float)[None, :], cfg, rng)[0])


def entropy_score(model, s, cfg: CaiConfig, rng) -> float:
    """Average entropy of the action-conditioned predictions (non-causal baseline)."""
    return float(entropy_scores(model, np.asarray(s, dtype=float)[None, :], cfg, rng)[0])


def select_influential_action(model, s, cfg: CaiConfig, rng):
    """Sampled action with the largest KL contribution; first index wins ties."""
    actions = cfg.sample_actions(rng, 1)
    mu, var = predict_components(model, np.asarray(s, dtype=float)[None, :], actions)
    terms = influence_terms(mu, var)[0]
    return actions[0, int(np.argmax(terms))]


class CausalInfluenceScorer(TransformerMixin, BaseEstimator):
    """Transformer mapping states to influence (or entropy) scores.

    ``model`` must already be fitted; ``fit`` only validates it. When
    ``random_state`` is an int, every ``transform`` call starts from the same
    seed, so scoring is reproducible.
    """

    def __init__(self, model=None, n_actions=64, action_low=(-1.0,), action_high=(1.0,),
                 score="cai", random_state=None):
        self.model = model
        self.n_actions = n_actions
        self.action_low = action_low
        self.action_high = action_high
        self.score = score
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.model is None or not hasattr(self.model, "predict_dist"):
            raise ValueError("model must provide predict_dist")
        if self.score not in ("cai", "entropy", "both"):
            raise ValueError(f"unknown score {self.score!r}")
        self.config_ = CaiConfig(self.n_actions, self.action_low, self.action_high)
        self.n_features_in_ = check_array(X).shape[1]
        return self

    def transform(self, X):
        X = check_array(X)
        rng = np.random.default_rng(self.random_state)
        if self.score == "cai":
            return cai_scores(self.model, X, self.config_, rng)[:, None]
        if self.score == "entropy":
            return entropy_scores(self.model, X, self.config_, rng)[:, None]
        return np.stack(cai_and_entropy_scores(self.model, X, self.config_, rng), axis=1)
