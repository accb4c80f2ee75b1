"""Gaussian one-step transition model trained by maximum likelihood.

The model maps ``[s, a]`` to a diagonal Gaussian over the (scaled) change of
the target state components. It follows the scikit-learn estimator protocol:
``fit(X, y)`` with ``X = [s, a]`` rows and ``y`` the scaled deltas.
"""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .gaussian import DiagGaussian
from .nn import AdamState, Mlp, Normalizer

logger = logging.getLogger(__name__)

VAR_MIN = 1e-8
VAR_MAX = 200.0


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def make_targets(states, next_states, target_idx, scale=1.0):
    """Scaled deltas ``(s'_j - s_j) * scale`` for the target components."""
    states = np.asarray(states, dtype=float)
    next_states = np.asarray(next_states, dtype=float)
    idx = list(target_idx)
    return (next_states[:, idx] - states[:, idx]) * scale


def split_by_group(groups, val_fraction, rng):
    """Boolean mask of validation rows, holding out whole groups."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    n_val = max(1, int(round(val_fraction * len(uniq)))) if len(uniq) > 1 else 0
    val_groups = rng.choice(uniq, size=n_val, replace=False) if n_val else []
    return np.isin(groups, val_groups)


class GaussianTransitionModel(RegressorMixin, BaseEstimator):
    """Probabilistic MLP ``[s, a] -> N(mean, diag(var))`` over target deltas.

    Parameters
    ----------
    hidden : tuple of int
        Widths of the shared trunk.
    activation : {"relu", "tanh"}
    spectral_norm : bool
        Spectral-normalize trunk layers and the variance head. The mean head
        is never normalized.
    normalize_input : bool
        Standardize inputs with running moments fitted on the training data.
    max_epochs, eval_every, patience :
        Early stopping: validation MSE of the mean head is evaluated every
        ``eval_every`` epochs and training stops after ``patience``
        evaluations without improvement.
    warm_start : bool
        Reuse parameters, optimizer state and epoch counter from a previous
        ``fit`` instead of reinitializing.
    """

    def __init__(self, hidden=(128, 128, 128, 128), activation="relu", spectral_norm=True,
                 normalize_input=False, lr=3e-4, beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 batch_size=1000, max_epochs=3000, eval_every=20, patience=10,
                 val_fraction=0.1, init="orthogonal", warm_start=False, random_state=None):
        self.hidden = hidden
        self.activation = activation
        self.spectral_norm = spectral_norm
        self.normalize_input = normalize_input
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_every = eval_every
        self.patience = patience
        self.val_fraction = val_fraction
        self.init = init
        self.warm_start = warm_start
        self.random_state = random_state

    # -- construction -----------------------------------------------------

    def _initialize(self, n_in, n_out):
        rng = np.random.default_rng(self.random_state)
        widths = [n_in, *self.hidden]
        n_hidden = len(self.hidden)
        self.trunk_ = Mlp(widths, activations=[self.activation] * n_hidden,
                          spectral=self.spectral_norm, init=self.init, rng=rng)
        self.mean_head_ = Mlp([widths[-1], n_out], spectral=False, init=self.init, rng=rng, gain=1.0)
        self.var_head_ = Mlp([widths[-1], n_out], spectral=self.spectral_norm, init=self.init,
                             rng=rng, gain=1.0)
        self.normalizer_ = Normalizer(n_in, clip=(-np.inf, np.inf)) if self.normalize_input else None
        self.optimizer_ = AdamState(self.parameters(), lr=self.lr, beta1=self.beta1,
                                    beta2=self.beta2, eps=self.adam_eps)
        self.rng_ = rng
        self.n_features_in_ = n_in
        self.n_outputs_ = n_out
        self.epochs_ = 0
        self.history_ = []
        self.best_mse_ = np.inf

    def parameters(self):
        return self.trunk_.parameters() + self.mean_head_.parameters() + self.var_head_.parameters()

    def _nets(self):
        return (self.trunk_, self.mean_head_, self.var_head_)

    def _split_grads(self, grads):
        n_t = len(self.trunk_.parameters())
        n_m = len(self.mean_head_.parameters())
        return grads[:n_t], grads[n_t:n_t + n_m], grads[n_t + n_m:]

    # -- forward / loss ---------------------------------------------------

    def _inputs(self, X):
        if self.normalizer_ is not None and self.normalizer_.count > 0:
            return self.normalizer_.apply(X)
        return X

    def _forward(self, X, return_cache=False):
        Xn = self._inputs(X)
        h, c_trunk = self.trunk_.forward(Xn, return_cache=True)
        mu, c_mean = self.mean_head_.forward(h, return_cache=True)
        raw, c_var = self.var_head_.forward(h, return_cache=True)
        var = softplus(raw) + VAR_MIN
        saturated = var > VAR_MAX
        var = np.minimum(var, VAR_MAX)
        if return_cache:
            return mu, var, (c_trunk, c_mean, c_var, raw, saturated)
        return mu, var

    def predict_dist(self, X):
        """Mean and variance arrays, each of shape (n, n_outputs)."""
        check_is_fitted(self, "trunk_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._forward(X)

    def predict(self, X):
        return self.predict_dist(X)[0]

    def predict_gaussian(self, x):
        mu, var = self.predict_dist(np.asarray(x, dtype=float)[None, :])
        return DiagGaussian(mu[0], var[0])

    def loss_and_grads(self, X, y):
        """Mean Gaussian negative log-likelihood and its parameter gradients."""
        if len(X) == 0:
            raise ValueError("empty batch")
        n = X.shape[0]
        mu, var, (c_trunk, c_mean, c_var, raw, saturated) = self._forward(X, return_cache=True)
        r = y - mu
        loss = float(np.sum(r * r / (2.0 * var) + 0.5 * np.log(var)) / n)
        d_mu = -r / var / n
        d_var = (0.5 / var - r * r / (2.0 * var * var)) / n
        d_raw = np.where(saturated, 0.0, d_var * sigmoid(raw))
        g_mean, dh_m = self.mean_head_.backward(c_mean, d_mu)
        g_var, dh_v = self.var_head_.backward(c_var, d_raw)
        g_trunk, _ = self.trunk_.backward(c_trunk, dh_m + dh_v)
        return loss, g_trunk + g_mean + g_var

    def nll(self, X, y):
        mu, var = self.predict_dist(X)
        y = np.asarray(y, dtype=float).reshape(mu.shape)
        return float(np.mean(np.sum((y - mu) ** 2 / (2.0 * var) + 0.5 * np.log(var), axis=1)))

    def score(self, X, y, sample_weight=None):
        """Negative mean NLL (higher is better)."""
        return -self.nll(X, y)

    def mse(self, X, y):
        mu, _ = self.predict_dist(X)
        return float(np.mean((np.asarray(y, dtype=float).reshape(mu.shape) - mu) ** 2))

    # -- training ---------------------------------------------------------

    def train_step(self, X, y):
        for net in self._nets():
            net.power_iteration()
        loss, grads = self.loss_and_grads(X, y)
        self.optimizer_.step(self.parameters(), grads)
        return loss

    def _ensure_init(self, X, y):
        fresh = not (self.warm_start and hasattr(self, "trunk_"))
        if fresh:
            self._initialize(X.shape[1], y.shape[1])
            if self.normalizer_ is not None:
                self.normalizer_.update(X)

    def fit(self, X, y, groups=None, validation_data=None, callback=None):
        """Minibatch Adam on the NLL with validation-MSE early stopping.

        The validation set is ``validation_data`` if given, else a held-out
        ``val_fraction`` of rows (whole groups when ``groups`` is given).
        Parameters with the best validation MSE are restored at the end.
        """
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        self._ensure_init(X, y)
        rng = self.rng_
        if validation_data is not None:
            X_val, y_val = validation_data
            X_val = check_array(X_val)
            y_val = np.asarray(y_val, dtype=float).reshape(len(X_val), -1)
            X_tr, y_tr = X, y
        else:
            if groups is not None:
                val = split_by_group(groups, self.val_fraction, rng)
            else:
                val = np.zeros(len(X), dtype=bool)
                n_val = int(round(self.val_fraction * len(X)))
                val[rng.choice(len(X), size=n_val, replace=False)] = True
            if not val.any() or val.all():
                X_tr, y_tr, X_val, y_val = X, y, X, y
            else:
                X_tr, y_tr, X_val, y_val = X[~val], y[~val], X[val], y[val]

        n = len(X_tr)
        bs = min(self.batch_size, n)
        best_params = [p.copy() for p in self.parameters()]
        best_sn = self._sn_state()
        stale = 0
        stop_epoch = self.epochs_ + self.max_epochs
        while self.epochs_ < stop_epoch:
            perm = rng.permutation(n)
            for start in range(0, n - bs + 1, bs):
                idx = perm[start:start + bs]
                self.train_step(X_tr[idx], y_tr[idx])
            self.epochs_ += 1
            if self.epochs_ % self.eval_every == 0:
                val_mse = self.mse(X_val, y_val)
                self.history_.append((self.epochs_, val_mse))
                if callback is not None:
                    callback(self.epochs_, val_mse)
                if val_mse < self.best_mse_:
                    self.best_mse_ = val_mse
                    best_params = [p.copy() for p in self.parameters()]
                    best_sn = self._sn_state()
                    stale = 0
                else:
                    stale += 1
                    if stale >= self.patience:
                        logger.info("early stop at epoch %d (best mse %.3g)", self.epochs_, self.best_mse_)
                        break
        if np.isfinite(self.best_mse_):
            self._restore(best_params, best_sn)
        return self

    def partial_fit(self, X, y, n_batches=1, batch_size=None):
        """Run ``n_batches`` Adam steps on minibatches drawn uniformly from ``(X, y)``."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(len(X), -1)
        if not hasattr(self, "trunk_"):
            self._initialize(X.shape[1], y.shape[1])
            if self.normalizer_ is not None:
                self.normalizer_.update(X)
        bs = min(batch_size or self.batch_size, len(X))
        for _ in range(int(n_batches)):
            idx = self.rng_.integers(0, len(X), size=bs)
            self.train_step(X[idx], y[idx])
        return self

    def _sn_state(self):
        return [([None if u is None else u.copy() for u in net.sn_u],
                 [None if v is None else v.copy() for v in net.sn_v]) for net in self._nets()]

    def _restore(self, params, sn):
        for p, b in zip(self.parameters(), params):
            p[...] = b
        for net, (us, vs) in zip(self._nets(), sn):
            net.sn_u, net.sn_v = us, vs

    # -- persistence ------------------------------------------------------

    def to_checkpoint(self):
        check_is_fitted(self, "trunk_")
        return {
            "nets": {"trunk": self.trunk_, "mean_head": self.mean_head_, "var_head": self.var_head_},
            "normalizer": self.normalizer_,
            "meta": {
                "params": self.get_params(),
                "epochs": self.epochs_,
                "best_mse": None if not np.isfinite(self.best_mse_) else self.best_mse_,
                "history": self.history_,
                "optimizer": self.optimizer_.to_dict(),
                "rng_state": self.rng_.bit_generator.state,
            },
        }

    @classmethod
    def from_checkpoint(cls, record):
        meta = record["meta"]
        params = dict(meta["params"])
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        nets = record["nets"]
        model.trunk_ = nets["trunk"]
        model.mean_head_ = nets["mean_head"]
        model.var_head_ = nets["var_head"]
        model.normalizer_ = record["normalizer"]
        model.n_features_in_ = model.trunk_.n_in
        model.n_outputs_ = model.mean_head_.n_out
        model.optimizer_ = AdamState(model.parameters())
        model.optimizer_.load_dict(meta["optimizer"])
        model.epochs_ = int(meta["epochs"])
        model.best_mse_ = np.inf if meta["best_mse"] is None else float(meta["best_mse"])
        model.history_ = [tuple(h) for h in meta["history"]]
        model.rng_ = np.random.default_rng()
        model.rng_.bit_generator.state = meta["rng_state"]
        return model


def online_batches(episode_count, first=4000, regular=1000, late=500, late_after=5200):
    """Scheduled number of Adam steps for the model fit at ``episode_count``
    (0 is the fit right after the warmup episodes)."""
    if episode_count <= 0:
        return first
    return regular if episode_count < late_after else late


def fit_online(model, buffer, episode_count, target_idx, scale=1.0, batch_size=500, schedule=online_batches):
    """Train ``model`` on transitions drawn uniformly from ``buffer``.

    ``buffer`` needs a ``transitions()`` method returning ``(s, a, s')``
    arrays; the number of steps comes from ``schedule(episode_count)``.
    """
    s, a, s2 = buffer.transitions()
    if len(s) == 0:
        raise ValueError("empty buffer")
    n_batches = schedule(episode_count)
    X = np.concatenate([s, a], axis=1)
    y = make_targets(s, s2, target_idx, scale)
    return model.partial_fit(X, y, n_batches=n_batches, batch_size=batch_size)
