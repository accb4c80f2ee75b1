"""Small fixed-topology MLPs in numpy with hand-written backprop.

Weights are stored as (fan_in, fan_out) matrices and applied as ``x @ W + b``
on row-batched inputs. Layers flagged for spectral normalization are used as
``W / sigma`` where ``sigma = v^T W u`` is estimated with persistent power
iteration vectors; ``u`` and ``v`` are treated as constants when
differentiating, as in the usual formulation.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind, z, out, upstream):
    if kind == "relu":
        return upstream * (z > 0)
    if kind == "tanh":
        return upstream * (1.0 - out * out)
    return upstream


def orthogonal_init(shape, rng, gain=1.0):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def xavier_uniform_init(shape, rng, gain=1.0):
    fan_in, fan_out = shape
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def spectral_normalize(w, u, n_iter=1):
    """Run ``n_iter`` power iteration steps and return ``(w / sigma, u, v, sigma)``.

    ``u`` lives in the output space (columns of ``w``). A zero matrix is
    returned unchanged with ``sigma = 0``.
    """
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return w, u, np.zeros(w.shape[0]), 0.0
    v = None
    for _ in range(max(n_iter, 1)):
        v = _unit(w @ u)
        u = _unit(w.T @ v)
    sigma = float(v @ w @ u)
    return w / sigma, u, v, sigma


class Mlp:
    """Feed-forward network ``widths[0] -> ... -> widths[-1]``.

    ``activations`` holds one entry per layer; by default every hidden layer
    uses ``hidden`` and the output layer is linear.
    """

    def __init__(self, widths, hidden="relu", activations=None, spectral=False,
                 init="xavier", rng=None, gain=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        n_layers = len(widths) - 1
        if activations is None:
            activations = [hidden] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"bad activations {activations}")
        if isinstance(spectral, bool):
            spectral = [spectral] * n_layers
        spectral = [bool(s) for s in spectral]
        if len(spectral) != n_layers:
            raise ValueError("one spectral flag per layer")

        self.widths = widths
        self.activations = activations
        self.spectral = spectral
        rng = np.random.default_rng() if rng is None else rng
        self.weights = []
        self.biases = []
        self.sn_u = []
        self.sn_v = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            g = gain
            if g is None:
                g = np.sqrt(2.0) if activations[i] == "relu" else 1.0
            if init == "orthogonal":
                w = orthogonal_init((fi, fo), rng, g)
            elif init == "xavier":
                w = xavier_uniform_init((fi, fo), rng, g)
            elif init == "zeros":
                w = np.zeros((fi, fo))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.weights.append(w)
            self.biases.append(np.zeros(fo))
            if spectral[i]:
                u = _unit(rng.standard_normal(fo))
                self.sn_u.append(u)
                self.sn_v.append(_unit(w @ u) if np.any(w) else np.zeros(fi))
            else:
                self.sn_u.append(None)
                self.sn_v.append(None)

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def parameters(self):
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_parameters(self, params):
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter count mismatch")
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = np.array(w, dtype=float)
            self.biases[i] = np.array(b, dtype=float)

    def copy(self):
        new = Mlp.__new__(Mlp)
        new.widths = list(self.widths)
        new.activations = list(self.activations)
        new.spectral = list(self.spectral)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.sn_u = [None if u is None else u.copy() for u in self.sn_u]
        new.sn_v = [None if v is None else v.copy() for v in self.sn_v]
        return new

    def _sigma(self, i):
        w = self.weights[i]
        if not np.any(w):
            return 0.0
        return float(self.sn_v[i] @ w @ self.sn_u[i])

    def effective_weight(self, i):
        w = self.weights[i]
        if not self.spectral[i]:
            return w
        sigma = self._sigma(i)
        return w if sigma == 0.0 else w / sigma

    def power_iteration(self, n_iter=1):
        """Refresh the power-iteration vectors of all spectral layers."""
        for i, flag in enumerate(self.spectral):
            if flag:
                _, u, v, _ = spectral_normalize(self.weights[i], self.sn_u[i], n_iter)
                self.sn_u[i] = u
                self.sn_v[i] = v

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {h.shape[-1]}")
        cache = []
        for i, kind in enumerate(self.activations):
            w = self.effective_weight(i)
            z = h @ w + self.biases[i]
            out = _act(kind, z)
            cache.append((h, z, out))
            h = out
        y = h[0] if single else h
        if return_cache:
            return y, (single, cache)
        return y

    __call__ = forward

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * forward(x))``.

        Returns ``(grads, dx)`` with ``grads`` ordered like ``parameters()``.
        """
        single, layers = cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None, :]
        if g.shape != layers[-1][2].shape:
            raise ValueError("upstream shape does not match network output")
        grads = [None] * (2 * len(layers))
        for i in reversed(range(len(layers))):
            h, z, out = layers[i]
            g = _act_grad(self.activations[i], z, out, g)
            w_eff = self.effective_weight(i)
            gw = h.T @ g
            gb = g.sum(axis=0)
            if self.spectral[i]:
                sigma = self._sigma(i)
                if sigma != 0.0:
                    w = self.weights[i]
                    gw = gw / sigma - (np.sum(gw * w) / sigma ** 2) * np.outer(self.sn_v[i], self.sn_u[i])
            grads[2 * i] = gw
            grads[2 * i + 1] = gb
            g = g @ w_eff.T
        dx = g[0] if single else g
        return grads, dx

    def to_dict(self):
        return {
            "widths": self.widths,
            "activations": self.activations,
            "spectral": self.spectral,
            "params": [np.ravel(p).tolist() for p in self.parameters()],
            "sn_u": [None if u is None else u.tolist() for u in self.sn_u],
            "sn_v": [None if v is None else v.tolist() for v in self.sn_v],
        }

    @classmethod
    def from_dict(cls, d):
        net = cls(d["widths"], activations=d["activations"], spectral=d["spectral"],
                  init="zeros", rng=np.random.default_rng(0))
        shapes = [p.shape for p in net.parameters()]
        net.set_parameters([np.asarray(flat, dtype=np.float64).reshape(s)
                            for flat, s in zip(d["params"], shapes)])
        net.sn_u = [None if u is None else np.asarray(u, dtype=np.float64) for u in d["sn_u"]]
        net.sn_v = [None if v is None else np.asarray(v, dtype=np.float64) for v in d["sn_v"]]
        return net


class AdamState:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Apply one bias-corrected Adam update to ``params`` in place."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient count mismatch")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self):
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "t": self.t,
            "m": [np.ravel(a).tolist() for a in self.m],
            "v": [np.ravel(a).tolist() for a in self.v],
        }

    def load_dict(self, d):
        self.lr, self.beta1, self.beta2, self.eps = d["lr"], d["beta1"], d["beta2"], d["eps"]
        self.t = int(d["t"])
        self.m = [np.asarray(a, dtype=np.float64).reshape(m.shape) for a, m in zip(d["m"], self.m)]
        self.v = [np.asarray(a, dtype=np.float64).reshape(v.shape) for a, v in zip(d["v"], self.v)]


def adam_step(params, grads, state: AdamState):
    state.step(params, grads)
    return params, state


class Normalizer:
    """Running per-dimension mean/variance with clipped standardization."""

    def __init__(self, size, clip=(-5.0, 5.0), eps=1e-6):
        self.size = int(size)
        self.clip = (float(clip[0]), float(clip[1]))
        self.eps = eps
        self.count = 0
        self.mean = np.zeros(self.size)
        self.var = np.zeros(self.size)

    @property
    def std(self):
        return np.sqrt(self.var)

    def update(self, batch):
        batch = np.asarray(batch, dtype=float).reshape(-1, self.size)
        n = batch.shape[0]
        if n == 0:
            return self
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_m2 + delta ** 2 * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot
        return self

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.size:
            raise ValueError(f"expected last dimension {self.size}, got {x.shape[-1]}")
        lo, hi = self.clip
        if self.count == 0:
            return np.clip(x, lo, hi)
        return np.clip((x - self.mean) / np.maximum(self.std, self.eps), lo, hi)

    __call__ = apply

    def to_dict(self):
        return {"size": self.size, "clip": list(self.clip), "eps": self.eps,
                "count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, d):
        n = cls(d["size"], tuple(d["clip"]), d.get("eps", 1e-6))
        n.count = int(d["count"])
        n.mean = np.asarray(d["mean"], dtype=np.float64)
        n.var = np.asarray(d["var"], dtype=np.float64)
        return n


def normalizer_update(n: Normalizer, batch) -> Normalizer:
    return n.update(batch)


def normalizer_apply(n: Normalizer, x):
    return n.apply(x)


CHECKPOINT_FORMAT = "cailab-checkpoint-v1"


def save_checkpoint(path, nets, normalizer=None, seed=None, meta=None):
    """Write networks plus normalizer moments as a JSON record.

    Floats go through ``repr`` round-tripping, so loading is bit-exact.
    """
    record = {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "nets": {name: net.to_dict() for name, net in nets.items()},
        "normalizer": None if normalizer is None else normalizer.to_dict(),
        "meta": meta or {},
    }
    path = Path(path)
    path.write_text(json.dumps(record))
    return path


def load_checkpoint(path):
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    nets = {name: Mlp.from_dict(d) for name, d in record["nets"].items()}
    norm = record["normalizer"]
    return {
        "nets": nets,
        "normalizer": None if norm is None else Normalizer.from_dict(norm),
        "seed": record["seed"],
        "meta": record["meta"],
    }
