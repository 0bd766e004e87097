"""Small numpy MLPs with hand-written backpropagation, plus policy heads.

Only what the package needs: tanh hidden layers, a linear output head, Adam,
Gaussian and categorical policies, and the second-order pass used by the
discriminator's gradient penalty.
"""
from __future__ import annotations

import json
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Mlp:
    """Fully connected net: tanh on hidden layers, linear output.

    Weights are stored ``(out, in)``; inputs are ``(n, in)`` batches or single
    ``(in,)`` vectors.  ``forward`` records what ``backward`` needs.
    """

    def __init__(self, sizes, rng=None, hidden_gain: float = 1.0, output_gain: float = 1.0,
                 zero: bool = False):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            W = np.zeros((n_out, n_in)) if zero else orthogonal((n_out, n_in), gain, rng)
            self.weights.append(W)
            self.biases.append(np.zeros(n_out))
        self._cache = None

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    @property
    def n_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Mlp":
        new = Mlp(self.sizes, zero=True)
        new.set_flat(self.get_flat())
        return new

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.sizes[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        return x, single

    def _activations(self, x):
        hs = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            h = z if i == last else np.tanh(z)
            hs.append(h)
        return hs

    def forward(self, x) -> np.ndarray:
        x, single = self._check_input(x)
        hs = self._activations(x)
        self._cache = hs
        out = hs[-1]
        return out[0] if single else out

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Forward pass that leaves the recorded cache untouched."""
        x, single = self._check_input(x)
        out = self._activations(x)[-1]
        return out[0] if single else out

    def backward(self, grad_out) -> list:
        """Gradients of sum(grad_out * output) w.r.t. ``params``."""
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        return self._backward(self._cache, grad_out)[0]

    def input_grad(self, grad_out) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("input_grad called without a recorded forward pass")
        return self._backward(self._cache, grad_out)[1]

    def _backward(self, hs, grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g.reshape(hs[-1].shape)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - hs[i + 1] ** 2)
            grads[2 * i] = g.T @ hs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, g

    def scalar_input_gradient(self, x):
        """d out / d x for a scalar-output net; returns (grad, hs, us, vs)."""
        if self.sizes[-1] != 1:
            raise ValueError("input gradient helper needs a scalar output")
        hs = self._activations(x)
        n = x.shape[0]
        u = np.broadcast_to(self.weights[-1][0], (n, self.sizes[-2])).copy()
        us = {len(self.weights) - 1: u}
        vs = {}
        for l in range(len(self.weights) - 1, 0, -1):
            v = us[l] * (1.0 - hs[l] ** 2)
            vs[l] = v
            us[l - 1] = v @ self.weights[l - 1]
        return us[0], hs, us, vs

    def input_gradient_backward(self, hs, us, vs, g_bar) -> list:
        """Parameter gradients of sum(g_bar * d out/d x) (double backprop)."""
        L = len(self.weights)
        grads = [np.zeros_like(p) for p in self.params]
        h_bar = {}
        u_bar = g_bar
        for l in range(1, L):
            # u_{l-1} = v_l @ W_{l-1}
            grads[2 * (l - 1)] += vs[l].T @ u_bar
            v_bar = u_bar @ self.weights[l - 1].T
            s = 1.0 - hs[l] ** 2
            s_bar = v_bar * us[l]
            u_bar = v_bar * s
            h_bar[l] = -2.0 * hs[l] * s_bar
        grads[2 * (L - 1)][0] += u_bar.sum(axis=0)
        carry = np.zeros_like(hs[L - 1])
        for l in range(L - 1, 0, -1):
            z_bar = (h_bar[l] + carry) * (1.0 - hs[l] ** 2)
            grads[2 * (l - 1)] += z_bar.T @ hs[l - 1]
            grads[2 * (l - 1) + 1] += z_bar.sum(axis=0)
            carry = z_bar @ self.weights[l - 1]
        return grads

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "params": self.get_flat().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        net = cls(doc["sizes"], zero=True)
        net.set_flat(doc["params"])
        return net


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> float:
        """Descend along ``grads``; returns the (pre-clip) global grad norm."""
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), log_std_init: float = math.log(0.5),
                 rng=None, head_gain: float = 0.01):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.mean_net = Mlp([obs_dim, *hidden, act_dim], rng=rng, output_gain=head_gain)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def params(self) -> list:
        return self.mean_net.params + [self.log_std]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def mean(self, obs) -> np.ndarray:
        return self.mean_net.predict(obs)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        mu = self.mean_net.predict(obs)
        if deterministic:
            a = mu
        else:
            a = mu + self.std * rng.standard_normal(mu.shape)
        return a, self._log_prob(mu, a)

    def _log_prob(self, mu, a):
        z = (a - mu) / self.std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI

    def log_prob(self, obs, actions) -> np.ndarray:
        return self._log_prob(self.mean_net.predict(obs), np.asarray(actions, dtype=np.float64))

    def log_prob_and_grad(self, obs, actions, coef):
        """log-probs and gradients of sum(coef * log_prob) w.r.t. ``params``."""
        actions = np.asarray(actions, dtype=np.float64)
        mu = self.mean_net.forward(obs)
        var = self.std ** 2
        diff = actions - mu
        logp = self._log_prob(mu, actions)
        coef = np.asarray(coef, dtype=np.float64)[:, None]
        grads = self.mean_net.backward(coef * diff / var)
        g_log_std = np.sum(coef * (diff * diff / var - 1.0), axis=0)
        return logp, grads + [g_log_std]

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.act_dim * (1.0 + LOG_2PI))

    def entropy_grad(self) -> list:
        return [np.zeros_like(p) for p in self.mean_net.params] + [np.ones_like(self.log_std)]

    def to_dict(self) -> dict:
        return {"kind": "gaussian_policy", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "mean_net": self.mean_net.to_dict(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianPolicy":
        sizes = doc["mean_net"]["sizes"]
        pol = cls(doc["obs_dim"], doc["act_dim"], hidden=tuple(sizes[1:-1]), rng=0)
        pol.mean_net = Mlp.from_dict(doc["mean_net"])
        pol.log_std = np.asarray(doc["log_std"], dtype=np.float64)
        return pol

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy.from_dict(self.to_dict())


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class CategoricalPolicy:
    """Softmax policy over ``n_actions`` logits."""

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64, 64), rng=None, head_gain: float = 0.01):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.logits_net = Mlp([obs_dim, *hidden, n_actions], rng=rng, output_gain=head_gain)

    @property
    def params(self) -> list:
        return self.logits_net.params

    def probs(self, obs) -> np.ndarray:
        return np.exp(_log_softmax(self.logits_net.predict(obs)))

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        logp_all = _log_softmax(self.logits_net.predict(obs))
        single = logp_all.ndim == 1
        lp = np.atleast_2d(logp_all)
        if deterministic:
            a = np.argmax(lp, axis=1)
        else:
            cum = np.cumsum(np.exp(lp), axis=1)
            u = rng.random(lp.shape[0])[:, None]
            a = np.minimum((u > cum).sum(axis=1), self.n_actions - 1)
        logp = lp[np.arange(lp.shape[0]), a]
        return (a[0], logp[0]) if single else (a, logp)

    def log_prob(self, obs, actions) -> np.ndarray:
        lp = np.atleast_2d(_log_softmax(self.logits_net.predict(obs)))
        actions = np.asarray(actions, dtype=int).ravel()
        return lp[np.arange(lp.shape[0]), actions]

    def log_prob_and_grad(self, obs, actions, coef):
        logits = self.logits_net.forward(obs)
        lp = _log_softmax(logits)
        actions = np.asarray(actions, dtype=int).ravel()
        idx = np.arange(lp.shape[0])
        p = np.exp(lp)
        g = -p
        g[idx, actions] += 1.0
        coef = np.asarray(coef, dtype=np.float64)[:, None]
        return lp[idx, actions], self.logits_net.backward(coef * g)

    def entropy(self, obs=None) -> float:
        if obs is None:
            raise ValueError("categorical entropy needs observations")
        lp = np.atleast_2d(_log_softmax(self.logits_net.predict(obs)))
        return float(-np.mean(np.sum(np.exp(lp) * lp, axis=1)))

    def to_dict(self) -> dict:
        return {"kind": "categorical_policy", "obs_dim": self.obs_dim, "n_actions": self.n_actions,
                "logits_net": self.logits_net.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CategoricalPolicy":
        sizes = doc["logits_net"]["sizes"]
        pol = cls(doc["obs_dim"], doc["n_actions"], hidden=tuple(sizes[1:-1]), rng=0)
        pol.logits_net = Mlp.from_dict(doc["logits_net"])
        return pol

    def copy(self) -> "CategoricalPolicy":
        return CategoricalPolicy.from_dict(self.to_dict())


def policy_from_dict(doc: dict):
    kinds = {"gaussian_policy": GaussianPolicy, "categorical_policy": CategoricalPolicy}
    try:
        return kinds[doc["kind"]].from_dict(doc)
    except KeyError:
        raise ValueError(f"unknown checkpoint kind {doc.get('kind')!r}") from None


def save_checkpoint(obj, path, **header) -> None:
    doc = dict(header)
    doc.update(obj.to_dict())
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
