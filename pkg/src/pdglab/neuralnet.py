"""
Small from-scratch function approximators.

Networks are stacks of affine layers with tanh on every hidden layer and a
linear output. Gradients are computed by explicit reverse-mode passes; there
is no autodiff dependency. All arithmetic is float64.
"""

from __future__ import annotations

import json
import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_BOUNDS = (-20.0, 2.0)
PARAM_FORMAT = "pdglab-params"
PARAM_VERSION = 1


def policy_widths(obs_dim, act_dim):
    h1, h3 = 10 * obs_dim, 10 * act_dim
    return [obs_dim, h1, int(round(math.sqrt(h1 * h3))), h3, act_dim]


def value_widths(obs_dim):
    h1, h3 = 10 * obs_dim, 5
    return [obs_dim, h1, int(round(math.sqrt(h1 * h3))), h3, 1]


class MLP:
    """Affine layers, tanh hidden activations, linear output.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` so a batch ``X`` of shape
    ``(n, fan_in)`` maps as ``X @ W + b``.
    """

    def __init__(self, widths, rng=None, weights=None, biases=None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("need at least an input and an output width")
        if weights is None:
            rng = np.random.default_rng(rng)
            weights = []
            for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        if biases is None:
            biases = [np.zeros(w) for w in self.widths[1:]]
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self._check_shapes()

    def _check_shapes(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.widths[i], self.widths[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i}: got {w.shape}/{b.shape}, expected {expect}")

    @property
    def activations(self):
        return ["tanh"] * (len(self.weights) - 1) + ["linear"]

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, X, return_cache=False):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {X.shape[-1]} != {self.widths[0]}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if return_cache else h

    def backward(self, acts, grad_out):
        """Parameter gradients given the cached activations and dL/d(output).

        Returns a list aligned with :attr:`params`.
        """
        grad = np.asarray(grad_out, dtype=float)
        if grad.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {grad.shape} != {acts[-1].shape}")
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                grad = grad * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ grad
            grads[2 * i + 1] = grad.sum(axis=0)
            if i > 0:
                grad = grad @ self.weights[i].T
        return grads

    def copy(self):
        return MLP(self.widths, weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])

    def to_dict(self):
        return {
            "layers": [
                {"shape": list(w.shape), "activation": act,
                 "weight": w.ravel().tolist(), "bias": b.tolist()}
                for w, b, act in zip(self.weights, self.biases, self.activations)
            ]
        }

    @classmethod
    def from_dict(cls, d):
        layers = d["layers"]
        widths = [layers[0]["shape"][0]] + [layer["shape"][1] for layer in layers]
        weights = [np.array(layer["weight"], float).reshape(layer["shape"]) for layer in layers]
        biases = [np.array(layer["bias"], float) for layer in layers]
        return cls(widths, weights=weights, biases=biases)


def gaussian_log_prob(actions, mean, log_std):
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    def __init__(self, obs_dim, act_dim, rng=None, log_std_init=math.log(0.6), widths=None):
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.mean_net = MLP(widths or policy_widths(obs_dim, act_dim), rng)
        self.log_std = np.full(self.act_dim, float(log_std_init))

    @property
    def params(self):
        return self.mean_net.params + [self.log_std]

    def mean(self, obs):
        return self.mean_net.forward(obs)

    def log_prob(self, obs, actions):
        return gaussian_log_prob(np.asarray(actions, float), self.mean(obs), self.log_std)

    def sample(self, obs, rng):
        """Draw one action per row of `obs` (one generator, or one per row).

        Returns ``(actions, log_probs)``.
        """
        obs = np.atleast_2d(np.asarray(obs, float))
        mu = self.mean(obs)
        if isinstance(rng, (list, tuple)):
            eps = np.stack([g.standard_normal(self.act_dim) for g in rng])
        else:
            eps = rng.standard_normal(mu.shape)
        actions = mu + np.exp(self.log_std) * eps
        return actions, gaussian_log_prob(actions, mu, self.log_std)

    def entropy(self):
        return float(np.sum(self.log_std) + 0.5 * self.act_dim * (1.0 + LOG_2PI))

    def log_prob_gradients(self, obs, actions, weights):
        """Gradients of ``sum_k weights[k] * log_prob(obs[k], actions[k])``."""
        mu, acts = self.mean_net.forward(obs, return_cache=True)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = np.asarray(actions, float) - mu
        w = np.asarray(weights, float)[:, None]
        grad_mu = w * diff * inv_var
        grad_log_std = np.sum(w * (diff * diff * inv_var - 1.0), axis=0)
        return self.mean_net.backward(acts, grad_mu) + [grad_log_std]

    def clamp(self):
        np.clip(self.log_std, *LOG_STD_BOUNDS, out=self.log_std)

    def copy(self):
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim, other.act_dim = self.obs_dim, self.act_dim
        other.mean_net = self.mean_net.copy()
        other.log_std = self.log_std.copy()
        return other

    def to_dict(self):
        return {"mean": self.mean_net.to_dict(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_dict(cls, d):
        obj = cls.__new__(cls)
        obj.mean_net = MLP.from_dict(d["mean"])
        obj.log_std = np.array(d["log_std"], float)
        obj.obs_dim, obj.act_dim = obj.mean_net.widths[0], obj.mean_net.widths[-1]
        return obj


class ValueFunction:
    def __init__(self, obs_dim, rng=None, widths=None):
        self.net = MLP(widths or value_widths(obs_dim), rng)

    @property
    def params(self):
        return self.net.params

    def predict(self, obs):
        return self.net.forward(obs)[..., 0]

    def mse_gradients(self, obs, targets):
        """Mean squared error and its parameter gradients."""
        pred, acts = self.net.forward(obs, return_cache=True)
        err = pred[:, 0] - np.asarray(targets, float)
        grads = self.net.backward(acts, (2.0 / len(err)) * err[:, None])
        return float(np.mean(err * err)), grads

    def to_dict(self):
        return self.net.to_dict()

    @classmethod
    def from_dict(cls, d):
        obj = cls.__new__(cls)
        obj.net = MLP.from_dict(d)
        return obj


def kl_approx(old_logp, new_logp):
    """Mean squared difference of log-probabilities before and after an update."""
    old_logp = np.asarray(old_logp, float)
    new_logp = np.asarray(new_logp, float)
    if old_logp.size == 0:
        raise ValueError("empty log-probability vectors")
    if old_logp.shape != new_logp.shape:
        raise ValueError("log-probability vectors differ in shape")
    return float(np.mean((old_logp - new_logp) ** 2))


class Adam:
    """ADAM with bias correction; the applied step is ``lr * multiplier``."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, multiplier=1.0):
        """Descend along `grads`, updating `params` in place."""
        if len(grads) != len(params):
            raise ValueError("gradient list does not match parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = self.lr * multiplier
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= step * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}


class RunningScaler(TransformerMixin, BaseEstimator):
    """Incremental per-feature standardiser: ``(x - mean) / (3 std + eps)``.

    Statistics are merged batch by batch with the parallel-variance update,
    so feeding data in several batches gives the same result as one pass.

    Parameters
    ----------
    eps : float
        Added to three standard deviations before dividing.
    """

    def __init__(self, eps=1e-3):
        self.eps = eps

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n_b = X.shape[0]
        mean_b = X.mean(axis=0)
        m2_b = ((X - mean_b) ** 2).sum(axis=0)
        if not hasattr(self, "n_samples_seen_") or self.n_samples_seen_ == 0:
            self.n_samples_seen_ = n_b
            self.mean_ = mean_b
            self.m2_ = m2_b
            self.n_features_in_ = X.shape[1]
        else:
            if X.shape[1] != self.n_features_in_:
                raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
            n_a = self.n_samples_seen_
            n = n_a + n_b
            delta = mean_b - self.mean_
            self.mean_ = self.mean_ + delta * (n_b / n)
            self.m2_ = self.m2_ + m2_b + delta * delta * (n_a * n_b / n)
            self.n_samples_seen_ = n
        self.var_ = self.m2_ / self.n_samples_seen_
        return self

    def fit(self, X, y=None):
        for attr in ("n_samples_seen_", "mean_", "m2_", "var_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X)

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_) / (3.0 * np.sqrt(self.var_) + self.eps)

    def to_dict(self):
        check_is_fitted(self, "mean_")
        return {"eps": self.eps, "n": int(self.n_samples_seen_),
                "mean": self.mean_.tolist(), "m2": self.m2_.tolist()}

    @classmethod
    def from_dict(cls, d):
        sc = cls(eps=d["eps"])
        sc.n_samples_seen_ = d["n"]
        sc.mean_ = np.array(d["mean"], float)
        sc.m2_ = np.array(d["m2"], float)
        sc.var_ = sc.m2_ / sc.n_samples_seen_
        sc.n_features_in_ = len(sc.mean_)
        return sc


def save_params(path, payload):
    """Write a parameter record (JSON, shapes plus row-major values)."""
    record = {"format": PARAM_FORMAT, "version": PARAM_VERSION}
    record.update(payload)
    with open(path, "w") as fh:
        json.dump(record, fh)


def load_params(path):
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != PARAM_FORMAT:
        raise ValueError(f"{path}: not a {PARAM_FORMAT} record")
    if record.get("version") != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported version {record.get('version')}")
    return record
