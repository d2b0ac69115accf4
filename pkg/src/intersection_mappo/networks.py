"""Actor and critic perceptrons on one flat parameter vector, with analytic gradients and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LOG_2PI = math.log(2 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a loss, ratio or gradient stops being finite."""


@dataclass
class ParameterSet:
    values: np.ndarray
    segments: dict[str, tuple[int, tuple[int, ...]]]

    @property
    def parameter_count(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        cache = self.__dict__.get("_views")
        if cache is None or cache[0] is not self.values:
            cache = (self.values, {})
            self.__dict__["_views"] = cache
        views = cache[1]
        if name not in views:
            offset, shape = self.segments[name]
            views[name] = self.values[offset:offset + math.prod(shape)].reshape(shape)
        return views[name]

    def layers(self, prefix: str, n_layers: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.view(f"{prefix}.W{k}"), self.view(f"{prefix}.b{k}")) for k in range(n_layers)]

    def network_slice(self, prefix: str) -> slice:
        names = [n for n in self.segments if n.split(".", 1)[0] == prefix]
        start = min(self.segments[n][0] for n in names)
        stop = max(self.segments[n][0] + math.prod(self.segments[n][1]) for n in names)
        return slice(start, stop)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.values.copy(), dict(self.segments))


@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    std: np.ndarray


class MLP:
    """Dense tanh network; weights are views into a shared ParameterSet."""

    def __init__(self, prefix: str, sizes: list[int]):
        self.prefix = prefix
        self.sizes = list(sizes)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def segment_shapes(self):
        for k in range(self.n_layers):
            yield f"{self.prefix}.W{k}", (self.sizes[k], self.sizes[k + 1])
            yield f"{self.prefix}.b{k}", (self.sizes[k + 1],)

    def forward(self, params: ParameterSet, x: np.ndarray):
        acts = [x]
        h = x
        layers = params.layers(self.prefix, self.n_layers)
        last = self.n_layers - 1
        for k, (W, b) in enumerate(layers):
            h = h @ W + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, params: ParameterSet, acts, grad_out: np.ndarray, grad: ParameterSet) -> None:
        """Accumulate d(loss)/d(params) into ``grad`` given d(loss)/d(output)."""
        delta = grad_out
        layers = params.layers(self.prefix, self.n_layers)
        grads = grad.layers(self.prefix, self.n_layers)
        for k in reversed(range(self.n_layers)):
            gW, gb = grads[k]
            gW += acts[k].T @ delta
            gb += delta.sum(axis=0)
            if k > 0:
                delta = (delta @ layers[k][0].T) * (1.0 - acts[k] * acts[k])


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class PolicyValueNet:
    """Gaussian actor (mean and softplus std heads) and scalar critic, no shared weights."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: tuple[int, ...] = (128, 128), sigma_min: float = 0.01):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.hidden = tuple(hidden)
        self.sigma_min = sigma_min
        self.actor = MLP("actor", [obs_dim, *hidden, 2 * act_dim])
        self.critic = MLP("critic", [obs_dim, *hidden, 1])
        segments = {}
        offset = 0
        for net in (self.actor, self.critic):
            for name, shape in net.segment_shapes():
                segments[name] = (offset, shape)
                offset += math.prod(shape)
        self._segments = segments
        self._size = offset

    def zeros(self) -> ParameterSet:
        return ParameterSet(np.zeros(self._size), dict(self._segments))

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        params = self.zeros()
        for net, final_gain in ((self.actor, 0.01), (self.critic, 1.0)):
            for k in range(net.n_layers):
                W = params.view(f"{net.prefix}.W{k}")
                gain = final_gain if k == net.n_layers - 1 else math.sqrt(2.0)
                W[...] = _orthogonal(rng, W.shape, gain)
        return params

    # -- forward passes -------------------------------------------------

    def actor_forward(self, params: ParameterSet, obs: np.ndarray, return_cache: bool = False):
        obs = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise NonFiniteError("actor received a non-finite observation")
        single = obs.ndim == 1
        x = obs[None, :] if single else obs
        out, acts = self.actor.forward(params, x)
        raw = out[:, self.act_dim:]
        mean = out[:, :self.act_dim]
        std = np.logaddexp(0.0, raw) + self.sigma_min
        if single:
            policy = GaussianPolicyOutput(mean[0], std[0])
        else:
            policy = GaussianPolicyOutput(mean, std)
        if return_cache:
            return policy, (acts, raw)
        return policy

    def critic_forward(self, params: ParameterSet, obs: np.ndarray, return_cache: bool = False):
        obs = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise NonFiniteError("critic received a non-finite observation")
        single = obs.ndim == 1
        x = obs[None, :] if single else obs
        out, acts = self.critic.forward(params, x)
        value = out[:, 0]
        if single:
            value = float(value[0])
        if return_cache:
            return value, acts
        return value

    # -- backward passes ------------------------------------------------

    def actor_backward(self, params: ParameterSet, cache, d_mean: np.ndarray, d_std: np.ndarray,
                       grad: ParameterSet | None = None) -> ParameterSet:
        acts, raw = cache
        grad = grad if grad is not None else self.zeros()
        d_out = np.concatenate([np.atleast_2d(d_mean), np.atleast_2d(d_std) * expit(raw)], axis=1)
        self.actor.backward(params, acts, d_out, grad)
        return grad

    def critic_backward(self, params: ParameterSet, cache, d_value: np.ndarray,
                        grad: ParameterSet | None = None) -> ParameterSet:
        grad = grad if grad is not None else self.zeros()
        self.critic.backward(params, cache, np.asarray(d_value, dtype=float).reshape(-1, 1), grad)
        return grad


def gaussian_log_prob(policy: GaussianPolicyOutput, action: np.ndarray) -> np.ndarray | float:
    """Exact diagonal Gaussian log-density, summed over action dimensions."""
    z = (action - policy.mean) / policy.std
    return np.sum(-0.5 * z * z - np.log(policy.std) - 0.5 * LOG_2PI, axis=-1)


def gaussian_log_prob_grads(policy: GaussianPolicyOutput, action: np.ndarray):
    """Partial derivatives of the log-density w.r.t. mean and std."""
    diff = action - policy.mean
    var = policy.std ** 2
    return diff / var, diff * diff / (var * policy.std) - 1.0 / policy.std


def gaussian_entropy(policy: GaussianPolicyOutput) -> np.ndarray | float:
    return np.sum(np.log(policy.std) + 0.5 * (LOG_2PI + 1.0), axis=-1)


def gaussian_kl(old: GaussianPolicyOutput, new: GaussianPolicyOutput) -> np.ndarray | float:
    """KL(old || new) for diagonal Gaussians, summed over action dimensions."""
    return np.sum(
        np.log(new.std / old.std) + (old.std ** 2 + (old.mean - new.mean) ** 2) / (2 * new.std ** 2) - 0.5,
        axis=-1,
    )


def sample_action(policy: GaussianPolicyOutput, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    action = policy.mean + policy.std * rng.standard_normal(np.shape(policy.mean))
    return action, float(gaussian_log_prob(policy, action))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    eps: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def for_params(cls, params: ParameterSet, eps=1e-5, beta1=0.9, beta2=0.999) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0, eps, beta1, beta2)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.eps, self.beta1, self.beta2)


def adam_step(params: ParameterSet, grads: np.ndarray, state: AdamState, lr: float) -> ParameterSet:
    """Bias-corrected Adam update, in place. Non-finite gradients leave everything untouched."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.values.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match parameters {params.values.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteError(f"non-finite gradient in {bad.size} coordinates (first index {bad[0]})")
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * (grads * grads)
    denom = np.sqrt(state.v / (1 - state.beta2 ** state.t))
    denom += state.eps
    step = state.m / (1 - state.beta1 ** state.t)
    step /= denom
    step *= lr
    params.values -= step
    return params
