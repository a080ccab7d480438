"""Action policy heads: particle mixture (PFPN) plus Gaussian, DISCRETE and GMM baselines.

All heads share a two-hidden-layer trunk followed by one affine output layer.
Per-dimension quantities use the layout ``(n, m)``: particle/component ``i`` on
action dimension ``k`` lives at ``[i, k]`` and its logit comes from row
``i * m + k`` of the output layer.

Batch conventions: ``states`` may be ``(obs,)`` or ``(B, obs)``; results keep
the leading batch axis only if the input had one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    LOG_SQRT_2PI,
    MlpParams,
    ShapeError,
    log_softmax,
    logsumexp,
    mlp_backward,
    mlp_forward,
    normal_log_density,
)

VARIANTS = ("pfpn", "gaussian", "discrete", "gmm")


@dataclass
class ParticleSet:
    mu: np.ndarray
    log_xi: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.log_xi.shape or self.mu.ndim != 2:
            raise ShapeError(f"mu {self.mu.shape} and log_xi {self.log_xi.shape} must both be (n, m)")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def m(self) -> int:
        return self.mu.shape[1]

    @property
    def xi(self) -> np.ndarray:
        return np.exp(self.log_xi)

    def copy(self) -> ParticleSet:
        return ParticleSet(self.mu.copy(), self.log_xi.copy())


def bin_centers(n: int) -> np.ndarray:
    """Centers of ``n`` equal bins on [-1, 1]: ``-1 + (2i - 1) / n`` for i = 1..n."""
    if n < 1:
        raise ValueError(f"need at least one bin, got {n}")
    return -1.0 + (2.0 * np.arange(1, n + 1) - 1.0) / n


def init_particles(n: int, m: int) -> ParticleSet:
    """Uniform placement on [-1, 1] with noise scale equal to the gap ``2/n``."""
    if n < 1 or m < 1:
        raise ValueError(f"particle set needs n >= 1 and m >= 1, got n={n}, m={m}")
    mu = np.repeat(bin_centers(n)[:, None], m, axis=1)
    log_xi = np.full((n, m), np.log(2.0 / n))
    return ParticleSet(mu, log_xi)


@dataclass
class ActionSample:
    """One (or a batch of) sampled actions.

    ``raw`` is the unclamped draw that ``log_prob`` refers to; ``action`` is the
    same value clamped to [-1, 1] for the environment.
    """

    action: np.ndarray
    raw: np.ndarray
    chosen: np.ndarray | None
    log_prob: np.ndarray
    weights: np.ndarray | None


@dataclass
class Evaluation:
    cache: object
    logp: np.ndarray
    entropy: np.ndarray
    dlogp_out: np.ndarray | None
    dent_out: np.ndarray
    dlogp_extra: dict
    squeeze: bool


def _mixture(log_w, mu, log_sigma, a):
    """Per-dimension mixture log-density and its derivatives.

    Shapes: ``log_w``/``mu``/``log_sigma`` broadcast to ``(B, n, m)``, ``a`` is
    ``(B, m)``. Responsibilities are formed in log space, so components far from
    ``a`` contribute exact zeros instead of needing a density floor.
    """
    x = a[:, None, :]
    comp = log_w + normal_log_density(x, mu, log_sigma)
    logp_k = logsumexp(comp, axis=1)
    resp = np.exp(comp - logp_k[:, None, :])
    inv_sigma = np.exp(-log_sigma)
    z = (x - mu) * inv_sigma
    d_logit = resp - np.exp(log_w)
    d_mu = resp * z * inv_sigma
    d_log_sigma = resp * (z * z - 1.0)
    return logp_k, d_logit, d_mu, d_log_sigma


def _categorical_entropy(log_w):
    """Mean over dimensions of the categorical entropy, with d/dlogits. ``log_w`` is (B, n, m)."""
    w = np.exp(log_w)
    plogp = np.where(w > 0.0, w * log_w, 0.0)
    h_k = -plogp.sum(axis=1)
    m = log_w.shape[2]
    d_logit = -(plogp + w * h_k[:, None, :]) / m
    return h_k.mean(axis=1), d_logit


def _sample_categorical(w, rng):
    """Inverse-CDF draw over axis 1 of ``w`` (B, n, m). Returns (B, m) indices."""
    u = rng.random((w.shape[0], w.shape[2]))
    cdf = np.cumsum(w, axis=1)
    idx = (u[:, None, :] >= cdf).sum(axis=1)
    return np.minimum(idx, w.shape[1] - 1)


class PolicyHead:
    """Trunk + output layer; subclasses interpret the output layer.

    Subclasses implement ``_dist`` (network output -> distribution parameters),
    ``_evaluate_out`` (log-prob, entropy and their derivatives wrt the network
    output) and ``_sample_out``.
    """

    variant = ""

    def __init__(self, net: MlpParams, act_dim: int, n: int):
        self.net = net
        self.act_dim = act_dim
        self.n = n
        if net.out_dim != self.out_dim:
            raise ShapeError(f"{self.variant} head needs {self.out_dim} outputs, network has {net.out_dim}")

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    @property
    def out_dim(self) -> int:
        raise NotImplementedError

    @property
    def hidden(self) -> list[int]:
        return self.net.sizes[1:-1]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        last = len(self.net.weights) - 1
        for idx, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
            prefix = "final" if idx == last else f"trunk.{idx}"
            out[f"{prefix}.W"] = w
            out[f"{prefix}.b"] = b
        out.update(self._extra_parameters())
        return out

    def _extra_parameters(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def final_w(self) -> np.ndarray:
        return self.net.weights[-1]

    @property
    def final_b(self) -> np.ndarray:
        return self.net.biases[-1]

    def _forward(self, states):
        states = np.asarray(states, dtype=np.float64)
        squeeze = states.ndim == 1
        if squeeze:
            states = states[None, :]
        if states.ndim != 2 or states.shape[1] != self.obs_dim:
            raise ShapeError(f"state shape {states.shape} does not match observation dim {self.obs_dim}")
        out, cache = mlp_forward(self.net, states)
        return out, cache, squeeze

    @staticmethod
    def _batch_actions(actions, batch):
        a = np.asarray(actions, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.shape[0] != batch:
            raise ShapeError(f"{a.shape[0]} actions for {batch} states")
        return a

    def evaluate(self, states, actions=None) -> Evaluation:
        out, cache, squeeze = self._forward(states)
        a = None if actions is None else self._batch_actions(actions, out.shape[0])
        if a is not None and a.shape[1] != self.act_dim:
            raise ShapeError(f"action dim {a.shape[1]} != {self.act_dim}")
        logp, dlogp_out, extra, ent, dent_out = self._evaluate_out(out, a)
        return Evaluation(cache, logp, ent, dlogp_out, dent_out, extra, squeeze)

    def backward(self, ev: Evaluation, dlogp=None, dentropy=None) -> dict[str, np.ndarray]:
        """Gradient of ``sum_b dlogp[b] * logp[b] + dentropy[b] * entropy[b]``."""
        batch = ev.entropy.shape[0]
        dout = np.zeros((batch, self.out_dim))
        grads_extra = {}
        if dlogp is not None:
            dlogp = np.broadcast_to(np.asarray(dlogp, dtype=np.float64), (batch,))
            dout += dlogp[:, None] * ev.dlogp_out
            for name, per_sample in ev.dlogp_extra.items():
                grads_extra[name] = np.tensordot(dlogp, per_sample, axes=(0, 0))
        if dentropy is not None:
            dentropy = np.broadcast_to(np.asarray(dentropy, dtype=np.float64), (batch,))
            dout += dentropy[:, None] * ev.dent_out
        net_grads, _ = mlp_backward(self.net, ev.cache, dout)
        grads = {}
        last = len(net_grads.weights) - 1
        for idx, (gw, gb) in enumerate(zip(net_grads.weights, net_grads.biases)):
            prefix = "final" if idx == last else f"trunk.{idx}"
            grads[f"{prefix}.W"] = gw
            grads[f"{prefix}.b"] = gb
        for name, p in self._extra_parameters().items():
            grads[name] = grads_extra.get(name, np.zeros_like(p))
        return grads

    def log_prob(self, states, actions):
        ev = self.evaluate(states, actions)
        return ev.logp[0] if ev.squeeze else ev.logp

    def grad_log_prob(self, state, action) -> dict[str, np.ndarray]:
        """Gradient of log pi(action | state) (summed over the batch if batched)."""
        ev = self.evaluate(state, action)
        return self.backward(ev, dlogp=1.0)

    def entropy_surrogate(self, states):
        ev = self.evaluate(states)
        return ev.entropy[0] if ev.squeeze else ev.entropy

    def sample(self, states, rng, with_log_prob=True) -> ActionSample:
        """Draw actions. ``with_log_prob=False`` skips the density (``log_prob`` is NaN)."""
        out, _, squeeze = self._forward(states)
        raw, chosen, logp, weights = self._sample_out(out, rng, with_log_prob)
        s = ActionSample(np.clip(raw, -1.0, 1.0), raw, chosen, logp, weights)
        if squeeze:
            s = ActionSample(
                s.action[0], s.raw[0],
                None if chosen is None else chosen[0],
                logp[0],
                None if weights is None else weights[0],
            )
        return s

    def deterministic_action(self, states):
        out, _, squeeze = self._forward(states)
        a = self._deterministic_out(out)
        return a[0] if squeeze else a

    def weights(self, states):
        """Component weights ``(n, m)`` (or ``(B, n, m)``); mixture heads only."""
        out, _, squeeze = self._forward(states)
        w = np.exp(self._log_weights(out))
        return w[0] if squeeze else w

    def _log_weights(self, out):
        raise TypeError(f"{self.variant} head has no component weights")

    def _logits(self, out):
        return out[:, : self.n * self.act_dim].reshape(-1, self.n, self.act_dim)


class PFPNHead(PolicyHead):
    """State-dependent weights over state-independent Gaussian particles."""

    variant = "pfpn"

    def __init__(self, net: MlpParams, particles: ParticleSet):
        self.particles = particles
        super().__init__(net, particles.m, particles.n)

    @property
    def out_dim(self) -> int:
        return self.n * self.act_dim

    def _extra_parameters(self):
        return {"particles.mu": self.particles.mu, "particles.log_xi": self.particles.log_xi}

    def _log_weights(self, out):
        return log_softmax(self._logits(out), axis=1)

    def _evaluate_out(self, out, a):
        log_w = self._log_weights(out)
        ent, d_ent_logit = _categorical_entropy(log_w)
        dent_out = d_ent_logit.reshape(out.shape[0], -1)
        if a is None:
            return None, None, {}, ent, dent_out
        p = self.particles
        logp_k, d_logit, d_mu, d_log_xi = _mixture(log_w, p.mu, p.log_xi, a)
        extra = {"particles.mu": d_mu, "particles.log_xi": d_log_xi}
        return logp_k.sum(axis=1), d_logit.reshape(out.shape[0], -1), extra, ent, dent_out

    def _sample_out(self, out, rng, with_log_prob=True):
        log_w = self._log_weights(out)
        w = np.exp(log_w)
        chosen = _sample_categorical(w, rng)
        cols = np.arange(self.act_dim)
        mu = self.particles.mu[chosen, cols]
        xi = np.exp(self.particles.log_xi[chosen, cols])
        raw = mu + xi * rng.standard_normal(mu.shape)
        if not with_log_prob:
            return raw, chosen, np.full(out.shape[0], np.nan), w
        logp_k, *_ = _mixture(log_w, self.particles.mu, self.particles.log_xi, raw)
        return raw, chosen, logp_k.sum(axis=1), w

    def _deterministic_out(self, out):
        best = np.argmax(self._logits(out), axis=1)
        return self.particles.mu[best, np.arange(self.act_dim)]


class DiscreteHead(PolicyHead):
    """Categorical policy over fixed, frozen bin centers."""

    variant = "discrete"

    def __init__(self, net: MlpParams, act_dim: int, n: int):
        self.centers = bin_centers(n)
        super().__init__(net, act_dim, n)

    @property
    def out_dim(self) -> int:
        return self.n * self.act_dim

    def _log_weights(self, out):
        return log_softmax(self._logits(out), axis=1)

    def bin_index(self, actions):
        """Nearest bin for each action coordinate (ties go to the lower bin)."""
        a = np.asarray(actions, dtype=np.float64)
        return np.argmin(np.abs(a[..., None, :] - self.centers[:, None]), axis=-2)

    def _evaluate_out(self, out, a):
        log_w = self._log_weights(out)
        ent, d_ent_logit = _categorical_entropy(log_w)
        dent_out = d_ent_logit.reshape(out.shape[0], -1)
        if a is None:
            return None, None, {}, ent, dent_out
        idx = self.bin_index(a)
        rows = np.arange(out.shape[0])[:, None]
        cols = np.arange(self.act_dim)[None, :]
        logp = log_w[rows, idx, cols].sum(axis=1)
        d_logit = -np.exp(log_w)
        d_logit[rows, idx, cols] += 1.0
        return logp, d_logit.reshape(out.shape[0], -1), {}, ent, dent_out

    def _sample_out(self, out, rng, with_log_prob=True):
        log_w = self._log_weights(out)
        w = np.exp(log_w)
        chosen = _sample_categorical(w, rng)
        raw = self.centers[chosen]
        rows = np.arange(out.shape[0])[:, None]
        logp = log_w[rows, chosen, np.arange(self.act_dim)[None, :]].sum(axis=1)
        return raw, chosen, logp, w

    def _deterministic_out(self, out):
        return self.centers[np.argmax(self._logits(out), axis=1)]


class GMMHead(PolicyHead):
    """Mixture whose weights, means and log-stds are all network outputs.

    Output layout: ``[logits | means | log-stds]``, each block ``n * m`` rows.
    """

    variant = "gmm"

    @property
    def out_dim(self) -> int:
        return 3 * self.n * self.act_dim

    def _split(self, out):
        nm = self.n * self.act_dim
        shape = (-1, self.n, self.act_dim)
        return (
            out[:, :nm].reshape(shape),
            out[:, nm : 2 * nm].reshape(shape),
            out[:, 2 * nm :].reshape(shape),
        )

    def _log_weights(self, out):
        return log_softmax(self._logits(out), axis=1)

    def _evaluate_out(self, out, a):
        logits, mu, log_sigma = self._split(out)
        log_w = log_softmax(logits, axis=1)
        ent, d_ent_logit = _categorical_entropy(log_w)
        batch = out.shape[0]
        dent_out = np.concatenate([d_ent_logit.reshape(batch, -1), np.zeros((batch, 2 * self.n * self.act_dim))], axis=1)
        if a is None:
            return None, None, {}, ent, dent_out
        logp_k, d_logit, d_mu, d_ls = _mixture(log_w, mu, log_sigma, a)
        dlogp_out = np.concatenate(
            [d_logit.reshape(batch, -1), d_mu.reshape(batch, -1), d_ls.reshape(batch, -1)], axis=1
        )
        return logp_k.sum(axis=1), dlogp_out, {}, ent, dent_out

    def _sample_out(self, out, rng, with_log_prob=True):
        logits, mu, log_sigma = self._split(out)
        log_w = log_softmax(logits, axis=1)
        w = np.exp(log_w)
        chosen = _sample_categorical(w, rng)
        rows = np.arange(out.shape[0])[:, None]
        cols = np.arange(self.act_dim)[None, :]
        raw = mu[rows, chosen, cols] + np.exp(log_sigma[rows, chosen, cols]) * rng.standard_normal(chosen.shape)
        if not with_log_prob:
            return raw, chosen, np.full(out.shape[0], np.nan), w
        logp_k, *_ = _mixture(log_w, mu, log_sigma, raw)
        return raw, chosen, logp_k.sum(axis=1), w

    def _deterministic_out(self, out):
        logits, mu, _ = self._split(out)
        best = np.argmax(logits, axis=1)
        rows = np.arange(out.shape[0])[:, None]
        return mu[rows, best, np.arange(self.act_dim)[None, :]]


class GaussianHead(PolicyHead):
    """Diagonal Gaussian with state-dependent mean and log-std (output ``[mean | log-std]``)."""

    variant = "gaussian"

    def __init__(self, net: MlpParams, act_dim: int):
        super().__init__(net, act_dim, 1)

    @property
    def out_dim(self) -> int:
        return 2 * self.act_dim

    def _split(self, out):
        return out[:, : self.act_dim], out[:, self.act_dim :]

    def _evaluate_out(self, out, a):
        mean, log_std = self._split(out)
        batch = out.shape[0]
        ent = (0.5 + LOG_SQRT_2PI + log_std).mean(axis=1)
        dent_out = np.concatenate([np.zeros((batch, self.act_dim)), np.full((batch, self.act_dim), 1.0 / self.act_dim)], axis=1)
        if a is None:
            return None, None, {}, ent, dent_out
        inv = np.exp(-log_std)
        z = (a - mean) * inv
        logp = normal_log_density(a, mean, log_std).sum(axis=1)
        dlogp_out = np.concatenate([z * inv, z * z - 1.0], axis=1)
        return logp, dlogp_out, {}, ent, dent_out

    def _sample_out(self, out, rng, with_log_prob=True):
        mean, log_std = self._split(out)
        raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        logp = normal_log_density(raw, mean, log_std).sum(axis=1)
        return raw, None, logp, None

    def _deterministic_out(self, out):
        return self._split(out)[0].copy()


def make_head(variant, obs_dim, act_dim, n, hidden, rng, init_std=0.5, output_scale=0.01) -> PolicyHead:
    """Build a head with a fresh trunk.

    The output layer starts with small weights so every head begins close to
    its bias-defined distribution: uniform weights at the bin centers for the
    mixture heads, ``N(0, init_std^2)`` for the Gaussian.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown head variant {variant!r}; expected one of {VARIANTS}")
    out_dims = {"pfpn": n * act_dim, "discrete": n * act_dim, "gmm": 3 * n * act_dim, "gaussian": 2 * act_dim}
    net = MlpParams.init([obs_dim, *hidden, out_dims[variant]], rng, output_scale=output_scale)
    if variant == "pfpn":
        return PFPNHead(net, init_particles(n, act_dim))
    if variant == "discrete":
        return DiscreteHead(net, act_dim, n)
    if variant == "gmm":
        nm = n * act_dim
        net.biases[-1][nm : 2 * nm] = np.repeat(bin_centers(n), act_dim)
        net.biases[-1][2 * nm :] = np.log(2.0 / n)
        return GMMHead(net, act_dim, n)
    net.biases[-1][act_dim:] = np.log(init_std)
    return GaussianHead(net, act_dim)
