"""Reparameterized particle choice (concrete relaxation + straight-through) and tanh squashing.

These are the pieces an action-value learner (SAC/DDPG style) needs to push
``dQ/da`` back into the head; the learners themselves are not part of this
package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, mlp_backward, softmax, softplus
from .policy import GaussianHead, GMMHead, PFPNHead, PolicyHead

LOG2 = np.log(2.0)


def _check_temperature(temperature):
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")


@dataclass
class ConcreteSample:
    """Relaxed one-hot ``x`` over axis 0, with the Gumbel noise that produced it."""

    x: np.ndarray
    gumbel: np.ndarray
    temperature: float

    def vjp(self, grad_x):
        """Pull ``dL/dx`` back to the logits (axis 0 is the category axis)."""
        grad_x = np.asarray(grad_x, dtype=np.float64)
        inner = (grad_x * self.x).sum(axis=0, keepdims=True)
        return self.x * (grad_x - inner) / self.temperature

    def jacobian(self):
        """``dx_i / dlogit_j`` for a single categorical (1-D ``x``)."""
        x = self.x
        return (np.diag(x) - np.outer(x, x)) / self.temperature


def relaxed_one_hot(log_weights, gumbel, temperature=1.0):
    _check_temperature(temperature)
    return softmax((np.asarray(log_weights) + gumbel) / temperature, axis=0)


def concrete_sample(weights, temperature=1.0, rng=None, gumbel=None) -> ConcreteSample:
    """Gumbel-softmax relaxation of ``Categorical(weights)`` along axis 0.

    ``weights`` may be ``(n,)`` or ``(n, m)``. Pass ``gumbel`` to replay a draw.
    """
    _check_temperature(temperature)
    w = np.asarray(weights, dtype=np.float64)
    if gumbel is None:
        u = rng.random(w.shape)
        gumbel = -np.log(-np.log(u))
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    return ConcreteSample(relaxed_one_hot(log_w, gumbel, temperature), gumbel, temperature)


@dataclass
class StraightThrough:
    """Hard forward value ``a[argmax x]`` with relaxed gradients."""

    action: float
    per_particle: np.ndarray
    index: int
    concrete: ConcreteSample
    xi: np.ndarray
    noise: np.ndarray

    def backward(self, grad_action: float) -> dict[str, np.ndarray]:
        """Gradients of ``grad_action * action`` wrt logits, mu, xi and log_xi."""
        g = float(grad_action)
        grad_x = g * (self.per_particle - self.action)
        onehot = np.zeros_like(self.per_particle)
        onehot[self.index] = 1.0
        d_mu = g * onehot
        d_xi = g * onehot * self.noise
        return {
            "logits": self.concrete.vjp(grad_x),
            "mu": d_mu,
            "xi": d_xi,
            "log_xi": d_xi * self.xi,
        }


def straight_through_action(mu, xi, concrete: ConcreteSample, noise) -> StraightThrough:
    """Combine per-particle draws ``mu + xi * noise`` through a relaxed one-hot (one dimension)."""
    mu = np.asarray(mu, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    per = mu + xi * noise
    j = int(np.argmax(concrete.x))
    return StraightThrough(float(per[j]), per, j, concrete, xi, noise)


@dataclass
class ReparamSample:
    """Batched straight-through sample from a PFPN head, ready for backprop."""

    head: PFPNHead
    cache: object
    action: np.ndarray
    per_particle: np.ndarray
    index: np.ndarray
    x: np.ndarray
    gumbel: np.ndarray
    noise: np.ndarray
    temperature: float

    def backward(self, grad_action) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(grad_action * action)``; ``grad_action`` is (B, m)."""
        head = self.head
        g = np.asarray(grad_action, dtype=np.float64).reshape(self.action.shape)
        grad_x = g[:, None, :] * (self.per_particle - self.action[:, None, :])
        inner = (grad_x * self.x).sum(axis=1, keepdims=True)
        d_logit = self.x * (grad_x - inner) / self.temperature
        net_grads, _ = mlp_backward(head.net, self.cache, d_logit.reshape(g.shape[0], -1))
        grads = {}
        last = len(net_grads.weights) - 1
        for idx, (gw, gb) in enumerate(zip(net_grads.weights, net_grads.biases)):
            prefix = "final" if idx == last else f"trunk.{idx}"
            grads[f"{prefix}.W"] = gw
            grads[f"{prefix}.b"] = gb
        onehot = np.zeros_like(self.x)
        b_idx = np.arange(g.shape[0])[:, None]
        k_idx = np.arange(head.act_dim)[None, :]
        onehot[b_idx, self.index, k_idx] = 1.0
        d_mu = (onehot * g[:, None, :]).sum(axis=0)
        d_log_xi = (onehot * g[:, None, :] * self.noise * head.particles.xi).sum(axis=0)
        grads["particles.mu"] = d_mu
        grads["particles.log_xi"] = d_log_xi
        return grads


def rsample(head: PFPNHead, states, rng, temperature=1.0, gumbel=None, noise=None) -> ReparamSample:
    """Reparameterized draw: Gumbel noise picks the particle, Gaussian noise is drawn for every particle."""
    _check_temperature(temperature)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    out, cache, _ = head._forward(states)
    log_w = log_softmax(head._logits(out), axis=1)
    if gumbel is None:
        gumbel = -np.log(-np.log(rng.random(log_w.shape)))
    if noise is None:
        noise = rng.standard_normal(log_w.shape)
    x = softmax((log_w + gumbel) / temperature, axis=1)
    per = head.particles.mu + head.particles.xi * noise
    idx = np.argmax(x, axis=1)
    action = np.take_along_axis(per, idx[:, None, :], axis=1)[:, 0, :]
    return ReparamSample(head, cache, action, per, idx, x, gumbel, noise, temperature)


def tanh_log_det(u):
    """``log(1 - tanh(u)^2)`` in the overflow-free softplus form."""
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * (LOG2 - u - softplus(-2.0 * u))


@dataclass
class SquashedAction:
    u: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


def _dlogp_daction(head: PolicyHead, ev) -> np.ndarray:
    """d log-density / d action under the unsquashed head, shape (B, m)."""
    m = head.act_dim
    if isinstance(head, PFPNHead):
        return -ev.dlogp_extra["particles.mu"].sum(axis=1)
    if isinstance(head, GaussianHead):
        return -ev.dlogp_out[:, :m]
    if isinstance(head, GMMHead):
        nm = head.n * m
        return -ev.dlogp_out[:, nm : 2 * nm].reshape(-1, head.n, m).sum(axis=1)
    raise TypeError(f"{head.variant} head has no continuous density")


def squashed_log_prob(head: PolicyHead, states, u):
    """Log-density of ``a = tanh(u)`` when ``u`` follows the head's distribution."""
    ev = head.evaluate(states, u)
    u2 = np.atleast_2d(np.asarray(u, dtype=np.float64))
    out = ev.logp - tanh_log_det(u2).sum(axis=1)
    return out[0] if ev.squeeze else out


def squashed_log_prob_and_grad(head: PolicyHead, states, u):
    """Value and gradients (head parameters summed over the batch, plus ``"u"`` per sample)."""
    ev = head.evaluate(states, u)
    u2 = np.atleast_2d(np.asarray(u, dtype=np.float64))
    value = ev.logp - tanh_log_det(u2).sum(axis=1)
    grads = head.backward(ev, dlogp=1.0)
    grads["u"] = _dlogp_daction(head, ev) + 2.0 * np.tanh(u2)
    if ev.squeeze:
        return value[0], {**grads, "u": grads["u"][0]}
    return value, grads


def squashed_sample(head: PolicyHead, states, rng) -> SquashedAction:
    s = head.sample(states, rng)
    u = s.raw
    return SquashedAction(u, np.tanh(u), squashed_log_prob(head, states, u))
