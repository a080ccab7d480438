import numpy as np
import pytest

from pfpn.numerics import MlpParams
from pfpn.policy import make_head

# Gradients smaller than this are compared absolutely; central differences
# carry ~1e-10 of round-off, so a pure relative test is meaningless near zero.
REL_FLOOR = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def central_difference(f, x, h=1e-6, richardson=False):
    """Numerical gradient of scalar ``f()`` wrt array ``x`` (perturbed in place, then restored).

    ``richardson=True`` combines steps ``h`` and ``h/2`` so a larger ``h`` can be
    used; truncation error drops to O(h^4) and round-off to ~eps/h.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)

    def diff(j, step):
        orig = flat[j]
        flat[j] = orig + step
        up = f()
        flat[j] = orig - step
        down = f()
        flat[j] = orig
        return (up - down) / (2.0 * step)

    for j in range(flat.size):
        step = h * max(1.0, abs(flat[j]))
        if richardson:
            g[j] = (4.0 * diff(j, 0.5 * step) - diff(j, step)) / 3.0
        else:
            g[j] = diff(j, step)
    return grad


def randomize_head(head, rng, logit_scale=1.0):
    """Spread the weights and jitter the particles so no gradient is trivially zero."""
    net = head.net
    for w, b in zip(net.weights, net.biases):
        w[...] = rng.normal(0.0, 1.0 / np.sqrt(w.shape[1]), size=w.shape)
        b[...] = rng.normal(0.0, 0.3, size=b.shape)
    nm = head.n * head.act_dim
    if head.variant in ("pfpn", "discrete", "gmm"):
        net.weights[-1][:nm] *= logit_scale
    if head.variant == "pfpn":
        p = head.particles
        gap = 2.0 / p.n
        p.mu += rng.uniform(-0.3, 0.3, size=p.mu.shape) * gap
        p.log_xi += np.log(rng.uniform(1.0, 2.0, size=p.log_xi.shape))
    if head.variant == "gmm":
        net.weights[-1][nm:] *= 0.1
        net.biases[-1][nm : 2 * nm] = rng.uniform(-1.0, 1.0, nm)
        net.biases[-1][2 * nm :] = np.log(rng.uniform(0.1, 0.5, nm))
    return head


def random_head(variant, rng, obs_dim=3, act_dim=2, n=4, hidden=(5, 4), logit_scale=1.0):
    head = make_head(variant, obs_dim, act_dim, n, list(hidden), rng)
    return randomize_head(head, rng, logit_scale)


def tiny_net(sizes, rng):
    return MlpParams.init(list(sizes), rng, output_scale=1.0)


def head_gradient_errors(head, states, actions, rng, h=1e-6, richardson=False):
    """Max relative error per parameter for a random combination of log-prob and entropy terms."""
    batch = len(states)
    c_logp = rng.normal(size=batch)
    c_ent = rng.normal(size=batch)

    def objective():
        ev = head.evaluate(states, actions)
        return float(c_logp @ ev.logp + c_ent @ ev.entropy)

    ev = head.evaluate(states, actions)
    grads = head.backward(ev, dlogp=c_logp, dentropy=c_ent)
    errors = {}
    for name, p in head.parameters().items():
        errors[name] = float(rel_error(grads[name], central_difference(objective, p, h, richardson)).max())
    return errors


def gauss_legendre(lo, hi, panels=200, order=10):
    """Composite Gauss-Legendre nodes and weights on [lo, hi]."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def per_dimension_log_density(head, states, grid):
    """``log pi_k(grid_g | s_b)`` as (B, G, m), rebuilt from the weights and particles."""
    from pfpn.numerics import logsumexp, normal_log_density

    w = head.weights(np.atleast_2d(states))
    p = head.particles
    x = np.asarray(grid, dtype=np.float64)[None, :, None, None]
    comp = np.log(w)[:, None] + normal_log_density(x, p.mu[None, None], p.log_xi[None, None])
    return logsumexp(comp, axis=2)


def kill_particles(head, states, rng, count, max_weight):
    """Zero the output rows of ``count`` random particles and set their biases so that
    their weight stays below ``max_weight`` on every state in ``states``."""
    from pfpn.numerics import logsumexp, mlp_forward

    n, m = head.n, head.act_dim
    dead = set()
    while len(dead) < count:
        dead.add((int(rng.integers(n)), int(rng.integers(m))))
    W, b = head.final_w, head.final_b
    for i, k in dead:
        W[i * m + k] = 0.0
    out, _ = mlp_forward(head.net, states)
    logits = out.reshape(len(states), n, m)
    for i, k in dead:
        alive = [j for j in range(n) if (j, k) not in dead]
        floor = logsumexp(logits[:, alive, k], axis=1).min()
        # 0.8 leaves room for the other dead particles in the denominator
        b[i * m + k] = np.log(0.8 * max_weight) + floor
    return sorted(dead, key=lambda ik: (ik[1], ik[0]))
