"""Dead-particle detection and distribution-preserving particle duplication."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Adam, ShapeError
from .policy import PFPNHead

STRATEGIES = ("weighted", "unweighted")
INTERVAL_UNITS = ("episodes", "steps")


class ResampleError(RuntimeError):
    pass


@dataclass
class ResampleConfig:
    epsilon: float = 0.0015
    interval: int = 20
    strategy: str = "weighted"
    noise_scale: float = 0.05
    enabled: bool = True
    interval_unit: str = "episodes"

    def validate(self, n: int | None = None):
        if self.interval_unit not in INTERVAL_UNITS:
            raise ValueError(f"interval_unit must be one of {INTERVAL_UNITS}, got {self.interval_unit!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.epsilon > 0.0 or (n is not None and not self.epsilon < 1.0 / n):
            raise ValueError(f"epsilon must lie in (0, 1/n), got {self.epsilon}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be >= 0")


class WeightTracker:
    """Running per-particle max and mean of observed weights since the last reset."""

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self.reset()

    def reset(self):
        self.max = np.zeros((self.n, self.m))
        self.total = np.zeros((self.n, self.m))
        self.count = 0

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((self.n, self.m))
        return self.total / self.count

    def track(self, snapshot) -> WeightTracker:
        """Record one ``(n, m)`` weight matrix or a stack ``(B, n, m)`` of them."""
        w = np.asarray(snapshot, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.shape[1:] != (self.n, self.m):
            raise ShapeError(f"snapshot shape {w.shape[1:]} does not match tracker ({self.n}, {self.m})")
        if w.shape[0] == 0:
            return self
        np.maximum(self.max, w.max(axis=0), out=self.max)
        self.total += w.sum(axis=0)
        self.count += w.shape[0]
        return self


def detect_dead(tracker: WeightTracker, epsilon: float) -> list[tuple[int, int]]:
    """``(i, k)`` pairs whose max observed weight is below ``epsilon``, sorted by (k, i)."""
    if tracker.count == 0:
        raise ResampleError("weight tracker holds no observations")
    dead = np.argwhere(tracker.max < epsilon)
    return sorted(((int(i), int(k)) for i, k in dead), key=lambda ik: (ik[1], ik[0]))


@dataclass
class ResampleAssignment:
    targets: dict = field(default_factory=dict)

    @property
    def dead_sets(self) -> dict[tuple[int, int], list[int]]:
        """``(target, dimension) -> [dead particles]`` in ascending order."""
        out: dict[tuple[int, int], list[int]] = {}
        for (i, k), tau in sorted(self.targets.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            out.setdefault((tau, k), []).append(i)
        return out

    def __len__(self):
        return len(self.targets)


def draw_targets(dead, tracker: WeightTracker, strategy: str, rng) -> ResampleAssignment:
    """Pick an alive target in the same dimension for every dead particle.

    Weighted draws follow the tracked mean weights of the alive particles;
    unweighted draws are uniform over them. Dead particles are never targets.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    dead = sorted(dead, key=lambda ik: (ik[1], ik[0]))
    dead_by_dim: dict[int, list[int]] = {}
    for i, k in dead:
        dead_by_dim.setdefault(k, []).append(i)
    assignment = ResampleAssignment()
    means = tracker.mean
    for k in sorted(dead_by_dim):
        dead_k = set(dead_by_dim[k])
        alive = np.array([i for i in range(tracker.n) if i not in dead_k], dtype=int)
        if alive.size == 0:
            raise ResampleError(f"every particle on dimension {k} is dead")
        if strategy == "weighted":
            p = means[alive, k]
            total = p.sum()
            p = p / total if total > 0 else np.full(alive.size, 1.0 / alive.size)
        else:
            p = np.full(alive.size, 1.0 / alive.size)
        for i in sorted(dead_k):
            assignment.targets[(i, k)] = int(alive[rng.choice(alive.size, p=p)])
    return assignment


@dataclass
class ResampleEvent:
    dimension: int
    dead: int
    target: int
    old_bias: float
    new_bias: float


def resample(head: PFPNHead, assignment: ResampleAssignment, noise_scale: float, rng,
             optimizer: Adam | None = None) -> list[ResampleEvent]:
    """Duplicate targets onto their dead particles in place.

    For a target ``tau`` with dead set ``D``: each dead particle copies the
    target's particle parameters (location jittered uniformly within
    ``noise_scale * 2/n``) and its output row, and both the dead and the target
    biases become ``b_tau - log(|D| + 1)``. The ``|D| + 1`` copies then split
    the target's original mass evenly, so the policy is unchanged up to the
    mass the dead particles carried. Adam moments of overwritten entries are
    zeroed.

    Returns one event per dead particle; ``old_bias`` is the target's bias
    before the shift.
    """
    if not isinstance(head, PFPNHead):
        raise TypeError("resampling applies to PFPN heads only")
    if not assignment.targets:
        return []
    dead_all = set(assignment.targets)
    n, m = head.n, head.act_dim
    gap = 2.0 / n
    p = head.particles
    W, b = head.final_w, head.final_b
    events = []
    for (tau, k), dead_set in assignment.dead_sets.items():
        if (tau, k) in dead_all:
            raise ResampleError(f"target particle {tau} on dimension {k} is itself dead")
        row_t = tau * m + k
        old = float(b[row_t])
        new = old - np.log(len(dead_set) + 1.0)
        for i in dead_set:
            row_i = i * m + k
            p.log_xi[i, k] = p.log_xi[tau, k]
            jitter = rng.uniform(-1.0, 1.0) * noise_scale * gap if noise_scale > 0 else 0.0
            p.mu[i, k] = p.mu[tau, k] + jitter
            W[row_i] = W[row_t]
            b[row_i] = new
            if optimizer is not None:
                optimizer.reset("particles.mu", (i, k))
                optimizer.reset("particles.log_xi", (i, k))
                optimizer.reset("final.W", row_i)
                optimizer.reset("final.b", row_i)
            events.append(ResampleEvent(k, i, tau, old, new))
        b[row_t] = new
    return events
