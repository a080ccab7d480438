"""On-policy training: rollouts, GAE, PPO and REINFORCE updates, the resampling loop.

Also hosts :func:`variance_probe`, which measures how the variance of the
policy-gradient estimate grows with the number of particles.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import make_env
from .numerics import Adam, MlpParams, mlp_backward, mlp_forward
from .policy import DiscreteHead, ParticleSet, PFPNHead, PolicyHead, make_head
from .resampling import WeightTracker, detect_dead, draw_targets, resample

log = logging.getLogger(__name__)

ALGORITHMS = ("ppo", "reinforce")


class TrainingError(RuntimeError):
    pass


class RolloutError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"environment failed at rollout step {step}: {cause!r}")


@dataclass
class TrainerConfig:
    algorithm: str = "ppo"
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    lr: float = 1e-4
    epochs: int = 3
    minibatch_size: int = 256
    samples_per_iteration: int = 4096
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_iterations: int = 100
    value_hidden: list[int] = field(default_factory=lambda: [64, 64])
    baseline_decay: float = 0.9

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("gamma", "gae_lambda"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError(f"clip_range must lie in (0, 1), got {self.clip_range}")
        for name in ("epochs", "minibatch_size", "samples_per_iteration"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.lr > 0.0:
            raise ValueError("lr must be positive")


# --------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    chosen: np.ndarray | None
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    cuts: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    weights: np.ndarray | None
    episode_returns: list[float]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def episodes(self) -> int:
        return len(self.episode_returns)


class EnvRunner:
    """An environment plus the episode it is in the middle of."""

    def __init__(self, env):
        self.env = env
        self.obs = env.reset()
        self.ep_return = 0.0

    def collect(self, head: PolicyHead, steps: int, rng):
        m = head.act_dim
        states = np.empty((steps, head.obs_dim))
        raw = np.empty((steps, m))
        actions = np.empty((steps, m))
        chosen = np.empty((steps, m), dtype=np.int64)
        rewards = np.empty(steps)
        dones = np.zeros(steps, dtype=bool)
        has_weights = isinstance(head, (PFPNHead, DiscreteHead)) or head.variant == "gmm"
        weights = np.empty((steps, head.n, m)) if has_weights else None
        finished = []
        next_obs = np.empty((steps, head.obs_dim))
        for t in range(steps):
            states[t] = self.obs
            s = head.sample(self.obs, rng, with_log_prob=False)
            raw[t], actions[t] = s.raw, s.action
            if s.chosen is not None:
                chosen[t] = s.chosen
            if weights is not None:
                weights[t] = s.weights
            try:
                result = self.env.step(s.action)
            except Exception as exc:
                raise RolloutError(t, exc) from exc
            rewards[t] = result.reward
            self.ep_return += result.reward
            next_obs[t] = result.obs
            if result.done:
                dones[t] = True
                finished.append(self.ep_return)
                self.ep_return = 0.0
                self.obs = self.env.reset()
            else:
                self.obs = result.obs
        # same parameter snapshot as the per-step draws, evaluated in one batch
        logps = head.log_prob(states, raw)
        return dict(
            states=states, actions=actions, raw_actions=raw,
            chosen=chosen if s.chosen is not None else None,
            log_probs=logps, rewards=rewards, dones=dones, weights=weights,
            episode_returns=finished, next_obs=next_obs,
        )


def _value(value_net, states):
    if value_net is None:
        return np.zeros(len(states))
    out, _ = mlp_forward(value_net, states)
    return out[:, 0]


def collect_rollout(runners, head: PolicyHead, steps: int, rngs, value_net=None, tracker=None,
                    pool: ThreadPoolExecutor | None = None) -> RolloutBatch:
    """Collect exactly ``steps`` transitions with a fixed policy snapshot.

    ``runners``/``rngs`` may be single objects or equal-length lists (one per
    worker). Worker segments are concatenated in worker order; the last step
    of each segment is a cut for advantage estimation and is bootstrapped
    with the value of its next observation.
    """
    if not isinstance(runners, (list, tuple)):
        runners, rngs = [runners], [rngs]
    runners = [r if isinstance(r, EnvRunner) else EnvRunner(r) for r in runners]
    workers = len(runners)
    share = [steps // workers + (1 if w < steps % workers else 0) for w in range(workers)]
    jobs = [(r, s, g) for r, s, g in zip(runners, share, rngs) if s > 0]
    if pool is not None and len(jobs) > 1:
        parts = list(pool.map(lambda job: job[0].collect(head, job[1], job[2]), jobs))
    else:
        parts = [r.collect(head, s, g) for r, s, g in jobs]

    def cat(key):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts])

    dones = cat("dones")
    cuts = dones.copy()
    ends = np.cumsum([len(p["rewards"]) for p in parts]) - 1
    cuts[ends] = True
    states = cat("states")
    values = _value(value_net, states)
    next_values = np.empty_like(values)
    next_values[:-1] = values[1:]
    next_values[ends] = _value(value_net, np.stack([p["next_obs"][-1] for p in parts]))
    next_values[dones] = 0.0
    weights = cat("weights")
    if tracker is not None and weights is not None:
        tracker.track(weights)
    returns = [ret for p in parts for ret in p["episode_returns"]]
    return RolloutBatch(
        states=states, actions=cat("actions"), raw_actions=cat("raw_actions"), chosen=cat("chosen"),
        log_probs=cat("log_probs"), rewards=cat("rewards"), dones=dones, cuts=cuts,
        values=values, next_values=next_values, weights=weights, episode_returns=returns,
    )


# --------------------------------------------------------------------------
# advantages


def gae(rewards, values, next_values, dones, gamma, lam, cuts=None):
    """Generalized advantage estimates and returns (un-normalized).

    ``next_values[t]`` is V(s_{t+1}); it is ignored where ``dones[t]``. The
    recursion restarts after every index in ``cuts`` (defaults to ``dones``).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    cuts = np.asarray(dones if cuts is None else cuts, dtype=bool)
    delta = rewards + gamma * np.asarray(next_values) * not_done - values
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if cuts[t]:
            running = 0.0
        running = delta[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def normalize(x):
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    return (x - x.mean()) / std if std > 0 else x - x.mean()


def compute_gae(batch: RolloutBatch, gamma: float, lam: float, normalize_advantages=True):
    adv, ret = gae(batch.rewards, batch.values, batch.next_values, batch.dones, gamma, lam, batch.cuts)
    batch.returns = ret
    batch.advantages = normalize(adv) if normalize_advantages else adv
    return batch.advantages, batch.returns


# --------------------------------------------------------------------------
# updates


def clipped_surrogate(ratio, advantages, clip):
    """Per-sample clipped objective and its derivative wrt the ratio."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use_unclipped = unclipped <= clipped
    objective = np.where(use_unclipped, unclipped, clipped)
    return objective, np.where(use_unclipped, adv, 0.0)


def _check_finite(stats, context):
    bad = {k: v for k, v in stats.items() if isinstance(v, float) and not np.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss during {context}: {bad}")


def ppo_update(batch: RolloutBatch, head: PolicyHead, value_net: MlpParams, config: TrainerConfig,
               optimizer: Adam, rng) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches, one Adam step each."""
    if batch.advantages is None:
        raise TrainingError("advantages must be computed before ppo_update")
    params = {**head.parameters(), **value_net.named("value")}
    size = len(batch)
    policy_losses, value_losses, clip_fracs, kls, entropies = [], [], [], [], []
    first_ratio_dev = None
    for epoch in range(config.epochs):
        order = rng.permutation(size)
        for start in range(0, size, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            mb = len(idx)
            adv = batch.advantages[idx]
            ev = head.evaluate(batch.states[idx], batch.raw_actions[idx])
            log_ratio = ev.logp - batch.log_probs[idx]
            ratio = np.exp(log_ratio)
            if first_ratio_dev is None:
                first_ratio_dev = float(np.max(np.abs(ratio - 1.0)))
            objective, d_ratio = clipped_surrogate(ratio, adv, config.clip_range)
            policy_loss = -float(objective.mean())
            entropy = float(ev.entropy.mean())
            v_pred, v_cache = mlp_forward(value_net, batch.states[idx])
            v_err = v_pred[:, 0] - batch.returns[idx]
            value_loss = float(np.mean(v_err**2))
            stats = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy}
            _check_finite(stats, f"epoch {epoch}, minibatch starting at {start}")
            dlogp = -d_ratio * ratio / mb
            dent = np.full(mb, -config.entropy_coef / mb) if config.entropy_coef else None
            grads = head.backward(ev, dlogp=dlogp, dentropy=dent)
            v_grads, _ = mlp_backward(value_net, v_cache, (config.value_coef * 2.0 * v_err / mb)[:, None])
            grads.update(v_grads.named("value"))
            optimizer.step(params, grads)
            policy_losses.append(policy_loss)
            value_losses.append(value_loss)
            clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > config.clip_range)))
            kls.append(float(np.mean(-log_ratio)))
            entropies.append(entropy)
    return {
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
        "clip_fraction": float(np.mean(clip_fracs)),
        "approx_kl": float(np.mean(kls)),
        "entropy": float(np.mean(entropies)),
        "first_ratio_deviation": first_ratio_dev,
    }


class RunningBaseline:
    """Exponential moving average of batch-mean rewards, seeded with the first batch."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value = None

    def update(self, rewards) -> float:
        mean = float(np.mean(rewards))
        self.value = mean if self.value is None else self.decay * self.value + (1.0 - self.decay) * mean
        return self.value


def reinforce_gradient(batch: RolloutBatch, head: PolicyHead, baseline: float):
    """Gradient of the loss ``-mean(A * log pi)`` with ``A = r - baseline``."""
    adv = batch.rewards - baseline
    ev = head.evaluate(batch.states, batch.raw_actions)
    grads = head.backward(ev, dlogp=-adv / len(batch))
    return grads, adv, ev


def reinforce_update(batch: RolloutBatch, head: PolicyHead, config: TrainerConfig, optimizer: Adam,
                     baseline: RunningBaseline, rng=None) -> dict:
    """One full-batch policy-gradient step for one-step episodes."""
    if not np.all(batch.dones):
        raise TrainingError("reinforce_update expects one-step episodes")
    b = baseline.update(batch.rewards)
    grads, adv, ev = reinforce_gradient(batch, head, b)
    policy_loss = -float(np.mean(adv * ev.logp))
    entropy = float(ev.entropy.mean())
    if config.entropy_coef:
        ent_grads = head.backward(ev, dentropy=np.full(len(batch), -config.entropy_coef / len(batch)))
        for name, g in ent_grads.items():
            grads[name] = grads[name] + g
    _check_finite({"policy_loss": policy_loss, "entropy": entropy}, "reinforce update")
    optimizer.step(head.parameters(), grads)
    return {
        "policy_loss": policy_loss,
        "value_loss": float("nan"),
        "clip_fraction": 0.0,
        "approx_kl": 0.0,
        "entropy": entropy,
        "baseline": b,
    }


# --------------------------------------------------------------------------
# gradient variance vs. number of atomic actions


@dataclass
class VarianceProbeReport:
    n: list[int]
    variance: list[float]
    discrete_variance: list[float]
    samples: int
    seed: int | None

    def rows(self):
        for n, v, d in zip(self.n, self.variance, self.discrete_variance):
            yield {"n": n, "variance": v, "discrete_variance": d, "samples": self.samples, "seed": self.seed}


def canonical_heads(n: int):
    """PFPN and DISCRETE heads with equal logits and particles at ``(i - n) / n``, scale ``1/n``.

    Both heads have no trunk: a single zero output layer on a 1-d state.
    """
    net = MlpParams([np.zeros((n, 1))], [np.zeros(n)], ["identity"])
    mu = ((np.arange(1, n + 1) - n) / n)[:, None]
    pfpn = PFPNHead(net, ParticleSet(mu, np.full((n, 1), np.log(1.0 / n))))
    discrete = DiscreteHead(MlpParams([np.zeros((n, 1))], [np.zeros(n)], ["identity"]), 1, n)
    return pfpn, discrete


def _gradient_variance(head: PolicyHead, samples: int, rng, advantage=1.0):
    states = np.zeros((samples, 1))
    s = head.sample(states, rng)
    ev = head.evaluate(states, s.raw)
    g = advantage * ev.dlogp_out
    return float(np.var(g, axis=0, ddof=1).sum())


def variance_probe(n_list, samples: int, rng, seed=None) -> VarianceProbeReport:
    """Total variance of the one-sample logit gradient ``A * d log pi / d logits`` (A = 1), per ``n``."""
    if samples < 10_000:
        raise ValueError("variance probe needs at least 10^4 samples")
    pf, dv = [], []
    for n in n_list:
        pfpn, discrete = canonical_heads(int(n))
        pf.append(_gradient_variance(pfpn, samples, rng))
        dv.append(_gradient_variance(discrete, samples, rng))
    return VarianceProbeReport([int(n) for n in n_list], pf, dv, samples, seed)


# --------------------------------------------------------------------------
# evaluation and the training loop


def evaluate_policy(head: PolicyHead, env_factory, episodes: int):
    """Run ``episodes`` deterministic episodes side by side. Returns (returns, lengths, final infos)."""
    envs = [env_factory(i) for i in range(episodes)]
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=int)
    infos = [None] * episodes
    active = np.ones(episodes, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        acts = np.clip(np.atleast_2d(head.deterministic_action(obs[idx])), -1.0, 1.0)
        for j, e_idx in enumerate(idx):
            r = envs[e_idx].step(acts[j])
            returns[e_idx] += r.reward
            lengths[e_idx] += 1
            obs[e_idx] = r.obs
            if r.done:
                active[e_idx] = False
                infos[e_idx] = r.info
    return returns, lengths, infos


@dataclass
class TrainResult:
    head: PolicyHead
    value_net: MlpParams | None
    metrics: list[dict]
    out_dir: Path | None
    final_eval_infos: list = field(default_factory=list)


def _env_params(env_cfg) -> dict:
    return {k: v for k, v in asdict(env_cfg).items() if k != "name"}


def train(config, out_dir=None) -> TrainResult:
    """Run the full loop: collect, estimate advantages, update, then (every interval) resample.

    ``config`` is a :class:`pfpn.harness.config.ExperimentConfig`. When
    ``out_dir`` is given, metrics/particles/events CSVs and checkpoints are
    written there. Any failure writes a final checkpoint before re-raising.
    """
    from .harness import artifacts as art
    from .harness.checkpoint import save_checkpoint

    tc: TrainerConfig = config.trainer
    rc = config.resample
    tc.validate()
    ss = np.random.SeedSequence(config.seed)
    init_ss, update_ss, resample_ss = ss.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    update_rng = np.random.default_rng(update_ss)
    resample_rng = np.random.default_rng(resample_ss)
    workers = max(1, int(getattr(config, "workers", 1)))
    rollout_rngs = [np.random.default_rng(config.seed + w) for w in range(workers)]

    env_params = _env_params(config.env)
    runners = [EnvRunner(make_env(config.env.name, seed=config.seed + w, **env_params)) for w in range(workers)]
    spec = runners[0].env.spec
    hc = config.head
    head = make_head(hc.variant, spec.obs_dim, spec.act_dim, hc.n, hc.hidden, init_rng,
                     init_std=hc.init_std, output_scale=hc.output_scale)
    use_ppo = tc.algorithm == "ppo"
    value_net = MlpParams.init([spec.obs_dim, *tc.value_hidden, 1], init_rng) if use_ppo else None
    optimizer = Adam(lr=tc.lr)
    baseline = RunningBaseline(tc.baseline_decay)
    resampling = rc.enabled and isinstance(head, PFPNHead)
    if resampling:
        rc.validate(head.n)
    tracker = WeightTracker(head.n, head.act_dim) if resampling else None

    def eval_env(i):
        return make_env(config.env.name, seed=10_000 + config.seed + i, **env_params)

    out = Path(out_dir) if out_dir is not None else None
    logs = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        metrics_log = art.CsvLog(out / "metrics.csv", art.METRICS_COLUMNS)
        particles_log = art.CsvLog(out / "particles.csv", art.PARTICLES_COLUMNS)
        events_log = art.CsvLog(out / "events.csv", art.EVENTS_COLUMNS)
        logs = [metrics_log, particles_log, events_log]
        save_checkpoint(out / "checkpoints" / "iter_000000.pfpn", head, value_net)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    metrics = []
    env_steps = 0
    since_resample = 0
    final_infos = []
    iteration = 0
    try:
        for iteration in range(1, tc.max_iterations + 1):
            batch = collect_rollout(runners, head, tc.samples_per_iteration, rollout_rngs, value_net, tracker, pool)
            env_steps += len(batch)
            if use_ppo:
                compute_gae(batch, tc.gamma, tc.gae_lambda)
                stats = ppo_update(batch, head, value_net, tc, optimizer, update_rng)
            else:
                stats = reinforce_update(batch, head, tc, optimizer, baseline)

            dead_count, n_events = 0, 0
            if resampling:
                since_resample += batch.episodes if rc.interval_unit == "episodes" else len(batch)
                if since_resample >= rc.interval:
                    dead = detect_dead(tracker, rc.epsilon)
                    dead_count = len(dead)
                    if dead:
                        assignment = draw_targets(dead, tracker, rc.strategy, resample_rng)
                        events = resample(head, assignment, rc.noise_scale, resample_rng, optimizer)
                        n_events = len(events)
                        if out is not None:
                            for e in events:
                                events_log.write({"iteration": iteration, **asdict(e)})
                    tracker.reset()
                    since_resample = 0

            eval_reward = float("nan")
            if config.eval.every > 0 and (iteration % config.eval.every == 0 or iteration == tc.max_iterations):
                rets, _, final_infos = evaluate_policy(head, eval_env, config.eval.episodes)
                eval_reward = float(rets.mean())
            train_reward = float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan")
            row = {
                "iteration": iteration,
                "env_steps": env_steps,
                "mean_train_reward": train_reward,
                "mean_eval_reward": eval_reward,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "clip_fraction": stats["clip_fraction"],
                "entropy": stats["entropy"],
                "dead_particle_count": dead_count,
                "resample_events": n_events,
            }
            metrics.append(row)
            if out is not None:
                metrics_log.write(row)
                if isinstance(head, PFPNHead):
                    mean_w = batch.weights.mean(axis=0)
                    xi = head.particles.xi
                    for k in range(head.act_dim):
                        for i in range(head.n):
                            particles_log.write({
                                "iteration": iteration, "dimension": k, "particle": i,
                                "mu": float(head.particles.mu[i, k]), "xi": float(xi[i, k]),
                                "mean_weight": float(mean_w[i, k]),
                            })
            log.debug("iteration %d: %s", iteration, row)
    finally:
        if pool is not None:
            pool.shutdown()
        if out is not None:
            for lg in logs:
                lg.close()
            save_checkpoint(out / "checkpoints" / "final.pfpn", head, value_net)
    return TrainResult(head, value_net, metrics, out, final_infos)
