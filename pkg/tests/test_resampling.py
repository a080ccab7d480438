import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import kill_particles, per_dimension_log_density, random_head
from pfpn.numerics import Adam, ShapeError
from pfpn.resampling import (
    ResampleAssignment,
    ResampleConfig,
    ResampleError,
    WeightTracker,
    detect_dead,
    draw_targets,
    resample,
)

# --- tracker


def test_uniform_snapshot():
    t = WeightTracker(4, 2).track(np.full((4, 2), 0.25))
    np.testing.assert_array_equal(t.max, 0.25)
    np.testing.assert_array_equal(t.mean, 0.25)


def test_two_snapshots():
    t = WeightTracker(2, 1)
    t.track(np.array([[0.2], [0.8]]))
    t.track(np.array([[0.6], [0.4]]))
    assert t.max[0, 0] == 0.6
    assert t.mean[0, 0] == pytest.approx(0.4)
    assert t.count == 2


def test_tracker_replay(rng):
    snaps = rng.dirichlet(np.ones(5), size=(1000, 3)).transpose(0, 2, 1)
    t = WeightTracker(5, 3)
    for s in snaps[:400]:
        t.track(s)
    t.track(snaps[400:])
    np.testing.assert_array_equal(t.max, np.max(snaps, axis=0))
    np.testing.assert_allclose(t.mean, np.mean(snaps, axis=0), rtol=1e-12)


def test_tracker_shape_mismatch():
    with pytest.raises(ShapeError):
        WeightTracker(4, 2).track(np.zeros((2, 4)))


def test_tracker_reset():
    t = WeightTracker(3, 1).track(np.full((3, 1), 1 / 3))
    t.reset()
    assert t.count == 0 and not t.max.any()


# --- detection


def test_uniform_has_no_dead():
    t = WeightTracker(35, 2).track(np.full((35, 2), 1 / 35))
    assert detect_dead(t, 0.0015) == []


def test_threshold():
    w = np.full((3, 1), 0.4995)
    w[1, 0] = 0.001
    assert detect_dead(WeightTracker(3, 1).track(w), 0.0015) == [(1, 0)]


def test_empty_tracker():
    with pytest.raises(ResampleError):
        detect_dead(WeightTracker(3, 1), 0.0015)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dead_matches_scan(seed):
    rng = np.random.default_rng(seed)
    n, m = 8, 3
    snaps = rng.dirichlet(np.full(n, 0.3), size=(20, m)).transpose(0, 2, 1)
    t = WeightTracker(n, m).track(snaps)
    eps = 0.02
    brute = [(i, k) for k in range(m) for i in range(n) if max(s[i, k] for s in snaps) < eps]
    assert detect_dead(t, eps) == brute


# --- target draws


def _tracker_from_means(means):
    means = np.asarray(means, dtype=np.float64)
    return WeightTracker(*means.shape).track(means)


def test_one_alive_particle_is_the_only_target(rng):
    t = _tracker_from_means([[0.0], [0.0], [1.0], [0.0]])
    dead = detect_dead(t, 0.0015)
    a = draw_targets(dead, t, "weighted", rng)
    assert set(a.targets.values()) == {2}
    assert a.dead_sets == {(2, 0): [0, 1, 3]}


@pytest.mark.parametrize("strategy, means, expected", [
    ("weighted", [0.9, 0.1, 0.0], [0.9, 0.1]),
    ("unweighted", [0.5, 0.3, 0.2, 0.0], [1 / 3, 1 / 3, 1 / 3]),
])
def test_target_frequencies(strategy, means, expected, rng):
    t = _tracker_from_means(np.array(means)[:, None])
    dead_idx = len(means) - 1
    draws = 10_000
    counts = np.zeros(len(expected))
    for _ in range(draws):
        counts[draw_targets([(dead_idx, 0)], t, strategy, rng).targets[(dead_idx, 0)]] += 1
    p = np.array(expected)
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma), counts


def test_dead_particles_are_never_targets(rng):
    t = _tracker_from_means(np.array([[0.5, 0.001], [0.001, 0.5], [0.499, 0.499]]))
    dead = detect_dead(t, 0.0015)
    for strategy in ("weighted", "unweighted"):
        for _ in range(200):
            a = draw_targets(dead, t, strategy, rng)
            assert all((tau, k) not in dead for (_, k), tau in a.targets.items())


def test_all_dead_dimension(rng):
    t = _tracker_from_means([[0.001], [0.001]])
    with pytest.raises(ResampleError):
        draw_targets(detect_dead(t, 0.0015), t, "weighted", rng)


def test_unknown_strategy(rng):
    with pytest.raises(ValueError):
        draw_targets([], WeightTracker(2, 1), "greedy", rng)


# --- duplication


def _head(rng, n=6, m=2):
    return random_head("pfpn", rng, act_dim=m, n=n)


def test_single_dead_bias_shift(rng):
    head = _head(rng)
    m = head.act_dim
    b_tau = float(head.final_b[4 * m + 1])
    events = resample(head, ResampleAssignment({(2, 1): 4}), 0.0, rng)
    assert head.final_b[2 * m + 1] == head.final_b[4 * m + 1] == b_tau - np.log(2.0)
    assert events[0].old_bias == b_tau and events[0].new_bias == b_tau - np.log(2.0)
    assert head.particles.mu[2, 1] == head.particles.mu[4, 1]
    assert head.particles.log_xi[2, 1] == head.particles.log_xi[4, 1]
    np.testing.assert_array_equal(head.final_w[2 * m + 1], head.final_w[4 * m + 1])


def test_bias_shift_for_larger_dead_set(rng):
    head = _head(rng)
    m = head.act_dim
    b_tau = float(head.final_b[0])
    resample(head, ResampleAssignment({(1, 0): 0, (3, 0): 0, (5, 0): 0}), 0.0, rng)
    for i in (0, 1, 3, 5):
        assert head.final_b[i * m] == b_tau - np.log(4.0)


def test_empty_assignment_is_noop(rng):
    head = _head(rng)
    before = {k: v.copy() for k, v in head.parameters().items()}
    assert resample(head, ResampleAssignment(), 0.05, rng) == []
    for k, v in head.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_untouched_entries_are_bit_identical(rng):
    head = _head(rng)
    m = head.act_dim
    before = {k: v.copy() for k, v in head.parameters().items()}
    resample(head, ResampleAssignment({(0, 0): 3}), 0.05, rng)
    touched_rows = {0 * m + 0, 3 * m + 0}
    for r in range(head.final_w.shape[0]):
        if r not in touched_rows:
            np.testing.assert_array_equal(head.final_w[r], before["final.W"][r])
            assert head.final_b[r] == before["final.b"][r]
    mask = np.ones((head.n, m), dtype=bool)
    mask[0, 0] = False
    np.testing.assert_array_equal(head.particles.mu[mask], before["particles.mu"][mask])
    np.testing.assert_array_equal(head.particles.log_xi[mask], before["particles.log_xi"][mask])
    for k in before:
        if k.startswith("trunk"):
            np.testing.assert_array_equal(head.parameters()[k], before[k])


def test_location_jitter_is_bounded(rng):
    head = _head(rng, n=10, m=1)
    for _ in range(200):
        mu_tau = head.particles.mu[7, 0]
        resample(head, ResampleAssignment({(2, 0): 7}), 0.05, rng)
        assert abs(head.particles.mu[2, 0] - mu_tau) <= 0.05 * 0.2


def test_target_in_dead_set_is_rejected(rng):
    head = _head(rng)
    with pytest.raises(ResampleError):
        resample(head, ResampleAssignment({(1, 0): 2, (2, 0): 3}), 0.0, rng)


def test_non_pfpn_head_is_rejected(rng):
    with pytest.raises(TypeError):
        resample(random_head("gmm", rng), ResampleAssignment({(0, 0): 1}), 0.0, rng)


def test_adam_moments_reset(rng):
    head = _head(rng)
    m = head.act_dim
    opt = Adam(lr=1e-3)
    params = head.parameters()
    opt.step(params, {k: np.ones_like(v) for k, v in params.items()})
    resample(head, ResampleAssignment({(1, 1): 0}), 0.0, rng, optimizer=opt)
    row = 1 * m + 1
    assert not opt.m["final.W"][row].any() and not opt.v["final.W"][row].any()
    assert opt.m["final.b"][row] == 0.0
    assert opt.m["particles.mu"][1, 1] == 0.0 and opt.v["particles.log_xi"][1, 1] == 0.0
    assert opt.m["final.W"][0].all() and opt.m["particles.mu"][0, 1] != 0.0
    # the target keeps its moments
    assert opt.m["final.b"][0 * m + 1] != 0.0


def test_policy_unchanged_with_negligible_dead_mass(rng):
    head = random_head("pfpn", rng, act_dim=3, n=12, hidden=(8, 8))
    states = rng.normal(size=(16, 3))
    kill_particles(head, states, rng, 5, 1e-9)
    tracker = WeightTracker(head.n, head.act_dim).track(head.weights(states))
    dead = detect_dead(tracker, 0.0015)
    assert len(dead) == 5
    grid = np.linspace(-1.2, 1.2, 101)
    before = per_dimension_log_density(head, states, grid)
    full_before = head.log_prob(np.repeat(states, 101, axis=0), np.tile(grid, 16)[:, None].repeat(3, axis=1))
    resample(head, draw_targets(dead, tracker, "weighted", rng), 0.0, rng)
    after = per_dimension_log_density(head, states, grid)
    full_after = head.log_prob(np.repeat(states, 101, axis=0), np.tile(grid, 16)[:, None].repeat(3, axis=1))
    assert np.max(np.abs(after - before)) <= 1e-6
    assert np.max(np.abs(full_after - full_before)) <= 1e-6


def test_config_validation():
    ResampleConfig().validate(35)
    with pytest.raises(ValueError):
        ResampleConfig(epsilon=0.03).validate(35)
    with pytest.raises(ValueError):
        ResampleConfig(strategy="sorted").validate()
    with pytest.raises(ValueError):
        ResampleConfig(interval=0).validate()
    with pytest.raises(ValueError):
        ResampleConfig(interval_unit="hours").validate()
    with pytest.raises(ValueError):
        ResampleConfig(noise_scale=-1.0).validate()
