import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intersection_mappo.networks import AdamState, PolicyValueNet, adam_step, gaussian_log_prob
from intersection_mappo.ppo import (
    AdvantageSet,
    Minibatch,
    TrajectoryBatch,
    WorkerData,
    average_gradients,
    clipped_objective,
    critic_loss,
    gae,
    minibatch_gradient,
    normalize_advantages,
    ppo_surrogate,
    td_errors,
    update_epochs,
)


def make_batch(rewards, values, dones, truncated=None, bootstrap=None, obs_dim=2, act_dim=1):
    T = len(rewards)
    truncated = np.zeros(T, bool) if truncated is None else np.asarray(truncated, bool)
    return TrajectoryBatch(
        observations=np.zeros((T, obs_dim)),
        actions=np.zeros((T, act_dim)),
        log_probs=np.zeros(T),
        rewards=np.asarray(rewards, float),
        dones=np.asarray(dones, bool),
        truncated=truncated,
        values=np.asarray(values, float),
        bootstrap_values=np.zeros(T) if bootstrap is None else np.asarray(bootstrap, float),
    )


def random_batch(rng, T):
    """Random boundaries; the last step always closes an episode."""
    ends = rng.random(T) < 0.2
    ends[-1] = True
    kind = rng.random(T) < 0.5
    dones, trunc = ends & kind, ends & ~kind
    return make_batch(rng.normal(0, 10, T), rng.normal(0, 5, T), dones, trunc, np.where(trunc, rng.normal(0, 5, T), 0.0))


def brute_force_advantages(batch, gamma, lam):
    """O(T^2) double sum of discounted TD errors, computed without the recursion."""
    T = len(batch)
    deltas = np.empty(T)
    for t in range(T):
        if batch.dones[t]:
            nxt = 0.0
        elif batch.truncated[t]:
            nxt = batch.bootstrap_values[t]
        else:
            nxt = batch.values[t + 1]
        deltas[t] = batch.rewards[t] + gamma * nxt - batch.values[t]
    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        for l in range(t, T):
            total += (gamma * lam) ** (l - t) * deltas[l]
            if batch.dones[l] or batch.truncated[l]:
                break
        adv[t] = total
    return adv


# -- TD errors and GAE --------------------------------------------------------

def test_td_zero_everywhere():
    b = make_batch(np.zeros(5), np.zeros(5), [0, 0, 0, 0, 1])
    assert np.all(td_errors(b, 0.99) == 0)


def test_td_single_terminal():
    b = make_batch([59.0], [10.0], [True])
    assert td_errors(b, 0.99)[0] == 49.0


def test_td_truncation_bootstraps():
    b = make_batch([1.0, 2.0], [3.0, 4.0], [False, False], [False, True], [0.0, 7.0])
    np.testing.assert_allclose(td_errors(b, 0.5), [1 + 0.5 * 4 - 3, 2 + 0.5 * 7 - 4])


def test_td_random_five_steps_direct_formula():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=5), rng.normal(size=5)
    b = make_batch(r, v, [0, 0, 1, 0, 1])
    expected = [r[0] + 0.9 * v[1] - v[0], r[1] + 0.9 * v[2] - v[1], r[2] - v[2], r[3] + 0.9 * v[4] - v[3], r[4] - v[4]]
    np.testing.assert_allclose(td_errors(b, 0.9), expected, rtol=0, atol=1e-15)


def test_gae_eight_step_two_episode_example():
    rng = np.random.default_rng(1)
    b = make_batch(rng.normal(size=8), rng.normal(size=8), [0, 0, 1, 0, 0, 0, 0, 0],
                   [0, 0, 0, 0, 0, 0, 0, 1], np.r_[np.zeros(7), 0.3])
    adv = gae(b, 0.9, 0.7)
    assert np.max(np.abs(adv.advantages - brute_force_advantages(b, 0.9, 0.7))) < 1e-12
    np.testing.assert_array_equal(adv.targets, adv.advantages + b.values)


def test_gae_matches_brute_force_on_random_batches():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 40))
        b = random_batch(rng, T)
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        worst = max(worst, np.max(np.abs(gae(b, gamma, lam).advantages - brute_force_advantages(b, gamma, lam))))
    assert worst < 1e-12


def test_gae_lambda_zero_is_td():
    b = random_batch(np.random.default_rng(3), 50)
    np.testing.assert_array_equal(gae(b, 0.99, 0.0).advantages, td_errors(b, 0.99))


def test_gae_lambda_one_zero_critic_is_monte_carlo():
    rng = np.random.default_rng(4)
    r = rng.normal(size=12)
    b = make_batch(r, np.zeros(12), np.r_[np.zeros(11), 1])
    expected = [sum(0.99 ** (l - t) * r[l] for l in range(t, 12)) for t in range(12)]
    np.testing.assert_allclose(gae(b, 0.99, 1.0).advantages, expected, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10).filter(lambda c: abs(c) > 1e-3))
def test_gae_linear_in_rewards(seed, c):
    b = random_batch(np.random.default_rng(seed), 30)
    b.values[:] = 0
    b.bootstrap_values[:] = 0
    scaled = make_batch(c * b.rewards, b.values, b.dones, b.truncated, b.bootstrap_values)
    np.testing.assert_allclose(gae(scaled, 0.99, 0.95).advantages, c * gae(b, 0.99, 0.95).advantages,
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_episode_permutation_isolation(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, 40)
    adv = gae(b, 0.99, 0.95).advantages
    ends = np.flatnonzero(b.dones | b.truncated)
    starts = np.r_[0, ends[:-1] + 1]
    episodes = [np.arange(s, e + 1) for s, e in zip(starts, ends)]
    order = rng.permutation(len(episodes))
    idx = np.concatenate([episodes[k] for k in order])
    perm = make_batch(b.rewards[idx], b.values[idx], b.dones[idx], b.truncated[idx], b.bootstrap_values[idx])
    np.testing.assert_array_equal(gae(perm, 0.99, 0.95).advantages, adv[idx])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200).filter(lambda x: np.std(x) > 1e-6))
def test_normalized_advantages(adv):
    out = normalize_advantages(np.array(adv))
    assert abs(out.mean()) < 1e-9
    assert abs(out.std() - 1) < 1e-9


# -- clipped surrogate --------------------------------------------------------

def test_clip_cases_hand_arithmetic():
    obj, d = clipped_objective([1.5], [2.0], 0.2)
    assert obj[0] == pytest.approx(1.2 * 2.0) and d[0] == 0.0
    obj, d = clipped_objective([0.5], [-2.0], 0.2)
    assert obj[0] == pytest.approx(0.8 * -2.0) and d[0] == 0.0
    obj, d = clipped_objective([1.0], [3.0], 0.2)
    assert obj[0] == 3.0 and d[0] == 3.0
    # the unclipped branch binds: A < 0 with a large ratio
    obj, d = clipped_objective([1.5], [-1.0], 0.2)
    assert obj[0] == -1.5 and d[0] == -1.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(-5, 5), st.floats(0.05, 0.5))
def test_clip_zone_gradient_dead(ratio, adv, eps):
    _, d = clipped_objective([ratio], [adv], eps)
    if (adv > 0 and ratio >= 1 + eps) or (adv < 0 and ratio <= 1 - eps):
        assert d[0] == 0.0
    else:
        h = 1e-7
        fd = (clipped_objective([ratio + h], [adv], eps)[0][0] - clipped_objective([ratio - h], [adv], eps)[0][0]) / (2 * h)
        if abs(ratio - (1 + eps)) > 1e-6 and abs(ratio - (1 - eps)) > 1e-6:
            assert d[0] == pytest.approx(fd, abs=1e-6)


def small_setup(seed=0, n=6):
    net = PolicyValueNet(4, 2, hidden=(5, 4))
    params = net.init_params(np.random.default_rng(seed))
    params.values[:] += np.random.default_rng(seed + 1).normal(0, 0.3, params.values.shape)
    rng = np.random.default_rng(seed + 2)
    obs = rng.normal(size=(n, 4))
    policy = net.actor_forward(params, obs)
    actions = policy.mean + policy.std * rng.normal(size=(n, 2))
    old_lp = gaussian_log_prob(policy, actions) + rng.normal(0, 0.3, n)
    mb = Minibatch(obs, actions, old_lp, rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), policy)
    return net, params, mb


def test_ratio_one_loss_is_negative_mean_advantage():
    net, params, mb = small_setup()
    mb.old_log_probs = gaussian_log_prob(net.actor_forward(params, mb.observations), mb.actions)
    loss, grad, info = ppo_surrogate(net, params, mb, 0.2)
    assert loss == pytest.approx(-mb.advantages.mean(), abs=1e-14)
    assert info["clip_frac"] == 0.0
    # vanilla policy gradient: -mean(A * grad log pi)
    policy, cache = net.actor_forward(params, mb.observations, return_cache=True)
    diff = mb.actions - policy.mean
    var = policy.std ** 2
    w = -mb.advantages[:, None] / len(mb.advantages)
    vanilla = net.actor_backward(params, cache, w * diff / var, w * (diff ** 2 / (var * policy.std) - 1 / policy.std))
    np.testing.assert_allclose(grad.values, vanilla.values, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("entropy_coef", [0.0, 0.05])
def test_surrogate_gradient_matches_finite_differences(entropy_coef):
    net, params, mb = small_setup(3)
    _, grad, info = ppo_surrogate(net, params, mb, 0.2, entropy_coef)
    sl = params.network_slice("actor")
    h = 1e-6
    numeric = np.empty(sl.stop - sl.start)
    for k, i in enumerate(range(sl.start, sl.stop)):
        old = params.values[i]
        params.values[i] = old + h
        up = ppo_surrogate(net, params, mb, 0.2, entropy_coef)[0]
        params.values[i] = old - h
        down = ppo_surrogate(net, params, mb, 0.2, entropy_coef)[0]
        params.values[i] = old
        numeric[k] = (up - down) / (2 * h)
    analytic = grad.values[sl]
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-4


def test_fully_clipped_samples_contribute_nothing():
    net, params, mb = small_setup(4)
    lp = gaussian_log_prob(net.actor_forward(params, mb.observations), mb.actions)
    mb.advantages = np.abs(mb.advantages) + 0.1
    mb.old_log_probs = lp - np.log(1.5)  # ratio 1.5 everywhere
    loss, grad, info = ppo_surrogate(net, params, mb, 0.2)
    assert info["clip_frac"] == 1.0
    assert not grad.values.any()
    assert loss == pytest.approx(-1.2 * mb.advantages.mean())


def test_critic_loss_examples():
    net = PolicyValueNet(2, 1, hidden=(3,))
    params = net.zeros()
    params.view("critic.b1")[0] = 1.0  # V == 1
    loss, grad = critic_loss(net, params, np.zeros((1, 2)), [3.0])
    assert loss == 4.0
    loss, grad = critic_loss(net, params, np.zeros((4, 2)), np.ones(4))
    assert loss == 0.0 and not grad.values.any()


@pytest.mark.parametrize("value_clip", [False, True])
def test_critic_gradient_matches_finite_differences(value_clip):
    net, params, mb = small_setup(5)
    kw = dict(old_values=mb.old_values, clip_eps=0.2 if value_clip else None)
    _, grad = critic_loss(net, params, mb.observations, mb.targets, **kw)
    sl = params.network_slice("critic")
    h = 1e-6
    numeric = []
    for i in range(sl.start, sl.stop):
        old = params.values[i]
        params.values[i] = old + h
        up = critic_loss(net, params, mb.observations, mb.targets, **kw)[0]
        params.values[i] = old - h
        down = critic_loss(net, params, mb.observations, mb.targets, **kw)[0]
        params.values[i] = old
        numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)
    assert np.max(np.abs(grad.values[sl] - numeric)) / np.max(np.abs(numeric)) < 1e-4


def test_minibatch_diagnostics_at_old_policy():
    net, params, mb = small_setup(6)
    mb.old_log_probs = gaussian_log_prob(net.actor_forward(params, mb.observations), mb.actions)
    _, stats = minibatch_gradient(net, params, mb, 0.2)
    assert stats["kl"] == 0.0 and stats["clip_frac"] == 0.0


def test_average_gradients_examples():
    g = np.random.default_rng(0).normal(size=20)
    np.testing.assert_array_equal(average_gradients([g] * 4), g)
    assert not average_gradients([g, -g]).any()
    many = [np.random.default_rng(k).normal(size=50) for k in range(16)]
    oracle = np.array([sum(col) / 16 for col in zip(*many)])
    assert np.max(np.abs(average_gradients(many) - oracle)) < 1e-15
    with pytest.raises(ValueError):
        average_gradients([np.zeros(3), np.zeros(4)])


# -- update epochs ------------------------------------------------------------

def synthetic_worker(net, params, T=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(T, net.obs_dim))
    policy = net.actor_forward(params, obs)
    actions = policy.mean + policy.std * rng.normal(size=(T, net.act_dim))
    b = TrajectoryBatch(obs, actions, gaussian_log_prob(policy, actions), rng.normal(size=T),
                        np.r_[np.zeros(T - 1, bool), True], np.zeros(T, bool), net.critic_forward(params, obs), np.zeros(T))
    return WorkerData(b, gae(b, 0.99, 0.95))


def test_zero_lr_leaves_params_and_kl_zero():
    net = PolicyValueNet(4, 2, hidden=(6,))
    params = net.init_params(np.random.default_rng(0))
    before = params.values.copy()
    stats = update_epochs(net, [synthetic_worker(net, params)], [params], [AdamState.for_params(params)],
                          0.0, 3, 8, 0.2, np.random.default_rng(0))
    assert params.values.tobytes() == before.tobytes()
    assert stats["kl"] == 0.0 and stats["clip_frac"] == 0.0


def test_single_full_batch_epoch_is_one_adam_step():
    net = PolicyValueNet(4, 2, hidden=(6,))
    params = net.init_params(np.random.default_rng(1))
    data = synthetic_worker(net, params, seed=1)
    ref = params.copy()
    adv = normalize_advantages(data.advantages.advantages)
    b = data.batch
    mb = Minibatch(b.observations, b.actions, b.log_probs, adv, data.advantages.targets, b.values,
                   net.actor_forward(ref, b.observations))
    g, _ = minibatch_gradient(net, ref, mb, 0.2)
    adam = AdamState.for_params(ref)
    adam_step(ref, g, adam, 1e-3)
    state = AdamState.for_params(params)
    update_epochs(net, [data], [params], [state], 1e-3, 1, len(b), 0.2, np.random.default_rng(0))
    np.testing.assert_allclose(params.values, ref.values, rtol=0, atol=1e-15)
    assert state.t == 1


def test_update_increases_log_prob_of_advantaged_actions():
    net = PolicyValueNet(2, 1, hidden=(8,))
    params = net.init_params(np.random.default_rng(2))
    rng = np.random.default_rng(3)
    T = 64
    obs = rng.normal(size=(T, 2))
    policy = net.actor_forward(params, obs)
    actions = policy.mean + policy.std * rng.normal(size=(T, 1))
    good = actions[:, 0] > policy.mean[:, 0]
    adv = np.where(good, 1.0, -1.0)
    b = TrajectoryBatch(obs, actions, gaussian_log_prob(policy, actions), np.zeros(T),
                        np.r_[np.zeros(T - 1, bool), True], np.zeros(T, bool), np.zeros(T), np.zeros(T))
    before = gaussian_log_prob(net.actor_forward(params, obs[good]), actions[good]).mean()
    update_epochs(net, [WorkerData(b, AdvantageSet(adv, adv))], [params], [AdamState.for_params(params)],
                  1e-3, 4, 16, 0.2, np.random.default_rng(0))
    after = gaussian_log_prob(net.actor_forward(params, obs[good]), actions[good]).mean()
    assert after > before


def test_update_rejects_indivisible_minibatch():
    net = PolicyValueNet(4, 2, hidden=(6,))
    params = net.init_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        update_epochs(net, [synthetic_worker(net, params, T=30)], [params], [AdamState.for_params(params)],
                      1e-3, 1, 8, 0.2, np.random.default_rng(0))


def test_batch_validation():
    b = make_batch([1.0, 2.0], [0.0, 0.0], [True, False])
    with pytest.raises(ValueError):
        b.validate()
    b = make_batch([1.0], [0.0], [True], [True])
    with pytest.raises(ValueError):
        b.validate()
