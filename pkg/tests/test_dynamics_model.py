import numpy as np
import pytest

from intersection_mappo.dynamics_model import KinematicsModel, ModelRolloutConfig, imagine_rollout
from intersection_mappo.env import EnvConfig, EnvState, IntersectionEnv
from intersection_mappo.geometry import VehicleType
from intersection_mappo.networks import PolicyValueNet


def random_state(cfg, rng, paths):
    types = cfg.types
    n = len(types)
    d = np.array([rng.uniform(-cfg.d_pass + 0.01, paths[t].center_offset) for t in types])
    passed = rng.random(n) < 0.15
    d[passed] = -cfg.d_pass
    return EnvState(types, d, rng.uniform(0, cfg.v_max, n), passed, np.zeros(n, bool),
                    int(rng.integers(0, cfg.max_steps)))


def test_env_without_noise_equals_model_bitwise(paths):
    cfg = EnvConfig()
    env = IntersectionEnv(cfg, paths=paths, seed=0)
    model = KinematicsModel(cfg, paths=paths)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        state = random_state(cfg, rng, paths)
        action = rng.uniform(-5, 5, 8)
        env.set_state(state)
        s_env, out_env = env.step(action, noise_on=False)
        s_mod, out_mod = model.imagine_step(state, action)
        assert s_env == s_mod
        assert out_env.reward == out_mod.reward
        assert out_env.done == out_mod.done
        assert out_env.events == out_mod.events
        assert out_env.observation.tobytes() == out_mod.observation.tobytes()


def test_constant_speed_step():
    cfg = EnvConfig(vehicles=("DU",))
    model = KinematicsModel(cfg)
    state = EnvState((VehicleType.DU,), np.array([30.0]), np.array([10.0]), np.zeros(1, bool), np.zeros(1, bool))
    nxt, _ = model.imagine_step(state, [0.0])
    assert state.d[0] - nxt.d[0] == pytest.approx(1.0, abs=1e-12)
    assert nxt.v[0] == 10.0


def test_model_does_not_consume_randomness():
    model = KinematicsModel(seed=0)
    model.reset()
    before = model.rng.bit_generator.state
    model.step(np.zeros(8))
    assert model.rng.bit_generator.state == before


@pytest.mark.parametrize("horizon", [0, -5])
def test_nonpositive_horizon_rejected(horizon):
    with pytest.raises(ValueError):
        ModelRolloutConfig(horizon=horizon)


def test_unknown_restart_rejected():
    with pytest.raises(ValueError):
        ModelRolloutConfig(restart="teleport")


def _rollout(seed, horizon=300, start_states=None, restart="reset"):
    cfg = EnvConfig(vehicles=("RL", "UD"))
    net = PolicyValueNet(4, 2, hidden=(8, 8))
    params = net.init_params(np.random.default_rng(0))
    model = KinematicsModel(cfg)
    return imagine_rollout(model, net, params, ModelRolloutConfig(horizon, restart), seed, start_states)


def test_imagined_batch_shape_and_determinism():
    a = _rollout(5)
    b = _rollout(5)
    c = _rollout(6)
    assert len(a) == 300
    a.validate()
    for name in ("observations", "actions", "log_probs", "rewards", "dones", "values"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.observations.tobytes() != c.observations.tobytes()


def test_imagined_batch_respects_env_invariants():
    batch = _rollout(1, horizon=500)
    obs = batch.observations
    assert np.all(obs[:, 1::2] >= 0) and np.all(obs[:, 1::2] <= 1)
    assert np.all(obs[:, 0::2] >= -15 / 50) and np.all(obs[:, 0::2] <= 1)
    allowed = {-1.0 + 10 * k + c for k in range(3) for c in (0.0, -50.0)} | {-1.0 + 10 + 50, -1.0 + 20 + 50}
    assert set(np.unique(batch.rewards)) <= allowed
    assert batch.dones.any() or batch.truncated.any()


def test_real_state_restarts():
    env = IntersectionEnv(EnvConfig(vehicles=("RL", "UD")), seed=0)
    start, _ = env.reset()
    batch = _rollout(0, horizon=50, start_states=[start], restart="real_states")
    np.testing.assert_array_equal(batch.observations[0], np.r_[start.d[0] / 50, start.v[0] / 15,
                                                               start.d[1] / 50, start.v[1] / 15])
