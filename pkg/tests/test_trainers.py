import math
from dataclasses import replace

import numpy as np
import pytest

from evotree import trainers as tr
from evotree import transfer as tx
from evotree.errors import InvalidInputError, SimulationError

THETA = dict(mass=1.0, gain_x=1.0, gain_y=1.0, damping=0.5, limit=2.0)


def make_trainer(**kw):
    return tr.ToyMdpTrainer(tr.toy_space(), **kw)


def alpha_for(trainer, **theta):
    keymap = {
        "mass": "body.torso.mass",
        "gain_x": "motor.x.gain",
        "gain_y": "motor.y.gain",
        "damping": "body.damping",
        "limit": "motor.limit",
    }
    space = trainer.space
    vals = {keymap[k]: v for k, v in theta.items()}
    vec = np.array([vals[k] for k in space.parameter_keys])
    return (vec - space.theta_lower) / (space.theta_upper - space.theta_lower)


class TestCostModel:
    def test_fixed_step_cost(self):
        t = tr.CostModelTrainer()
        out = t.train_step(object(), (0.5, 0.5), seed=0)
        assert (out.train_iterations, out.sim_episodes) == (1, 10)

    def test_additivity(self):
        t = tr.CostModelTrainer()
        iters = eps = 0
        for k in range(17):
            out = t.train_step(object(), (0.1 * k, 0.0), seed=k)
            iters += out.train_iterations
            eps += out.sim_episodes
        assert (iters, eps) == (17, 170)

    def test_configured_episode_cost(self):
        t = tr.CostModelTrainer(sim_episodes_per_step=4)
        assert t.train_step(object(), (0.0,), seed=0).sim_episodes == 4

    def test_evaluate_succeeds_free(self):
        t = tr.CostModelTrainer()
        ev = t.evaluate(object(), (0.2,), episodes=30, seed=1)
        assert ev.success_rate == 1.0 and ev.sim_episodes == 0


class TestToyMdpStep:
    def test_zero_action_zero_velocity_fixed_point(self):
        s = tr.ToyMdpState(
            position=np.array([0.3, 0.4]),
            velocity=np.zeros(2),
            goal=np.array([1.0, 1.0]),
            step=0,
        )
        s2 = tr.toy_mdp_step(s, np.zeros(2), THETA)
        assert np.array_equal(s2.position, s.position)
        assert np.array_equal(s2.velocity, s.velocity)
        assert s2.step == 1

    def test_doubling_mass_halves_velocity_increment(self):
        s = tr.ToyMdpState(
            position=np.zeros(2),
            velocity=np.zeros(2),
            goal=np.ones(2),
            step=0,
        )
        a = np.array([1.0, 0.5])
        light = tr.toy_mdp_step(s, a, THETA)
        heavy = tr.toy_mdp_step(s, a, {**THETA, "mass": 2.0})
        assert np.allclose(heavy.velocity, light.velocity / 2)

    def test_damping_monotone(self):
        s = tr.ToyMdpState(
            position=np.zeros(2),
            velocity=np.array([1.0, -1.0]),
            goal=np.ones(2),
            step=0,
        )
        a = np.zeros(2)
        speeds = []
        for c in [0.2, 0.6, 1.2, 2.0]:
            nxt = tr.toy_mdp_step(s, a, {**THETA, "damping": c})
            speeds.append(float(np.linalg.norm(nxt.velocity)))
        assert all(x > y for x, y in zip(speeds, speeds[1:]))

    def test_action_clipped_to_limit(self):
        s = tr.ToyMdpState(
            position=np.zeros(2),
            velocity=np.zeros(2),
            goal=np.ones(2),
            step=0,
        )
        big = tr.toy_mdp_step(s, np.array([50.0, 0.0]), THETA)
        capped = tr.toy_mdp_step(s, np.array([THETA["limit"], 0.0]), THETA)
        assert np.allclose(big.velocity, capped.velocity)

    def test_non_finite_rejected(self):
        s = tr.ToyMdpState(
            position=np.zeros(2),
            velocity=np.zeros(2),
            goal=np.ones(2),
            step=0,
        )
        with pytest.raises(SimulationError):
            tr.toy_mdp_step(s, np.array([np.nan, 0.0]), THETA)

    def test_continuity_in_theta(self):
        s = tr.ToyMdpState(
            position=np.array([0.1, 0.2]),
            velocity=np.array([0.4, -0.1]),
            goal=np.ones(2),
            step=0,
        )
        a = np.array([0.6, 0.3])
        base = tr.toy_mdp_step(s, a, THETA)
        for eps in [1e-2, 1e-4, 1e-6]:
            th = {k: v + eps for k, v in THETA.items()}
            nxt = tr.toy_mdp_step(s, a, th)
            delta = np.linalg.norm(nxt.velocity - base.velocity) + np.linalg.norm(
                nxt.position - base.position
            )
            assert delta < 10 * eps


class TestRollout:
    def test_deterministic_given_seed(self):
        t = make_trainer()
        a = alpha_for(t, mass=1.0, gain_x=1.2, gain_y=1.2, damping=0.5, limit=2.4)
        pol = tr.proportional_policy(1.2, 0.8, 0.12)
        r1, s1, ep1 = t.rollout(pol, a, seed=123)
        r2, s2, ep2 = t.rollout(pol, a, seed=123)
        assert r1 == r2 and s1 == s2 and len(ep1) == len(ep2)
        for x, y in zip(ep1, ep2):
            assert np.array_equal(x.position, y.position)
            assert np.array_equal(x.velocity, y.velocity)

    def test_zero_policy_fails(self):
        t = make_trainer()
        a = alpha_for(t, **dict(THETA, limit=2.0))
        dead = tr.LinearGaussianPolicy(np.zeros((2, 4)), np.full(2, np.log(0.01)))
        ret, success, _ = t.rollout(dead, a, seed=5)
        assert ret == 0.0 and not success

    def test_controller_reaches_goal_on_source(self):
        t = make_trainer()
        a = alpha_for(t, mass=1.0, gain_x=1.2, gain_y=1.2, damping=0.5, limit=2.4)
        pol = tr.proportional_policy(1.2, 0.8, 0.12)
        wins = sum(t.rollout(pol, a, seed=s)[1] for s in range(100))
        assert wins >= 95

    def test_evaluate_matches_mean_success(self):
        t = make_trainer()
        a = alpha_for(t, mass=1.0, gain_x=1.2, gain_y=1.2, damping=0.5, limit=2.4)
        pol = tr.proportional_policy(1.2, 0.8, 0.12)
        ev = t.evaluate(pol, a, episodes=64, seed=9)
        assert 0.9 <= ev.success_rate <= 1.0
        assert ev.sim_episodes == 64


def bandit_batch(policy, n, seed, reward_fn):
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-1.0, 1.0, (n, 1, 4))
    std = np.exp(policy.log_std)
    batch = []
    for i in range(n):
        mu = feats[i] @ policy.weights.T
        act = mu + std * rng.standard_normal(2)
        batch.append((feats[i], act, reward_fn(feats[i][0], act[0])))
    return batch


def surrogate(policy, batch):
    """The objective pg_train_step ascends, evaluated at arbitrary weights."""
    returns = np.array([b[2] for b in batch])
    adv = returns - returns.mean()
    var = np.exp(2.0 * policy.log_std)
    total = 0.0
    steps = 0
    for (feats, acts, _), a_k in zip(batch, adv):
        steps += len(feats)
        mu = feats @ policy.weights.T
        logp = -0.5 * np.sum((acts - mu) ** 2 / var)
        total += a_k * logp
    return total / steps


class TestPolicyGradient:
    def test_zero_return_batch_unchanged(self):
        pol = tr.proportional_policy(1.0, 0.5, 0.2)
        batch = bandit_batch(pol, 8, 3, lambda f, a: 0.0)
        out = tr.pg_train_step(pol, batch)
        assert np.array_equal(out.weights, pol.weights)
        assert np.array_equal(out.log_std, pol.log_std)

    def test_gradient_matches_finite_difference(self):
        pol = tr.proportional_policy(0.7, 0.3, 0.25)
        batch = bandit_batch(
            pol, 10000, 11, lambda f, a: -float((a[0] - 0.5) ** 2)
        )
        out = tr.pg_train_step(pol, batch, learning_rate=1.0, max_grad_norm=np.inf)
        analytic = out.weights - pol.weights
        h = 1e-6
        for idx in [(0, 0), (0, 2), (1, 1), (1, 3)]:
            wp = pol.copy()
            wp.weights[idx] += h
            wm = pol.copy()
            wm.weights[idx] -= h
            fd = (surrogate(wp, batch) - surrogate(wm, batch)) / (2 * h)
            assert analytic[idx] == pytest.approx(fd, rel=0.01, abs=1e-12)

    def test_bandit_estimator_unbiased(self):
        # quadratic bandit with fixed feature: closed-form expected-return
        # gradient vs the REINFORCE estimate over 10^4 samples
        rng = np.random.default_rng(17)
        sigma = 0.3
        w0 = 0.4
        pol = tr.LinearGaussianPolicy(
            np.array([[w0, 0, 0, 0], [0, 0, 0, 0.0]]),
            np.full(2, np.log(sigma)),
        )
        phi = np.array([1.0, 0.0, 0.0, 0.0])
        n = 10000
        acts = w0 + sigma * rng.standard_normal(n)
        rewards = -((acts - 1.0) ** 2)
        # estimator with baseline, per-step normalization (T=1 each)
        adv = rewards - rewards.mean()
        est = float(np.mean(adv * (acts - w0) / sigma**2))
        analytic = -2.0 * (w0 - 1.0)
        se = float(np.std(adv * (acts - w0) / sigma**2, ddof=1) / math.sqrt(n))
        assert abs(est - analytic) < 3 * se

    def test_divergence_raises(self):
        pol = tr.proportional_policy(1.0, 0.5, 0.2)
        feats = np.full((1, 4), np.inf)
        acts = np.zeros((1, 2))
        with np.errstate(invalid="ignore"), pytest.raises(Exception):
            tr.pg_train_step(pol, [(feats, acts, 1.0), (feats, acts, 0.0)])

    def test_training_regression_near_success(self):
        # warm policy on a hard robot climbs to 0.8 within 500 iterations
        t = make_trainer(learning_rate=0.3)
        a = alpha_for(
            t, mass=1.7, gain_x=0.26, gain_y=0.26, damping=1.15, limit=2.0
        )
        good = 0
        for seed in range(5):
            pol = tr.proportional_policy(1.2, 0.8, 0.12)
            reached = False
            for it in range(500):
                pol = t.train_step(pol, a, seed=[seed, it]).policy
                if it % 20 == 19:
                    ev = t.evaluate(pol, a, 30, seed=[seed, 7000 + it])
                    if ev.success_rate >= 0.8:
                        reached = True
                        break
            good += reached
        assert good >= 4


class TestGradientSign:
    def test_gain_dimension_sign_agreement(self):
        # wide gain range so the marginal band sits clear of the bounds
        space = tr.toy_space(lower={"motor.x.gain": 0.1, "motor.y.gain": 0.1})
        t = tr.ToyMdpTrainer(space, probe_episodes=24)
        pol = tr.proportional_policy(1.2, 0.8, 0.12)
        vals = {
            "body.torso.mass": 1.8,
            "motor.x.gain": 0.25,
            "motor.y.gain": 0.5,
            "body.damping": 1.25,
            "motor.limit": 2.0,
        }
        vec = np.array([vals[k] for k in space.parameter_keys])
        base = (vec - space.theta_lower) / (space.theta_upper - space.theta_lower)
        gain_dim = space.parameter_keys.index("motor.x.gain")
        agree = 0
        trials = 4
        for seed in range(trials):
            cfg = tx.TransferConfig(
                xi=0.12, p_norm=1, gradient_samples=12, seed=seed
            )
            est = tx.estimate_reward_gradient(t, base, pol, cfg, seed_material=[seed])
            h = 0.08
            up = base.copy()
            up[gain_dim] += h
            dn = base.copy()
            dn[gain_dim] -= h
            f_up = np.mean(
                [t.evaluate(pol, up, 64, seed=[seed, k]).success_rate for k in range(2)]
            )
            f_dn = np.mean(
                [t.evaluate(pol, dn, 64, seed=[seed, k]).success_rate for k in range(2)]
            )
            oracle_sign = np.sign(f_up - f_dn)
            if oracle_sign != 0 and np.sign(est.gradient[gain_dim]) == oracle_sign:
                agree += 1
        assert agree >= trials - 1


class TestPolicyValidation:
    def test_bad_shapes_rejected(self):
        with pytest.raises(InvalidInputError):
            tr.LinearGaussianPolicy(np.zeros((3, 4)), np.zeros(2))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            tr.LinearGaussianPolicy(np.full((2, 4), np.nan), np.zeros(2))

    def test_copy_is_independent(self):
        pol = tr.proportional_policy(1.0, 0.5, 0.2)
        cp = pol.copy()
        cp.weights[0, 0] = 99.0
        assert pol.weights[0, 0] == 1.0
