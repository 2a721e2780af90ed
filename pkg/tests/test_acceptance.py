"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS/FAIL lines.
Tolerances are pinned here and nowhere else.
"""

import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

from evotree import evo_tree as et
from evotree import geometry as geo
from evotree import trainers as tr
from evotree import transfer as tx
from evotree.cli import main as cli_main

CLUSTER = dict(src=(0.0, 0.0), tgts=[(1.0, 0.8), (0.95, 1.0), (0.6, 0.9)])
TWO_NEAR = dict(src=(0.0, 0.5), tgts=[(1.0, 0.55), (1.0, 0.45)])
OPPOSITE = dict(src=(0.5, 0.5), tgts=[(0.0, 0.5), (1.0, 0.5)])
COST_CFG = tx.TransferConfig(xi=0.01, p_norm=1, gradient_samples=0)


def verdict(name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def l2_angle_residuals(tree):
    out = [0.0]
    for s in tree.steiner_ids:
        nb = tree.neighbors(s)
        for a, b in itertools.combinations(range(len(nb)), 2):
            ea = tree.vertices[nb[a]] - tree.vertices[s]
            eb = tree.vertices[nb[b]] - tree.vertices[s]
            c = float(np.dot(ea, eb) / (np.linalg.norm(ea) * np.linalg.norm(eb)))
            out.append(abs(math.acos(max(-1.0, min(1.0, c))) - 2 * math.pi / 3))
    return out


def test_steiner_suite():
    t0 = time.time()
    rng = np.random.default_rng(20240)
    exact_hits = 0
    exact_total = 0
    worst_angle = 0.0
    for i in range(200):
        p = 1 if i % 2 == 0 else 2
        n = int(rng.integers(3, 9))
        d = int(rng.choice([2, 3, 5]))
        pts = rng.random((n, d))
        mst = geo.minimum_spanning_tree(pts, p)
        st = geo.steiner_tree(pts, p, "heuristic")
        assert st.length <= mst.length + 1e-9, (i, st.length, mst.length)
        assert st.length >= mst.length / 2 - 1e-9, (i, st.length, mst.length)
        geo.validate_tree(st)
        if p == 2:
            deg = st.degrees()
            for s in st.steiner_ids:
                assert deg[s] == 3
            worst_angle = max(worst_angle, max(l2_angle_residuals(st)))
        if p == 1 and n <= 4 and d <= 3:
            exact = geo.steiner_tree(pts, 1, "exact-small")
            exact_total += 1
            assert st.length >= exact.length - 1e-9
            if st.length <= exact.length + 1e-9:
                exact_hits += 1
    elapsed = time.time() - t0
    ok = (
        worst_angle <= 1e-6
        and exact_total > 0
        and exact_hits >= 0.95 * exact_total
        and elapsed < 60.0
    )
    verdict(
        "steiner-suite",
        ok,
        f"200 instances, angle residual {worst_angle:.2e}, "
        f"exact match {exact_hits}/{exact_total}, {elapsed:.1f}s",
    )


def test_clamp_identity():
    t0 = time.time()
    matches = 0
    total = 0
    seed = 0
    while total < 100:
        rng = np.random.default_rng(31000 + seed)
        seed += 1
        n = int(rng.integers(2, 5))
        d = int(rng.integers(2, 4))
        alpha = rng.random(d)
        targets = rng.random((n, d))
        cm = et.clamp_meta(alpha, targets)
        if np.allclose(cm, alpha, atol=1e-12):
            continue  # inside the target box: the trunk is empty
        res = et.evolution_tree(alpha, targets, 1, "exact-small")
        total += 1
        if np.max(np.abs(res.beta_meta - cm)) <= 1e-9:
            matches += 1
    elapsed = time.time() - t0
    ok = matches == total and elapsed < 30.0
    verdict("clamp-identity", ok, f"{matches}/{total} exact, {elapsed:.1f}s")


def test_cost_model_speedups():
    t0 = time.time()
    trainer = tr.CostModelTrainer()

    def speedup(fix):
        meta = tx.meta_evolve(fix["src"], fix["tgts"], object(), trainer, COST_CFG)
        herd = tx.herd_baseline(fix["src"], fix["tgts"], object(), trainer, COST_CFG)
        _, ms = tx.aggregate_totals(meta)
        _, hs = tx.aggregate_totals(herd)
        return hs / ms

    s_cluster = speedup(CLUSTER)
    s_near = speedup(TWO_NEAR)
    s_opp = speedup(OPPOSITE)
    elapsed = time.time() - t0
    ok = (
        1.5 <= s_cluster <= 3.0
        and abs(s_near - 1.909) <= 0.05
        and abs(s_opp - 1.0) <= 0.05
        and elapsed < 10.0
    )
    verdict(
        "cost-model-speedup",
        ok,
        f"cluster {s_cluster:.3f}, two-near {s_near:.3f}, opposite {s_opp:.3f},"
        f" {elapsed:.1f}s",
    )


def test_sharing_contract():
    trainer = tr.CostModelTrainer()
    ok = True
    detail = []
    for name, fix in [("cluster", CLUSTER), ("two-near", TWO_NEAR), ("opposite", OPPOSITE)]:
        reports = tx.meta_evolve(fix["src"], fix["tgts"], object(), trainer, COST_CFG)
        for i in range(len(reports)):
            for j in range(i + 1, len(reports)):
                a = [p.phase_id for p in reports[i].phases]
                b = [p.phase_id for p in reports[j].phases]
                k = 0
                while k < min(len(a), len(b)) and a[k] == b[k]:
                    k += 1
                if not set(a[k:]).isdisjoint(b[k:]):
                    ok = False
                    detail.append(f"{name}:{i}-{j}")
    verdict("sharing-contract", ok, "all fixtures" if ok else ",".join(detail))


def _sphere_max(alpha, beta, grad, cfg):
    def neg(u):
        l = cfg.xi * u / np.linalg.norm(u)
        return -(
            float(np.dot(grad, l))
            - cfg.lambda_ / 2.0 * float(np.sum((beta - alpha - l) ** 2))
        )

    rng = np.random.default_rng(1)
    best = None
    for _ in range(30):
        res = optimize.minimize(neg, rng.standard_normal(len(alpha)))
        if res.success and (best is None or res.fun < best.fun):
            best = res
    return cfg.xi * best.x / np.linalg.norm(best.x)


def test_step_rule():
    rng = np.random.default_rng(505)
    worst_cos = 1.0
    checked = 0
    while checked < 100:
        d = int(rng.integers(2, 6))
        cfg = tx.TransferConfig(
            xi=0.05, lambda_=float(rng.uniform(1.0, 2.0)), p_norm=2
        )
        alpha = rng.uniform(0.2, 0.8, d)
        beta = rng.uniform(0.2, 0.8, d)
        grad = rng.normal(0.0, 0.6, d)
        if np.linalg.norm(beta - alpha) < 2 * cfg.xi:
            continue
        step = tx.evolution_step(alpha, beta, grad, cfg)
        oracle = _sphere_max(alpha, beta, grad, cfg)
        cos = float(np.dot(step, oracle)) / (
            np.linalg.norm(step) * np.linalg.norm(oracle)
        )
        worst_cos = min(worst_cos, cos)
        checked += 1
    # full-run box containment
    trainer = tr.CostModelTrainer()
    in_box = True
    for fix in (CLUSTER, TWO_NEAR, OPPOSITE):
        reports = tx.meta_evolve(fix["src"], fix["tgts"], object(), trainer, COST_CFG)
        for rep in reports:
            for ph in rep.phases:
                pts = np.array([ph.alpha_from, ph.alpha_to])
                if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
                    in_box = False
    ok = worst_cos >= 1 - 1e-3 and in_box
    verdict(
        "step-rule", ok, f"worst direction cosine {worst_cos:.6f}, in-box={in_box}"
    )


def test_gradient_fidelity():
    # (a) deterministic gradient check of the policy-gradient surrogate
    pol = tr.proportional_policy(0.7, 0.3, 0.25)
    rng = np.random.default_rng(99)
    feats = rng.uniform(-1.0, 1.0, (10000, 1, 4))
    std = np.exp(pol.log_std)
    batch = []
    for i in range(10000):
        mu = feats[i] @ pol.weights.T
        act = mu + std * rng.standard_normal(2)
        batch.append((feats[i], act, -float((act[0, 0] - 0.5) ** 2)))
    out = tr.pg_train_step(pol, batch, learning_rate=1.0, max_grad_norm=np.inf)
    analytic = out.weights - pol.weights

    def surrogate(policy):
        returns = np.array([b[2] for b in batch])
        adv = returns - returns.mean()
        var = np.exp(2.0 * policy.log_std)
        total = 0.0
        steps = 0
        for (f, a, _), a_k in zip(batch, adv):
            steps += len(f)
            mu = f @ policy.weights.T
            total += a_k * (-0.5 * float(np.sum((a - mu) ** 2 / var)))
        return total / steps

    max_rel = 0.0
    h = 1e-6
    for idx in [(0, 0), (0, 2), (1, 1), (1, 3)]:
        wp = pol.copy()
        wp.weights[idx] += h
        wm = pol.copy()
        wm.weights[idx] -= h
        fd = (surrogate(wp) - surrogate(wm)) / (2 * h)
        rel = abs(analytic[idx] - fd) / max(abs(fd), 1e-12)
        max_rel = max(max_rel, rel)
    bandit_ok = max_rel < 0.01

    # (b) sign agreement of the fitted reward gradient on the x-gain axis
    space = tr.toy_space(lower={"motor.x.gain": 0.1, "motor.y.gain": 0.1})
    trainer = tr.ToyMdpTrainer(space, probe_episodes=24)
    vals = {
        "body.torso.mass": 1.8,
        "motor.x.gain": 0.25,
        "motor.y.gain": 0.5,
        "body.damping": 1.25,
        "motor.limit": 2.0,
    }
    vec = np.array([vals[k] for k in space.parameter_keys])
    base = (vec - space.theta_lower) / (space.theta_upper - space.theta_lower)
    gd = space.parameter_keys.index("motor.x.gain")
    pol2 = tr.proportional_policy(1.2, 0.8, 0.12)
    agree = 0
    for seed in range(10):
        cfg = tx.TransferConfig(xi=0.12, p_norm=1, gradient_samples=12, seed=seed)
        est = tx.estimate_reward_gradient(
            trainer, base, pol2, cfg, seed_material=[seed]
        )
        h2 = 0.08
        up = base.copy()
        up[gd] += h2
        dn = base.copy()
        dn[gd] -= h2
        f_up = np.mean(
            [trainer.evaluate(pol2, up, 64, seed=[seed, k]).success_rate for k in range(2)]
        )
        f_dn = np.mean(
            [trainer.evaluate(pol2, dn, 64, seed=[seed, k]).success_rate for k in range(2)]
        )
        sign = np.sign(f_up - f_dn)
        if sign != 0 and np.sign(est.gradient[gd]) == sign:
            agree += 1
    sign_ok = agree >= 9
    ok = bandit_ok and sign_ok
    verdict(
        "gradient-fidelity",
        ok,
        f"bandit rel err {max_rel:.2e}, sign agreement {agree}/10",
    )


def _toy_problem():
    space = tr.toy_space()
    trainer = tr.ToyMdpTrainer(space, learning_rate=0.3)
    keymap = {
        "mass": "body.torso.mass",
        "gain_x": "motor.x.gain",
        "gain_y": "motor.y.gain",
        "damping": "body.damping",
        "limit": "motor.limit",
    }

    def alpha_of(**theta):
        vals = {keymap[k]: v for k, v in theta.items()}
        vec = np.array([vals[k] for k in space.parameter_keys])
        return (vec - space.theta_lower) / (space.theta_upper - space.theta_lower)

    src = alpha_of(mass=1.0, gain_x=1.2, gain_y=1.2, damping=0.5, limit=2.4)
    tgts = np.array(
        [
            alpha_of(mass=1.8, gain_x=0.24, gain_y=0.26, damping=1.2, limit=2.0),
            alpha_of(mass=1.7, gain_x=0.26, gain_y=0.23, damping=1.15, limit=1.95),
            alpha_of(mass=1.75, gain_x=0.22, gain_y=0.27, damping=1.25, limit=2.05),
        ]
    )
    expert = tr.proportional_policy(1.2, 0.8, 0.12)
    return trainer, src, tgts, expert


def test_end_to_end_toy_transfer():
    t0 = time.time()
    trainer, src, tgts, expert = _toy_problem()
    source_rate = trainer.evaluate(expert, src, 100, seed=[424]).success_rate
    assert source_rate >= 0.95, f"expert only reaches {source_rate} on the source"
    good_seeds = 0
    details = []
    for seed in range(5):
        cfg = tx.TransferConfig(
            xi=0.03,
            p_norm=1,
            gradient_samples=0,
            seed=seed,
            final_success_threshold=0.9,
            max_phase_iterations=200,
        )
        meta = tx.meta_evolve(src, tgts, expert, trainer, cfg)
        herd = tx.herd_baseline(src, tgts, expert, trainer, cfg)
        _, ms = tx.aggregate_totals(meta)
        _, hs = tx.aggregate_totals(herd)
        finals = [
            trainer.evaluate(
                rep.policy, tgts[rep.target_index], 100, seed=[seed, 4242]
            ).success_rate
            for rep in meta
        ]
        seed_ok = (
            all(f >= 0.80 for f in finals)
            and ms <= hs
            and all(r.outcome == "success" for r in meta + herd)
        )
        good_seeds += seed_ok
        details.append(
            f"seed{seed}: meta={ms} herd={hs} finals="
            + "/".join(f"{f:.2f}" for f in finals)
        )
    elapsed = time.time() - t0
    ok = good_seeds >= 4 and elapsed < 900.0
    verdict(
        "end-to-end-toy",
        ok,
        f"{good_seeds}/5 seeds ok, source expert {source_rate:.2f}, "
        f"{elapsed:.0f}s; " + "; ".join(details),
    )


def test_report_determinism(tmp_path):
    import os

    fixtures = os.path.join(os.path.dirname(__file__), "..", "fixtures", "planar")
    robots = [
        os.path.join(fixtures, f)
        for f in ["source.json", "target_a.json", "target_b.json", "target_c.json"]
    ]
    payloads = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        code = cli_main(
            [
                "transfer",
                "--robots",
                *robots,
                "--trainer",
                "cost",
                "--seed",
                "99",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        payloads.append((out / "report.json").read_bytes())
    ok = payloads[0] == payloads[1]
    verdict("determinism", ok, f"{len(payloads[0])} bytes, byte-identical={ok}")
