"""Trainer implementations behind one contract.

CostModelTrainer: deterministic plan-level accounting. Every training step
costs one iteration and a fixed number of simulated episodes, and the
policy passes the success gate immediately, so transfer totals reduce to
phase counts. This instantiates the assumption that transfer cost is
locally proportional to parameter distance.

ToyMdpTrainer: a parameterized point-mass reach task with a linear Gaussian
policy trained by REINFORCE with a baseline. Robot parameters (mass, per
axis actuator gain, damping, actuator limit) enter the transition function,
so moving in evolution coordinates genuinely changes the dynamics. Reward
is sparse: 1 when the goal is reached within the horizon, else 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import InvalidInputError, PhaseFailureError, SimulationError
from .robot_model import EvolutionSpace, denormalize

DT = 0.05
HORIZON = 200
GOAL_RADIUS = 0.1
BATCH_SIZE = 12
LEARNING_RATE = 0.05
# archival full-scale policy-gradient step size, kept as a named preset
FULL_SCALE_LEARNING_RATE = 1e-4

# canonical parameter keys the toy trainer expects in an evolution space
TOY_PARAM_ROLES = {
    "mass": "body.torso.mass",
    "gain_x": "motor.x.gain",
    "gain_y": "motor.y.gain",
    "damping": "body.damping",
    "limit": "motor.limit",
}


@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    sim_episodes: int


@dataclass(frozen=True)
class TrainStepResult:
    policy: object
    train_iterations: int
    sim_episodes: int


@dataclass(frozen=True)
class ProbeResult:
    mean_return: float
    sim_episodes: int


class Trainer(Protocol):
    """Contract used by the transfer engine.

    evaluate must be deterministic given (seed, alpha, policy); every
    train_step reports strictly positive cost.
    """

    def evaluate(self, policy, alpha, episodes: int, seed) -> EvalResult: ...

    def train_step(self, policy, alpha, seed) -> TrainStepResult: ...

    def gradient_probe(self, policy, alpha, seed) -> ProbeResult: ...


# ---------------------------------------------------------------------------
# Cost-model trainer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModelTrainer:
    """Fixed-cost trainer: one iteration and sim_episodes_per_step per phase."""

    sim_episodes_per_step: int = 10

    def evaluate(self, policy, alpha, episodes: int, seed) -> EvalResult:
        return EvalResult(success_rate=1.0, sim_episodes=0)

    def train_step(self, policy, alpha, seed) -> TrainStepResult:
        return TrainStepResult(
            policy=policy,
            train_iterations=1,
            sim_episodes=self.sim_episodes_per_step,
        )

    def gradient_probe(self, policy, alpha, seed) -> ProbeResult:
        return ProbeResult(mean_return=0.0, sim_episodes=0)


# ---------------------------------------------------------------------------
# Toy point-mass MDP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyMdpState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    step: int


@dataclass
class LinearGaussianPolicy:
    """Gaussian policy with linear mean over [goal - pos, vel] features.

    Deliberately no constant feature: a constant-thrust term is a runaway
    direction for sparse-reward gradient training on this task.
    """

    weights: np.ndarray  # (2, 4)
    log_std: np.ndarray  # (2,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.weights.shape != (2, 4) or self.log_std.shape != (2,):
            raise InvalidInputError("policy shapes must be (2, 4) and (2,)")
        if not (
            np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.log_std))
        ):
            raise InvalidInputError("policy parameters must be finite")

    def copy(self) -> "LinearGaussianPolicy":
        return LinearGaussianPolicy(self.weights.copy(), self.log_std.copy())

    def mean_action(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T


def proportional_policy(kp: float, kd: float, std: float) -> LinearGaussianPolicy:
    """P-D controller as a policy: a = kp * (goal - pos) - kd * vel."""
    w = np.array(
        [
            [kp, 0.0, -kd, 0.0],
            [0.0, kp, 0.0, -kd],
        ]
    )
    return LinearGaussianPolicy(weights=w, log_std=np.full(2, np.log(std)))


def _theta_roles(theta: np.ndarray, indices: dict[str, int]) -> dict[str, float]:
    return {role: float(theta[i]) for role, i in indices.items()}


def toy_mdp_step(state: ToyMdpState, action, theta: dict[str, float]) -> ToyMdpState:
    """One explicit-Euler step of the point mass.

    position' = position + velocity * dt
    velocity' = velocity + dt * (gain * clipped_action - damping * velocity) / mass
    """
    a = np.asarray(action, dtype=float)
    if not (
        np.all(np.isfinite(a))
        and np.all(np.isfinite(state.position))
        and np.all(np.isfinite(state.velocity))
    ):
        raise SimulationError("non-finite state or action")
    limit = theta["limit"]
    a = np.clip(a, -limit, limit)
    gain = np.array([theta["gain_x"], theta["gain_y"]])
    new_pos = state.position + state.velocity * DT
    new_vel = state.velocity + DT * (
        gain * a - theta["damping"] * state.velocity
    ) / theta["mass"]
    if not (np.all(np.isfinite(new_pos)) and np.all(np.isfinite(new_vel))):
        raise SimulationError("non-finite simulation output")
    return ToyMdpState(
        position=new_pos, velocity=new_vel, goal=state.goal, step=state.step + 1
    )


MAX_GRAD_NORM = 25.0
LOG_STD_BOUNDS = (-2.3, 1.0)


def pg_train_step(
    policy: LinearGaussianPolicy,
    batch: Sequence[tuple[np.ndarray, np.ndarray, float]],
    learning_rate: float = LEARNING_RATE,
    max_grad_norm: float = MAX_GRAD_NORM,
    baselines: Optional[np.ndarray] = None,
) -> LinearGaussianPolicy:
    """REINFORCE with a baseline on one batch of episodes.

    batch entries are (features[T, 4], actions[T, 2], episode_return); T may
    differ per episode (episodes are truncated once the goal is reached).
    baselines, when given, must be action-independent per-episode values
    (e.g. a return prediction from the episode's start state); the default
    is the batch mean return. The combined gradient norm is capped at
    max_grad_norm; pass inf to disable.
    """
    if not batch:
        raise InvalidInputError("batch must be non-empty")
    returns = np.array([ep[2] for ep in batch], dtype=float)
    if baselines is None:
        adv = returns - float(returns.mean())
    else:
        adv = returns - np.asarray(baselines, dtype=float)
    if np.all(adv == 0.0):
        return policy
    var = np.exp(2.0 * policy.log_std)
    grad_w = np.zeros_like(policy.weights)
    grad_ls = np.zeros_like(policy.log_std)
    total_steps = 0
    for (feats, acts, _), a_k in zip(batch, adv):
        total_steps += len(feats)
        if a_k == 0.0:
            continue
        mu = feats @ policy.weights.T
        delta = (acts - mu) / var
        grad_w += a_k * delta.T @ feats
        grad_ls += a_k * np.sum(delta * (acts - mu) - 1.0, axis=0)
    # normalize per timestep, not per episode: keeps one long failure
    # episode from dominating a mostly-successful batch
    scale = max(total_steps, 1)
    grad_w /= scale
    grad_ls /= scale
    if not (np.all(np.isfinite(grad_w)) and np.all(np.isfinite(grad_ls))):
        raise PhaseFailureError("policy gradient diverged (non-finite)")
    total = math.sqrt(float(np.sum(grad_w**2) + np.sum(grad_ls**2)))
    if total > max_grad_norm:
        scale = max_grad_norm / total
        grad_w = grad_w * scale
        grad_ls = grad_ls * scale
    new_w = policy.weights + learning_rate * grad_w
    # keep an exploration floor so sparse-reward training cannot silence itself
    new_ls = np.clip(policy.log_std + learning_rate * grad_ls, LOG_STD_BOUNDS[0], LOG_STD_BOUNDS[1])
    return LinearGaussianPolicy(weights=new_w, log_std=new_ls)


@dataclass
class ToyMdpTrainer:
    """Point-mass reach task over a 5-parameter evolution space."""

    space: EvolutionSpace
    batch_size: int = BATCH_SIZE
    probe_episodes: int = 8
    learning_rate: float = LEARNING_RATE
    goal_center: tuple[float, float] = (1.0, 1.0)
    goal_jitter: float = 0.45
    start_jitter: float = 0.15
    _role_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        keys = list(self.space.parameter_keys)
        self._role_index = {}
        for role, key in TOY_PARAM_ROLES.items():
            if key not in keys:
                raise InvalidInputError(
                    f"toy trainer needs parameter key {key!r} in the evolution space"
                )
            self._role_index[role] = keys.index(key)

    # -- dynamics ----------------------------------------------------------

    def theta_at(self, alpha) -> dict[str, float]:
        theta = denormalize(np.asarray(alpha, dtype=float), self.space)
        return _theta_roles(theta, self._role_index)

    def _simulate(
        self, policy: LinearGaussianPolicy, alpha, episodes: int, seed
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized rollouts truncated at first goal contact.

        Returns (returns, features[T,n,4], actions[T,n,2], success, steps);
        steps[e] is the number of live steps episode e contributes.
        """
        th = self.theta_at(alpha)
        rng = np.random.default_rng(seed)
        n = episodes
        pos = rng.uniform(-self.start_jitter, self.start_jitter, (n, 2))
        vel = np.zeros((n, 2))
        goal = np.asarray(self.goal_center) + rng.uniform(
            -self.goal_jitter, self.goal_jitter, (n, 2)
        )
        noise = rng.standard_normal((HORIZON, n, 2))
        std = np.exp(policy.log_std)
        gain = np.array([th["gain_x"], th["gain_y"]])
        success = np.zeros(n, dtype=bool)
        steps = np.zeros(n, dtype=int)
        feats_hist = np.zeros((HORIZON, n, 4))
        acts_hist = np.zeros((HORIZON, n, 2))
        for t in range(HORIZON):
            live = ~success
            if not np.any(live):
                break
            feats = np.concatenate([goal - pos, vel], axis=1)
            mu = feats @ policy.weights.T
            act = mu + std * noise[t]
            feats_hist[t] = np.where(live[:, None], feats, 0.0)
            acts_hist[t] = np.where(live[:, None], act, 0.0)
            steps[live] = t + 1
            a = np.clip(act, -th["limit"], th["limit"])
            new_pos = pos + vel * DT
            new_vel = vel + DT * (gain * a - th["damping"] * vel) / th["mass"]
            pos = np.where(live[:, None], new_pos, pos)
            vel = np.where(live[:, None], new_vel, vel)
            success |= live & (np.linalg.norm(pos - goal, axis=1) < GOAL_RADIUS)
        if not np.all(np.isfinite(pos)):
            raise SimulationError("rollout produced non-finite positions")
        returns = success.astype(float)
        return returns, feats_hist, acts_hist, success, steps

    def rollout(
        self, policy: LinearGaussianPolicy, alpha, seed
    ) -> tuple[float, bool, list[ToyMdpState]]:
        """Single seeded episode with its full state trace."""
        th = self.theta_at(alpha)
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-self.start_jitter, self.start_jitter, 2)
        goal = np.asarray(self.goal_center) + rng.uniform(
            -self.goal_jitter, self.goal_jitter, 2
        )
        noise = rng.standard_normal((HORIZON, 2))
        state = ToyMdpState(position=pos, velocity=np.zeros(2), goal=goal, step=0)
        episode = [state]
        std = np.exp(policy.log_std)
        success = False
        for t in range(HORIZON):
            feats = np.concatenate(
                [state.goal - state.position, state.velocity]
            )
            action = policy.mean_action(feats) + std * noise[t]
            state = toy_mdp_step(state, action, th)
            episode.append(state)
            if np.linalg.norm(state.position - state.goal) < GOAL_RADIUS:
                success = True
                break
        return (1.0 if success else 0.0), success, episode

    # -- trainer contract ---------------------------------------------------

    def evaluate(self, policy, alpha, episodes: int, seed) -> EvalResult:
        _, _, _, success, _ = self._simulate(policy, alpha, episodes, seed)
        return EvalResult(
            success_rate=float(np.mean(success)), sim_episodes=episodes
        )

    def train_step(self, policy, alpha, seed) -> TrainStepResult:
        returns, feats, acts, _, steps = self._simulate(
            policy, alpha, self.batch_size, seed
        )
        batch = [
            (feats[: steps[e], e, :], acts[: steps[e], e, :], float(returns[e]))
            for e in range(self.batch_size)
        ]
        # start-state control variate: regress returns on initial goal
        # distance so credit stays with the actions, not the episode draw
        d0 = np.array(
            [np.linalg.norm(feats[0, e, 0:2]) for e in range(self.batch_size)]
        )
        design = np.stack([np.ones_like(d0), d0], axis=1)
        coef, *_ = np.linalg.lstsq(design, returns, rcond=None)
        baselines = design @ coef
        new_policy = pg_train_step(
            policy, batch, self.learning_rate, baselines=baselines
        )
        return TrainStepResult(
            policy=new_policy,
            train_iterations=1,
            sim_episodes=self.batch_size,
        )

    def gradient_probe(self, policy, alpha, seed) -> ProbeResult:
        returns, _, _, _, _ = self._simulate(
            policy, alpha, self.probe_episodes, seed
        )
        return ProbeResult(
            mean_return=float(np.mean(returns)), sim_episodes=self.probe_episodes
        )


def toy_space(
    lower: Optional[dict[str, float]] = None,
    upper: Optional[dict[str, float]] = None,
) -> EvolutionSpace:
    """Standalone 5-D evolution space for the toy trainer (tests, demos)."""
    lo = {
        "body.damping": 0.5,
        "body.torso.mass": 1.0,
        "motor.limit": 1.95,
        "motor.x.gain": 0.22,
        "motor.y.gain": 0.23,
    }
    hi = {
        "body.damping": 1.25,
        "body.torso.mass": 1.8,
        "motor.limit": 2.4,
        "motor.x.gain": 1.2,
        "motor.y.gain": 1.2,
    }
    lo.update(lower or {})
    hi.update(upper or {})
    keys = tuple(sorted(lo))
    return EvolutionSpace(
        parameter_keys=keys,
        theta_lower=np.array([lo[k] for k in keys]),
        theta_upper=np.array([hi[k] for k in keys]),
    )
