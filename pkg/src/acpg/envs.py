"""Deterministic, seedable discrete-action environments.

``IdealCliffWorld`` is a 2x4 walking grid with two exits: one above and one
below the central two columns. ``CartPole`` is the classic balancing task
with the canonical physical constants. Both implement the same small
contract: ``reset(seed) -> obs`` and ``step(action) -> (obs, reward, done)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


class InvalidActionError(ValueError):
    pass


class EpisodeFinishedError(RuntimeError):
    pass


class TieError(RuntimeError):
    pass


class InsufficientSamplesError(RuntimeError):
    def __init__(self, cls: int, have: int, need: int):
        super().__init__(f"class {cls} has {have} samples, {need} requested")
        self.cls = cls
        self.have = have
        self.need = need


class Env:
    """Common contract. Subclasses set ``obs_dim``, ``n_actions``, ``max_steps``."""

    name = "env"
    obs_dim: int
    n_actions: int
    max_steps: int

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def _check_action(self, action: int) -> int:
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise InvalidActionError(f"action {action} outside [0, {self.n_actions})")
        if self.done:
            raise EpisodeFinishedError("episode is finished; call reset()")
        return a


class IdealCliffWorld(Env):
    """2 rows x 4 columns of walkable cells plus four exit cells.

    Layout (row 0 and row 3 only contain exits)::

        .  E  E  .
        c  c  c  c
        c  c  c  c
        .  E  E  .

    Every step costs ``reward_step``; entering an exit yields
    ``reward_exit`` and ends the episode.
    """

    name = "cliff"
    n_actions = 4

    def __init__(self, max_steps: int = 50, reward_step: float = -1.0,
                 reward_exit: float = 10.0, start: str = "random", seed: int | None = None):
        self.max_steps = int(max_steps)
        self.reward_step = float(reward_step)
        self.reward_exit = float(reward_exit)
        if start != "random" and not (isinstance(start, int) or str(start).isdigit()):
            raise ValueError(f"start must be 'random' or a cell id, got {start!r}")
        self.start = start
        self.walk_cells = [(r, c) for r in (1, 2) for c in range(4)]
        self.exit_cells = [(0, 1), (0, 2), (3, 1), (3, 2)]
        self.cells = self.walk_cells + self.exit_cells
        self.index = {cell: i for i, cell in enumerate(self.cells)}
        self.obs_dim = len(self.cells)
        self.n_states = len(self.walk_cells)
        self._rng = np.random.default_rng(seed)
        self.pos = 0
        self.t = 0
        self.done = True
        self.truncated = False

    def is_terminal(self, state: int) -> bool:
        return state >= self.n_states

    def observe(self, state: int) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[state] = 1.0
        return obs

    def transition(self, state: int, action: int) -> tuple[int, float]:
        """Pure model: next cell id and reward for ``action`` in ``state``."""
        r, c = self.cells[state]
        dr, dc = _MOVES[action]
        nxt = self.index.get((r + dr, c + dc), state)
        reward = self.reward_exit if self.is_terminal(nxt) else self.reward_step
        return nxt, reward

    def reset(self, seed: int | None = None, state: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if state is None:
            if self.start == "random":
                state = int(self._rng.integers(self.n_states))
            else:
                state = int(self.start)
        if self.is_terminal(state):
            raise ValueError(f"cannot start in exit cell {state}")
        self.pos, self.t, self.done, self.truncated = state, 0, False, False
        return self.observe(self.pos)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        a = self._check_action(action)
        self.pos, reward = self.transition(self.pos, a)
        self.t += 1
        self.done = self.is_terminal(self.pos) or self.t >= self.max_steps
        self.truncated = self.done and not self.is_terminal(self.pos)
        return self.observe(self.pos), reward, self.done

    def state_of(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs))

    def all_states(self) -> list[int]:
        return list(range(self.n_states))


def value_iteration(env: IdealCliffWorld, gamma: float = 1.0, tol: float = 1e-12,
                    max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """State values and Q table of the deterministic cliff world."""
    n = env.n_states
    v = np.zeros(n)
    q = np.zeros((n, env.n_actions))
    for _ in range(max_iter):
        for s in range(n):
            for a in range(env.n_actions):
                nxt, r = env.transition(s, a)
                q[s, a] = r + (0.0 if env.is_terminal(nxt) else gamma * v[nxt])
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return v, q


def optimal_policy(env: IdealCliffWorld, gamma: float = 1.0, tie_tol: float = 1e-9) -> dict[int, int]:
    """Map every walkable cell to its unique optimal action."""
    if not isinstance(env, IdealCliffWorld):
        raise TypeError("optimal_policy is only defined for the gridworld")
    _, q = value_iteration(env, gamma)
    policy = {}
    for s in range(env.n_states):
        order = np.argsort(q[s])[::-1]
        if q[s, order[0]] - q[s, order[1]] <= tie_tol:
            raise TieError(
                f"state {s}: actions {ACTION_NAMES[order[0]]} and {ACTION_NAMES[order[1]]} tie"
            )
        policy[s] = int(order[0])
    return policy


class CartPole(Env):
    """Classic cart-pole with Euler integration at 0.02 s per step.

    Reward is 1 for every step taken, including the one that ends the
    episode. Episodes end when the pole leaves +-12 degrees, the cart leaves
    +-2.4, or ``max_steps`` is reached.
    """

    name = "cartpole"
    obs_dim = 4
    n_actions = 2

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4

    def __init__(self, max_steps: int = 500, integrator: str = "euler", seed: int | None = None):
        if integrator not in ("euler", "semi-implicit"):
            raise ValueError(f"unknown integrator {integrator!r}")
        self.max_steps = int(max_steps)
        self.integrator = integrator
        self.total_mass = self.masspole + self.masscart
        self.polemass_length = self.masspole * self.length
        self._rng = np.random.default_rng(seed)
        self.state = (0.0, 0.0, 0.0, 0.0)
        self.t = 0
        self.done = True
        self.truncated = False

    def reset(self, seed: int | None = None, state=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if state is None:
            state = self._rng.uniform(-0.05, 0.05, size=4)
        self.state = tuple(float(v) for v in state)
        self.t, self.done, self.truncated = 0, False, False
        return np.array(self.state)

    def derivatives(self, state, force: float) -> tuple[float, float]:
        """Cart and pole accelerations for ``state = (x, x_dot, theta, theta_dot)``."""
        _, _, theta, theta_dot = state
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + self.polemass_length * theta_dot * theta_dot * sin) / self.total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos * cos / self.total_mass)
        )
        x_acc = temp - self.polemass_length * theta_acc * cos / self.total_mass
        return x_acc, theta_acc

    def integrate(self, state, force: float):
        x, x_dot, theta, theta_dot = state
        x_acc, theta_acc = self.derivatives(state, force)
        if self.integrator == "euler":
            x = x + self.tau * x_dot
            x_dot = x_dot + self.tau * x_acc
            theta = theta + self.tau * theta_dot
            theta_dot = theta_dot + self.tau * theta_acc
        else:
            x_dot = x_dot + self.tau * x_acc
            x = x + self.tau * x_dot
            theta_dot = theta_dot + self.tau * theta_acc
            theta = theta + self.tau * theta_dot
        return (x, x_dot, theta, theta_dot)

    def energy(self, state=None) -> float:
        """Mechanical energy with the pole as a uniform rod (zero at the pivot height)."""
        x, x_dot, theta, theta_dot = self.state if state is None else state
        m, l = self.masspole, self.length
        kinetic = (
            0.5 * self.total_mass * x_dot**2
            + m * l * x_dot * theta_dot * math.cos(theta)
            + 0.5 * m * l**2 * (4.0 / 3.0) * theta_dot**2
        )
        return kinetic + m * self.gravity * l * math.cos(theta)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        a = self._check_action(action)
        force = self.force_mag if a == 1 else -self.force_mag
        self.state = self.integrate(self.state, force)
        self.t += 1
        x, _, theta, _ = self.state
        failed = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        self.done = failed or self.t >= self.max_steps
        self.truncated = self.done and not failed
        return np.array(self.state), 1.0, self.done


@dataclass
class EnvConfig:
    name: str = "cliff"
    max_steps: int | None = None
    reward_step: float = -1.0
    reward_exit: float = 10.0
    seed: int | None = None
    start: str = "random"
    integrator: str = "euler"


ENV_NAMES = ("cliff", "cartpole")


def make_env(cfg: EnvConfig, seed: int | None = None) -> Env:
    seed = cfg.seed if seed is None else seed
    if cfg.name == "cliff":
        return IdealCliffWorld(
            max_steps=50 if cfg.max_steps is None else cfg.max_steps,
            reward_step=cfg.reward_step,
            reward_exit=cfg.reward_exit,
            start=cfg.start,
            seed=seed,
        )
    if cfg.name == "cartpole":
        return CartPole(
            max_steps=500 if cfg.max_steps is None else cfg.max_steps,
            integrator=cfg.integrator,
            seed=seed,
        )
    raise ValueError(f"unknown environment {cfg.name!r}; choose from {ENV_NAMES}")


@dataclass
class TransitionBatch:
    """Flat arrays of transitions; ``psi`` is the return/advantage weight."""

    obs: np.ndarray
    actions: np.ndarray
    psi: np.ndarray
    labels: np.ndarray | None = None
    logp_old: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TransitionBatch(
            obs=self.obs[idx], actions=self.actions[idx], psi=self.psi[idx],
            labels=pick(self.labels), logp_old=pick(self.logp_old), returns=pick(self.returns),
        )


def balanced_batch(buffer: TransitionBatch, n: int, n_classes: int,
                   rng: np.random.Generator) -> TransitionBatch:
    """Exactly ``n`` transitions per optimal-action class, drawn without replacement."""
    if buffer.labels is None:
        raise ValueError("buffer carries no optimal-action labels")
    picks = []
    for k in range(n_classes):
        members = np.flatnonzero(buffer.labels == k)
        if len(members) < n:
            raise InsufficientSamplesError(k, len(members), n)
        picks.append(rng.choice(members, size=n, replace=False))
    return buffer.take(np.concatenate(picks))
