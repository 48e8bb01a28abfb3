"""Cooperative Dec-POMDP tasks used as desk-scale stand-ins for SMAC.

Two deterministic tasks are provided:

* :class:`ClimbingGame` - the single-step 2-agent, 3-action coordination
  game where independent learners tend to settle on a safe suboptimum.
* :class:`GridWorld` - 3 agents on a 5x5 grid that must meet on a goal cell;
  each agent only sees its own normalized position.

Agents act on :class:`HistoryWindow` vectors, a fixed-length window of
(observation, previous-action one-hot) pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ActionOutOfRange, StepAfterDone, UnsupportedEnv

CLIMBING_PAYOFF = ((11.0, -30.0, 0.0), (-30.0, 7.0, 6.0), (0.0, 0.0, 5.0))

# grid actions: stay, north, south, east, west
GRID_MOVES = ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0))


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dim: int
    n_actions: int
    gamma: float
    max_steps: int

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("need at least two agents")
        if self.n_actions < 2:
            raise ValueError("need at least two actions")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    def window_width(self, k: int) -> int:
        return k * (self.obs_dim + self.n_actions)


class Transition(NamedTuple):
    """One agent's view of a single timestep."""

    tau: np.ndarray
    action: int
    tau_next: np.ndarray
    reward: float
    done: bool


class HistoryWindow:
    """Sliding window over the last ``k`` (observation, previous action) slots.

    Slots are zero at episode start.  The newest slot is last, and the
    previous-action part of the first real slot is all zeros.
    """

    def __init__(self, k: int, obs_dim: int, n_actions: int):
        self.k = k
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.slot = obs_dim + n_actions
        self._buf = np.zeros((k, self.slot))

    def reset(self, obs) -> np.ndarray:
        self._buf[:] = 0.0
        self._buf[-1, : self.obs_dim] = obs
        return self.vector()

    def push(self, obs, prev_action: int) -> np.ndarray:
        self._buf[:-1] = self._buf[1:]
        self._buf[-1] = 0.0
        self._buf[-1, : self.obs_dim] = obs
        self._buf[-1, self.obs_dim + prev_action] = 1.0
        return self.vector()

    def vector(self) -> np.ndarray:
        return self._buf.reshape(-1).copy()


class CooperativeEnv:
    """Minimal Dec-POMDP interface shared by both tasks."""

    spec: EnvSpec
    name: str

    def reset(self, rng: np.random.Generator | None = None) -> list[np.ndarray]:
        raise NotImplementedError

    def step(self, joint_action: Sequence[int]):
        """Apply a joint action; returns ``(obs, reward, done, success)``."""
        raise NotImplementedError

    def _check_actions(self, joint_action):
        if len(joint_action) != self.spec.n_agents:
            raise ActionOutOfRange(f"expected {self.spec.n_agents} actions, got {len(joint_action)}")
        for a in joint_action:
            if not 0 <= int(a) < self.spec.n_actions:
                raise ActionOutOfRange(f"action {a} outside [0, {self.spec.n_actions})")


class ClimbingGame(CooperativeEnv):
    name = "climbing"

    def __init__(self, payoff=CLIMBING_PAYOFF, gamma: float = 0.99):
        self.payoff = np.array(payoff, dtype=np.float64)
        n_agents = self.payoff.ndim
        n_actions = self.payoff.shape[0]
        if any(d != n_actions for d in self.payoff.shape):
            raise ValueError("payoff table must be square")
        self.spec = EnvSpec(n_agents, obs_dim=1, n_actions=n_actions, gamma=gamma, max_steps=1)
        self.best = float(self.payoff.max())
        self._done = True

    def reset(self, rng=None):
        self._done = False
        return [np.ones(1) for _ in range(self.spec.n_agents)]

    def step(self, joint_action):
        if self._done:
            raise StepAfterDone("climbing game episodes last one step")
        self._check_actions(joint_action)
        reward = float(self.payoff[tuple(int(a) for a in joint_action)])
        self._done = True
        obs = [np.ones(1) for _ in range(self.spec.n_agents)]
        return obs, reward, True, reward == self.best


@dataclass
class GridLayout:
    size: int = 5
    goal: tuple[int, int] = (4, 4)
    # None draws distinct non-goal start cells from the reset rng
    starts: tuple[tuple[int, int], ...] | None = None


class GridWorld(CooperativeEnv):
    name = "gridworld"
    step_reward = -0.05
    goal_reward = 1.0

    def __init__(self, n_agents: int = 3, layout: GridLayout | None = None,
                 gamma: float = 0.95, max_steps: int = 25):
        self.layout = layout or GridLayout()
        self.spec = EnvSpec(n_agents, obs_dim=2, n_actions=len(GRID_MOVES),
                            gamma=gamma, max_steps=max_steps)
        self.positions = np.zeros((n_agents, 2), dtype=np.int64)
        self.t = 0
        self._done = True

    def _observe(self):
        scale = float(self.layout.size - 1)
        return [self.positions[i] / scale for i in range(self.spec.n_agents)]

    def reset(self, rng=None):
        lay = self.layout
        if lay.starts is not None:
            self.positions = np.array(lay.starts, dtype=np.int64)
        else:
            if rng is None:
                raise ValueError("random starts need an rng")
            cells = [c for c in itertools.product(range(lay.size), repeat=2) if c != tuple(lay.goal)]
            pick = rng.choice(len(cells), size=self.spec.n_agents, replace=False)
            self.positions = np.array([cells[j] for j in pick], dtype=np.int64)
        self.t = 0
        self._done = False
        return self._observe()

    def step(self, joint_action):
        if self._done:
            raise StepAfterDone("episode already finished")
        self._check_actions(joint_action)
        moves = np.array([GRID_MOVES[int(a)] for a in joint_action])
        self.positions = np.clip(self.positions + moves, 0, self.layout.size - 1)
        self.t += 1
        success = bool(np.all(self.positions == np.asarray(self.layout.goal)))
        reward = self.goal_reward if success else self.step_reward
        self._done = success or self.t >= self.spec.max_steps
        return self._observe(), reward, self._done, success


@dataclass
class Episode:
    """Synchronous per-agent trajectories of one episode.

    Arrays are indexed ``[agent, t, ...]``; rewards and done flags are shared
    by every agent.
    """

    taus: np.ndarray
    actions: np.ndarray
    next_taus: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    success: bool
    episode_id: int = -1

    def __post_init__(self):
        n, t = self.actions.shape
        assert self.taus.shape[:2] == (n, t) and self.next_taus.shape[:2] == (n, t)
        assert self.rewards.shape == (t,) and self.dones.shape == (t,)

    def __len__(self):
        return self.actions.shape[1]

    @property
    def team_return(self) -> float:
        return float(self.rewards.sum())

    def local(self, agent: int) -> "LocalEpisode":
        return LocalEpisode(self.taus[agent], self.actions[agent], self.next_taus[agent],
                            self.rewards, self.dones, self.episode_id)

    def transitions(self, agent: int) -> list[Transition]:
        return [Transition(self.taus[agent, t], int(self.actions[agent, t]),
                           self.next_taus[agent, t], float(self.rewards[t]), bool(self.dones[t]))
                for t in range(len(self))]


class LocalEpisode(NamedTuple):
    """The slice of an episode that one agent holds in its own buffer."""

    taus: np.ndarray
    actions: np.ndarray
    next_taus: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    episode_id: int


def run_episode(env: CooperativeEnv, policies, k: int, rng: np.random.Generator,
                episode_id: int = -1) -> Episode:
    """Roll out one episode.

    ``policies[i](tau)`` returns agent ``i``'s action from its own history
    window only; no agent sees another's window.
    """
    spec = env.spec
    windows = [HistoryWindow(k, spec.obs_dim, spec.n_actions) for _ in range(spec.n_agents)]
    obs = env.reset(rng)
    taus = [w.reset(o) for w, o in zip(windows, obs)]
    rec_tau, rec_act, rec_next, rewards, dones = [], [], [], [], []
    done, success = False, False
    while not done:
        joint = [int(policies[i](taus[i])) for i in range(spec.n_agents)]
        obs, reward, done, success = env.step(joint)
        nxt = [windows[i].push(obs[i], joint[i]) for i in range(spec.n_agents)]
        rec_tau.append(taus)
        rec_act.append(joint)
        rec_next.append(nxt)
        rewards.append(reward)
        dones.append(done)
        taus = nxt
    return Episode(
        taus=np.array(rec_tau).transpose(1, 0, 2),
        actions=np.array(rec_act, dtype=np.int64).T,
        next_taus=np.array(rec_next).transpose(1, 0, 2),
        rewards=np.array(rewards),
        dones=np.array(dones),
        success=bool(success),
        episode_id=episode_id,
    )


def brute_force_optimal(env: CooperativeEnv):
    """Enumerate every joint action of a single-step game.

    Returns ``(joint_action, payoff)``; ties go to the lexicographically
    smallest joint action.
    """
    if not isinstance(env, ClimbingGame):
        raise UnsupportedEnv(f"{type(env).__name__} is not a single-step matrix game")
    best_action, best_value = None, -np.inf
    for joint in itertools.product(range(env.spec.n_actions), repeat=env.spec.n_agents):
        value = float(env.payoff[joint])
        if value > best_value:
            best_action, best_value = joint, value
    return best_action, best_value


def parse_payoff(text: str) -> np.ndarray:
    """Parse ``"11,-30,0; -30,7,6; 0,0,5"`` into a 2-agent payoff table."""
    rows = [r for r in text.split(";") if r.strip()]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def parse_cells(text: str) -> tuple[tuple[int, int], ...]:
    """Parse ``"0,0; 4,0"`` into grid cells."""
    cells = []
    for chunk in text.split(";"):
        if chunk.strip():
            x, y = (int(v) for v in chunk.split(","))
            cells.append((x, y))
    return tuple(cells)


@dataclass
class EnvOptions:
    name: str = "climbing"
    gamma: float | None = None
    payoff: str | None = None
    grid_size: int = 5
    goal: str = "4,4"
    starts: str | None = None
    n_agents: int = 3
    episode_limit: int = 25
    extra: dict = field(default_factory=dict)


def make_env(opts: EnvOptions) -> CooperativeEnv:
    if opts.name == "climbing":
        payoff = parse_payoff(opts.payoff) if opts.payoff else CLIMBING_PAYOFF
        return ClimbingGame(payoff, gamma=0.99 if opts.gamma is None else opts.gamma)
    if opts.name == "gridworld":
        layout = GridLayout(size=opts.grid_size, goal=parse_cells(opts.goal)[0],
                            starts=parse_cells(opts.starts) if opts.starts else None)
        return GridWorld(opts.n_agents, layout, gamma=0.95 if opts.gamma is None else opts.gamma,
                         max_steps=opts.episode_limit)
    raise UnsupportedEnv(f"unknown env {opts.name!r}")
