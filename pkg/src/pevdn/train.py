"""End-to-end training loop for IQL, Vanilla VDN and the three PE-VDN variants.

Each iteration runs one exploratory episode, appends every agent's slice of
it to that agent's own buffer, lets agent 0 draw Poisson minibatch indices
and broadcast them, and then performs the update of the selected mode:

IQL           each agent fits the team reward independently
VANILLA_VDN   one centralized pass over all agents' data
PEVDN_A       agents broadcast plaintext messages and update locally
PEVDN_B       the message sum is computed with the secret-sharing protocol
PEVDN_C       PEVDN_B plus per-episode clipping, Gaussian noise and a
              random update gate, with privacy accounting

All randomness comes from named streams of the master seed, so a
(mode, seed, config) triple fixes the whole run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dp, mpc, vdn
from .config import Mode, RunConfig
from .env import make_env, run_episode
from .errors import MisalignedBuffers
from .optim import make_optimizer
from .qnet import (QParams, copy_target, forward, greedy, init_params, segment_gradient_norms,
                   select_action, value_gradients)
from .replay import ReplayBuffer

METRIC_COLUMNS = ("total_steps", "mode", "win_rate", "mean_return", "loss_mean",
                  "epsilon_raw", "epsilon_tilde", "delta_tilde", "anchor_threshold", "T")

_STREAMS = {"init": 0, "explore": 1, "share": 2, "noise": 3, "sample": 4, "gate": 5,
            "env": 6, "eval": 7, "delivery": 8}


def stream(seed: int, name: str, agent: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name], agent)))


@dataclass
class Agent:
    agent_id: int
    params: QParams
    target: QParams
    buffer: ReplayBuffer
    optimizer: object
    explore_rng: np.random.Generator
    share_rng: np.random.Generator
    noise_rng: np.random.Generator
    party: mpc.SummationParty | None = None

    def policy(self, epsilon: float):
        return lambda tau: select_action(self.params, tau, epsilon, self.explore_rng)


@dataclass
class AnchorState:
    threshold: float
    increment: float
    penalty: float
    anchors: list | None = None


def anchor_penalty(anchor: AnchorState, params: list[QParams]) -> list[np.ndarray]:
    """``2 * lambda * (theta - theta_anchor)`` per agent; zeros before the first anchor."""
    if anchor.anchors is None:
        return [np.zeros(p.size) for p in params]
    return [2.0 * anchor.penalty * (p.flat - a) for p, a in zip(params, anchor.anchors)]


def anchor_step(anchor: AnchorState, params: list[QParams], win_rate: float):
    """Snapshot ``params`` when ``win_rate`` reaches the threshold, then raise it."""
    if win_rate >= anchor.threshold:
        anchor.anchors = [p.flatten() for p in params]
        anchor.threshold += anchor.increment
    return anchor, anchor_penalty(anchor, params)


def evaluate(params: list[QParams], env, k: int, n_episodes: int, rng: np.random.Generator):
    """Greedy decentralized execution; returns ``(win_rate, mean_return)``."""
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")
    policies = [(lambda tau, p=p: greedy(forward(p, tau))) for p in params]
    wins, total = 0, 0.0
    for _ in range(n_episodes):
        ep = run_episode(env, policies, k, rng)
        wins += ep.success
        total += ep.team_return
    return wins / n_episodes, total / n_episodes


def epsilon_schedule(cfg: RunConfig, total_steps: int) -> float:
    horizon = cfg.eps_fraction * cfg.max_steps
    if horizon <= 0:
        return cfg.eps_end
    frac = min(1.0, total_steps / horizon)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


@dataclass
class TrainResult:
    config: RunConfig
    metrics: list[dict]
    agents: list[Agent]
    ledger: dp.PrivacyLedger | None
    transport: mpc.Transport | None
    iterations: int = 0
    updates: int = 0
    anchor: AnchorState | None = None

    @property
    def final(self) -> dict | None:
        return self.metrics[-1] if self.metrics else None


@dataclass
class IterationInfo:
    """What an observer sees after each iteration (local diagnostics only)."""

    iteration: int
    total_steps: int
    indices: np.ndarray
    updated: bool
    term_a: list = field(default_factory=list)
    m_values: list = field(default_factory=list)
    loss: float = float("nan")


class Trainer:
    def __init__(self, cfg: RunConfig, observer: Callable | None = None):
        cfg.validate()
        self.cfg = cfg
        self.mode = cfg.mode
        self.observer = observer
        self.env = make_env(cfg.env_options())
        self.eval_env = make_env(cfg.env_options())
        spec = self.env.spec
        self.gamma = spec.gamma
        self.n = spec.n_agents
        width = spec.window_width(cfg.history_k)
        hidden = cfg.hidden_sizes()
        self.agents = []
        for i in range(self.n):
            params = init_params(width, spec.n_actions, stream(cfg.seed, "init", i), hidden)
            party = mpc.SummationParty(i, self.n, precision=cfg.precision) if self.mode.secure else None
            self.agents.append(Agent(
                agent_id=i, params=params, target=copy_target(params),
                buffer=ReplayBuffer(cfg.buffer_size, spec.max_steps),
                optimizer=make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay),
                explore_rng=stream(cfg.seed, "explore", i), share_rng=stream(cfg.seed, "share", i),
                noise_rng=stream(cfg.seed, "noise", i), party=party))
        self.transport = None
        if self.mode.decentralized:
            if cfg.transport == "tcp":
                self.transport = mpc.TcpTransport(self.n)
            else:
                self.transport = mpc.InProcessTransport(self.n, stream(cfg.seed, "delivery"), cfg.delivery)
        self.dp_cfg = cfg.dp_config()
        self.ledger = dp.PrivacyLedger(self.dp_cfg) if self.mode == Mode.PEVDN_C else None
        self.anchor = AnchorState(cfg.anchor_threshold, cfg.anchor_increment, cfg.anchor_lambda) \
            if cfg.anchor else None
        self.sample_rng = stream(cfg.seed, "sample")
        self.gate_rng = stream(cfg.seed, "gate")
        self.env_rng = stream(cfg.seed, "env")
        self.eval_rng = stream(cfg.seed, "eval")
        self.q = cfg.expected_batch_size / cfg.buffer_size
        self.total_steps = 0
        self.iteration = 0
        self.updates = 0
        self.metrics: list[dict] = []
        self._losses: list[float] = []

    # -- per-mode gradient computations; each returns (grads, info) ------------

    def _batches(self, indices):
        bufs = [a.buffer for a in self.agents]
        vdn.check_alignment(bufs, indices)
        return [b.gather(indices) for b in bufs]

    def _iql(self, indices, info):
        grads, sq = [], []
        for a, b in zip(self.agents, self._batches(indices)):
            g, td = vdn.iql_gradient(a.params, a.target, b, self.gamma)
            grads.append(g)
            sq.append(td * td)
        info.loss = float(np.mean(np.concatenate(sq)))
        return grads

    def _vanilla(self, indices, info):
        batches = self._batches(indices)
        grads, a = vdn.centralized_vdn_gradients([x.params for x in self.agents],
                                                 [x.target for x in self.agents], batches, self.gamma)
        info.term_a = [a] * self.n
        info.loss = float(np.mean(vdn.vdn_loss(a)))
        return grads

    def _coupling_terms(self, batches, info):
        """Every agent's own copy of the A term for each sampled transition."""
        ms = [vdn.compute_m_batch(a.params, a.target, b, self.gamma) for a, b in zip(self.agents, batches)]
        info.m_values = ms
        reward = batches[0].rewards
        if self.mode == Mode.PEVDN_A:
            views = mpc.exchange_plain(self.transport, self.iteration, ms)
            terms = [vdn.term_a(reward, view) for view in views]
        else:
            parties = [a.party for a in self.agents]
            rngs = [a.share_rng for a in self.agents]
            run = mpc.run_summation_threaded if self.cfg.transport == "tcp" else mpc.run_summation
            sums = run(self.transport, parties, ms, rngs, self.iteration)
            terms = [vdn.term_a(reward, [s]) for s in sums]
        info.term_a = terms
        info.loss = float(np.mean(vdn.vdn_loss(terms[0])))
        return terms

    def _decentralized(self, indices, info):
        batches = self._batches(indices)
        terms = self._coupling_terms(batches, info)
        return [value_gradients(a.params, b.taus, b.actions, -2.0 * t)
                for a, b, t in zip(self.agents, batches, terms)]

    def _private(self, indices, info):
        cfg = self.dp_cfg
        grads = []
        if len(indices):
            batches = self._batches(indices)
            terms = self._coupling_terms(batches, info)
        for i, a in enumerate(self.agents):
            if len(indices):
                b = batches[i]
                coefs = -2.0 * terms[i]
                lengths = np.array([e - s for s, e in b.segments], dtype=np.float64)
                # per-episode average, then clip: each episode's gradient is scaled by
                # 1 / (len * max(1, ||avg|| / C)); the clipped sum is one weighted backward pass
                avg_norms = segment_gradient_norms(a.params, b.taus, b.actions, coefs, b.segments) / lengths
                shrink = np.maximum(1.0, avg_norms / cfg.clip)
                assert np.all(avg_norms / shrink <= cfg.clip * (1 + 1e-12)), "clipping bound violated"
                weights = np.repeat(1.0 / (lengths * shrink), lengths.astype(np.int64))
                total = value_gradients(a.params, b.taus, b.actions, coefs * weights)
            else:
                total = np.zeros(a.params.size)
            noisy = dp.noise(total, cfg.sigma, a.noise_rng)
            grads.append(noisy / cfg.expected_batch_size)
        self.ledger.step()
        return grads

    # -- loop ------------------------------------------------------------------

    def _check_buffers(self):
        ids = self.agents[0].buffer.ids
        for a in self.agents[1:]:
            if not np.array_equal(a.buffer.ids, ids):
                raise MisalignedBuffers(f"agent {a.agent_id}'s buffer diverged from agent 0's")

    def _evaluate_and_log(self):
        params = [a.params for a in self.agents]
        win, ret = evaluate(params, self.eval_env, self.cfg.history_k, self.cfg.eval_episodes,
                            self.eval_rng)
        if self.anchor is not None:
            anchor_step(self.anchor, params, win)
        snap = self.ledger.snapshot() if self.ledger else {}
        row = {
            "total_steps": self.total_steps,
            "mode": self.mode.value,
            "win_rate": win,
            "mean_return": ret,
            "loss_mean": float(np.mean(self._losses)) if self._losses else float("nan"),
            "epsilon_raw": snap.get("epsilon_raw", float("nan")),
            "epsilon_tilde": snap.get("epsilon_tilde", float("nan")),
            "delta_tilde": snap.get("delta_tilde", float("nan")),
            "anchor_threshold": self.anchor.threshold if self.anchor else float("nan"),
            "T": snap.get("T", float("nan")),
        }
        self._losses = []
        self.metrics.append(row)
        return row

    def step(self):
        """One iteration of the outer loop."""
        cfg = self.cfg
        eps = epsilon_schedule(cfg, self.total_steps)
        ep = run_episode(self.env, [a.policy(eps) for a in self.agents], cfg.history_k,
                         self.env_rng, episode_id=self.iteration)
        self.total_steps += len(ep)
        for a in self.agents:
            a.buffer.append(ep.local(a.agent_id))
        self._check_buffers()

        gate = dp.update_gate(cfg.buffer_throughput, self.gate_rng) if self.mode == Mode.PEVDN_C else True
        indices = dp.poisson_sample(len(self.agents[0].buffer), self.q, self.sample_rng)
        if self.transport is not None:
            indices = mpc.broadcast_indices(self.transport, self.iteration, 0, indices)
        info = IterationInfo(self.iteration, self.total_steps, indices, updated=False)

        if gate and (len(indices) or self.mode == Mode.PEVDN_C):
            handler = {Mode.IQL: self._iql, Mode.VANILLA_VDN: self._vanilla, Mode.PEVDN_A: self._decentralized,
                       Mode.PEVDN_B: self._decentralized, Mode.PEVDN_C: self._private}[self.mode]
            grads = handler(indices, info)
            if self.anchor is not None:
                grads = [g + p for g, p in zip(grads, anchor_penalty(self.anchor, [a.params for a in self.agents]))]
            for a, g in zip(self.agents, grads):
                a.optimizer.step(a.params.flat, g)
            self.updates += 1
            info.updated = True
            if not math.isnan(info.loss):
                self._losses.append(info.loss)
            if self.updates % cfg.target_period == 0:
                for a in self.agents:
                    a.target = copy_target(a.params)
        self.iteration += 1
        if self.observer is not None:
            self.observer(self, info)

    def run(self) -> TrainResult:
        cfg = self.cfg
        next_eval = cfg.eval_interval
        try:
            while self.total_steps < cfg.max_steps:
                self.step()
                if self.total_steps >= next_eval:
                    self._evaluate_and_log()
                    next_eval = (self.total_steps // cfg.eval_interval + 1) * cfg.eval_interval
            if self.total_steps and (not self.metrics or self.metrics[-1]["total_steps"] != self.total_steps):
                self._evaluate_and_log()
        finally:
            if self.transport is not None:
                if cfg.transcript:
                    self.transport.dump_transcript(cfg.transcript)
                self.transport.close()
        return TrainResult(cfg, self.metrics, self.agents, self.ledger, self.transport,
                           self.iteration, self.updates, self.anchor)


def train(cfg: RunConfig, observer: Callable | None = None) -> TrainResult:
    """Run the configured training loop to its step budget."""
    return Trainer(cfg, observer).run()


def write_metrics(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                row[k] = v if k == "mode" else (int(float(v)) if k == "total_steps" else float(v))
            rows.append(row)
    return rows
