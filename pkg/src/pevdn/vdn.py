"""VDN learning maths: messages, the coupling term, losses and reference updates.

For a transition ``e`` the VDN loss is ``A**2`` with

    A = r + sum_i m_i,    m_i = gamma * max_a' Q_i(tau'_i, a'; target_i) - Q_i(tau_i, a_i; theta_i)

and its gradient w.r.t. agent ``i``'s parameters is ``-2 * A * dQ_i/dtheta_i``.
Only ``A`` couples the agents, so each agent can update its own branch once
it knows the sum of the messages.

Terminal transitions drop the bootstrap term (``gamma`` is multiplied by
``1 - done``).  Every sum over agents runs in ascending agent order, starting
from the reward, so the centralized and decentralized paths evaluate the
same floating-point expression.
"""

from __future__ import annotations

import numpy as np

from .env import Transition
from .errors import MisalignedBuffers
from .qnet import QParams, forward, value_gradients
from .replay import Batch, ReplayBuffer


def compute_m(params: QParams, target: QParams, transition: Transition, gamma: float) -> float:
    boot = 0.0 if transition.done else gamma * float(np.max(forward(target, transition.tau_next)))
    return boot - float(forward(params, transition.tau)[transition.action])


def compute_m_batch(params: QParams, target: QParams, batch: Batch, gamma: float) -> np.ndarray:
    if len(batch) == 0:
        return np.zeros(0)
    q_next = forward(target, batch.next_taus).max(axis=1)
    q_taken = forward(params, batch.taus)[np.arange(len(batch)), batch.actions]
    return gamma * (1.0 - batch.dones) * q_next - q_taken


def term_a(reward, m_values):
    """``r + m_0 + m_1 + ...`` accumulated left to right."""
    a = np.array(reward, dtype=np.float64)
    for m in m_values:
        a = a + m
    return float(a) if a.ndim == 0 else a


def vdn_loss(a):
    return np.square(a)


def local_gradient(a: float, grad_b: np.ndarray) -> np.ndarray:
    return -2.0 * a * grad_b


def team_q(per_agent_values):
    """Team action value; only ever formed as the sum of the agents' own values."""
    return term_a(0.0, per_agent_values)


def check_alignment(buffers, indices):
    idx = np.asarray(indices, dtype=np.int64)
    ids0 = buffers[0].ids[idx]
    for b in buffers[1:]:
        if len(b) != len(buffers[0]) or not np.array_equal(b.ids[idx], ids0):
            raise MisalignedBuffers("agents' replay buffers disagree on sampled episodes")


def centralized_vdn_gradients(all_params, all_targets, batches, gamma):
    """Summed VDN gradients for every agent from a consolidated view of all data.

    Returns ``(grads, a_values)``.
    """
    reward = batches[0].rewards
    m = [compute_m_batch(p, t, b, gamma) for p, t, b in zip(all_params, all_targets, batches)]
    a = term_a(reward, m)
    grads = [value_gradients(p, b.taus, b.actions, -2.0 * a) for p, b in zip(all_params, batches)]
    return grads, a


def centralized_vdn_update(all_params, all_targets, all_buffers: list[ReplayBuffer],
                           minibatch, lr: float, gamma: float):
    """Plain-SGD Vanilla VDN step over every transition of the sampled episodes."""
    if len(minibatch) == 0:
        return all_params
    check_alignment(all_buffers, minibatch)
    batches = [b.gather(minibatch) for b in all_buffers]
    grads, _ = centralized_vdn_gradients(all_params, all_targets, batches, gamma)
    for p, g in zip(all_params, grads):
        p.flat -= lr * g
    return all_params


def iql_gradient(params: QParams, target: QParams, batch: Batch, gamma: float):
    """DQN gradient of one agent treating the team reward as its own.

    Returns ``(grad, td_errors)``.
    """
    td = batch.rewards + compute_m_batch(params, target, batch, gamma)
    return value_gradients(params, batch.taus, batch.actions, -2.0 * td), td


def iql_update(params: QParams, target: QParams, buffer: ReplayBuffer, minibatch,
               lr: float, gamma: float) -> QParams:
    if len(minibatch) == 0:
        return params
    grad, _ = iql_gradient(params, target, buffer.gather(minibatch), gamma)
    params.flat -= lr * grad
    return params
