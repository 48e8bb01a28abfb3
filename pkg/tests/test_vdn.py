import numpy as np
import pytest

from pevdn import vdn
from pevdn.env import LocalEpisode, Transition
from pevdn.errors import MisalignedBuffers
from pevdn.qnet import QParams, copy_target, forward, grad_q, init_params
from pevdn.replay import ReplayBuffer


def _const_net(values):
    p = QParams((2, len(values)))
    p.layers[0][1][:] = values
    return p


def test_compute_m_formula():
    params, target = _const_net([1.0, 0.0]), _const_net([2.0, -1.0])
    tr = Transition(np.zeros(2), 0, np.zeros(2), 0.0, False)
    assert vdn.compute_m(params, target, tr, 0.9) == pytest.approx(0.8)


def test_compute_m_zero_networks_and_zero_gamma():
    tr = Transition(np.ones(2), 1, np.ones(2), 0.0, False)
    zero = QParams((2, 3))
    assert vdn.compute_m(zero, zero, tr, 0.99) == 0.0
    params = _const_net([0.0, 4.0, 0.0])
    assert vdn.compute_m(params, _const_net([9.0, 9.0, 9.0]), tr, 0.0) == -4.0


def test_compute_m_terminal_drops_bootstrap():
    tr = Transition(np.zeros(2), 0, np.zeros(2), 0.0, True)
    assert vdn.compute_m(_const_net([1.0, 0.0]), _const_net([5.0, 5.0]), tr, 0.9) == -1.0


def test_term_a_examples():
    assert vdn.term_a(1.0, [0.5, -0.25]) == 1.25
    assert vdn.term_a(0.0, [0.0, 0.0, 0.0]) == 0.0
    assert vdn.term_a(-30.0, [0.0, 0.0]) == -30.0


def test_term_a_left_to_right_order():
    # a different association would give 1e-16 here
    assert vdn.term_a(1.0, [1e16, -1e16]) == 0.0
    assert vdn.term_a(np.array([1.0]), [np.array([1e16]), np.array([-1e16])]).tolist() == [0.0]


def test_vdn_loss_examples():
    assert vdn.vdn_loss(1.8) == pytest.approx(3.24)
    assert vdn.vdn_loss(0.0) == 0.0
    assert vdn.vdn_loss(-30.0) == 900.0


def test_local_gradient_examples():
    e = np.zeros(4)
    e[2] = 1.0
    assert np.all(vdn.local_gradient(0.0, e) == 0)
    assert vdn.local_gradient(1.0, e).tolist() == [0, 0, -2.0, 0]


def test_team_q_is_sum_of_agent_values():
    assert vdn.team_q([1.5, 2.0, -0.5]) == 3.0


def _loss(params, targets, transitions, gamma):
    r = transitions[0].reward
    return vdn.vdn_loss(vdn.term_a(r, [vdn.compute_m(p, t, tr, gamma)
                                        for p, t, tr in zip(params, targets, transitions)]))


@pytest.mark.parametrize("seed", range(5))
def test_local_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    params = [init_params(4, 3, rng, hidden=(6, 5)) for _ in range(3)]
    targets = [init_params(4, 3, rng, hidden=(6, 5)) for _ in range(3)]
    # random biases keep every unit away from the ReLU kink at exactly zero
    for p in params:
        for _, b in p.layers:
            b[:] = rng.normal(scale=0.3, size=b.shape)
    trs = [Transition(rng.normal(size=4), int(rng.integers(3)), rng.normal(size=4), 0.7, False)
           for _ in range(3)]
    gamma = 0.9
    a = vdn.term_a(0.7, [vdn.compute_m(p, t, tr, gamma) for p, t, tr in zip(params, targets, trs)])
    for i in range(3):
        analytic = vdn.local_gradient(a, grad_q(params[i], trs[i].tau, trs[i].action))
        numeric = np.zeros(params[i].size)
        h = 1e-5
        for k in range(params[i].size):
            orig = params[i].flat[k]
            params[i].flat[k] = orig + h
            up = _loss(params, targets, trs, gamma)
            params[i].flat[k] = orig - h
            down = _loss(params, targets, trs, gamma)
            params[i].flat[k] = orig
            numeric[k] = (up - down) / (2 * h)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-4


def _buffers(rng, n_agents=2, n_eps=6, width=4, n_actions=3):
    bufs = [ReplayBuffer(10, 3) for _ in range(n_agents)]
    for eid in range(n_eps):
        length = int(rng.integers(1, 4))
        rewards = rng.normal(size=length)
        dones = np.arange(length) == length - 1
        for b in bufs:
            b.append(LocalEpisode(rng.normal(size=(length, width)), rng.integers(n_actions, size=length),
                                  rng.normal(size=(length, width)), rewards, dones, eid))
    return bufs


def test_centralized_update_empty_minibatch(rng):
    params = [init_params(4, 3, rng) for _ in range(2)]
    before = [p.flatten() for p in params]
    vdn.centralized_vdn_update(params, [copy_target(p) for p in params], _buffers(rng), [], 0.1, 0.9)
    assert all(np.array_equal(p.flat, b) for p, b in zip(params, before))


def test_centralized_update_zero_a_is_fixed_point():
    params = [QParams((4, 3)) for _ in range(2)]
    ep = LocalEpisode(np.zeros((1, 4)), np.array([0]), np.zeros((1, 4)), np.array([0.0]),
                      np.array([True]), 0)
    bufs = [ReplayBuffer(2) for _ in range(2)]
    for b in bufs:
        b.append(ep)
    vdn.centralized_vdn_update(params, [copy_target(p) for p in params], bufs, [0], 0.1, 0.9)
    assert all(np.all(p.flat == 0) for p in params)


def test_centralized_update_matches_per_transition_sum(rng):
    bufs = _buffers(rng)
    params = [init_params(4, 3, rng, hidden=(5,)) for _ in range(2)]
    targets = [init_params(4, 3, rng, hidden=(5,)) for _ in range(2)]
    batch = [1, 4, 2]
    gamma, lr = 0.9, 0.05
    expected = []
    for i in range(2):
        g = np.zeros(params[i].size)
        for idx in batch:
            eps = [b[idx] for b in bufs]
            for t in range(len(eps[0].actions)):
                trs = [e_i_t(e, t) for e in eps]
                a = vdn.term_a(trs[0].reward, [vdn.compute_m(p, q, tr, gamma)
                                               for p, q, tr in zip(params, targets, trs)])
                g += vdn.local_gradient(a, grad_q(params[i], trs[i].tau, trs[i].action))
        expected.append(params[i].flat - lr * g)
    vdn.centralized_vdn_update(params, targets, bufs, batch, lr, gamma)
    for p, e in zip(params, expected):
        assert np.allclose(p.flat, e, atol=1e-12)


def e_i_t(ep, t):
    return Transition(ep.taus[t], int(ep.actions[t]), ep.next_taus[t], float(ep.rewards[t]), bool(ep.dones[t]))


def test_decentralized_gradient_equals_centralized(rng):
    from pevdn.qnet import value_gradients

    bufs = _buffers(rng, n_agents=3)
    params = [init_params(4, 3, rng) for _ in range(3)]
    targets = [copy_target(p) for p in params]
    batches = [b.gather([0, 3, 5]) for b in bufs]
    central, _ = vdn.centralized_vdn_gradients(params, targets, batches, 0.95)
    ms = [vdn.compute_m_batch(p, t, b, 0.95) for p, t, b in zip(params, targets, batches)]
    for i in range(3):
        a = vdn.term_a(batches[0].rewards, ms)
        local = value_gradients(params[i], batches[i].taus, batches[i].actions, -2.0 * a)
        assert np.max(np.abs(local - central[i])) <= 1e-9


def test_check_alignment(rng):
    bufs = _buffers(rng)
    vdn.check_alignment(bufs, [0, 1])
    bufs[1].append(LocalEpisode(np.zeros((1, 4)), np.array([0]), np.zeros((1, 4)), np.zeros(1),
                                np.array([True]), 99))
    with pytest.raises(MisalignedBuffers):
        vdn.check_alignment(bufs, [0])


def test_iql_fixed_point_unchanged():
    p = _const_net([2.0, 0.0])
    target = _const_net([1.0, 1.0])
    # r + gamma * max target = 1 + 0.5 * 2 ... chosen so the TD error is zero
    ep = LocalEpisode(np.zeros((1, 2)), np.array([0]), np.zeros((1, 2)), np.array([1.0]),
                      np.array([False]), 0)
    buf = ReplayBuffer(1)
    buf.append(ep)
    target.layers[0][1][:] = [2.0, 2.0]
    before = p.flatten()
    vdn.iql_update(p, target, buf, [0], 0.1, 0.5)
    assert np.array_equal(p.flat, before)


def test_iql_update_empty_minibatch(rng):
    p = init_params(4, 3, rng)
    before = p.flatten()
    vdn.iql_update(p, copy_target(p), _buffers(rng)[0], [], 0.1, 0.9)
    assert np.array_equal(p.flat, before)


def test_iql_gradient_descends(rng):
    buf = _buffers(rng)[0]
    p = init_params(4, 3, rng)
    target = copy_target(p)
    batch = buf.gather([0, 1, 2])

    def loss():
        _, td = vdn.iql_gradient(p, target, batch, 0.9)
        return float(np.sum(td ** 2))

    start = loss()
    for _ in range(20):
        vdn.iql_update(p, target, buf, [0, 1, 2], 0.01, 0.9)
    assert loss() < start


def test_no_joint_input_network():
    # team values only ever come from per-agent forwards over per-agent windows
    import inspect
    src = inspect.getsource(vdn)
    assert "concatenate" not in src and "hstack" not in src
    assert forward.__module__ == "pevdn.qnet"
