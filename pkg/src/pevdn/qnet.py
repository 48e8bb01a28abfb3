"""Per-agent action-value network with hand-written backpropagation.

A :class:`QParams` owns a single flat float64 vector; the per-layer weight
and bias arrays are views into it, so flattening is free and optimizers act
on the flat vector directly.  Weights are stored ``(fan_in, fan_out)`` so a
batch of inputs ``x`` of shape ``(B, fan_in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ShapeMismatch

HIDDEN = (64, 64)


class QParams:
    def __init__(self, dims, flat=None):
        self.dims = tuple(int(d) for d in dims)
        sizes = [(a * b, b) for a, b in zip(self.dims[:-1], self.dims[1:])]
        self.size = sum(w + b for w, b in sizes)
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeMismatch(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        self.flat = flat
        self.layers = []
        off = 0
        for (n_in, n_out) in zip(self.dims[:-1], self.dims[1:]):
            w = flat[off: off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            b = flat[off: off + n_out]
            off += n_out
            self.layers.append((w, b))

    @property
    def n_inputs(self):
        return self.dims[0]

    @property
    def n_actions(self):
        return self.dims[-1]

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def unflatten(cls, dims, flat) -> "QParams":
        return cls(dims, np.array(flat, dtype=np.float64))

    def copy(self) -> "QParams":
        return QParams(self.dims, self.flat.copy())


def init_params(n_inputs: int, n_actions: int, rng: np.random.Generator,
                hidden=HIDDEN) -> QParams:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    params = QParams((n_inputs, *hidden, n_actions))
    for w, _ in params.layers:
        bound = 1.0 / np.sqrt(w.shape[0])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    return params


def copy_target(params: QParams) -> QParams:
    """Snapshot used as the target network; shares no memory with ``params``."""
    return params.copy()


def _check_input(params, x):
    if x.shape[-1] != params.n_inputs:
        raise ShapeMismatch(f"input width {x.shape[-1]} != network input {params.n_inputs}")


def forward(params: QParams, tau) -> np.ndarray:
    """Action values for one window (shape ``(n_actions,)``) or a batch."""
    x = tau if isinstance(tau, np.ndarray) and tau.dtype == np.float64 else np.asarray(tau, dtype=np.float64)
    _check_input(params, x)
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cached(params, x):
    acts = [x]
    pre = []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return acts, pre


def _backward(params, acts, pre, dout, out_layers):
    """Push ``dout`` (B, n_actions) back; write per-layer (dW, db) into ``out_layers``."""
    delta = dout
    for i in range(len(params.layers) - 1, -1, -1):
        out_layers(i, acts[i], delta)
        if i:
            w, _ = params.layers[i]
            delta = (delta @ w.T) * (pre[i - 1] > 0.0)


def value_gradients(params: QParams, taus, actions, coefs, segments=None):
    """Weighted sums of ``dQ(tau_t, a_t)/dtheta``.

    Returns ``sum_t coefs[t] * grad Q(taus[t], actions[t])`` as a flat vector
    when ``segments`` is None, otherwise one such sum per segment
    ``(start, stop)`` stacked into an array of shape ``(len(segments), P)``.
    Each chosen action contributes only through its own output unit.
    """
    x = np.asarray(taus, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis]
    _check_input(params, x)
    acts, pre = _forward_cached(params, x)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    dout = np.zeros((x.shape[0], params.n_actions))
    dout[np.arange(x.shape[0]), actions] = np.asarray(coefs, dtype=np.float64).reshape(-1)
    n_layers = len(params.layers)
    if segments is None:
        parts = [None] * (2 * n_layers)

        def write(i, a, d):
            parts[2 * i] = (a.T @ d).ravel()
            parts[2 * i + 1] = d.sum(axis=0)

        _backward(params, acts, pre, dout, write)
        return np.concatenate(parts)
    if not len(segments):
        return np.zeros((0, params.size))
    starts = np.array([s for s, _ in segments], dtype=np.int64)
    stops = np.array([e for _, e in segments], dtype=np.int64)
    if starts[0] != 0 or stops[-1] != len(x) or np.any(starts[1:] != stops[:-1]) or np.any(stops <= starts):
        raise ShapeMismatch("segments must split the batch into consecutive non-empty runs")
    single = bool(np.all(np.diff(np.concatenate([starts, [segments[-1][1]]])) == 1))
    seg_parts = [None] * (2 * n_layers)

    def write_seg(i, a, d):
        # per-row outer products summed within each segment
        outer = a[:, :, None] * d[:, None, :]
        if single:
            seg_parts[2 * i] = outer.reshape(len(a), -1)
            seg_parts[2 * i + 1] = d
        else:
            seg_parts[2 * i] = np.add.reduceat(outer, starts, axis=0).reshape(len(starts), -1)
            seg_parts[2 * i + 1] = np.add.reduceat(d, starts, axis=0)

    _backward(params, acts, pre, dout, write_seg)
    return np.concatenate(seg_parts, axis=1)


def segment_gradient_norms(params: QParams, taus, actions, coefs, segments) -> np.ndarray:
    """L2 norm of each segment's weighted gradient sum without forming it.

    For a layer with inputs ``a_t`` and output deltas ``d_t`` the weight
    gradient of a segment is ``sum_t a_t d_t^T``, whose squared Frobenius
    norm is ``sum_{t,t'} (a_t . a_t') (d_t . d_t')`` over pairs inside the
    segment.  Agrees with ``norm(value_gradients(..., segments), axis=1)``.
    """
    x = np.asarray(taus, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis]
    _check_input(params, x)
    if not len(segments):
        return np.zeros(0)
    acts, pre = _forward_cached(params, x)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    dout = np.zeros((x.shape[0], params.n_actions))
    dout[np.arange(x.shape[0]), actions] = np.asarray(coefs, dtype=np.float64).reshape(-1)
    starts = np.array([s for s, _ in segments], dtype=np.int64)
    lengths = np.array([e - s for s, e in segments], dtype=np.int64)
    single = bool(np.all(lengths == 1))
    seg_of = np.repeat(np.arange(len(segments)), lengths)
    same = None if single else seg_of[:, None] == seg_of[None, :]
    sq = np.zeros(len(segments))

    def accumulate(i, a, d):
        if single:
            sq[:] += np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", d, d)
            sq[:] += np.einsum("ij,ij->i", d, d)
        else:
            pair = (a @ a.T) * (d @ d.T) * same
            sq[:] += np.add.reduceat(pair.sum(axis=1), starts)
            db = np.add.reduceat(d, starts, axis=0)
            sq[:] += np.einsum("ij,ij->i", db, db)

    _backward(params, acts, pre, dout, accumulate)
    return np.sqrt(np.maximum(sq, 0.0))


def grad_q(params: QParams, tau, action: int) -> np.ndarray:
    """Exact gradient of the scalar ``Q(tau, action)`` w.r.t. every parameter."""
    if not 0 <= int(action) < params.n_actions:
        raise ShapeMismatch(f"action {action} outside [0, {params.n_actions})")
    return value_gradients(params, tau, [action], [1.0])


def greedy(q_values) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(q_values))


def select_action(params: QParams, tau, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice with lowest-index tie-breaking."""
    if rng.random() < epsilon:
        return int(rng.integers(params.n_actions))
    return greedy(forward(params, tau))


def save_checkpoint(params: QParams) -> bytes:
    """``u32 layer_count | (u32 fan_in, u32 fan_out) per layer | float64 LE flat vector``."""
    n_layers = len(params.dims) - 1
    header = struct.pack("<I", n_layers)
    for a, b in zip(params.dims[:-1], params.dims[1:]):
        header += struct.pack("<II", a, b)
    return header + params.flat.astype("<f8").tobytes()


def load_checkpoint(data: bytes) -> QParams:
    (n_layers,) = struct.unpack_from("<I", data, 0)
    off = 4
    dims = []
    for i in range(n_layers):
        a, b = struct.unpack_from("<II", data, off)
        off += 8
        if dims and dims[-1] != a:
            raise ShapeMismatch(f"layer {i} fan_in {a} does not match previous fan_out {dims[-1]}")
        if not dims:
            dims.append(a)
        dims.append(b)
    flat = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    return QParams(dims, flat)
