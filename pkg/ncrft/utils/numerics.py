"""
Dense numeric substrate: stable reductions, the LSTM cell with its
hand-derived backward pass, dropout, parameter storage, reproducible random
streams and finite-difference gradient checking.

All activations, parameters and gradients are float64 numpy arrays.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from ncrft.utils.errors import NumericError

Gradients = Dict[str, np.ndarray]


def _check_axis(v: np.ndarray, axis: int) -> int:
    if v.ndim == 0:
        raise ValueError("Reduction over a scalar has no axis")
    if not -v.ndim <= axis < v.ndim:
        raise ValueError(f"Invalid axis {axis} for {v.ndim}-dimensional array")
    axis = axis % v.ndim
    if v.shape[axis] == 0:
        raise ValueError("Reduction over an empty axis")
    return axis


def log_sum_exp(v, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """
    Numerically stable log(sum(exp(v))) along an axis.

    Args:
        v: Array of finite values (-inf entries are allowed and ignored)
        axis: Axis to reduce
        keepdims: Keep the reduced axis with extent 1

    Returns:
        max + log(sum(exp(v - max))) along the axis
    """
    v = np.asarray(v, dtype=np.float64)
    axis = _check_axis(v, axis)
    return logsumexp(v, axis=axis, keepdims=keepdims)


def softmax(v, axis: int = -1) -> np.ndarray:
    """Softmax along an axis, computed through log_sum_exp"""
    v = np.asarray(v, dtype=np.float64)
    return np.exp(v - log_sum_exp(v, axis=axis, keepdims=True))


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v - log_sum_exp(v, axis=axis, keepdims=True)


def log_softmax_backward(dout: np.ndarray, logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of log_softmax"""
    probs = softmax(logits, axis=axis)
    return dout - probs * dout.sum(axis=axis, keepdims=True)


class RngState:
    """
    Seeded random stream on numpy's counter-based Philox generator.

    Identical seed, keys and call sequence give an identical value stream on
    every platform numpy supports.
    """

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def derive(self, *keys: int) -> "RngState":
        """Independent child stream addressed by integer keys (epoch, sentence, ...)"""
        return RngState(self.seed, self.keys + tuple(keys))

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=False)


def glorot_uniform(shape: Tuple[int, ...], rng: RngState) -> np.ndarray:
    """uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))"""
    fan_out = shape[0]
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Parameter:
    value: np.ndarray
    grad: Optional[np.ndarray] = None


class ParamStore:
    """Ordered name -> (value, gradient) map holding every trainable array"""

    def __init__(self):
        self._entries: Dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"Duplicate parameter name: {name}")
        array = np.ascontiguousarray(value, dtype=np.float64).copy()
        self._entries[name] = Parameter(value=array)
        return array

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> Optional[np.ndarray]:
        return self._entries[name].grad

    def items(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self._entries.items())

    def set_value(self, name: str, value: np.ndarray):
        entry = self._entries[name]
        if entry.value.shape != np.shape(value):
            raise ValueError(f"Shape mismatch for {name}: {entry.value.shape} vs {np.shape(value)}")
        entry.value[...] = value

    def zero_grad(self):
        for entry in self._entries.values():
            entry.grad = np.zeros_like(entry.value)

    def accumulate(self, grads: Mapping[str, np.ndarray], scale: float = 1.0):
        """Add scale * grads into the stored gradients (missing names contribute nothing)"""
        for name, g in grads.items():
            entry = self._entries[name]
            if g.shape != entry.value.shape:
                raise ValueError(f"Gradient shape mismatch for {name}: {g.shape} vs {entry.value.shape}")
            if entry.grad is None:
                entry.grad = np.zeros_like(entry.value)
            entry.grad += scale * g

    def global_norm(self) -> float:
        total = 0.0
        for entry in self._entries.values():
            if entry.grad is not None:
                total += float(np.sum(entry.grad * entry.grad))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their global L2 norm is at most max_norm"""
        norm = self.global_norm()
        if not np.isfinite(norm):
            raise NumericError(f"Non-finite gradient norm: {norm}")
        if norm > max_norm > 0:
            factor = max_norm / norm
            for entry in self._entries.values():
                if entry.grad is not None:
                    entry.grad *= factor
        return norm

    def copy_from(self, other: "ParamStore", names: Optional[Sequence[str]] = None) -> List[str]:
        """Copy values for shared names from another store; returns the copied names"""
        copied = []
        for name in (names if names is not None else other.names()):
            if name in self._entries and name in other:
                self.set_value(name, other.value(name))
                copied.append(name)
        return copied

    def num_values(self) -> int:
        return sum(entry.value.size for entry in self._entries.values())


def add_grad(grads: Gradients, name: str, g: np.ndarray):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = np.array(g, dtype=np.float64)


def add_rows(grads: Gradients, name: str, shape: Tuple[int, ...], ids: np.ndarray, rows: np.ndarray):
    """Scatter-add gradient rows of an embedding table"""
    if name not in grads:
        grads[name] = np.zeros(shape)
    np.add.at(grads[name], ids, rows)


# ---------------------------------------------------------------------------
# LSTM cell. W has shape (4H, D+H) acting on [x; h], gate rows ordered i, f, o, g.
# ---------------------------------------------------------------------------

def init_lstm(params: ParamStore, prefix: str, input_dim: int, hidden: int, rng: RngState):
    W = glorot_uniform((4 * hidden, input_dim + hidden), rng)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    params.add(f"{prefix}.W", W)
    params.add(f"{prefix}.b", b)


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray, W: np.ndarray, b: np.ndarray):
    """
    One LSTM step for a row or a batch of rows.

    Returns:
        (h', c', cache) with c' = f*c + i*g and h' = o*tanh(c')
    """
    single = np.ndim(x) == 1
    x2, h2, c2 = np.atleast_2d(x), np.atleast_2d(h), np.atleast_2d(c)
    hidden = W.shape[0] // 4
    if W.shape[0] != 4 * hidden or W.shape[1] != x2.shape[1] + hidden:
        raise ValueError(f"LSTM weight shape {W.shape} does not fit input {x2.shape[1]} / hidden {hidden}")
    if h2.shape[1] != hidden or c2.shape[1] != hidden or b.shape != (4 * hidden,):
        raise ValueError("LSTM state or bias dimension mismatch")
    if not (x2.shape[0] == h2.shape[0] == c2.shape[0]):
        raise ValueError("LSTM batch dimension mismatch")

    xh = np.concatenate([x2, h2], axis=1)
    z = xh @ W.T + b
    i = expit(z[:, :hidden])
    f = expit(z[:, hidden:2 * hidden])
    o = expit(z[:, 2 * hidden:3 * hidden])
    g = np.tanh(z[:, 3 * hidden:])
    c_new = f * c2 + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = (xh, c2, i, f, o, g, tanh_c)
    if single:
        return h_new[0], c_new[0], cache
    return h_new, c_new, cache


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache, W: np.ndarray):
    """
    Backward pass of lstm_step.

    Returns:
        (dx, dh_prev, dc_prev, dW, db)
    """
    xh, c_prev, i, f, o, g, tanh_c = cache
    dh, dc = np.atleast_2d(dh), np.atleast_2d(dc)
    hidden = i.shape[1]
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=1)
    dW = dz.T @ xh
    db = dz.sum(axis=0)
    dxh = dz @ W
    input_dim = xh.shape[1] - hidden
    return dxh[:, :input_dim], dxh[:, input_dim:], dc_prev, dW, db


def lstm_forward(xs: np.ndarray, W: np.ndarray, b: np.ndarray, reverse: bool = False):
    """
    Run an LSTM over a batch of sequences from a zero state.

    Args:
        xs: (B, n, D) inputs
        reverse: Scan right-to-left; outputs stay aligned with input positions

    Returns:
        (hs of shape (B, n, H), cache for lstm_backward)
    """
    batch, n, _ = xs.shape
    hidden = W.shape[0] // 4
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    hs = np.zeros((batch, n, hidden))
    order = range(n - 1, -1, -1) if reverse else range(n)
    steps = []
    for t in order:
        h, c, step_cache = lstm_step(xs[:, t, :], h, c, W, b)
        hs[:, t, :] = h
        steps.append((t, step_cache))
    return hs, (steps, xs.shape)


def lstm_backward(dhs: np.ndarray, cache, W: np.ndarray):
    """Backward pass of lstm_forward; returns (dxs, dW, db)"""
    steps, shape = cache
    batch, n, input_dim = shape
    hidden = W.shape[0] // 4
    dxs = np.zeros(shape)
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    for t, step_cache in reversed(steps):
        dx, dh_next, dc_next, dW_t, db_t = lstm_step_backward(dhs[:, t, :] + dh_next, dc_next, step_cache, W)
        dxs[:, t, :] = dx
        dW += dW_t
        db += db_t
    return dxs, dW, db


def dropout_apply(v: np.ndarray, rate: float, rng: Optional[RngState], training: bool):
    """
    Inverted dropout.

    Returns:
        (output, mask) where mask is None when the call is the identity
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return v, None
    if rng is None:
        raise ValueError("Training-mode dropout needs a random stream")
    mask = (rng.random(np.shape(v)) >= rate) / (1.0 - rate)
    return v * mask, mask


def dropout_backward(dout: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return dout if mask is None else dout * mask


def grad_check(
    loss_fn: Callable[[ParamStore], Tuple[float, Gradients]],
    params: ParamStore,
    epsilon: float = 1e-5,
    sample_count: int = 10,
    rng: Optional[RngState] = None,
) -> float:
    """
    Compare analytic gradients with central differences on sampled coordinates.

    Args:
        loss_fn: Deterministic function returning (loss, gradients by parameter name)
        params: Parameters the loss reads; values are perturbed in place and restored
        epsilon: Finite-difference step
        sample_count: Coordinates sampled per parameter
        rng: Stream choosing the coordinates

    Returns:
        max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    rng = rng or RngState(0)
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError(f"Non-finite loss in gradient check: {loss}")
    grads = {name: np.array(g) for name, g in grads.items()}

    worst = 0.0
    for name in params.names():
        flat = params.value(name).reshape(-1)
        analytic_flat = grads.get(name, np.zeros_like(params.value(name))).reshape(-1)
        count = min(sample_count, flat.size)
        for k in rng.choice(flat.size, count):
            original = flat[k]
            flat[k] = original + epsilon
            loss_plus = loss_fn(params)[0]
            flat[k] = original - epsilon
            loss_minus = loss_fn(params)[0]
            flat[k] = original
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise NumericError(f"Non-finite loss while perturbing {name}[{k}]")
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = analytic_flat[k]
            error = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, error)
    return worst
