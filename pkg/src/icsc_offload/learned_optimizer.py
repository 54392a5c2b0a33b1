"""Coordinate-wise LSTM optimizer with analytic truncated BPTT and Adam.

One small network is shared by every scalar coordinate of a variable block;
each coordinate carries its own hidden and cell state.  An update step maps
a preprocessed objective gradient to an additive change of the variable.

Parameter layout in the flat ``theta`` vector, layer by layer: the gate
matrix ``W`` of shape ``(d_in + H, 4H)`` (gate order input, forget, output,
candidate) followed by its bias ``(4H,)``; then the linear head weight
``(H,)`` and bias ``(1,)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, TapeError

N_FEATURES = 2
GRAD_EPS = 1e-12
GRAD_SCALE = 10.0
_MAGIC = b"LSTMOPT1"


def preprocess_gradient(grad) -> np.ndarray:
    """Map gradients to ``(log(|g| + eps) / 10, sign g)`` features, shape ``(n, 2)``."""
    g = np.asarray(grad, dtype=float)
    return np.stack([np.log(np.abs(g) + GRAD_EPS) / GRAD_SCALE, np.sign(g)], axis=-1)


def param_count(hidden_size: int, layer_count: int, n_in: int = N_FEATURES) -> int:
    h = hidden_size
    total = 0
    for layer in range(layer_count):
        d = n_in if layer == 0 else h
        total += (d + h) * 4 * h + 4 * h
    return total + h + 1


def _sigmoid(x):
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class OptimizerNet:
    """Flat parameters plus shape metadata for one learned optimizer."""

    theta: np.ndarray
    hidden_size: int = 20
    layer_count: int = 2
    gain: float = 1e-2

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if self.hidden_size < 1 or self.layer_count < 1:
            raise ConfigError("hidden_size and layer_count must be >= 1")
        expected = param_count(self.hidden_size, self.layer_count)
        if self.theta.size != expected:
            raise ConfigError(f"theta has {self.theta.size} entries, expected {expected}")
        if not np.all(np.isfinite(self.theta)):
            raise NumericError("theta contains non-finite values")

    @classmethod
    def init(cls, hidden_size: int = 20, layer_count: int = 2, seed=0,
             gain: float = 1e-2, zero_head: bool = True) -> "OptimizerNet":
        """Uniform ``±1/sqrt(H)`` gate weights, forget bias 1, zero head by default."""
        rng = np.random.default_rng(seed)
        h = hidden_size
        parts = []
        for layer in range(layer_count):
            d = N_FEATURES if layer == 0 else h
            parts.append(rng.uniform(-1, 1, (d + h) * 4 * h) / np.sqrt(h))
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            parts.append(b)
        if zero_head:
            parts.append(np.zeros(h + 1))
        else:
            parts.append(rng.uniform(-1, 1, h + 1) / np.sqrt(h))
        return cls(np.concatenate(parts), hidden_size, layer_count, gain)

    def copy(self) -> "OptimizerNet":
        return OptimizerNet(self.theta.copy(), self.hidden_size, self.layer_count, self.gain)

    def unpack(self, theta: Optional[np.ndarray] = None):
        """Views ``([(W, b), ...], head_w, head_b)`` into ``theta``."""
        theta = self.theta if theta is None else theta
        h = self.hidden_size
        layers, k = [], 0
        for layer in range(self.layer_count):
            d = N_FEATURES if layer == 0 else h
            n_w = (d + h) * 4 * h
            W = theta[k:k + n_w].reshape(d + h, 4 * h)
            k += n_w
            b = theta[k:k + 4 * h]
            k += 4 * h
            layers.append((W, b))
        return layers, theta[k:k + h], theta[k + h:k + h + 1]


@dataclass
class OptimizerState:
    """Per-coordinate recurrent state, shape ``(layers, n, H)`` each."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, net: OptimizerNet, n: int) -> "OptimizerState":
        shape = (net.layer_count, n, net.hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def n(self) -> int:
        return self.h.shape[1]


@dataclass
class StepCache:
    """Activations of one optimizer step, needed by the backward pass."""

    inputs: list  # per layer: concatenated [x, h_prev]
    gates: list  # per layer: (i, f, o, g)
    c_prev: list
    c_new: list
    h_top: np.ndarray


@dataclass
class TapeStep:
    """One recorded variable update ``z_t = P(z_{t-1} + delta_t)``.

    ``proj_vjp`` maps an adjoint of ``z_t`` to the adjoint of the
    pre-projection value; ``None`` means the identity.
    """

    cache: StepCache
    proj_vjp: Optional[Callable[[np.ndarray], np.ndarray]] = None


def optimizer_step(net: OptimizerNet, state: OptimizerState, grads, where: str = ""):
    """One LSTM step per coordinate.

    Returns ``(delta, new_state, cache)`` where ``delta`` is the additive
    update, ``gain * head(h_top)``.
    """
    grads = np.asarray(grads, dtype=float).reshape(-1)
    if grads.size != state.n:
        raise ConfigError(f"{grads.size} gradients for {state.n} coordinates")
    if not np.all(np.isfinite(grads)):
        raise NumericError(f"non-finite gradient input {where}".strip())
    layers, head_w, head_b = net.unpack()
    h_dim = net.hidden_size
    x = preprocess_gradient(grads)
    new_h = np.empty_like(state.h)
    new_c = np.empty_like(state.c)
    cache = StepCache([], [], [], [], None)
    for l, (W, b) in enumerate(layers):
        inp = np.concatenate([x, state.h[l]], axis=1)
        z = inp @ W + b
        i = _sigmoid(z[:, :h_dim])
        f = _sigmoid(z[:, h_dim:2 * h_dim])
        o = _sigmoid(z[:, 2 * h_dim:3 * h_dim])
        g = np.tanh(z[:, 3 * h_dim:])
        c = f * state.c[l] + i * g
        h = o * np.tanh(c)
        cache.inputs.append(inp)
        cache.gates.append((i, f, o, g))
        cache.c_prev.append(state.c[l])
        cache.c_new.append(c)
        new_h[l], new_c[l] = h, c
        x = h
    cache.h_top = x
    delta = net.gain * (x @ head_w + head_b[0])
    if not np.all(np.isfinite(delta)):
        raise NumericError(f"non-finite optimizer output {where}".strip())
    return delta, OptimizerState(new_h, new_c), cache


def _step_backward(net, layers, head_w, cache: StepCache, d_delta, dh_next, dc_next, grad):
    """Backprop one step; accumulates into ``grad`` and returns state adjoints."""
    h_dim = net.hidden_size
    g_layers, g_hw, g_hb = net.unpack(grad)
    dy = net.gain * d_delta
    g_hw += cache.h_top.T @ dy
    g_hb += dy.sum()
    dh = dh_next.copy()
    dc_prev_all = np.empty_like(dc_next)
    dh[-1] += dy[:, None] * head_w[None, :]
    for l in range(net.layer_count - 1, -1, -1):
        W, _ = layers[l]
        gW, gb = g_layers[l]
        i, f, o, g = cache.gates[l]
        tc = np.tanh(cache.c_new[l])
        d_o = dh[l] * tc
        dc = dc_next[l] + dh[l] * o * (1.0 - tc * tc)
        d_i = dc * g
        d_g = dc * i
        d_f = dc * cache.c_prev[l]
        dc_prev_all[l] = dc * f
        dz = np.concatenate([d_i * i * (1 - i), d_f * f * (1 - f),
                             d_o * o * (1 - o), d_g * (1 - g * g)], axis=1)
        gW += cache.inputs[l].T @ dz
        gb += dz.sum(axis=0)
        d_inp = dz @ W.T
        d_x, dh_prev = d_inp[:, :-h_dim], d_inp[:, -h_dim:]
        dh[l] = dh_prev
        if l > 0:
            dh[l - 1] += d_x
    return dh, dc_prev_all


def unrolled_backward(net: OptimizerNet, tape: Sequence[TapeStep],
                      loss_grads: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """Gradient of an accumulated loss w.r.t. ``theta`` through a recorded unroll.

    ``loss_grads[t]`` is the direct loss gradient w.r.t. the variable after
    step ``t`` (``None`` for no direct contribution).  Gradients flow through
    the updates, the projections and the recurrent state, but not through
    the objective-gradient inputs of each step.
    """
    if len(loss_grads) != len(tape):
        raise TapeError(f"{len(loss_grads)} loss gradients for a tape of {len(tape)} steps")
    grad = np.zeros_like(net.theta)
    if not tape:
        return grad
    layers, head_w, _ = net.unpack()
    n = tape[0].cache.h_top.shape[0]
    shape = (net.layer_count, n, net.hidden_size)
    dh, dc = np.zeros(shape), np.zeros(shape)
    dz = np.zeros(n)
    for t in range(len(tape) - 1, -1, -1):
        step = tape[t]
        if step.cache.h_top.shape[0] != n:
            raise TapeError(f"tape step {t} has a different coordinate count")
        lg = loss_grads[t]
        if lg is not None:
            lg = np.asarray(lg, dtype=float).reshape(-1)
            if lg.size != n:
                raise TapeError(f"loss gradient {t} has {lg.size} entries, expected {n}")
            dz = dz + lg
        d_pre = dz if step.proj_vjp is None else step.proj_vjp(dz)
        dh, dc = _step_backward(net, layers, head_w, step.cache, d_pre, dh, dc, grad)
        # z_t = P(z_{t-1} + delta_t): the previous iterate shares the adjoint
        dz = d_pre
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite meta-gradient")
    return grad


def unroll(net: OptimizerNet, z0, grad_inputs, project=None):
    """Run ``len(grad_inputs)`` steps with externally supplied gradient inputs.

    ``project(z) -> (z_proj, vjp)`` is optional.  Returns the iterates
    ``[z_1, ..., z_T]`` and the tape.  Used for gradient checks and testing.
    """
    z = np.asarray(z0, dtype=float).copy()
    state = OptimizerState.zeros(net, z.size)
    zs, tape = [], []
    for t, g in enumerate(grad_inputs):
        delta, state, cache = optimizer_step(net, state, g, where=f"at step {t}")
        z = z + delta
        vjp = None
        if project is not None:
            z, vjp = project(z)
        zs.append(z.copy())
        tape.append(TapeStep(cache, vjp))
    return zs, tape


@dataclass
class AdamState:
    """Moments and hyper-parameters for one parameter vector; mutated by :func:`adam_step`."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), lr=lr, **kw)


def adam_step(adam: AdamState, theta, grad_theta) -> np.ndarray:
    """Bias-corrected Adam descent step; returns the new parameters."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(grad_theta, dtype=float)
    if g.shape != theta.shape or adam.m.shape != theta.shape:
        raise ConfigError("Adam moments, parameters and gradient must share one shape")
    adam.t += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * g
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * g * g
    m_hat = adam.m / (1 - adam.beta1 ** adam.t)
    v_hat = adam.v / (1 - adam.beta2 ** adam.t)
    return theta - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)


def save_theta(net: OptimizerNet, path) -> None:
    """Write ``magic | hidden | layers | count`` then little-endian float64 parameters."""
    header = _MAGIC + struct.pack("<III", net.hidden_size, net.layer_count, net.theta.size)
    Path(path).write_bytes(header + net.theta.astype("<f8").tobytes())


def load_theta(path, gain: float = 1e-2) -> OptimizerNet:
    raw = Path(path).read_bytes()
    n_head = len(_MAGIC) + 12
    if len(raw) < n_head or raw[:len(_MAGIC)] != _MAGIC:
        raise ConfigError(f"{path}: not an optimizer parameter file")
    hidden, layers, count = struct.unpack("<III", raw[len(_MAGIC):n_head])
    if len(raw) != n_head + 8 * count:
        raise ConfigError(f"{path}: truncated parameter file")
    theta = np.frombuffer(raw[n_head:], dtype="<f8").astype(np.float64)
    return OptimizerNet(theta, hidden, layers, gain)
