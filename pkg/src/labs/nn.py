"""Recurrent building blocks composed from :mod:`labs.tensor` ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LSTMWeights:
    """One direction of an LSTM; gate blocks are ordered input, forget, candidate, output."""

    w_x: Tensor  # d x 4k
    w_h: Tensor  # k x 4k
    b: Tensor  # 4k

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    def check(self):
        k = self.hidden
        if self.w_h.shape != (k, 4 * k) or self.w_x.shape[1] != 4 * k or self.b.shape != (4 * k,):
            raise ShapeError(
                f"LSTM weights inconsistent: w_x {self.w_x.shape}, w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> "LSTMWeights":
        bound = 1.0 / np.sqrt(hidden)
        w_x = rng.uniform(-bound, bound, size=(input_dim, 4 * hidden)).astype(dtype)
        w_h = rng.uniform(-bound, bound, size=(hidden, 4 * hidden)).astype(dtype)
        b = rng.uniform(-bound, bound, size=4 * hidden).astype(dtype)
        b[hidden : 2 * hidden] = 1.0
        return cls(Tensor(w_x, requires_grad=True), Tensor(w_h, requires_grad=True), Tensor(b, requires_grad=True))


def lstm_gates_reference(z: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Gate nonlinearities built from primitive ops; the fused path is checked against this."""
    k = c_prev.shape[-1]
    i = T.sigmoid(z[:, 0:k])
    f = T.sigmoid(z[:, k : 2 * k])
    g = T.tanh(z[:, 2 * k : 3 * k])
    o = T.sigmoid(z[:, 3 * k : 4 * k])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_pointwise(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused gate nonlinearities: preactivations (B, 4k) and c_prev (B, k) -> [h | c] (B, 2k)."""
    k = c_prev.shape[-1]
    if z.shape != (c_prev.shape[0], 4 * k):
        raise ShapeError(f"lstm_pointwise: preactivations {z.shape} vs cell state {c_prev.shape}")
    zd = z.data
    i = _sig(zd[:, :k])
    f = _sig(zd[:, k : 2 * k])
    g = np.tanh(zd[:, 2 * k : 3 * k])
    o = _sig(zd[:, 3 * k :])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def grad_fn(grad):
        gh, gc = grad[:, :k], grad[:, k:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c_prev.data * f * (1.0 - f), dc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)],
            axis=1,
        )
        return dz, dc * f

    return T._make(np.concatenate([h, c], axis=1), (z, c_prev), grad_fn, "lstm_pointwise")


def lstm_gates(z: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Apply the gate nonlinearities to preactivations ``z`` (B x 4k); returns (h, c)."""
    k = c_prev.shape[-1]
    hc = lstm_pointwise(z, c_prev)
    return hc[:, :k], hc[:, k:]


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, weights: LSTMWeights) -> tuple[Tensor, Tensor]:
    """One step of a standard (non-peephole) LSTM.

    Accepts a single vector (d,) or a batch (B, d); state tensors follow the
    same convention.
    """
    weights.check()
    single = x_t.ndim == 1
    if single:
        x_t = T.reshape(x_t, (1, -1))
        h_prev = T.reshape(h_prev, (1, -1))
        c_prev = T.reshape(c_prev, (1, -1))
    if x_t.shape[1] != weights.input_dim or h_prev.shape[1] != weights.hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell: input {x_t.shape}, state {h_prev.shape}/{c_prev.shape} "
            f"vs weights d={weights.input_dim}, k={weights.hidden}"
        )
    z = T.add_bias(T.matmul(x_t, weights.w_x) + T.matmul(h_prev, weights.w_h), weights.b)
    h, c = lstm_gates(z, c_prev)
    if single:
        h, c = T.reshape(h, (-1,)), T.reshape(c, (-1,))
    return h, c


def run_lstm(x: Tensor, mask: np.ndarray, weights: LSTMWeights, reverse: bool = False) -> Tensor:
    """Run one direction over a padded batch.

    x is (B, n, d) and mask (B, n) holds 1 for real tokens. At padded steps
    the state is carried through unchanged, so a reverse pass effectively
    starts at each sequence's last real token. Returns (B, n, k) with padded
    rows zeroed.
    """
    weights.check()
    bsz, n, d = x.shape
    k = weights.hidden
    dtype = x.data.dtype
    projected = T.reshape(T.add_bias(T.matmul(T.reshape(x, (bsz * n, d)), weights.w_x), weights.b), (bsz, n, 4 * k))
    h = Tensor(np.zeros((bsz, k), dtype=dtype))
    c = Tensor(np.zeros((bsz, k), dtype=dtype))
    outputs: list[Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = projected[:, t, :] + T.matmul(h, weights.w_h)
        h_new, c_new = lstm_gates(z, c)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = Tensor(np.repeat(m[:, None], k, axis=1).astype(dtype))
            hold = Tensor(1.0 - keep.data)
            h = h_new * keep + h * hold
            c = c_new * keep + c * hold
        outputs[t] = h
    out = T.stack(outputs, axis=1)
    if not mask.all():
        out = out * Tensor(np.repeat(mask[:, :, None], k, axis=2).astype(dtype))
    return out
