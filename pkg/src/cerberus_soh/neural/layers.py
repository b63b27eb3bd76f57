"""Recurrent and dense building blocks.

Row-vector convention throughout: a batch of inputs is ``(B, D)`` and a layer
computes ``x @ W.T + h @ U.T + b`` with ``W`` stored hidden x input.

The single-step cells (``gru_cell``, ``lstm_cell``) are composed from autodiff
primitives. The sequence ops (``gru_sequence``, ``lstm_sequence``) are fused
nodes with hand-written backprop through time; they compute the same
recurrence and are checked against the cells and against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import ShapeError
from . import _kernels
from .autodiff import Tensor, as_tensor, concat, relu, sigmoid, tanh


def _uniform(rng: np.random.Generator, shape: tuple[int, int], name: str) -> Tensor:
    bound = 1.0 / np.sqrt(shape[1])
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(n: int, name: str) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


class _Params:
    """Mixin: ordered name -> Tensor view of a dataclass of tensors."""

    def parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)}

    @property
    def input_size(self) -> int:
        return self.parameters()[fields(self)[0].name].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.parameters()[fields(self)[0].name].shape[0]


@dataclass
class GruLayer(_Params):
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruLayer":
        w = {g: _uniform(rng, (hidden_size, input_size), f"W_{g}") for g in "zrh"}
        u = {g: _uniform(rng, (hidden_size, hidden_size), f"U_{g}") for g in "zrh"}
        return cls(w["z"], w["r"], w["h"], u["z"], u["r"], u["h"],
                   *(_zeros(hidden_size, f"b_{g}") for g in "zrh"))

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruLayer":
        return cls.init(input_size, hidden_size, _ZeroRng())


@dataclass
class LstmLayer(_Params):
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmLayer":
        w = [_uniform(rng, (hidden_size, input_size), f"W_{g}") for g in "ifog"]
        u = [_uniform(rng, (hidden_size, hidden_size), f"U_{g}") for g in "ifog"]
        return cls(*w, *u, *(_zeros(hidden_size, f"b_{g}") for g in "ifog"))

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmLayer":
        return cls.init(input_size, hidden_size, _ZeroRng())


class _ZeroRng:
    def uniform(self, low, high, size):
        return np.zeros(size)


@dataclass
class Mlp:
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "Mlp":
        ws = [_uniform(rng, (n_out, n_in), f"W{k}") for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:]))]
        bs = [_zeros(n_out, f"b{k}") for k, n_out in enumerate(sizes[1:])]
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes: list[int]) -> "Mlp":
        return cls.init(sizes, _ZeroRng())

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out


# ---------------------------------------------------------------------------
# single-step cells


def _as_batch(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 1:
        return x.reshape(1, -1), True
    return x, False


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {W.shape}")
    return x @ W.T + b


def gru_cell(p: GruLayer, x_t, h_prev) -> Tensor:
    """One GRU step: h = (1 - z) * h_tilde + z * h_prev."""
    x, squeeze = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    if h.shape[-1] != p.hidden_size:
        raise ShapeError(f"hidden width {h.shape[-1]} != {p.hidden_size}")
    z = sigmoid(_affine(x, p.W_z, p.b_z) + h @ p.U_z.T)
    r = sigmoid(_affine(x, p.W_r, p.b_r) + h @ p.U_r.T)
    h_tilde = tanh(_affine(x, p.W_h, p.b_h) + (r * h) @ p.U_h.T)
    out = (1.0 - z) * h_tilde + z * h
    return out.reshape(-1) if squeeze else out


def lstm_cell(p: LstmLayer, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    x, squeeze = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    c, _ = _as_batch(c_prev)
    if h.shape[-1] != p.hidden_size or c.shape[-1] != p.hidden_size:
        raise ShapeError(f"state width does not match hidden size {p.hidden_size}")
    i = sigmoid(_affine(x, p.W_i, p.b_i) + h @ p.U_i.T)
    f = sigmoid(_affine(x, p.W_f, p.b_f) + h @ p.U_f.T)
    o = sigmoid(_affine(x, p.W_o, p.b_o) + h @ p.U_o.T)
    g = tanh(_affine(x, p.W_g, p.b_g) + h @ p.U_g.T)
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    if squeeze:
        return h_new.reshape(-1), c_new.reshape(-1)
    return h_new, c_new


# ---------------------------------------------------------------------------
# fused sequence ops


def _check_seq(x: Tensor, p) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise ShapeError(f"sequence batch must be (B, T, D), got {x.shape}")
    B, T, D = x.shape
    if T == 0 or B == 0:
        raise ShapeError("empty sequence")
    if D != p.input_size:
        raise ShapeError(f"input width {D} does not match layer input {p.input_size}")
    return B, T, D


def gru_sequence(x, p: GruLayer, reverse: bool = False) -> Tensor:
    """Run a GRU layer over ``x`` of shape (B, T, D) from a zero state.

    Returns all hidden states (B, T, H) in the original time order; with
    ``reverse`` the recurrence runs from the last timestep to the first.
    """
    x = as_tensor(x)
    B, T, D = _check_seq(x, p)
    H = p.hidden_size
    X = x.data.transpose(1, 0, 2)
    X = np.ascontiguousarray(X[::-1] if reverse else X)
    W = np.concatenate([p.W_z.data, p.W_r.data, p.W_h.data])
    U_zr = np.concatenate([p.U_z.data, p.U_r.data])
    U_h = np.ascontiguousarray(p.U_h.data)
    XW = X @ W.T + np.concatenate([p.b_z.data, p.b_r.data, p.b_h.data])
    hs, zr, hts, rh = _kernels.gru_forward(XW, np.ascontiguousarray(U_zr.T), np.ascontiguousarray(U_h.T))

    def back(g):
        g = g.transpose(1, 0, 2)
        g = np.ascontiguousarray(g[::-1] if reverse else g)
        dZR, dAH = _kernels.gru_backward(g, hs, zr, hts, U_zr, U_h)
        zr_flat = dZR.reshape(-1, 2 * H)
        ah_flat = dAH.reshape(-1, H)
        x_flat = X.reshape(-1, D)
        dW_zr = zr_flat.T @ x_flat
        dW_h = ah_flat.T @ x_flat
        dU_zr = zr_flat.T @ hs[:-1].reshape(-1, H)
        dU_h = ah_flat.T @ rh.reshape(-1, H)
        db_zr = zr_flat.sum(axis=0)
        db_h = ah_flat.sum(axis=0)
        dX = dZR @ W[: 2 * H] + dAH @ W[2 * H:]
        if reverse:
            dX = dX[::-1]
        return (dX.transpose(1, 0, 2), dW_zr[:H], dW_zr[H:], dW_h, dU_zr[:H], dU_zr[H:], dU_h,
                db_zr[:H], db_zr[H:], db_h)

    out = hs[1:][::-1] if reverse else hs[1:]
    params = (p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h, p.b_z, p.b_r, p.b_h)
    return Tensor.from_op(np.ascontiguousarray(out.transpose(1, 0, 2)), (x, *params), back)


def lstm_sequence(x, p: LstmLayer, mask: np.ndarray | None = None) -> Tensor:
    """Run an LSTM layer over (B, T, D) from zero states.

    Returns (B, T, 2H): hidden state in ``[..., :H]`` and cell state in
    ``[..., H:]``. ``mask`` (B, T) marks real timesteps with 1; at masked
    steps the state is carried through unchanged, so left-padding a shorter
    sequence leaves its final state identical to running it alone.
    """
    x = as_tensor(x)
    B, T, D = _check_seq(x, p)
    H = p.hidden_size
    X = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    W = np.concatenate([p.W_i.data, p.W_f.data, p.W_o.data, p.W_g.data])
    U = np.concatenate([p.U_i.data, p.U_f.data, p.U_o.data, p.U_g.data])
    XW = X @ W.T + np.concatenate([p.b_i.data, p.b_f.data, p.b_o.data, p.b_g.data])
    if mask is None:
        m = np.ones((T, B))
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (B, T):
            raise ShapeError(f"mask shape {mask.shape} != {(B, T)}")
        if np.any((mask != 0) & (mask != 1)):
            raise ShapeError("mask entries must be 0 or 1")
        m = np.ascontiguousarray(mask.T)
    hs, cs, gates, tcs = _kernels.lstm_forward(XW, np.ascontiguousarray(U.T), m)

    def back(gout):
        gout = gout.transpose(1, 0, 2)
        gh = np.ascontiguousarray(gout[..., :H])
        gc = np.ascontiguousarray(gout[..., H:])
        dA = _kernels.lstm_backward(gh, gc, cs, gates, tcs, U, m)
        flat = dA.reshape(-1, 4 * H)
        dW = flat.T @ X.reshape(-1, D)
        dU = flat.T @ hs[:-1].reshape(-1, H)
        db = flat.sum(axis=0)
        dX = (dA @ W).transpose(1, 0, 2)
        split = lambda a: [a[k * H: (k + 1) * H] for k in range(4)]  # noqa: E731
        return (dX, *split(dW), *split(dU), *split(db))

    out = np.concatenate([hs[1:], cs[1:]], axis=-1).transpose(1, 0, 2)
    params = (p.W_i, p.W_f, p.W_o, p.W_g, p.U_i, p.U_f, p.U_o, p.U_g, p.b_i, p.b_f, p.b_o, p.b_g)
    return Tensor.from_op(np.ascontiguousarray(out), (x, *params), back)


# ---------------------------------------------------------------------------
# stacks


def _as_seq_batch(seq) -> tuple[Tensor, bool]:
    seq = as_tensor(seq) if not isinstance(seq, (list, tuple)) else Tensor(np.asarray(seq, dtype=np.float64))
    if seq.ndim == 2:
        if seq.shape[0] == 0:
            raise ShapeError("empty sequence")
        return seq.reshape(1, *seq.shape), True
    if seq.ndim != 3:
        raise ShapeError(f"sequence must be (T, D) or (B, T, D), got {seq.shape}")
    return seq, False


def bigru_forward(stack: list[tuple[GruLayer, GruLayer]], seq) -> Tensor:
    """Stacked bidirectional GRU feature.

    Each layer runs forward and backward from zero states and feeds the
    per-timestep concatenation (fwd; bwd) to the next. The feature is the
    last layer's forward state at the final step joined with its backward
    state at the first step, length 2H.
    """
    x, single = _as_seq_batch(seq)
    fwd = bwd = None
    for layer_fwd, layer_bwd in stack:
        fwd = gru_sequence(x, layer_fwd)
        bwd = gru_sequence(x, layer_bwd, reverse=True)
        x = concat([fwd, bwd], axis=-1)
    feature = concat([fwd[:, -1, :], bwd[:, 0, :]], axis=-1)
    return feature.reshape(-1) if single else feature


def lstm_forward(stack: list[LstmLayer], seq, mask: np.ndarray | None = None) -> Tensor:
    """Final cell state of the last layer of a stacked unidirectional LSTM."""
    x, single = _as_seq_batch(seq)
    out = None
    for layer in stack:
        out = lstm_sequence(x, layer, mask)
        x = out[:, :, : layer.hidden_size]
    H = stack[-1].hidden_size
    c_last = out[:, -1, H:]
    return c_last.reshape(-1) if single else c_last


def mlp_forward(p: Mlp, x) -> Tensor:
    """Affine + ReLU on hidden layers, affine output."""
    h, single = _as_batch(x)
    last = len(p.weights) - 1
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        h = _affine(h, W, b)
        if k < last:
            h = relu(h)
    return h.reshape(-1) if single else h


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape or pred.data.size == 0:
        raise ShapeError(f"mse needs equal non-empty shapes, got {pred.shape} and {target.shape}")
    return ((pred - target) ** 2).mean()
