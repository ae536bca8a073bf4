"""Bidirectional GRU layer with full backpropagation through time.

The two directions run independently over the input sequence (the backward
direction consumes it reversed). Their output sequences are concatenated
along the TIME axis, forward outputs first and the re-reversed backward
outputs after them, so T input frames become 2T output frames of H dims.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .layers import Param, orthogonal, xavier_uniform


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _GRUDirection:
    """One GRU direction: update/reset gates, tanh candidate.

    Gate layout inside Wx/Wh/b is [update z | reset r | candidate c]; the
    candidate's recurrent term uses the reset-scaled state (r * h_prev).
    """

    def __init__(self, in_dim, hidden, rng, name, dtype):
        h = hidden
        wh = np.concatenate([orthogonal(rng, (h, h), dtype) for _ in range(3)], axis=1)
        self.wx = Param(f"{name}.Wx", xavier_uniform(rng, (in_dim, 3 * h), dtype))
        self.wh = Param(f"{name}.Wh", wh)
        self.b = Param(f"{name}.b", np.zeros(3 * h, dtype=dtype), decay=False)
        self.hidden = h
        self._cache = None

    def forward(self, x):
        b, t, _ = x.shape
        h = self.hidden
        xp = x @ self.wx.data + self.b.data
        state = np.zeros((b, h), dtype=x.dtype)
        outputs = np.empty((b, t, h), dtype=x.dtype)
        steps = []
        for i in range(t):
            az = xp[:, i, :h] + state @ self.wh.data[:, :h]
            ar = xp[:, i, h : 2 * h] + state @ self.wh.data[:, h : 2 * h]
            z = sigmoid(az)
            r = sigmoid(ar)
            rh = r * state
            c = np.tanh(xp[:, i, 2 * h :] + rh @ self.wh.data[:, 2 * h :])
            new_state = (1.0 - z) * state + z * c
            steps.append((state, z, r, rh, c))
            outputs[:, i] = new_state
            state = new_state
        self._cache = (x, steps)
        return outputs

    def backward(self, dout):
        x, steps = self._cache
        b, t, d = x.shape
        h = self.hidden
        wh = self.wh.data
        dwx = np.zeros_like(self.wx.data)
        dwh = np.zeros_like(wh)
        db = np.zeros_like(self.b.data)
        dx = np.empty_like(x)
        dstate = np.zeros((b, h), dtype=x.dtype)
        for i in range(t - 1, -1, -1):
            h_prev, z, r, rh, c = steps[i]
            dh = dstate + dout[:, i]
            dz = dh * (c - h_prev)
            dc = dh * z
            dprev = dh * (1.0 - z)

            dac = dc * (1.0 - c * c)
            dwh[:, 2 * h :] += rh.T @ dac
            drh = dac @ wh[:, 2 * h :].T
            dr = drh * h_prev
            dprev += drh * r

            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dwh[:, :h] += h_prev.T @ daz
            dwh[:, h : 2 * h] += h_prev.T @ dar
            dprev += daz @ wh[:, :h].T + dar @ wh[:, h : 2 * h].T

            da = np.concatenate([daz, dar, dac], axis=1)
            dwx += x[:, i].T @ da
            db += da.sum(axis=0)
            dx[:, i] = da @ self.wx.data.T
            dstate = dprev
        self.wx.grad += dwx
        self.wh.grad += dwh
        self.b.grad += db
        return dx

    def params(self):
        return [self.wx, self.wh, self.b]


class BiGRU:
    """(B, T, D) -> (B, 2T, H) bidirectional GRU."""

    def __init__(self, in_dim, hidden, rng, name="bigru", dtype=np.float32):
        self.in_dim = in_dim
        self.hidden = hidden
        self.fwd = _GRUDirection(in_dim, hidden, rng, f"{name}.fwd", dtype)
        self.bwd = _GRUDirection(in_dim, hidden, rng, f"{name}.bwd", dtype)
        self._t = None

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ShapeError(f"bigru: expected (B,T,{self.in_dim}), got {x.shape}")
        self._t = x.shape[1]
        out_f = self.fwd.forward(x)
        out_b = self.bwd.forward(x[:, ::-1])
        return np.concatenate([out_f, out_b[:, ::-1]], axis=1)

    def backward(self, dout):
        t = self._t
        dx_f = self.fwd.backward(dout[:, :t])
        dx_b = self.bwd.backward(np.ascontiguousarray(dout[:, t:][:, ::-1]))
        return dx_f + dx_b[:, ::-1]

    def params(self):
        return self.fwd.params() + self.bwd.params()
