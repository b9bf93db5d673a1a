"""Convolutional recurrent cells: ConvLSTM, ConvLSTM with convolutional
peepholes, and ConvGRU. Each is a single time step with an exact backward.

Gate activations are always sigmoid; ``act`` selects the candidate/output
nonlinearity (``"relu"`` or ``"tanh"``).

Kernels of all gates are stored stacked along the output axis so one
convolution of the concatenated ``[x, H]`` input produces every gate:

* LSTM variants: gate order ``i, f, c, o``; optional peephole stack ``wc``
  ordered ``i, f, o``.
* GRU: gate order ``z, r, h``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    activation_backward,
    apply_activation,
    conv2d_input_grad,
    conv2d_same,
    conv2d_weight_grad,
    glorot_uniform,
    sigmoid,
)

CELL_TYPES = ("convlstm", "convlstm_peephole", "convgru")
GATE_NAMES = {"convlstm": "ifco", "convlstm_peephole": "ifco", "convgru": "zrh"}


def _check_kind(kind):
    if kind not in CELL_TYPES:
        raise ValueError(f"unknown cell type {kind!r}; expected one of {CELL_TYPES}")


@dataclass
class CellWeights:
    kind: str
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray
    wc: np.ndarray | None = None

    def __post_init__(self):
        _check_kind(self.kind)
        G = len(GATE_NAMES[self.kind])
        Ch = self.wh.shape[1]
        if self.wx.shape[0] != G * Ch or self.wh.shape[0] != G * Ch or self.b.shape != (G * Ch,):
            raise ValueError(f"{self.kind} expects {G} stacked gates of {Ch} channels")
        if self.wx.shape[2:] != self.wh.shape[2:]:
            raise ValueError("input and hidden kernels must share spatial size")
        if self.kind == "convlstm_peephole":
            if self.wc is None or self.wc.shape != (3 * Ch, Ch) + self.wh.shape[2:]:
                raise ValueError("peephole cell needs wc of shape (3*Ch, Ch, kH, kW)")

    @property
    def hidden_channels(self) -> int:
        return self.wh.shape[1]

    @property
    def input_channels(self) -> int:
        return self.wx.shape[1]

    @property
    def kernel_size(self) -> tuple:
        return self.wx.shape[2:]

    def gate(self, name: str) -> tuple:
        """``(W_x, W_h, b)`` views for one gate."""
        k = GATE_NAMES[self.kind].index(name)
        Ch = self.hidden_channels
        s = slice(k * Ch, (k + 1) * Ch)
        return self.wx[s], self.wh[s], self.b[s]

    def params(self) -> dict:
        p = {"wx": self.wx, "wh": self.wh, "b": self.b}
        if self.wc is not None:
            p["wc"] = self.wc
        return p

    def astype(self, dtype) -> "CellWeights":
        return CellWeights(
            self.kind,
            self.wx.astype(dtype),
            self.wh.astype(dtype),
            self.b.astype(dtype),
            None if self.wc is None else self.wc.astype(dtype),
        )

    @classmethod
    def initialize(cls, kind, input_channels, hidden_channels, kernel=(5, 5),
                   rng=None, dtype=np.float32, forget_bias=1.0) -> "CellWeights":
        """Glorot-uniform kernels per gate, zero biases, forget bias +1."""
        _check_kind(kind)
        rng = np.random.default_rng(0) if rng is None else rng
        gates = GATE_NAMES[kind]
        k = tuple(kernel)
        wx = np.concatenate([glorot_uniform(rng, (hidden_channels, input_channels) + k, dtype) for _ in gates])
        wh = np.concatenate([glorot_uniform(rng, (hidden_channels, hidden_channels) + k, dtype) for _ in gates])
        b = np.zeros(len(gates) * hidden_channels, dtype=dtype)
        wc = None
        if kind != "convgru":
            b[hidden_channels:2 * hidden_channels] = forget_bias
        if kind == "convlstm_peephole":
            wc = np.concatenate([glorot_uniform(rng, (hidden_channels, hidden_channels) + k, dtype) for _ in range(3)])
        return cls(kind, wx, wh, b, wc)


@dataclass
class CellState:
    H: np.ndarray
    C: np.ndarray | None = None

    @classmethod
    def zeros(cls, kind, batch, hidden_channels, rows, cols, dtype=np.float32) -> "CellState":
        shape = (batch, hidden_channels, rows, cols)
        if kind == "convgru":
            return cls(np.zeros(shape, dtype))
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


@dataclass
class StepCache:
    kind: str
    act: str
    tensors: dict = field(default_factory=dict)


def _check_state(x, prev, w):
    if prev is None or prev.H is None:
        raise ValueError("uninitialized state; use CellState.zeros")
    if x.shape[-3] != w.input_channels:
        raise ValueError(f"input has {x.shape[-3]} channels, cell expects {w.input_channels}")
    if prev.H.shape[-3] != w.hidden_channels or prev.H.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"state shape {prev.H.shape} inconsistent with input {x.shape}")
    if w.kind != "convgru" and (prev.C is None or prev.C.shape != prev.H.shape):
        raise ValueError("LSTM cells need a cell state C shaped like H")


def _lstm_forward(x, prev, w, act, keep):
    _check_state(x, prev, w)
    Ch = w.hidden_channels
    Hp, Cp = prev.H, prev.C
    xh = np.concatenate([x, Hp], axis=-3)
    z = conv2d_same(xh, (np.concatenate([w.wx, w.wh], axis=1), w.b))
    sl = [slice(None)] * (z.ndim - 3)
    gi, gf, gc, go = (z[(*sl, slice(k * Ch, (k + 1) * Ch))] for k in range(4))
    if w.wc is not None:
        gi += conv2d_same(Cp, (w.wc[:Ch], None))
        gf += conv2d_same(Cp, (w.wc[Ch:2 * Ch], None))
    sigmoid(gi, out=gi)
    sigmoid(gf, out=gf)
    apply_activation(gc, act, out=gc)
    C = gf * Cp
    C += gi * gc
    if w.wc is not None:
        go += conv2d_same(C, (w.wc[2 * Ch:], None))
    sigmoid(go, out=go)
    aC = apply_activation(C, act)
    H = go * aC
    cache = None
    if keep:
        cache = StepCache(w.kind, act, dict(xh=xh, Cp=Cp, z=z, C=C, aC=aC))
    else:
        del aC, z, xh
    return CellState(H, C), cache


def _gru_forward(x, prev, w, act, keep):
    _check_state(x, prev, w)
    Ch = w.hidden_channels
    Hp = prev.H
    zx = conv2d_same(x, (w.wx, w.b))
    sl = [slice(None)] * (zx.ndim - 3)
    zr = zx[(*sl, slice(0, 2 * Ch))]
    zr += conv2d_same(Hp, (w.wh[:2 * Ch], None))
    sigmoid(zr, out=zr)
    z = zr[(*sl, slice(0, Ch))]
    r = zr[(*sl, slice(Ch, 2 * Ch))]
    rh = r * Hp
    cand = zx[(*sl, slice(2 * Ch, 3 * Ch))]
    cand += conv2d_same(rh, (w.wh[2 * Ch:], None))
    apply_activation(cand, act, out=cand)
    H = (1 - z) * Hp + z * cand
    cache = None
    if keep:
        cache = StepCache(w.kind, act, dict(x=x, Hp=Hp, zx=zx, rh=rh))
    return CellState(H), cache


def cell_forward(x, prev: CellState, w: CellWeights, act: str = "relu", keep_cache: bool = False):
    """One step of any cell type; returns ``(state, cache)``."""
    if w.kind == "convgru":
        return _gru_forward(x, prev, w, act, keep_cache)
    return _lstm_forward(x, prev, w, act, keep_cache)


def convlstm_step(x, prev: CellState, w: CellWeights, act: str = "relu") -> CellState:
    if w.kind != "convlstm":
        raise ValueError(f"convlstm_step got {w.kind} weights")
    return _lstm_forward(x, prev, w, act, False)[0]


def convlstm_peephole_step(x, prev: CellState, w: CellWeights, act: str = "relu") -> CellState:
    if w.kind != "convlstm_peephole":
        raise ValueError(f"convlstm_peephole_step got {w.kind} weights")
    return _lstm_forward(x, prev, w, act, False)[0]


def convgru_step(x, prev_H, w: CellWeights, act: str = "relu"):
    if w.kind != "convgru":
        raise ValueError(f"convgru_step got {w.kind} weights")
    prev = prev_H if isinstance(prev_H, CellState) else CellState(prev_H)
    return _gru_forward(x, prev, w, act, False)[0].H


def _lstm_backward(cache, w, dH, dC, need_input):
    t = cache.tensors
    act = cache.act
    Ch = w.hidden_channels
    xh, Cp, z, C, aC = t["xh"], t["Cp"], t["z"], t["C"], t["aC"]
    sl = [slice(None)] * (z.ndim - 3)
    gi, gf, gc, go = (z[(*sl, slice(k * Ch, (k + 1) * Ch))] for k in range(4))

    da = np.empty_like(z)
    dai, daf, dac, dao = (da[(*sl, slice(k * Ch, (k + 1) * Ch))] for k in range(4))
    dao[...] = activation_backward(dH * aC, go, "sigmoid")
    dCt = activation_backward(dH * go, aC, act)
    if dC is not None:
        dCt += dC
    grads = {}
    if w.wc is not None:
        dCt += conv2d_input_grad(dao, w.wc[2 * Ch:])
        dwc_o = conv2d_weight_grad(dao, C, w.wc[2 * Ch:].shape)
    dai[...] = activation_backward(dCt * gc, gi, "sigmoid")
    daf[...] = activation_backward(dCt * Cp, gf, "sigmoid")
    dac[...] = activation_backward(dCt * gi, gc, act)
    dCp = dCt * gf
    if w.wc is not None:
        daif = da[(*sl, slice(0, 2 * Ch))]
        dCp += conv2d_input_grad(daif, w.wc[:2 * Ch])
        dwc_if = conv2d_weight_grad(daif, Cp, w.wc[:2 * Ch].shape)
        grads["wc"] = np.concatenate([dwc_if, dwc_o])

    Cin = w.input_channels
    dw = conv2d_weight_grad(da, xh, (4 * Ch, Cin + Ch) + w.kernel_size)
    grads["wx"] = np.ascontiguousarray(dw[:, :Cin])
    grads["wh"] = np.ascontiguousarray(dw[:, Cin:])
    grads["b"] = da.sum(axis=tuple(i for i in range(da.ndim) if i != da.ndim - 3))
    if need_input:
        dxh = conv2d_input_grad(da, np.concatenate([w.wx, w.wh], axis=1))
        dx = dxh[(*sl, slice(0, Cin))]
        dHp = dxh[(*sl, slice(Cin, None))]
    else:
        dx = None
        dHp = conv2d_input_grad(da, w.wh)
    return dx, CellState(dHp, dCp), grads


def _gru_backward(cache, w, dH, need_input):
    t = cache.tensors
    act = cache.act
    Ch = w.hidden_channels
    x, Hp, zx, rh = t["x"], t["Hp"], t["zx"], t["rh"]
    sl = [slice(None)] * (zx.ndim - 3)
    z = zx[(*sl, slice(0, Ch))]
    r = zx[(*sl, slice(Ch, 2 * Ch))]
    cand = zx[(*sl, slice(2 * Ch, 3 * Ch))]

    da = np.empty_like(zx)
    daz, dar, dah = (da[(*sl, slice(k * Ch, (k + 1) * Ch))] for k in range(3))
    dHp = dH * (1 - z)
    daz[...] = activation_backward(dH * (cand - Hp), z, "sigmoid")
    dah[...] = activation_backward(dH * z, cand, act)
    drh = conv2d_input_grad(dah, w.wh[2 * Ch:])
    dwh_h = conv2d_weight_grad(dah, rh, w.wh[2 * Ch:].shape)
    dar[...] = activation_backward(drh * Hp, r, "sigmoid")
    dHp += drh * r
    dazr = da[(*sl, slice(0, 2 * Ch))]
    dHp += conv2d_input_grad(dazr, w.wh[:2 * Ch])
    dwh_zr = conv2d_weight_grad(dazr, Hp, w.wh[:2 * Ch].shape)
    grads = {
        "wx": conv2d_weight_grad(da, x, w.wx.shape),
        "wh": np.concatenate([dwh_zr, dwh_h]),
        "b": da.sum(axis=tuple(i for i in range(da.ndim) if i != da.ndim - 3)),
    }
    dx = conv2d_input_grad(da, w.wx) if need_input else None
    return dx, CellState(dHp), grads


def cell_backward(cache: StepCache, w: CellWeights, dH, dC=None, need_input: bool = True):
    """Backward through one step.

    ``dH``/``dC`` are upstream gradients w.r.t. the step's output state
    (``dC`` may be None). Returns ``(dx, d_prev_state, weight_grads)`` where
    ``weight_grads`` is keyed like :meth:`CellWeights.params`.
    """
    if cache is None:
        raise ValueError("no forward cache; run cell_forward with keep_cache=True")
    if cache.kind == "convgru":
        return _gru_backward(cache, w, dH, need_input)
    return _lstm_backward(cache, w, dH, dC, need_input)
