"""Fusing per-view feature grids into a single grid.

Two routes: exactly permutation-invariant pointwise pooling (max / mean),
and a 3D convolutional gated recurrent unit that folds the views in
sequence. GRU gates are computed with same-padded 3D convolutions whose
pre-activations are layer-normalized over channels per voxel:

    z  = sigmoid(LN_z(conv(x, Wx_z) + conv(h, Wh_z) + b_z))
    r  = sigmoid(LN_r(conv(x, Wx_r) + conv(h, Wh_r) + b_r))
    c  = tanh(LN_c(conv(x, Wx_c) + conv(r * h, Wh_c) + b_c))
    h' = (1 - z) * h + z * c

Note the layer norm removes any constant shift of its input, so a gate is
forced open/closed through the LN shift parameter, not the convolution
bias. The initial hidden state is zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .nnkit import tape
from .nnkit.tape import Parameter, TapeNode


def fuse_pointwise(grids, mode="max"):
    """Elementwise max or mean over view grids; bitwise permutation-invariant.

    The mean sorts the per-voxel summands before accumulating, so any input
    ordering produces identical bits.
    """
    grids = list(grids)
    if not grids:
        raise ValueError("need at least one grid")
    shapes = {g.shape for g in grids}
    if len(shapes) > 1:
        raise ValueError(f"grids disagree on shape: {shapes}")
    stacked = np.stack([np.asarray(g, dtype=np.float64) for g in grids])
    if mode == "max":
        return stacked.max(axis=0)
    if mode == "mean":
        return np.sort(stacked, axis=0).sum(axis=0) / len(grids)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class GateParams:
    w_x: Parameter      # (k, k, k, C_in, C_h)
    w_h: Parameter      # (k, k, k, C_h, C_h)
    bias: Parameter     # (C_h,)
    ln_gain: Parameter  # (C_h,)
    ln_shift: Parameter  # (C_h,)


@dataclass
class GruCellParams:
    update: GateParams
    reset: GateParams
    candidate: GateParams

    @property
    def in_channels(self) -> int:
        return self.update.w_x.value.shape[3]

    @property
    def hidden_channels(self) -> int:
        return self.update.w_x.value.shape[4]

    def parameters(self) -> list[Parameter]:
        out = []
        for gate in (self.update, self.reset, self.candidate):
            out.extend(getattr(gate, f.name) for f in fields(gate))
        return out


def init_gru_params(c_in, c_hidden, kernel=3, rng=None, prefix="gru") -> GruCellParams:
    """He-initialized kernels, zero biases, unit layer-norm gains."""
    if kernel % 2 == 0:
        raise ValueError("GRU kernel must be odd for same padding")
    rng = rng if rng is not None else np.random.default_rng(0)

    def gate(name):
        sx = np.sqrt(2.0 / (kernel ** 3 * c_in))
        sh = np.sqrt(2.0 / (kernel ** 3 * c_hidden))
        return GateParams(
            w_x=Parameter(rng.standard_normal((kernel,) * 3 + (c_in, c_hidden)) * sx,
                          f"{prefix}.{name}.w_x"),
            w_h=Parameter(rng.standard_normal((kernel,) * 3 + (c_hidden, c_hidden)) * sh,
                          f"{prefix}.{name}.w_h"),
            bias=Parameter(np.zeros(c_hidden), f"{prefix}.{name}.bias"),
            ln_gain=Parameter(np.ones(c_hidden), f"{prefix}.{name}.ln_gain"),
            ln_shift=Parameter(np.zeros(c_hidden), f"{prefix}.{name}.ln_shift"),
        )

    return GruCellParams(update=gate("update"), reset=gate("reset"), candidate=gate("candidate"))


def _gate_preact(x, h_or_rh, gate: GateParams):
    pre = tape.add(tape.conv(x, gate.w_x, gate.bias), tape.conv(h_or_rh, gate.w_h))
    return tape.layer_norm_channels(pre, gate.ln_gain, gate.ln_shift)


def gru_step_node(h, x, params: GruCellParams) -> TapeNode:
    """One recurrent update on tape nodes."""
    h, x = tape.as_node(h), tape.as_node(x)
    z = tape.sigmoid(_gate_preact(x, h, params.update))
    r = tape.sigmoid(_gate_preact(x, h, params.reset))
    c = tape.tanh(_gate_preact(x, tape.mul(r, h), params.candidate))
    return tape.add(tape.mul(tape.one_minus(z), h), tape.mul(z, c))


def gru_step(h, x, params: GruCellParams) -> np.ndarray:
    """Plain-array wrapper around gru_step_node."""
    return gru_step_node(h, x, params).value


def fuse_recurrent_node(grids, params: GruCellParams, h0=None) -> TapeNode:
    """Fold gru_step over the views in the given order; returns the final state."""
    grids = list(grids)
    if not grids:
        raise ValueError("need at least one grid")
    first = tape.as_node(grids[0])
    if h0 is None:
        v = first.value.shape[0]
        h = tape.as_node(np.zeros((v, v, v, params.hidden_channels)))
    else:
        h = tape.as_node(h0)
    for g in grids:
        h = gru_step_node(h, g, params)
    return h


def fuse_recurrent(grids, params: GruCellParams, h0=None) -> np.ndarray:
    return fuse_recurrent_node(grids, params, h0).value


def ordering_variance(grids, params: GruCellParams, n_orders=5, seed=0):
    """Max voxel deviation of the fused grid across random view orderings.

    Low variance with respect to ordering is a trained property, so this is
    a diagnostic, not an invariant.
    """
    grids = list(grids)
    rng = np.random.default_rng(seed)
    baseline = fuse_recurrent(grids, params)
    worst = 0.0
    for _ in range(n_orders):
        perm = rng.permutation(len(grids))
        out = fuse_recurrent([grids[i] for i in perm], params)
        worst = max(worst, float(np.abs(out - baseline).max()))
    return worst
