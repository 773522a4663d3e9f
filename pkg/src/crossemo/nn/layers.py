"""Parameterized layers: dense, LSTM/BLSTM, additive attention.

Parameters live in a flat dict keyed by dotted names so checkpoints can
serialize them without knowing the architecture. Init: Glorot uniform for
weight matrices and kernels, zero biases, +1 on the LSTM forget gate.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from . import ops
from .tensor import Tensor, glorot_uniform


def add_dense(params: dict, rng, prefix: str, n_in: int, n_out: int, dtype=np.float32):
    params[f"{prefix}.w"] = Tensor(
        glorot_uniform(rng, n_in, n_out, (n_in, n_out), dtype), requires_grad=True
    )
    params[f"{prefix}.b"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def dense(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def add_conv(params: dict, rng, prefix: str, in_ch: int, out_ch: int, kernel: int, dtype=np.float32):
    fan_in = in_ch * kernel * kernel
    fan_out = out_ch * kernel * kernel
    params[f"{prefix}.w"] = Tensor(
        glorot_uniform(rng, fan_in, fan_out, (out_ch, in_ch, kernel, kernel), dtype),
        requires_grad=True,
    )
    params[f"{prefix}.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)


def add_batchnorm(params: dict, stats: dict, prefix: str, n_features: int, dtype=np.float32):
    params[f"{prefix}.gamma"] = Tensor(np.ones(n_features, dtype=dtype), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(n_features, dtype=dtype), requires_grad=True)
    stats[prefix] = ops.BnStats(n_features, dtype=dtype)


def add_lstm(params: dict, rng, prefix: str, n_in: int, hidden: int, dtype=np.float32):
    # gate order along the fused axis: input, forget, cell, output
    params[f"{prefix}.wx"] = Tensor(
        glorot_uniform(rng, n_in, 4 * hidden, (n_in, 4 * hidden), dtype), requires_grad=True
    )
    params[f"{prefix}.wh"] = Tensor(
        glorot_uniform(rng, hidden, 4 * hidden, (hidden, 4 * hidden), dtype),
        requires_grad=True,
    )
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
    params[f"{prefix}.b"] = Tensor(bias, requires_grad=True)


def lstm_forward(params: dict, prefix: str, x: Tensor, hidden: int, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over [batch, time, feat] -> [batch, time, hidden].

    The input projection is hoisted out of the time loop as one big matmul.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"lstm expects [batch, time, feat], got {x.shape}")
    batch, n_steps, n_in = x.shape
    wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
    gates_x = ops.reshape(
        ops.add(ops.matmul(ops.reshape(x, (batch * n_steps, n_in)), wx), b),
        (batch, n_steps, 4 * hidden),
    )
    h = Tensor(np.zeros((batch, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=x.dtype))
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    outputs = [None] * n_steps
    for t in order:
        gates = ops.add(ops.timestep(gates_x, t), ops.matmul(h, wh))
        i = ops.sigmoid(ops.slice_last(gates, 0, hidden))
        f = ops.sigmoid(ops.slice_last(gates, hidden, 2 * hidden))
        g = ops.tanh(ops.slice_last(gates, 2 * hidden, 3 * hidden))
        o = ops.sigmoid(ops.slice_last(gates, 3 * hidden, 4 * hidden))
        c = ops.add(ops.mul(f, c), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        outputs[t] = h
    return ops.stack_time(outputs)


def add_blstm(params: dict, rng, prefix: str, n_in: int, hidden: int, dtype=np.float32):
    add_lstm(params, rng, f"{prefix}.fw", n_in, hidden, dtype)
    add_lstm(params, rng, f"{prefix}.bw", n_in, hidden, dtype)


def blstm_forward(params: dict, prefix: str, x: Tensor, hidden: int) -> Tensor:
    """Bidirectional LSTM; per-step concatenation of the forward and backward
    hidden states, full sequence returned (no reduction)."""
    fw = lstm_forward(params, f"{prefix}.fw", x, hidden, reverse=False)
    bw = lstm_forward(params, f"{prefix}.bw", x, hidden, reverse=True)
    return ops.concat_last(fw, bw)


def add_attention(params: dict, rng, prefix: str, n_in: int, att_dim: int, dtype=np.float32):
    params[f"{prefix}.w"] = Tensor(
        glorot_uniform(rng, n_in, att_dim, (n_in, att_dim), dtype), requires_grad=True
    )
    params[f"{prefix}.b"] = Tensor(np.zeros(att_dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}.v"] = Tensor(
        glorot_uniform(rng, att_dim, 1, (att_dim, 1), dtype), requires_grad=True
    )


def attention_forward(params: dict, prefix: str, seq: Tensor):
    """Additive attention pooling over time.

    Scores e_t = v . tanh(W h_t + b), weights = softmax over time, output =
    sum_t weight_t * h_t. Returns (pooled [batch, feat], weights ndarray).
    """
    batch, n_steps, feat = seq.shape
    flat = ops.reshape(seq, (batch * n_steps, feat))
    hidden = ops.tanh(
        ops.add(ops.matmul(flat, params[f"{prefix}.w"]), params[f"{prefix}.b"])
    )
    scores = ops.reshape(ops.matmul(hidden, params[f"{prefix}.v"]), (batch, n_steps))
    weights = ops.softmax(scores, axis=1)
    weighted = ops.mul(ops.reshape(weights, (batch, n_steps, 1)), seq)
    pooled = ops.sum_axis(weighted, axis=1)
    return pooled, weights.data
