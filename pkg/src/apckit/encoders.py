"""Causal encoders: a residual GRU stack and a decoder-only Transformer.

Both map an N x d feature sequence to per-layer hidden states and an
N x d prediction sequence, and both are strictly autoregressive: the
output at position i never depends on inputs at positions > i (tested
bitwise).

The GRU cell is a single fused graph node with a hand-derived backward;
running it as a composition of primitive ops would put ~20 nodes per
timestep on the tape, which dominates runtime for BPTT.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ConfigError


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in); the stable small-scale default."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

@dataclass
class GRULayerParams:
    """One GRU layer: reset/update/candidate gates, input and recurrent mats."""

    w_r: T.DiffValue
    w_z: T.DiffValue
    w_c: T.DiffValue
    u_r: T.DiffValue
    u_z: T.DiffValue
    u_c: T.DiffValue
    b_r: T.DiffValue
    b_z: T.DiffValue
    b_c: T.DiffValue

    @classmethod
    def create(cls, rng, input_dim: int, hidden: int, dtype=np.float32) -> "GRULayerParams":
        w = lambda fan, shape: T.DiffValue(uniform_init(rng, fan, shape, dtype))
        zeros = lambda shape: T.DiffValue(np.zeros(shape, dtype=dtype))
        return cls(
            w_r=w(input_dim, (input_dim, hidden)),
            w_z=w(input_dim, (input_dim, hidden)),
            w_c=w(input_dim, (input_dim, hidden)),
            u_r=w(hidden, (hidden, hidden)),
            u_z=w(hidden, (hidden, hidden)),
            u_c=w(hidden, (hidden, hidden)),
            b_r=zeros(hidden), b_z=zeros(hidden), b_c=zeros(hidden),
        )

    def named(self, prefix: str) -> dict[str, T.DiffValue]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("w_r", "w_z", "w_c", "u_r", "u_z", "u_c", "b_r", "b_z", "b_c")}


def gru_cell(x, h_prev, p: GRULayerParams) -> T.DiffValue:
    """One GRU step on a [B x in] input and [B x hidden] state.

    r = sig(xW_r + hU_r + b_r); z = sig(xW_z + hU_z + b_z)
    c = tanh(xW_c + (r*h)U_c + b_c); h' = (1-z)*h + z*c
    """
    xv, hv = T._value(x), T._value(h_prev)
    wr, wz, wc = p.w_r.value, p.w_z.value, p.w_c.value
    ur, uz, uc = p.u_r.value, p.u_z.value, p.u_c.value
    if xv.ndim != 2 or hv.ndim != 2:
        raise T.ShapeError(f"gru_cell expects 2-D input/state, got {xv.shape}, {hv.shape}")
    if xv.shape[1] != wr.shape[0] or hv.shape[1] != ur.shape[0]:
        raise T.ShapeError(
            f"gru_cell dims: input {xv.shape} vs W {wr.shape}, state {hv.shape} vs U {ur.shape}")

    r = expit(xv @ wr + hv @ ur + p.b_r.value)
    z = expit(xv @ wz + hv @ uz + p.b_z.value)
    rh = r * hv
    c = np.tanh(xv @ wc + rh @ uc + p.b_c.value)
    out = (1.0 - z) * hv + z * c

    parents: list[T.DiffValue] = []
    slots: list[str] = []
    for obj, name in ((x, "x"), (h_prev, "h")):
        if isinstance(obj, T.DiffValue):
            parents.append(obj)
            slots.append(name)
    param_list = (p.w_r, p.w_z, p.w_c, p.u_r, p.u_z, p.u_c, p.b_r, p.b_z, p.b_c)
    parents.extend(param_list)
    slots.extend(("w_r", "w_z", "w_c", "u_r", "u_z", "u_c", "b_r", "b_z", "b_c"))

    def backward(g):
        dz_pre = g * (c - hv) * z * (1.0 - z)
        dc_pre = g * z * (1.0 - c * c)
        d_rh = dc_pre @ uc.T
        dr_pre = d_rh * hv * r * (1.0 - r)
        grads = {
            "x": dr_pre @ wr.T + dz_pre @ wz.T + dc_pre @ wc.T,
            "h": g * (1.0 - z) + d_rh * r + dr_pre @ ur.T + dz_pre @ uz.T,
            "w_r": xv.T @ dr_pre, "w_z": xv.T @ dz_pre, "w_c": xv.T @ dc_pre,
            "u_r": hv.T @ dr_pre, "u_z": hv.T @ dz_pre, "u_c": rh.T @ dc_pre,
            "b_r": dr_pre.sum(axis=0), "b_z": dz_pre.sum(axis=0), "b_c": dc_pre.sum(axis=0),
        }
        return [grads[s] for s in slots]

    return T.make_node(out, parents, backward)


def run_gru_layer(steps: Sequence, p: GRULayerParams, reverse: bool = False) -> list:
    """Unroll one GRU layer over a list of [B x in] steps; zero initial state."""
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    first = T._value(steps[0])
    h = np.zeros((first.shape[0], p.u_r.value.shape[0]), dtype=p.u_r.value.dtype)
    out: list = [None] * len(steps)
    for t in order:
        h = gru_cell(steps[t], h, p)
        out[t] = h
    return out


@dataclass
class RNNConfig:
    input_dim: int = 80
    layers: int = 4
    hidden: int = 512
    residual: bool = True


class RNNEncoder:
    """Unidirectional GRU stack with residual connections on layers 2..L,
    projected back to the input dimensionality."""

    kind = "rnn"

    def __init__(self, cfg: RNNConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.layers = []
        in_dim = cfg.input_dim
        for _ in range(cfg.layers):
            self.layers.append(GRULayerParams.create(rng, in_dim, cfg.hidden, dtype))
            in_dim = cfg.hidden
        self.proj = T.DiffValue(uniform_init(rng, cfg.hidden, (cfg.hidden, cfg.input_dim), dtype))

    @property
    def output_width(self) -> int:
        return self.cfg.hidden

    def named_params(self) -> dict[str, T.DiffValue]:
        out: dict[str, T.DiffValue] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"rnn.{i}"))
        out["proj.w"] = self.proj
        return out

    def parameters(self) -> list[T.DiffValue]:
        return list(self.named_params().values())

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward_steps(self, block: np.ndarray) -> tuple[list, list[list]]:
        """Batched forward on a padded [B x T x d] block.

        Returns (per-step predictions [B x d], per-layer lists of per-step
        hidden states [B x hidden]). Padding frames produce outputs too;
        the caller masks them out of any loss.
        """
        if block.ndim != 3 or block.shape[2] != self.cfg.input_dim:
            raise T.ShapeError(f"expected [B x T x {self.cfg.input_dim}], got {block.shape}")
        seq: list = [np.ascontiguousarray(block[:, t, :]) for t in range(block.shape[1])]
        states: list[list] = []
        for l, layer in enumerate(self.layers):
            out = run_gru_layer(seq, layer)
            if self.cfg.residual and l >= 1:
                out = [T.add(o, s) for o, s in zip(out, seq)]
            states.append(out)
            seq = out
        preds = [T.matmul(h, self.proj) for h in seq]
        return preds, states

    def forward(self, frames: np.ndarray) -> "EncoderOutput":
        """Single-utterance forward on [N x d]; stacks steps into matrices."""
        frames = np.asarray(frames)
        preds, states = self.forward_steps(frames[None, :, :].astype(self.proj.value.dtype))
        layers = [T.concat(layer_steps, axis=0) for layer_steps in states]
        y = T.concat(preds, axis=0)
        return EncoderOutput(layers=layers, predictions=y)


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------

@dataclass
class TransformerConfig:
    input_dim: int = 80
    blocks: int = 4
    d_model: int = 512
    heads: int = 8
    ffn_hidden: int = 2048
    pre_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")


def sinusoidal_pe(n: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed positional encodings: sin on even columns, cos on odd."""
    if d_model % 2 != 0:
        raise ConfigError(f"sinusoidal encoding needs even d_model, got {d_model}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, 2.0 * np.arange(d_model // 2) / d_model)
    pe = np.zeros((n, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe.astype(dtype)


@dataclass
class TransformerBlockParams:
    w_q: T.DiffValue
    w_k: T.DiffValue
    w_v: T.DiffValue
    w_o: T.DiffValue
    b_q: T.DiffValue
    b_k: T.DiffValue
    b_v: T.DiffValue
    b_o: T.DiffValue
    ln1_gain: T.DiffValue
    ln1_bias: T.DiffValue
    ln2_gain: T.DiffValue
    ln2_bias: T.DiffValue
    ffn_w1: T.DiffValue
    ffn_b1: T.DiffValue
    ffn_w2: T.DiffValue
    ffn_b2: T.DiffValue

    @classmethod
    def create(cls, rng, d_model: int, ffn_hidden: int, dtype=np.float32):
        w = lambda fan, shape: T.DiffValue(uniform_init(rng, fan, shape, dtype))
        zeros = lambda n: T.DiffValue(np.zeros(n, dtype=dtype))
        ones = lambda n: T.DiffValue(np.ones(n, dtype=dtype))
        return cls(
            w_q=w(d_model, (d_model, d_model)), w_k=w(d_model, (d_model, d_model)),
            w_v=w(d_model, (d_model, d_model)), w_o=w(d_model, (d_model, d_model)),
            b_q=zeros(d_model), b_k=zeros(d_model), b_v=zeros(d_model), b_o=zeros(d_model),
            ln1_gain=ones(d_model), ln1_bias=zeros(d_model),
            ln2_gain=ones(d_model), ln2_bias=zeros(d_model),
            ffn_w1=w(d_model, (d_model, ffn_hidden)), ffn_b1=zeros(ffn_hidden),
            ffn_w2=w(ffn_hidden, (ffn_hidden, d_model)), ffn_b2=zeros(d_model),
        )

    def named(self, prefix: str) -> dict[str, T.DiffValue]:
        names = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o",
                 "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")
        return {f"{prefix}.{k}": getattr(self, k) for k in names}


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def causal_self_attention(h: T.DiffValue, p: TransformerBlockParams, heads: int,
                          return_weights: bool = False):
    """Masked multi-head attention over an [N x d_model] sequence.

    Positions j > i contribute exactly zero weight to output i, so earlier
    outputs are bitwise independent of later inputs.
    """
    n, d_model = T._value(h).shape
    head_dim = d_model // heads
    scale = 1.0 / np.sqrt(head_dim)

    def split(x):  # [N x D] -> [heads x N x head_dim]
        return T.swapaxes(T.reshape(x, (n, heads, head_dim)), 0, 1)

    q = split(T.add(T.matmul(h, p.w_q), p.b_q))
    k = split(T.add(T.matmul(h, p.w_k), p.b_k))
    v = split(T.add(T.matmul(h, p.w_v), p.b_v))

    scores = T.mul(T.matmul(q, T.swapaxes(k, 1, 2)), scale)
    scores = T.add(scores, causal_mask(n, T._value(h).dtype))
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.swapaxes(T.matmul(weights, v), 0, 1), (n, d_model))
    out = T.add(T.matmul(ctx, p.w_o), p.b_o)
    if return_weights:
        return out, weights
    return out


def transformer_block(h: T.DiffValue, p: TransformerBlockParams, heads: int,
                      pre_norm: bool = False, dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> T.DiffValue:
    """One decoder block: masked attention then a position-wise GELU MLP.

    Default wiring is post-norm: LN(h + Attn(h)) then LN(a + FFN(a)).
    """

    def ffn(x):
        inner = T.gelu(T.add(T.matmul(x, p.ffn_w1), p.ffn_b1))
        return T.add(T.matmul(inner, p.ffn_w2), p.ffn_b2)

    def drop(x):
        return T.dropout(x, dropout, rng) if dropout > 0.0 else x

    if pre_norm:
        a = T.add(h, drop(causal_self_attention(
            T.layer_norm(h, p.ln1_gain, p.ln1_bias), p, heads)))
        return T.add(a, drop(ffn(T.layer_norm(a, p.ln2_gain, p.ln2_bias))))
    a = T.layer_norm(T.add(h, drop(causal_self_attention(h, p, heads))),
                     p.ln1_gain, p.ln1_bias)
    return T.layer_norm(T.add(a, drop(ffn(a))), p.ln2_gain, p.ln2_bias)


class TransformerEncoder:
    """Decoder-only Transformer with tied input/output projections.

    The output projection is the transpose of the stored input projection;
    there is never a second matrix.
    """

    kind = "transformer"

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.w_in = T.DiffValue(uniform_init(rng, cfg.input_dim, (cfg.input_dim, cfg.d_model), dtype))
        self.blocks = [TransformerBlockParams.create(rng, cfg.d_model, cfg.ffn_hidden, dtype)
                       for _ in range(cfg.blocks)]
        self._dropout_rng = np.random.default_rng(rng.integers(2 ** 63))

    @property
    def w_out(self) -> np.ndarray:
        """Transposed view of the stored input projection (shared memory)."""
        return self.w_in.value.T

    @property
    def output_width(self) -> int:
        return self.cfg.d_model

    def named_params(self) -> dict[str, T.DiffValue]:
        out = {"w_in": self.w_in}
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"block.{i}"))
        return out

    def parameters(self) -> list[T.DiffValue]:
        return list(self.named_params().values())

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward(self, frames: np.ndarray) -> "EncoderOutput":
        frames = np.asarray(frames, dtype=self.w_in.value.dtype)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.input_dim:
            raise T.ShapeError(f"expected [N x {self.cfg.input_dim}], got {frames.shape}")
        n = frames.shape[0]
        pe = sinusoidal_pe(n, self.cfg.d_model, self.w_in.value.dtype)
        h = T.add(T.matmul(frames, self.w_in), pe)
        layers = []
        for p in self.blocks:
            h = transformer_block(h, p, self.cfg.heads, self.cfg.pre_norm,
                                  self.cfg.dropout, self._dropout_rng)
            layers.append(h)
        y = T.matmul(layers[-1] if layers else h, T.swapaxes(self.w_in, 0, 1))
        return EncoderOutput(layers=layers if layers else [h], predictions=y)


@dataclass
class EncoderOutput:
    """Per-layer hidden states plus the input-space prediction sequence.

    ``layers[-1]`` is what transfer learning extracts.
    """

    layers: list[T.DiffValue]
    predictions: T.DiffValue

    @property
    def last_layer(self) -> T.DiffValue:
        return self.layers[-1]


def rnn_param_count(cfg: RNNConfig) -> int:
    d, h, L = cfg.input_dim, cfg.hidden, cfg.layers
    first = 3 * (d * h + h * h + h)
    rest = (L - 1) * 3 * (h * h + h * h + h)
    return first + rest + h * d


def transformer_param_count(cfg: TransformerConfig) -> int:
    d, D, F, L = cfg.input_dim, cfg.d_model, cfg.ffn_hidden, cfg.blocks
    per_block = 4 * (D * D + D) + (D * F + F) + (F * D + D) + 4 * D
    return d * D + L * per_block


def build_encoder(kind: str, input_dim: int, rng: np.random.Generator,
                  dtype=np.float32, **overrides):
    """Factory used by the training harness and CLI."""
    if kind == "rnn":
        cfg = RNNConfig(input_dim=input_dim, **overrides)
        return RNNEncoder(cfg, rng, dtype)
    if kind == "transformer":
        cfg = TransformerConfig(input_dim=input_dim, **overrides)
        return TransformerEncoder(cfg, rng, dtype)
    raise ConfigError(f"unknown encoder kind {kind!r}")
