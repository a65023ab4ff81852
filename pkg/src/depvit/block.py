"""The reversed-attention dependency block.

A pre-norm transformer block where information flows child -> parent: the
row-softmax attention table is transposed before it mixes values, each
sender's outgoing column is scaled by a per-token head-selection probability
and by a cumulative message gate, and the per-head tables are summed into a
soft dependency mask whose column i distributes token i's mass over its
candidate parents.  No linear layer in the block carries a bias; only the
layer norms have affine parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ShapeError, UsageError
from .tensor import Tensor


@dataclass
class BlockWeights:
    """Parameters of one dependency block at width C with H heads."""

    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_head: Tensor      # (C, H) head-selector projection
    gate_w1: Tensor     # (C, C/2) message-controller hidden layer
    gate_w2: Tensor     # (C/2, 1) message-controller output layer
    ffn_w1: Tensor      # (C, 4C)
    ffn_w2: Tensor      # (4C, C)
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o,
            "w_head": self.w_head, "gate_w1": self.gate_w1, "gate_w2": self.gate_w2,
            "ffn_w1": self.ffn_w1, "ffn_w2": self.ffn_w2,
            "ln1_gain": self.ln1_gain, "ln1_bias": self.ln1_bias,
            "ln2_gain": self.ln2_gain, "ln2_bias": self.ln2_bias,
        }

    def validate(self) -> None:
        c, h = self.channels, self.heads
        if h < 1 or c % h != 0:
            raise ShapeError(f"channels {c} not divisible by heads {h}")
        if c % 2 != 0:
            raise ShapeError(f"channels {c} must be even for the gate hidden layer")
        expect = {
            "w_q": (c, c), "w_k": (c, c), "w_v": (c, c), "w_o": (c, c),
            "w_head": (c, h), "gate_w1": (c, c // 2), "gate_w2": (c // 2, 1),
            "ffn_w1": (c, 4 * c), "ffn_w2": (4 * c, c),
            "ln1_gain": (c,), "ln1_bias": (c,), "ln2_gain": (c,), "ln2_bias": (c,),
        }
        for name, t in self.named_tensors().items():
            if t.shape != expect[name]:
                raise ShapeError(f"{name}: expected shape {expect[name]}, got {t.shape}")


@dataclass
class AttentionState:
    """Detached per-block record used for tree induction and pruning.

    ``mask[j][i]`` is the soft dependency weight of candidate parent j for
    child i; columns are indexed by sender.  ``token_indices`` maps local
    rows/columns back to positions in the original token grid (identity
    until pruning shrinks the working set).
    """

    forward_attn: np.ndarray                 # (H, N, N) row-stochastic
    head_probs: np.ndarray | None = None     # (N, H)
    gate: np.ndarray | None = None           # (N,) this block's gate
    cumulative_gate: np.ndarray | None = None  # (N,) product up through this block
    reversed_attn: np.ndarray | None = None  # (H, N, N)
    mask: np.ndarray | None = None           # (N, N) sum of reversed heads
    token_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def init_block_weights(channels: int, heads: int, rng: np.random.Generator,
                       dtype=np.float32, std: float = 0.02) -> BlockWeights:
    """Truncated-normal weights (std 0.02); layer norms start at identity."""

    def w(*shape):
        return tn.tensor(tn.truncated_normal(rng, shape, std), dtype=dtype, requires_grad=True)

    c = channels
    ones = tn.tensor(np.ones(c), dtype=dtype, requires_grad=True)
    zeros = tn.tensor(np.zeros(c), dtype=dtype, requires_grad=True)
    bw = BlockWeights(
        heads=heads,
        w_q=w(c, c), w_k=w(c, c), w_v=w(c, c), w_o=w(c, c),
        w_head=w(c, heads), gate_w1=w(c, c // 2), gate_w2=w(c // 2, 1),
        ffn_w1=w(c, 4 * c), ffn_w2=w(4 * c, c),
        ln1_gain=ones, ln1_bias=zeros,
        ln2_gain=ones.copy(), ln2_bias=zeros.copy(),
    )
    bw.validate()
    return bw


def forward_attention(x_norm: Tensor, weights: BlockWeights) -> tuple[Tensor, Tensor]:
    """Stacked row-softmax attention tables and value projections.

    Returns the (H, N, N) table stack, each row stochastic with scaling
    1/sqrt(C/H) on the logits (applied as the softmax temperature), and the
    (H, N, C/H) value stack; head h owns column block h of each projection.
    """
    h = weights.heads
    ch = weights.channels // h
    q = tn.split_heads(tn.matmul(x_norm, weights.w_q), h)
    k = tn.split_heads(tn.matmul(x_norm, weights.w_k), h)
    v = tn.split_heads(tn.matmul(x_norm, weights.w_v), h)
    logits = tn.batched_matmul(q, tn.transpose_last2(k))
    tables = tn.softmax_rows(logits, temperature=math.sqrt(ch))
    return tables, v


def head_selector(x_norm: Tensor, w_head: Tensor, temperature: float) -> Tensor:
    """Per-token soft routing over heads: softmax(x W / temperature), (N, H)."""
    return tn.softmax_rows(tn.matmul(x_norm, w_head), temperature=temperature)


def message_controller(x_norm: Tensor, gate_w1: Tensor, gate_w2: Tensor,
                       gate_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Per-token send gate in (0, 1) and its running product.

    gate = sigmoid(W2 . gelu(x W1)); the cumulative gate is
    gate_prev * gate, so it can never increase across blocks.
    """
    hidden = tn.gelu(tn.matmul(x_norm, gate_w1))
    raw = tn.matmul(hidden, gate_w2)
    gate = tn.reshape(tn.sigmoid(raw), (x_norm.shape[0],))
    if gate_prev.shape != gate.shape:
        raise ShapeError(f"gate_prev shape {gate_prev.shape} != ({x_norm.shape[0]},)")
    return gate, tn.mul(gate_prev, gate)


def reverse_compose(attn: Tensor, head_probs: Tensor,
                    gate_cum: Tensor) -> tuple[Tensor, Tensor]:
    """Transpose each head table and scale every column by its sender.

    reversed[h][j][i] = attn[h][i][j] * head_probs[i][h] * gate_cum[i];
    the mask is the sum of the reversed heads.  Column i then carries how
    token i splits its outgoing mass over candidate parents j, and no
    renormalization is applied afterwards.
    """
    n = gate_cum.shape[0]
    h = attn.shape[0]
    send = tn.mul(head_probs, tn.reshape(gate_cum, (n, 1)))  # (N, H)
    send_rows = tn.reshape(tn.transpose_last2(send), (h, 1, n))
    rev = tn.mul(tn.transpose_last2(attn), send_rows)        # (H, N, N)
    mask = tn.sum_over_axis(rev, 0)
    return rev, mask


def block_forward(x: Tensor, weights: BlockWeights, gate_prev: Tensor,
                  temperature: float = 0.1,
                  direction: str = "reverse") -> tuple[Tensor, Tensor, AttentionState]:
    """One pre-norm block pass over (N, C) tokens.

    direction "reverse" runs the dependency flow (child sends to parent);
    "forward" runs the same weights as a plain attention block, leaving the
    gate untouched and the state's dependency fields unset.  Returns the
    updated tokens, the cumulative gate after this block, and a detached
    state snapshot.
    """
    if direction not in ("reverse", "forward"):
        raise UsageError(f"direction must be 'reverse' or 'forward', got {direction!r}")
    if x.data.ndim != 2:
        raise ShapeError(f"block input must be (tokens, channels), got {x.shape}")
    if x.shape[1] != weights.channels:
        raise ShapeError(f"input width {x.shape[1]} != block width {weights.channels}")
    n = x.shape[0]

    x_norm = tn.layer_norm(x, weights.ln1_gain, weights.ln1_bias)
    attn, values = forward_attention(x_norm, weights)

    if direction == "reverse":
        probs = head_selector(x_norm, weights.w_head, temperature)
        gate, gate_cum = message_controller(x_norm, weights.gate_w1, weights.gate_w2, gate_prev)
        rev, mask = reverse_compose(attn, probs, gate_cum)
        head_out = tn.batched_matmul(rev, values)
        state = AttentionState(
            forward_attn=attn.data.copy(),
            head_probs=probs.data.copy(),
            gate=gate.data.copy(),
            cumulative_gate=gate_cum.data.copy(),
            reversed_attn=rev.data.copy(),
            mask=mask.data.copy(),
            token_indices=np.arange(n, dtype=np.int64),
        )
    else:
        gate_cum = gate_prev
        head_out = tn.batched_matmul(attn, values)
        state = AttentionState(
            forward_attn=attn.data.copy(),
            token_indices=np.arange(n, dtype=np.int64),
        )

    mixed = tn.matmul(tn.merge_heads(head_out), weights.w_o)
    x_mid = tn.add(x, mixed)
    x_norm2 = tn.layer_norm(x_mid, weights.ln2_gain, weights.ln2_bias)
    ffn = tn.matmul(tn.gelu(tn.matmul(x_norm2, weights.ffn_w1)), weights.ffn_w2)
    x_out = tn.add(x_mid, ffn)
    return x_out, gate_cum, state


def pool_tokens(tokens: Tensor, gates: Tensor) -> Tensor:
    """Gate-weighted mean over tokens: sum_i g_i x_i / sum_i g_i, shape (1, C)."""
    n = tokens.shape[0]
    if gates.shape != (n,):
        raise ShapeError(f"gates shape {gates.shape} != ({n},)")
    return tn.reshape(tn.weighted_mean_rows(tokens, gates), (1, tokens.shape[1]))


def block_probe_loss(inputs: list[Tensor], weights_template: BlockWeights,
                     temperature: float = 0.1) -> Tensor:
    """Scalar probe for gradient checking the whole block.

    ``inputs`` is [x, gate_prev, *weight tensors in named_tensors order];
    the loss is the squared norm of the gate-pooled output, which pulls
    gradient through attention, selector, controller, gating and pooling.
    """
    names = list(weights_template.named_tensors().keys())
    if len(inputs) != 2 + len(names):
        raise UsageError(f"expected {2 + len(names)} probe inputs, got {len(inputs)}")
    x, gate_prev = inputs[0], inputs[1]
    wmap = dict(zip(names, inputs[2:]))
    w = BlockWeights(heads=weights_template.heads, **wmap)
    x_out, gate_cum, _ = block_forward(x, w, gate_prev, temperature=temperature)
    pooled = pool_tokens(x_out, gate_cum)
    return tn.sum_squares(pooled)
