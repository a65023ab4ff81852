"""Full model assembly: patch embedder, dependency blocks, gated pooling.

Tokens are non-overlapping patches projected to C channels plus a learned
per-position embedding row.  L dependency blocks thread the cumulative gate;
an optional schedule prunes tokens after selected blocks.  The readout is
the gate-weighted token mean, layer-normalized, then a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .block import AttentionState, BlockWeights, block_forward, init_block_weights, pool_tokens
from .errors import ConfigError, ShapeError, UsageError
from .pruning import PruneLedger, prune_step
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults give the tiny 224px variant."""

    image_size: int = 224
    patch_size: int = 16
    channels: int = 192
    heads: int = 12
    layers: int = 12
    temperature: float = 0.1
    prune_schedule: tuple[tuple[int, int], ...] = ()
    num_classes: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % 2 != 0:
            raise ConfigError("channels must be even")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        n = self.tokens
        prev_kept = n
        prev_layer = 0
        for layer, kept in self.prune_schedule:
            if not 1 <= layer <= self.layers:
                raise ConfigError(f"prune layer {layer} outside 1..{self.layers}")
            if layer <= prev_layer:
                raise ConfigError("prune layers must be strictly increasing")
            # equality is a legal no-op so a schedule that prunes zero
            # tokens behaves exactly like no schedule at all
            if not 1 <= kept <= prev_kept:
                raise ConfigError(
                    f"kept counts must be non-increasing and <= {n}; got {kept} after {prev_kept}"
                )
            prev_layer, prev_kept = layer, kept

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def tiny(**overrides) -> ModelConfig:
    """224px, C=192, H=12, L=12 (no pruning)."""
    return ModelConfig(**{"channels": 192, **overrides})


def small(**overrides) -> ModelConfig:
    """224px, C=384, H=12, L=12 (no pruning)."""
    return ModelConfig(**{"channels": 384, **overrides})


LITE_SCHEDULE = ((2, 160), (5, 128), (8, 96), (11, 64))


def lite_tiny(**overrides) -> ModelConfig:
    """Tiny with the keep schedule 160/128/96/64 after blocks 2/5/8/11."""
    return tiny(**{"prune_schedule": LITE_SCHEDULE, **overrides})


def lite_small(**overrides) -> ModelConfig:
    return small(**{"prune_schedule": LITE_SCHEDULE, **overrides})


@dataclass
class ModelWeights:
    """All learnable tensors; creation is deterministic given the config seed."""

    patch_proj: Tensor       # (patch_dim, C)
    patch_bias: Tensor       # (C,)
    pos_table: Tensor        # (N, C)
    blocks: list[BlockWeights]
    final_gain: Tensor       # (C,)
    final_bias: Tensor       # (C,)
    classifier_w: Tensor     # (C, num_classes)
    classifier_b: Tensor     # (num_classes,)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {
            "patch_proj": self.patch_proj,
            "patch_bias": self.patch_bias,
            "pos_table": self.pos_table,
            "final_gain": self.final_gain,
            "final_bias": self.final_bias,
            "classifier_w": self.classifier_w,
            "classifier_b": self.classifier_b,
        }
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named_tensors().items():
                out[f"block{i:02d}.{name}"] = t
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    @classmethod
    def from_named_tensors(cls, config, tensors: dict[str, Tensor]) -> "ModelWeights":
        """Inverse of named_tensors for a matching configuration."""
        blocks = []
        for i in range(config.layers):
            prefix = f"block{i:02d}."
            fields = {
                name[len(prefix):]: t
                for name, t in tensors.items() if name.startswith(prefix)
            }
            blocks.append(BlockWeights(heads=config.heads, **fields))
        return cls(
            patch_proj=tensors["patch_proj"],
            patch_bias=tensors["patch_bias"],
            pos_table=tensors["pos_table"],
            blocks=blocks,
            final_gain=tensors["final_gain"],
            final_bias=tensors["final_bias"],
            classifier_w=tensors["classifier_w"],
            classifier_b=tensors["classifier_b"],
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every learnable tensor; single source for init and costing."""
    c, h, n = config.channels, config.heads, config.tokens
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj": (config.patch_dim, c),
        "patch_bias": (c,),
        "pos_table": (n, c),
        "final_gain": (c,),
        "final_bias": (c,),
        "classifier_w": (c, config.num_classes),
        "classifier_b": (config.num_classes,),
    }
    block = {
        "w_q": (c, c), "w_k": (c, c), "w_v": (c, c), "w_o": (c, c),
        "w_head": (c, h), "gate_w1": (c, c // 2), "gate_w2": (c // 2, 1),
        "ffn_w1": (c, 4 * c), "ffn_w2": (4 * c, c),
        "ln1_gain": (c,), "ln1_bias": (c,), "ln2_gain": (c,), "ln2_bias": (c,),
    }
    for i in range(config.layers):
        for name, shp in block.items():
            shapes[f"block{i:02d}.{name}"] = shp
    return shapes


def init_weights(config: ModelConfig, dtype=np.float32) -> ModelWeights:
    """Truncated-normal (std 0.02) matrices, zero biases, identity norms."""
    rng = np.random.default_rng(config.seed)
    c = config.channels

    def w(*shape):
        return tn.tensor(tn.truncated_normal(rng, shape, 0.02), dtype=dtype, requires_grad=True)

    def zeros(*shape):
        return tn.tensor(np.zeros(shape), dtype=dtype, requires_grad=True)

    weights = ModelWeights(
        patch_proj=w(config.patch_dim, c),
        patch_bias=zeros(c),
        pos_table=w(config.tokens, c),
        blocks=[init_block_weights(c, config.heads, rng, dtype=dtype)
                for _ in range(config.layers)],
        final_gain=tn.tensor(np.ones(c), dtype=dtype, requires_grad=True),
        final_bias=zeros(c),
        classifier_w=w(c, config.num_classes),
        classifier_b=zeros(config.num_classes),
    )
    expect = parameter_shapes(config)
    got = {k: t.shape for k, t in weights.named_tensors().items()}
    if got != expect:
        raise ShapeError("initialized weights disagree with the declared shapes")
    return weights


def patch_embed(image: np.ndarray, config: ModelConfig, weights: ModelWeights) -> Tensor:
    """Flatten non-overlapping patches row-major and project to C channels.

    Within a patch, values are ordered pixel-row, pixel-column, then color.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    hh, ww, _ = image.shape
    p = config.patch_size
    if hh % p != 0 or ww % p != 0:
        raise ConfigError(f"image {hh}x{ww} not divisible by patch size {p}")
    gh, gw = hh // p, ww // p
    if gh * gw != config.tokens:
        raise ConfigError(
            f"image yields {gh * gw} patches but the config expects {config.tokens}"
        )
    patches = (
        image.reshape(gh, p, gw, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, p * p * 3)
    )
    dtype = weights.patch_proj.dtype
    x = tn.tensor(patches, dtype=dtype)
    projected = tn.add(tn.matmul(x, weights.patch_proj), weights.patch_bias)
    return tn.add(projected, weights.pos_table)


@dataclass
class ForwardResult:
    """Everything a forward pass produces besides the class decision itself."""

    states: list[AttentionState]
    tokens: Tensor            # surviving final tokens, (S, C)
    pooled: Tensor            # (1, C) gate-weighted mean
    logits: Tensor            # (num_classes,)
    gates: Tensor             # final cumulative gate over survivors, (S,)
    survivors: np.ndarray     # original indices of surviving tokens
    ledger: PruneLedger

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits.data))


def model_forward(inputs, config: ModelConfig, weights: ModelWeights) -> ForwardResult:
    """Run the block stack over an image or a pre-embedded token matrix.

    A 3-D array is treated as an image and embedded; a 2-D Tensor or array
    of shape (N, C) is used as tokens directly (no positions re-applied).
    The prune schedule shrinks the working set right after each listed
    block; states keep the original indices they cover.
    """
    if isinstance(inputs, Tensor):
        x = inputs
    else:
        arr = np.asarray(inputs)
        if arr.ndim == 3:
            x = patch_embed(arr, config, weights)
        elif arr.ndim == 2:
            x = tn.tensor(arr, dtype=weights.patch_proj.dtype)
        else:
            raise ShapeError(f"inputs must be (H, W, 3) or (N, C), got {arr.shape}")
    if x.shape != (config.tokens, config.channels):
        raise ShapeError(
            f"token matrix {x.shape} does not match config ({config.tokens}, {config.channels})"
        )

    n = config.tokens
    dtype = x.dtype
    gate = tn.tensor(np.ones(n), dtype=dtype)
    survivors = np.arange(n, dtype=np.int64)
    ledger = PruneLedger(n_tokens=n)
    schedule = dict(config.prune_schedule)
    states: list[AttentionState] = []

    for layer in range(1, config.layers + 1):
        x, gate, state = block_forward(
            x, weights.blocks[layer - 1], gate, temperature=config.temperature
        )
        state.token_indices = survivors.copy()
        states.append(state)
        kept = schedule.get(layer)
        if kept is not None:
            new_survivors, events = prune_step(states, survivors, kept)
            ledger.events.extend(events)
            if new_survivors.size != survivors.size:
                local_keep = np.where(np.isin(survivors, new_survivors))[0]
                x = tn.gather_rows(x, local_keep)
                gate = tn.gather_rows(gate, local_keep)
                survivors = new_survivors

    pooled = pool_tokens(x, gate)
    normed = tn.layer_norm(pooled, weights.final_gain, weights.final_bias)
    logits2d = tn.add(tn.matmul(normed, weights.classifier_w), weights.classifier_b)
    logits = tn.reshape(logits2d, (config.num_classes,))
    return ForwardResult(
        states=states, tokens=x, pooled=pooled, logits=logits,
        gates=gate, survivors=survivors, ledger=ledger,
    )
