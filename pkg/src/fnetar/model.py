"""Segment-recurrent causal language model built from attention (A) and Fourier (F) blocks.

Each block is pre-norm::

    x <- x + eps * Mix(LN1([mem; x]))
    x <- x + eps * FF(LN2(x))

where ``Mix`` is masked multi-head attention for A blocks and the fixed
FNetAR matrix for F blocks, and ``mem`` holds the detached inputs that
this block saw during the previous ``l_mem`` positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .mixing import (
    AttentionParams,
    MixingOperator,
    apply_mixing,
    attention_forward,
    build_causal_mask,
    build_fnetar_matrix,
)
from .numerics import Tensor

INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 4
    layer_pattern: str = "AFAF"
    l_seq: int = 64
    l_mem: int = 64
    residual_scale: float = 1.0
    seed: int = 0
    self_exclusive: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.d_model < 1 or self.d_ff < 1:
            raise ConfigError("d_model and d_ff must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        bad = set(self.layer_pattern) - {"A", "F"}
        if bad:
            raise ConfigError(f"layer_pattern may only contain 'A' and 'F', found {sorted(bad)}")
        if len(self.layer_pattern) != self.n_layers:
            raise ConfigError(f"layer_pattern {self.layer_pattern!r} has length "
                              f"{len(self.layer_pattern)}, n_layers is {self.n_layers}")
        if self.l_seq < 1 or self.l_mem < 0:
            raise ConfigError(f"need l_seq >= 1 and l_mem >= 0, got {self.l_seq}, {self.l_mem}")
        if not (math.isfinite(self.residual_scale) and self.residual_scale > 0):
            raise ConfigError(f"residual_scale must be finite and positive, got {self.residual_scale}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Block:
    kind: str
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    attn: AttentionParams | None = None
    mask: MixingOperator | None = None
    mixer: MixingOperator | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias}
        if self.attn is not None:
            named.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        named.update({"ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias,
                      "ff.w1": self.w1, "ff.b1": self.b1, "ff.w2": self.w2, "ff.b2": self.b2})
        return named


@dataclass
class MemoryState:
    """Per-layer detached hidden states, each ``[..., l_mem, d_model]``."""

    layers: list[np.ndarray]

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int | None = None) -> "MemoryState":
        shape = (config.l_mem, config.d_model) if batch is None else (batch, config.l_mem, config.d_model)
        return cls([np.zeros(shape) for _ in range(config.n_layers)])

    def copy(self) -> "MemoryState":
        return MemoryState([m.copy() for m in self.layers])

    def reset_lanes(self, lanes) -> "MemoryState":
        """Zero the memory of the flagged batch lanes (stream starts)."""
        lanes = np.asarray(lanes, dtype=bool)
        if not lanes.any():
            return self
        out = []
        for m in self.layers:
            m = m.copy()
            m[lanes] = 0.0
            out.append(m)
        return MemoryState(out)


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    blocks: list[Block]
    lnf_gain: Tensor
    lnf_bias: Tensor
    out_w: Tensor
    out_b: Tensor
    pos_table: np.ndarray = field(repr=False)

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            named.update({f"blocks.{i}.{k}": v for k, v in b.named_parameters().items()})
        named.update({"ln_f.gain": self.lnf_gain, "ln_f.bias": self.lnf_bias,
                      "out.w": self.out_w, "out.b": self.out_b})
        return named

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def initial_memory(self, batch: int | None = None) -> MemoryState:
        return MemoryState.zeros(self.config, batch)


def sinusoidal_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def init_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff

    def normal(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    embed = normal(config.vocab_size, d)
    mask = build_causal_mask(config.l_seq, config.l_mem, config.self_exclusive)
    mixer = build_fnetar_matrix(config.l_seq, config.l_mem, config.self_exclusive)
    blocks = []
    for kind in config.layer_pattern:
        ln1 = const(1.0, d), const(0.0, d)
        attn = None
        if kind == "A":
            attn = AttentionParams(normal(d, d), normal(d, d), normal(d, d), normal(d, d),
                                   config.n_heads)
        ln2 = const(1.0, d), const(0.0, d)
        w1, b1 = normal(d, f), const(0.0, f)
        w2, b2 = normal(f, d), const(0.0, d)
        blocks.append(Block(kind, *ln1, *ln2, w1, b1, w2, b2, attn=attn,
                            mask=mask if kind == "A" else None,
                            mixer=mixer if kind == "F" else None))
    lnf = const(1.0, d), const(0.0, d)
    out_w, out_b = normal(d, config.vocab_size), const(0.0, config.vocab_size)
    return Model(config, embed, blocks, *lnf, out_w, out_b,
                 sinusoidal_table(config.l_seq, d))


def block_forward(block: Block, x: Tensor, mem: np.ndarray, eps: float,
                  causal: bool = True) -> Tensor:
    mem_t = Tensor(mem)
    l_mem = mem.shape[-2]
    if l_mem:
        z = nx.layer_norm(nx.concat([mem_t, x], axis=-2), block.ln1_gain, block.ln1_bias)
        zm, zx = z[..., :l_mem, :], z[..., l_mem:, :]
    else:
        zx = nx.layer_norm(x, block.ln1_gain, block.ln1_bias)
        zm = Tensor(mem)
    if block.kind == "A":
        mixed = attention_forward(zx, zm, block.attn, block.mask if causal else None)
    else:
        mixed = apply_mixing(zx, zm, block.mixer)
    x = x + nx.scale(mixed, eps)
    h = nx.relu(nx.layer_norm(x, block.ln2_gain, block.ln2_bias) @ block.w1 + block.b1)
    return x + nx.scale(h @ block.w2 + block.b2, eps)


def forward_embedded(model: Model, x: Tensor, memory: MemoryState,
                     causal: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Run the block stack and output head on already-embedded inputs.

    Returns the logits and the per-layer block inputs (the rows that
    feed the next memory state).
    """
    cfg = model.config
    if len(memory.layers) != cfg.n_layers:
        raise ShapeError(f"memory has {len(memory.layers)} layers, model has {cfg.n_layers}")
    if x.shape[-2] != cfg.l_seq or x.shape[-1] != cfg.d_model:
        raise ShapeError(f"expected [..., {cfg.l_seq}, {cfg.d_model}] input, got {x.shape}")
    hidden = []
    for block, mem in zip(model.blocks, memory.layers):
        if mem.shape != x.shape[:-2] + (cfg.l_mem, cfg.d_model):
            raise ShapeError(f"memory layer shape {mem.shape} does not match input {x.shape}")
        hidden.append(x)
        x = block_forward(block, x, mem, cfg.residual_scale, causal)
    x = nx.layer_norm(x, model.lnf_gain, model.lnf_bias)
    return x @ model.out_w + model.out_b, hidden


def embed_tokens(model: Model, tokens) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != model.config.l_seq:
        raise ShapeError(f"expected segments of {model.config.l_seq} tokens, got {tokens.shape}")
    return nx.embedding_lookup(model.embed, tokens) + Tensor(model.pos_table)


def update_memory(old: MemoryState, hidden: list, l_mem: int) -> MemoryState:
    """Keep the last ``l_mem`` rows of ``[old; hidden]`` per layer, detached."""
    if len(old.layers) != len(hidden):
        raise ShapeError(f"memory has {len(old.layers)} layers, got {len(hidden)} hidden states")
    layers = []
    for m, h in zip(old.layers, hidden):
        h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
        if l_mem == 0:
            layers.append(np.zeros(h.shape[:-2] + (0, h.shape[-1])))
            continue
        both = np.concatenate([m, h], axis=-2)
        layers.append(both[..., both.shape[-2] - l_mem:, :].copy())
    return MemoryState(layers)


def forward_segment(model: Model, tokens, memory: MemoryState,
                    causal: bool = True) -> tuple[Tensor, MemoryState]:
    """Logits ``[..., l_seq, vocab]`` for one segment plus the next memory state."""
    logits, hidden = forward_embedded(model, embed_tokens(model, tokens), memory, causal)
    return logits, update_memory(memory, hidden, model.config.l_mem)


# ---------------------------------------------------------------- accounting

def block_param_count(kind: str, d_model: int, d_ff: int) -> int:
    """Parameters of one block: two layer norms, the feedforward net, and for A the projections."""
    ff = d_model * d_ff + d_ff + d_ff * d_model + d_model
    norms = 4 * d_model
    attn = 4 * d_model * d_model if kind == "A" else 0
    return ff + norms + attn


@dataclass
class ParamCount:
    per_block: list[int]
    embedding: int
    head: int

    @property
    def blocks(self) -> int:
        return sum(self.per_block)

    @property
    def total(self) -> int:
        return self.blocks + self.embedding + self.head


def param_count(model: Model) -> ParamCount:
    per_block = [sum(p.data.size for p in b.named_parameters().values()) for b in model.blocks]
    head = sum(p.data.size for p in (model.lnf_gain, model.lnf_bias, model.out_w, model.out_b))
    return ParamCount(per_block, model.embed.data.size, head)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in ``named_parameters`` order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i, kind in enumerate(config.layer_pattern):
        pre = f"blocks.{i}."
        shapes[pre + "ln1.gain"] = shapes[pre + "ln1.bias"] = (d,)
        if kind == "A":
            for w in ("wq", "wk", "wv", "wo"):
                shapes[pre + "attn." + w] = (d, d)
        shapes[pre + "ln2.gain"] = shapes[pre + "ln2.bias"] = (d,)
        shapes.update({pre + "ff.w1": (d, f), pre + "ff.b1": (f,),
                       pre + "ff.w2": (f, d), pre + "ff.b2": (d,)})
    shapes.update({"ln_f.gain": (d,), "ln_f.bias": (d,), "out.w": (d, v), "out.b": (v,)})
    return shapes


def generate(model: Model, prompt_ids, n_tokens: int, temperature: float = 1.0,
             seed: int = 0) -> np.ndarray:
    """Sample ``n_tokens`` continuation ids after ``prompt_ids``.

    Full segments are committed into memory exactly as during training;
    the open segment is right-padded with id 0, which causality makes
    invisible to the position being predicted.
    """
    cfg = model.config
    tokens = [int(t) for t in np.asarray(prompt_ids).reshape(-1)]
    if not tokens:
        raise ShapeError("generation needs a non-empty prompt")
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    rng = np.random.default_rng(seed)
    memory = model.initial_memory()
    committed = 0
    out = []
    with nx.no_grad():
        for _ in range(n_tokens):
            while len(tokens) - committed > cfg.l_seq:
                _, memory = forward_segment(model, tokens[committed:committed + cfg.l_seq], memory)
                committed += cfg.l_seq
            cur = tokens[committed:]
            logits, _ = forward_segment(model, cur + [0] * (cfg.l_seq - len(cur)), memory)
            row = logits.data[len(cur) - 1]
            if temperature == 0:
                nxt = int(np.argmax(row))
            else:
                z = row / temperature
                p = np.exp(z - z.max())
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            tokens.append(nxt)
            out.append(nxt)
    return np.array(out, dtype=np.int64)
