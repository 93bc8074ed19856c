"""Optimization loop, perplexity evaluation, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import SegmentStream, Vocab
from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DomainError,
    IntegrityError,
    NumericalError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .model import MemoryState, Model, ModelConfig, forward_segment, init_model, param_shapes

log = logging.getLogger(__name__)

MAGIC = b"FNAR"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    eval_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("steps, batch_size and eval_interval must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError(f"warmup_steps must lie in [0, steps], got {self.warmup_steps}")
        if self.peak_lr <= 0 or self.adam_eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("peak_lr, adam_eps and clip_norm must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")


# ---------------------------------------------------------------- optimizer pieces

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params[name].data``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``config.steps``."""
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    w, total, peak = config.warmup_steps, config.steps, config.peak_lr
    if step <= w and w > 0:
        return peak * step / w
    if step >= total:
        return 0.0
    progress = (step - w) / (total - w)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


# ---------------------------------------------------------------- evaluation

def evaluate_nll(model: Model, stream: SegmentStream) -> tuple[float, int]:
    """Summed negative log-likelihood and token count over the whole stream.

    Memory is carried across segments within each lane and zeroed at
    stream starts. Parameters are never touched.
    """
    stream.reset()
    memory = model.initial_memory(stream.batch_size)
    total, count = 0.0, 0
    with nx.no_grad():
        for seg in stream:
            memory = memory.reset_lanes(seg.is_stream_start)
            logits, memory = forward_segment(model, seg.inputs, memory)
            n = seg.targets.size
            total += nx.cross_entropy_logits(logits, seg.targets).item() * n
            count += n
    if count == 0:
        raise DomainError("evaluation stream yields no segments")
    return total, count


def evaluate_perplexity(model: Model, stream: SegmentStream) -> float:
    total, count = evaluate_nll(model, stream)
    return math.exp(total / count)


def unigram_perplexity(train_ids, eval_ids, vocab_size: int) -> float:
    """Perplexity of an add-one smoothed unigram model fit on ``train_ids``."""
    counts = np.bincount(np.asarray(train_ids), minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return math.exp(-logp[np.asarray(eval_ids)].mean())


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    adam: AdamState | None = None
    memory: MemoryState | None = None
    vocab: Vocab | None = None
    train_config: TrainConfig | None = None
    best_ppl: float | None = None

    def build_model(self) -> Model:
        model = init_model(self.config)
        for name, p in model.named_parameters().items():
            p.data = self.params[name].copy()
        return model


def snapshot(model: Model, **extra) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.named_parameters().items()}
    return Checkpoint(model.config, params, **extra)


def _pack_tensor(name: str, a: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_checkpoint(ck: Checkpoint) -> bytes:
    header = {
        "model": asdict(ck.config),
        "train": None if ck.train_config is None else asdict(ck.train_config),
        "step": ck.step,
        "adam_t": None if ck.adam is None else ck.adam.t,
        "best_ppl": ck.best_ppl,
        "vocab": None if ck.vocab is None else ck.vocab.dumps(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = [(f"param/{k}", v) for k, v in ck.params.items()]
    if ck.adam is not None:
        tensors += [(f"adam.m/{k}", v) for k, v in ck.adam.m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in ck.adam.v.items()]
    if ck.memory is not None:
        tensors += [(f"memory/{i}", m) for i, m in enumerate(ck.memory.layers)]
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hbytes)), hbytes,
           struct.pack("<I", len(tensors))]
    out += [_pack_tensor(n, t) for n, t in tensors]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.buf)} "
                                 f"(needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
        train_cfg = None if header["train"] is None else TrainConfig(**header["train"])
        step, adam_t = int(header["step"]), header["adam_t"]
        best_ppl, vocab_text = header["best_ppl"], header["vocab"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"checkpoint header is corrupt: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise IntegrityError(f"{len(buf) - r.pos} trailing bytes after the last tensor")

    expected = param_shapes(config)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise IntegrityError(f"parameter set does not match config: missing {missing}, extra {extra}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise IntegrityError(f"{k}: shape {params[k].shape}, config implies {shape}")
    params = {k: params[k] for k in expected}

    adam = None
    if adam_t is not None:
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        if set(m) != set(v) or not set(m) <= set(expected):
            raise IntegrityError("optimizer moments do not match the parameter set")
        if any(m[k].shape != expected[k] or v[k].shape != expected[k] for k in m):
            raise IntegrityError("optimizer moment shapes do not match parameters")
        adam = AdamState(int(adam_t), m, v)
    mem_names = [k for k in tensors if k.startswith("memory/")]
    if sorted(mem_names) != sorted(f"memory/{i}" for i in range(len(mem_names))):
        raise IntegrityError(f"memory records are not numbered 0..n-1: {sorted(mem_names)}")
    mem_names = [f"memory/{i}" for i in range(len(mem_names))]
    memory = None
    if mem_names:
        if len(mem_names) != config.n_layers:
            raise IntegrityError(f"{len(mem_names)} memory layers for {config.n_layers} blocks")
        layers = [tensors[k] for k in mem_names]
        if any(m.shape[-2:] != (config.l_mem, config.d_model) for m in layers):
            raise IntegrityError("memory layer shape does not match config")
        memory = MemoryState(layers)
    known = len(params) + (0 if adam is None else len(adam.m) * 2) + len(mem_names)
    if known != len(tensors):
        raise IntegrityError(f"{len(tensors) - known} unrecognized tensor records")
    try:
        vocab = None if vocab_text is None else Vocab.loads(vocab_text)
    except DataError as exc:
        raise IntegrityError(f"embedded vocab is corrupt: {exc}") from exc
    if vocab is not None and len(vocab) != config.vocab_size:
        raise IntegrityError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
    return Checkpoint(config, params, step, adam, memory, vocab, train_cfg, best_ppl)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- training loop

def format_record(rec: dict, timing: bool = True) -> str:
    parts = [f"step={rec['step']}", f"loss={rec['loss']:.6f}", f"ppl={rec['ppl']:.4f}",
             f"lr={rec['lr']:.6g}"]
    if timing:
        parts.append(f"elapsed_s={rec['elapsed_s']:.2f}")
    return " ".join(parts)


class Trainer:
    """Stateful training run; :meth:`checkpoint` captures everything needed to resume exactly."""

    def __init__(self, model: Model, train_tokens, valid_tokens, config: TrainConfig,
                 out_dir=None, vocab: Vocab | None = None,
                 on_record: Callable[[dict], None] | None = None):
        self.model = model
        self.config = config
        self.stream = SegmentStream(train_tokens, config.batch_size, model.config.l_seq)
        if len(self.stream) == 0:
            raise DomainError("training corpus is too short for one segment per lane")
        self.valid_tokens = np.asarray(valid_tokens)
        self.out_dir = None if out_dir is None else Path(out_dir)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.vocab = vocab
        self.on_record = on_record
        self.adam = AdamState()
        self.memory = model.initial_memory(config.batch_size)
        self.step = 0
        self.best_ppl: float | None = None
        self.records: list[dict] = []
        self._t0 = time.perf_counter()

    @classmethod
    def resume(cls, ck: Checkpoint, train_tokens, valid_tokens, out_dir=None,
               on_record=None) -> "Trainer":
        if ck.train_config is None or ck.adam is None or ck.memory is None:
            raise IntegrityError("checkpoint lacks the training state needed to resume")
        tr = cls(ck.build_model(), train_tokens, valid_tokens, ck.train_config, out_dir,
                 ck.vocab, on_record)
        tr.adam = AdamState(ck.adam.t, {k: v.copy() for k, v in ck.adam.m.items()},
                            {k: v.copy() for k, v in ck.adam.v.items()})
        tr.memory = ck.memory.copy()
        tr.step = ck.step
        tr.best_ppl = ck.best_ppl
        tr.stream.cursor = ck.step % len(tr.stream)
        return tr

    def checkpoint(self) -> Checkpoint:
        return snapshot(self.model, step=self.step, adam=self.adam, memory=self.memory,
                        vocab=self.vocab, train_config=self.config, best_ppl=self.best_ppl)

    def _next_segment(self):
        seg = self.stream.next_segment()
        if seg is None:
            self.stream.reset()
            seg = self.stream.next_segment()
        return seg

    def train_step(self) -> float:
        seg = self._next_segment()
        params = self.model.named_parameters()
        memory = self.memory.reset_lanes(seg.is_stream_start)
        self.model.zero_grad()
        nx.new_tape()
        logits, new_memory = forward_segment(self.model, seg.inputs, memory)
        loss = nx.cross_entropy_logits(logits, seg.targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss at step {self.step + 1}")
        nx.backward(loss, leaves=params.values())
        grads = clip_grad_norm({k: p.grad for k, p in params.items()}, self.config.clip_norm)
        lr = lr_at(self.step + 1, self.config)
        adam_step(params, grads, self.adam, lr, self.config.betas, self.config.adam_eps)
        self.memory = new_memory
        self.step += 1
        return value

    def evaluate(self) -> float:
        stream = SegmentStream(self.valid_tokens, self.config.batch_size, self.model.config.l_seq)
        return evaluate_perplexity(self.model, stream)

    def _save(self, name: str) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / name, self.checkpoint())

    def run(self, until: int | None = None) -> list[dict]:
        """Train up to step ``until`` (default: ``config.steps``), evaluating on schedule."""
        until = self.config.steps if until is None else min(until, self.config.steps)
        while self.step < until:
            try:
                loss = self.train_step()
            except NumericalError:
                log.error("numerical abort at step %d; writing last-good checkpoint", self.step + 1)
                self._save("last_good.ckpt")
                raise
            if self.step % self.config.eval_interval == 0 or self.step == self.config.steps:
                self._record(loss)
        return self.records

    def _record(self, loss: float) -> None:
        ppl = self.evaluate()
        rec = {"step": self.step, "loss": loss, "ppl": ppl,
               "lr": lr_at(self.step, self.config),
               "elapsed_s": time.perf_counter() - self._t0}
        self.records.append(rec)
        if self.best_ppl is None or ppl < self.best_ppl:
            self.best_ppl = ppl
            self._save("best.ckpt")
        self._save("last.ckpt")
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.log", "a", encoding="utf-8") as fh:
                fh.write(format_record(rec) + "\n")
        if self.on_record is not None:
            self.on_record(rec)
        log.info(format_record(rec))


def train(model: Model, train_tokens, valid_tokens, config: TrainConfig, out_dir=None,
          vocab: Vocab | None = None, on_record=None) -> list[dict]:
    return Trainer(model, train_tokens, valid_tokens, config, out_dir, vocab, on_record).run()
