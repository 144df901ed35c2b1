"""Toy pre-norm transformer encoder, classification heads, and masked-token pretraining."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingError
from .optim import Adam
from .rng import RngState

log = logging.getLogger(__name__)

MASK_TOKEN = 0
ParamGroups = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "num_layers", "hidden_dim", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


def group_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden_dim, cfg.ffn_dim
    shapes = {"embed.tok": (cfg.vocab_size, H), "embed.pos": (cfg.max_seq_len, H)}
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        shapes[f"{p}.ln1.gamma"] = (H,)
        shapes[f"{p}.ln1.beta"] = (H,)
        for m in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{m}"] = (H, H)
        for m in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{m}"] = (H,)
        shapes[f"{p}.ln2.gamma"] = (H,)
        shapes[f"{p}.ln2.beta"] = (H,)
        shapes[f"{p}.ffn.w1"] = (H, F)
        shapes[f"{p}.ffn.b1"] = (F,)
        shapes[f"{p}.ffn.w2"] = (F, H)
        shapes[f"{p}.ffn.b2"] = (H,)
    shapes["final_ln.gamma"] = (H,)
    shapes["final_ln.beta"] = (H,)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    return sum(math.prod(s) for s in group_shapes(cfg).values())


def init_params(cfg: EncoderConfig, rng: RngState | None = None) -> ParamGroups:
    rng = rng or RngState(cfg.seed, "encoder_init")
    out = {}
    for gid, shape in group_shapes(cfg).items():
        leaf = gid.rsplit(".", 1)[-1]
        if leaf == "gamma":
            out[gid] = np.ones(shape)
        elif leaf in ("beta", "bq", "bk", "bv", "bo", "b1", "b2"):
            out[gid] = np.zeros(shape)
        elif gid.startswith("embed."):
            out[gid] = rng.stream(gid).normal(shape, std=0.1)
        else:
            out[gid] = rng.stream(gid).normal(shape, std=1.0 / math.sqrt(shape[0]))
    return out


def freeze(params: Mapping[str, np.ndarray]) -> ParamGroups:
    out = {}
    for gid, v in params.items():
        a = np.array(v, dtype=np.float64, copy=True)
        a.setflags(write=False)
        out[gid] = a
    return out


def _check_tokens(cfg: EncoderConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be a [batch, seq] matrix, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    bad = np.argwhere((tokens < 0) | (tokens >= cfg.vocab_size))
    if bad.size:
        b, s = bad[0]
        raise ValueError(f"token id {tokens[b, s]} out of range [0, {cfg.vocab_size}) at position ({b}, {s})")
    return tokens


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.add(T.matmul(x, w), b)


def encode_tokens(cfg: EncoderConfig, params: Mapping[str, T.Tensor], tokens, inspect: dict | None = None) -> T.Tensor:
    """Per-token hidden states [batch, seq, hidden] after the final layer norm."""
    tokens = _check_tokens(cfg, tokens)
    B, S = tokens.shape
    H, nh = cfg.hidden_dim, cfg.num_heads
    dh = H // nh
    P = {k: T.as_tensor(v) for k, v in params.items()}

    x = T.reshape(T.index_rows(P["embed.tok"], tokens.reshape(-1)), (B, S, H))
    pos = T.index_rows(P["embed.pos"], np.arange(S))
    x = T.add(x, pos)
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        if inspect is not None:
            inspect.setdefault("ln_inputs", []).append(x.data)
        a = T.layer_norm(x, P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"])

        def heads(t):
            return T.transpose(T.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

        q = heads(_linear(a, P[f"{p}.attn.wq"], P[f"{p}.attn.bq"]))
        k = heads(_linear(a, P[f"{p}.attn.wk"], P[f"{p}.attn.bk"]))
        v = heads(_linear(a, P[f"{p}.attn.wv"], P[f"{p}.attn.bv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        if inspect is not None:
            inspect.setdefault("attention", []).append(att.data)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, S, H))
        x = T.add(x, _linear(ctx, P[f"{p}.attn.wo"], P[f"{p}.attn.bo"]))

        if inspect is not None:
            inspect["ln_inputs"].append(x.data)
        f = T.layer_norm(x, P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"])
        f = _linear(T.gelu(_linear(f, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"])), P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
        x = T.add(x, f)
    if inspect is not None:
        inspect["ln_inputs"].append(x.data)
    return T.layer_norm(x, P["final_ln.gamma"], P["final_ln.beta"])


def encode(cfg: EncoderConfig, params: Mapping[str, T.Tensor], tokens, inspect: dict | None = None) -> T.Tensor:
    """Mean-pooled feature vector h, shape [batch, hidden]."""
    return T.mean(encode_tokens(cfg, params, tokens, inspect), axis=1)


def encode_numpy(cfg: EncoderConfig, params: Mapping, tokens, batch_size: int = 256) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    with T.no_grad():
        for i in range(0, len(tokens), batch_size):
            out.append(encode(cfg, params, tokens[i:i + batch_size]).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.hidden_dim))


@dataclass(eq=False)
class Head:
    kind: str
    weights: T.Tensor
    bias: T.Tensor

    def __post_init__(self):
        if self.kind not in ("task", "adversarial", "mlm", "probe"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ConfigError(f"head weights must be [hidden, classes>=2], got {self.weights.shape}")

    @classmethod
    def zeros(cls, kind: str, hidden_dim: int, classes: int) -> Head:
        return cls(kind, T.Tensor(np.zeros((hidden_dim, classes)), requires_grad=True),
                   T.Tensor(np.zeros(classes), requires_grad=True))

    @classmethod
    def random(cls, kind: str, hidden_dim: int, classes: int, rng: RngState, std: float = 0.02) -> Head:
        return cls(kind, T.Tensor(rng.normal((hidden_dim, classes), std=std), requires_grad=True),
                   T.Tensor(np.zeros(classes), requires_grad=True))

    @property
    def classes(self) -> int:
        return self.weights.shape[1]

    def parameters(self) -> list[T.Tensor]:
        return [self.weights, self.bias]

    def copy(self) -> Head:
        return Head(self.kind, T.Tensor(self.weights.data.copy(), requires_grad=True),
                    T.Tensor(self.bias.data.copy(), requires_grad=True))


def head_forward(head: Head, h: T.Tensor) -> T.Tensor:
    h = T.as_tensor(h)
    if h.shape[-1] != head.weights.shape[0]:
        raise DimensionError(f"head expects width {head.weights.shape[0]}, got features of shape {h.shape}")
    return T.add(T.matmul(h, head.weights), head.bias)


def predict(head: Head, h: np.ndarray) -> np.ndarray:
    return np.argmax(h @ head.weights.data + head.bias.data, axis=1)


# ---------------------------------------------------------------------------
# masked-token pretraining
# ---------------------------------------------------------------------------

def mask_tokens(tokens: np.ndarray, rng: RngState, rate: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Replace ~``rate`` of positions (at least one per row) by MASK_TOKEN.

    Returns the corrupted tokens and a boolean matrix of masked positions.
    """
    B, S = tokens.shape
    masked = rng.generator.random((B, S)) < rate
    forced = rng.integers(0, S, size=B)
    masked[np.arange(B), forced] |= ~masked.any(axis=1)
    corrupted = tokens.copy()
    corrupted[masked] = MASK_TOKEN
    return corrupted, masked


def mlm_loss(cfg: EncoderConfig, params, head: Head, tokens: np.ndarray, corrupted: np.ndarray, masked: np.ndarray):
    states = encode_tokens(cfg, params, corrupted)
    rows = np.flatnonzero(masked.reshape(-1))
    picked = T.index_rows(T.reshape(states, (-1, cfg.hidden_dim)), rows)
    logits = head_forward(head, picked)
    return logits, T.softmax_cross_entropy(logits, tokens.reshape(-1)[rows])


def masked_token_accuracy(cfg: EncoderConfig, params, head: Head, tokens: np.ndarray, rng: RngState,
                          rate: float = 0.15, batch_size: int = 256) -> float:
    tokens = np.asarray(tokens, dtype=np.int64)
    hits = total = 0
    with T.no_grad():
        for i in range(0, len(tokens), batch_size):
            tok = tokens[i:i + batch_size]
            corrupted, masked = mask_tokens(tok, rng, rate)
            logits, _ = mlm_loss(cfg, params, head, tok, corrupted, masked)
            target = tok.reshape(-1)[np.flatnonzero(masked.reshape(-1))]
            hits += int((logits.data.argmax(axis=1) == target).sum())
            total += target.size
    return hits / total


@dataclass
class PretrainResult:
    params: ParamGroups
    mlm_head: Head
    losses: list[float]


def pretrain_mlm(cfg: EncoderConfig, corpus: Sequence[Sequence[int]], steps: int, *, batch_size: int = 32,
                 lr: float = 1e-3, mask_rate: float = 0.15, seed: int | None = None) -> PretrainResult:
    """Masked-token pretraining; returns frozen encoder parameters and the prediction head."""
    seed = cfg.seed if seed is None else seed
    root = RngState(seed, "pretrain")
    init = init_params(cfg, RngState(cfg.seed, "encoder_init"))
    head = Head.random("mlm", cfg.hidden_dim, cfg.vocab_size, root.stream("mlm_head"))
    if steps <= 0:
        return PretrainResult(freeze(init), head, [])
    tokens = np.asarray(corpus, dtype=np.int64)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise ConfigError("pretraining corpus must be a non-empty [n, seq] token matrix")
    params = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in init.items()}
    opt = Adam(list(params.values()) + head.parameters(), lr=lr)
    order_rng, mask_rng = root.stream("order"), root.stream("mask")
    order = order_rng.permutation(len(tokens))
    pos = 0
    losses = []
    for step in range(steps):
        if pos + batch_size > len(order):
            order, pos = order_rng.permutation(len(tokens)), 0
        batch = tokens[order[pos:pos + batch_size]]
        pos += batch_size
        corrupted, masked = mask_tokens(batch, mask_rng, mask_rate)
        opt.zero_grad()
        _, loss = mlm_loss(cfg, params, head, batch, corrupted, masked)
        if not np.isfinite(loss.data):
            raise TrainingError(f"pretraining diverged at step {step}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, losses[-1])
    return PretrainResult(freeze({k: v.data for k, v in params.items()}), head, losses)


def pretrain(cfg: EncoderConfig, corpus, steps: int, **kw) -> ParamGroups:
    return pretrain_mlm(cfg, corpus, steps, **kw).params
