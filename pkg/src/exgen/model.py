"""Tiny autoregressive transformer with low-rank adapters.

The base model is a 2-layer pre-norm transformer held in double precision
so finite-difference gradient checks stay tight.  Base weights are frozen
at construction; training touches only the adapter pairs attached to the
query/value projections plus whatever scalar heads a stage adds.  Sampling
is a pure function of (parameters, prompt, seed, hook): all randomness
comes from a PCG64 stream seeded per call.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vocab import Vocab

DTYPE = torch.float64

#: A logit transform receives the raw next-token logits row (float64,
#: length vocab_size) and returns the adjusted row used for that step.
LogitTransform = Callable[[np.ndarray], np.ndarray]


class LengthOverflowError(ValueError):
    """A sequence does not fit the model's context window."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 256
    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    adapter_rank: int = 8
    adapter_scale: float = 2.0

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.context_length < 2:
            raise ValueError("context_length must be >= 2")
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be >= 0")
        if min(self.vocab_size, self.embed_dim, self.num_layers, self.num_heads) <= 0:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "adapter_rank": self.adapter_rank,
            "adapter_scale": self.adapter_scale,
        }


def lora_apply(weight: torch.Tensor, adapter: tuple[torch.Tensor, torch.Tensor],
               scale: float) -> torch.Tensor:
    """Effective weight ``W + scale * (B @ A)`` for adapter pair ``(A, B)``.

    ``A`` is rank x in_features, ``B`` is out_features x rank.  The base
    weight is never mutated.
    """
    a, b = adapter
    if a.shape[0] != b.shape[1] or b.shape[0] != weight.shape[0] or a.shape[1] != weight.shape[1]:
        raise ValueError(
            f"adapter shapes {tuple(a.shape)}/{tuple(b.shape)} do not conform "
            f"to weight {tuple(weight.shape)}"
        )
    return weight + scale * (b @ a)


def _init_weight(shape: tuple[int, ...], std: float, gen: torch.Generator) -> nn.Parameter:
    w = torch.empty(shape, dtype=DTYPE)
    if std == 0.0:
        w.zero_()
    else:
        w.normal_(0.0, std, generator=gen)
    return nn.Parameter(w)


class _Block(nn.Module):
    """Pre-norm transformer block; adapters sit on the q and v projections."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator,
                 adapter_gen: torch.Generator):
        super().__init__()
        d = cfg.embed_dim
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.wq = _init_weight((d, d), 0.05, gen)
        self.wk = _init_weight((d, d), 0.05, gen)
        self.wv = _init_weight((d, d), 0.05, gen)
        self.wo = _init_weight((d, d), 0.05, gen)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.w_up = _init_weight((4 * d, d), 0.05, gen)
        self.b_up = _init_weight((4 * d,), 0.0, gen)
        self.w_down = _init_weight((d, 4 * d), 0.05, gen)
        self.b_down = _init_weight((d,), 0.0, gen)
        r = cfg.adapter_rank
        if r > 0:
            # Adapters draw from their own stream so the base weights do
            # not depend on the rank; B starts at zero, so a fresh adapter
            # contributes exactly nothing.
            self.adapter_a_q = _init_weight((r, d), 0.1, adapter_gen)
            self.adapter_b_q = _init_weight((d, r), 0.0, adapter_gen)
            self.adapter_a_v = _init_weight((r, d), 0.1, adapter_gen)
            self.adapter_b_v = _init_weight((d, r), 0.0, adapter_gen)

    def _project(self, x: torch.Tensor, w: torch.Tensor,
                 a: torch.Tensor | None, b: torch.Tensor | None) -> torch.Tensor:
        out = x @ w.T
        if a is not None:
            out = out + self.cfg.adapter_scale * ((x @ a.T) @ b.T)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        bsz, t, d = x.shape
        hd = d // cfg.num_heads
        h = self.ln1(x)
        has_adapter = cfg.adapter_rank > 0
        q = self._project(h, self.wq, self.adapter_a_q if has_adapter else None,
                          self.adapter_b_q if has_adapter else None)
        k = h @ self.wk.T
        v = self._project(h, self.wv, self.adapter_a_v if has_adapter else None,
                          self.adapter_b_v if has_adapter else None)

        def heads(m: torch.Tensor) -> torch.Tensor:
            return m.view(bsz, t, cfg.num_heads, hd).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.triu(torch.full((t, t), float("-inf"), dtype=DTYPE), diagonal=1)
        att = torch.softmax(att + mask, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(bsz, t, d)
        x = x + out @ self.wo.T
        h2 = self.ln2(x)
        x = x + F.gelu(h2 @ self.w_up.T + self.b_up) @ self.w_down.T + self.b_down
        return x


class TinyLM(nn.Module):
    """Decoder-only language model over a :class:`Vocab`.

    Base tensors are frozen (``requires_grad=False``); adapter pairs and
    any attached scalar heads are the only trainable parameters.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, *, seed: int = 0):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError(
                f"config.vocab_size={config.vocab_size} != len(vocab)={len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        gen = torch.Generator().manual_seed(seed)
        adapter_gen = torch.Generator().manual_seed(seed + 0x5EED)
        self.tok_emb = _init_weight((config.vocab_size, config.embed_dim), 0.05, gen)
        self.pos_emb = _init_weight((config.context_length, config.embed_dim), 0.05, gen)
        self.blocks = nn.ModuleList(
            _Block(config, gen, adapter_gen) for _ in range(config.num_layers))
        self.ln_f = nn.LayerNorm(config.embed_dim, dtype=DTYPE)
        self.lm_head = _init_weight((config.vocab_size, config.embed_dim), 0.05, gen)
        self.reward_w: nn.Parameter | None = None
        self.reward_b: nn.Parameter | None = None
        self.value_w: nn.Parameter | None = None
        self.value_b: nn.Parameter | None = None
        self._freeze_base()

    _ADAPTER_MARKERS = ("adapter_", "reward_", "value_")

    def _freeze_base(self) -> None:
        for name, p in self.named_parameters():
            trainable = any(marker in name for marker in self._ADAPTER_MARKERS)
            p.requires_grad_(trainable)

    def add_reward_head(self, *, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        self.reward_w = _init_weight((self.config.embed_dim,), 0.01, gen)
        self.reward_b = _init_weight((), 0.0, gen)

    def add_value_head(self, *, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        self.value_w = _init_weight((self.config.embed_dim,), 0.01, gen)
        self.value_b = _init_weight((), 0.0, gen)

    @property
    def has_reward_head(self) -> bool:
        return self.reward_w is not None

    @property
    def has_value_head(self) -> bool:
        return self.value_w is not None

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def _check_length(self, t: int) -> None:
        if t > self.config.context_length:
            raise LengthOverflowError(
                f"sequence length {t} exceeds context {self.config.context_length}"
            )

    def hidden(self, ids: torch.Tensor) -> torch.Tensor:
        """Final-layer-norm hidden states, shape (batch, len, embed_dim)."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        self._check_length(ids.shape[1])
        x = F.embedding(ids, self.tok_emb) + self.pos_emb[: ids.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits, shape (batch, len, vocab).  Row t of a
        sequence depends only on ids at positions <= t."""
        return self.hidden(ids) @ self.lm_head.T

    def values(self, ids: torch.Tensor) -> torch.Tensor:
        """Per-position value estimates from the value head, shape (batch, len)."""
        if self.value_w is None:
            raise RuntimeError("model has no value head")
        return self.hidden(ids) @ self.value_w + self.value_b

    def sequence_log_prob(self, prompt_ids: Sequence[int],
                          response_ids: Sequence[int]) -> torch.Tensor:
        """Per-token log-probabilities of the response given the prompt.

        The sequence is composed as ``[bos] + prompt + response``; the
        returned tensor has one entry per response token and is
        differentiable with respect to the trainable parameters.
        """
        full = [self.vocab.bos_id, *prompt_ids, *response_ids]
        self._check_length(len(full))
        if not response_ids:
            return torch.zeros(0, dtype=DTYPE)
        ids = torch.tensor(full, dtype=torch.long)
        logits = self.forward(ids)[0]
        start = 1 + len(prompt_ids)
        rows = logits[start - 1: len(full) - 1]
        targets = ids[start:]
        return F.log_softmax(rows, dim=-1)[torch.arange(len(targets)), targets]


@dataclass(frozen=True)
class SamplerConfig:
    """Stochastic decoding knobs.  ``temperature=0`` selects greedy argmax
    decoding (the zero-temperature limit), in which case the seed is unused."""

    temperature: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 disables)")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


def derive_seed(master: int, label: str, index: int) -> int:
    """Stable 64-bit sub-seed for stream ``(label, index)`` under ``master``."""
    digest = hashlib.sha256(f"{master}:{label}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _next_token(row: np.ndarray, cfg: SamplerConfig,
                rng: np.random.Generator | None) -> int:
    if cfg.temperature == 0.0:
        return int(np.argmax(row))  # first maximum, i.e. lowest token id
    z = row / cfg.temperature
    if 0 < cfg.top_k < len(z):
        # Keep the top_k logits, ties broken toward lower token ids.
        order = np.lexsort((np.arange(len(z)), -z))
        masked = np.full_like(z, -np.inf)
        masked[order[: cfg.top_k]] = z[order[: cfg.top_k]]
        z = masked
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample(model: TinyLM, prompt_ids: Sequence[int], cfg: SamplerConfig,
           logit_transform: LogitTransform | None = None) -> list[int]:
    """Sample a continuation of ``[bos] + prompt``.

    Deterministic for fixed (model, prompt, cfg.seed, transform).  Stops at
    the eos token (included in the output), after ``max_new_tokens``, or
    when the context window fills.  The transform, when given, maps the raw
    logits row to the row actually used for that step's distribution.
    """
    return sample_batch(model, prompt_ids, [cfg.seed], cfg, logit_transform)[0]


def sample_batch(model: TinyLM, prompt_ids: Sequence[int], seeds: Sequence[int],
                 cfg: SamplerConfig,
                 logit_transform: LogitTransform | None = None) -> list[list[int]]:
    """Sample one continuation per seed from a shared prompt.

    Each row consumes its own PCG64 stream, so row i's output matches a
    solo :func:`sample` call with that seed up to floating-point batching
    effects in the forward pass (exact when ``len(seeds) == 1``).
    """
    vocab = model.vocab
    base = [vocab.bos_id, *prompt_ids]
    if len(base) + 1 > model.config.context_length:
        raise LengthOverflowError(
            f"prompt length {len(base)} leaves no room to generate "
            f"(context {model.config.context_length})"
        )
    steps = min(cfg.max_new_tokens, model.config.context_length - len(base))
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    rows = [list(base) for _ in seeds]
    outputs: list[list[int]] = [[] for _ in seeds]
    done = [False] * len(seeds)
    with torch.no_grad():
        for _ in range(steps):
            if all(done):
                break
            ids = torch.tensor(rows, dtype=torch.long)
            logits = model.forward(ids)[:, -1, :].numpy()
            for i, rng in enumerate(rngs):
                if done[i]:
                    rows[i].append(vocab.eos_id)
                    continue
                row = logits[i].astype(np.float64, copy=True)
                if logit_transform is not None:
                    row = logit_transform(row)
                token = _next_token(row, cfg, rng if cfg.temperature != 0.0 else None)
                rows[i].append(token)
                outputs[i].append(token)
                if token == vocab.eos_id:
                    done[i] = True
    return outputs
