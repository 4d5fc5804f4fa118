"""Byte-level tokenizer and a small decoder-only language model.

The decoder is the desk-scale default backend (~1M parameters). Base weights
are frozen at construction; the only trainable parameters are low-rank deltas
on the attention query/value projections and the output head, matching the
parameter-efficient tuning contract. Real multi-billion-parameter backends
can implement the same interface as plugins.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Iterable, Protocol, runtime_checkable

import torch
from torch import nn

from .prompting import AUDIO_TOKEN, VIDEO_TOKEN


class ByteTokenizer:
    """UTF-8 byte tokenizer with reserved control and placeholder ids.

    Ids 0..255 are raw bytes; PAD/BOS/EOS sit above them, and each special
    token string (the modality placeholders) gets one id after those.
    """

    PAD = 256
    BOS = 257
    EOS = 258

    def __init__(self, special_tokens: tuple[str, ...] = (VIDEO_TOKEN, AUDIO_TOKEN)):
        if len(set(special_tokens)) != len(special_tokens):
            raise ValueError("special tokens must be distinct")
        self.special_tokens = tuple(special_tokens)
        self._special_ids = {tok: 259 + i for i, tok in enumerate(self.special_tokens)}
        self._ids_special = {i: tok for tok, i in self._special_ids.items()}
        if self.special_tokens:
            pattern = "|".join(re.escape(t) for t in self.special_tokens)
            self._split_re: re.Pattern | None = re.compile(f"({pattern})")
        else:
            self._split_re = None

    @property
    def vocab_size(self) -> int:
        return 259 + len(self.special_tokens)

    def special_id(self, token: str) -> int:
        if token not in self._special_ids:
            raise KeyError(f"unknown special token {token!r}")
        return self._special_ids[token]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._special_ids.values())

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        parts = self._split_re.split(text) if self._split_re else [text]
        ids: list[int] = [self.BOS] if add_bos else []
        for part in parts:
            if not part:
                continue
            if part in self._special_ids:
                ids.append(self._special_ids[part])
            else:
                ids.extend(part.encode("utf-8"))
        if add_eos:
            ids.append(self.EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if 0 <= i <= 255:
                buf.append(i)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            if i in self._ids_special:
                out.append(self._ids_special[i])
            # PAD/BOS/EOS render as nothing
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)


@dataclass(frozen=True)
class TinyDecoderConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 1536
    max_len: int = 1024
    lora_rank: int = 8
    lora_alpha: float = 16.0
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank delta.

    y = x W^T + b + (alpha / r) x A^T B^T, with B zero-initialized so the
    delta starts at exactly zero.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rank: int,
        alpha: float,
        bias: bool = True,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias, dtype=dtype)
        bound = 1.0 / math.sqrt(d_in)
        with torch.no_grad():
            self.base.weight.uniform_(-bound, bound, generator=generator)
            if bias:
                self.base.bias.uniform_(-bound, bound, generator=generator)
        self.base.weight.requires_grad_(False)
        if bias:
            self.base.bias.requires_grad_(False)
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, d_in, dtype=dtype))
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))
        with torch.no_grad():
            self.lora_a.uniform_(-bound, bound, generator=generator)

    def reset_delta(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.base.in_features)
        with torch.no_grad():
            self.lora_a.uniform_(-bound, bound, generator=generator)
            self.lora_b.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = (x @ self.lora_a.t()) @ self.lora_b.t()
        return self.base(x) + self.scale * delta


class _Block(nn.Module):
    def __init__(self, cfg: TinyDecoderConfig, generator: torch.Generator):
        super().__init__()
        d, dtype = cfg.d_model, cfg.torch_dtype
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=dtype)
        self.ln2 = nn.LayerNorm(d, dtype=dtype)
        self.q_proj = LoRALinear(
            d, d, cfg.lora_rank, cfg.lora_alpha, dtype=dtype, generator=generator
        )
        self.k_proj = _frozen_linear(d, d, dtype, generator)
        self.v_proj = LoRALinear(
            d, d, cfg.lora_rank, cfg.lora_alpha, dtype=dtype, generator=generator
        )
        self.out_proj = _frozen_linear(d, d, dtype, generator)
        self.ff1 = _frozen_linear(d, cfg.d_ff, dtype, generator)
        self.ff2 = _frozen_linear(cfg.d_ff, d, dtype, generator)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: torch.Tensor,
        attn_mask: torch.Tensor,
        past: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """One decoder block; `past` prepends cached keys/values.

        attn_mask covers the full key range: [.., l, l_past + l]. Returns the
        block output and this call's full (k, v) for continuation reuse.
        """
        b, l, d = x.shape
        h = self.ln1(x)
        q = self.q_proj(h).view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(h).view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(h).view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(attn_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, l, d)
        x = x + self.dropout(self.out_proj(ctx))
        h = self.ln2(x)
        x = x + self.dropout(self.ff2(torch.nn.functional.gelu(self.ff1(h))))
        return x, (k, v)


def _frozen_linear(
    d_in: int, d_out: int, dtype: torch.dtype, generator: torch.Generator
) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=dtype)
    bound = 1.0 / math.sqrt(d_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)
    layer.weight.requires_grad_(False)
    layer.bias.requires_grad_(False)
    return layer


@runtime_checkable
class LanguageModel(Protocol):
    """Backend contract: tokenization, embedding, and a per-position head."""

    tokenizer: ByteTokenizer

    @property
    def d_model(self) -> int: ...

    def tokenize(self, text: str) -> list[int]: ...

    def embed(self, ids) -> torch.Tensor: ...

    def forward_embeddings(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor: ...

    def hidden_states(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor: ...

    def trainable_parameters(self) -> list[nn.Parameter]: ...

    def base_weight_hash(self) -> str: ...


class TinyDecoderLM(nn.Module):
    """Pre-norm causal decoder over the byte vocabulary.

    embed() returns position-free token embeddings so callers can splice
    modality feature rows into the sequence; positions are added inside
    forward_embeddings.
    """

    def __init__(self, cfg: TinyDecoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or TinyDecoderConfig()
        self.tokenizer = ByteTokenizer()
        gen = torch.Generator().manual_seed(self.cfg.seed)
        dtype = self.cfg.torch_dtype
        vocab = self.tokenizer.vocab_size
        self.tok_emb = nn.Embedding(vocab, self.cfg.d_model, dtype=dtype)
        self.pos_emb = nn.Embedding(self.cfg.max_len, self.cfg.d_model, dtype=dtype)
        with torch.no_grad():
            self.tok_emb.weight.normal_(0.0, 0.02, generator=gen)
            self.pos_emb.weight.normal_(0.0, 0.02, generator=gen)
        self.tok_emb.weight.requires_grad_(False)
        self.pos_emb.weight.requires_grad_(False)
        self.blocks = nn.ModuleList(
            _Block(self.cfg, gen) for _ in range(self.cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(self.cfg.d_model, dtype=dtype)
        self.ln_f.weight.requires_grad_(False)
        self.ln_f.bias.requires_grad_(False)
        for block in self.blocks:
            block.ln1.weight.requires_grad_(False)
            block.ln1.bias.requires_grad_(False)
            block.ln2.weight.requires_grad_(False)
            block.ln2.bias.requires_grad_(False)
        self.head = LoRALinear(
            self.cfg.d_model,
            vocab,
            self.cfg.lora_rank,
            self.cfg.lora_alpha,
            bias=False,
            dtype=dtype,
            generator=gen,
        )

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def embed(self, ids) -> torch.Tensor:
        ids_t = torch.as_tensor(list(ids), dtype=torch.long)
        return self.tok_emb(ids_t)

    def _prefix_core(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None
    ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        b, l, d = x.shape
        if d != self.cfg.d_model:
            raise ValueError(f"embedding width {d} != d_model {self.cfg.d_model}")
        if l > self.cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(l, device=x.device)
        h = x + self.pos_emb(positions)
        causal = torch.triu(
            torch.ones(l, l, dtype=torch.bool, device=x.device), diagonal=1
        )
        mask = causal.view(1, 1, l, l)
        if pad_mask is not None:
            mask = mask | pad_mask.view(b, 1, 1, l)
        caches = []
        for block in self.blocks:
            h, kv = block(h, mask)
            caches.append(kv)
        return self.ln_f(h), caches

    def forward_embeddings(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Per-position vocabulary logits for a batch of embedding sequences.

        x: [L, d] or [B, L, d]; pad_mask: optional [B, L] bool, True at
        padding positions (never attended to).
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        hidden, _ = self._prefix_core(x, pad_mask)
        logits = self.head(hidden)
        return logits.squeeze(0) if squeeze else logits

    def hidden_states(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Final-layer normalized hidden states (the pre-head representation)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        hidden, _ = self._prefix_core(x, pad_mask)
        return hidden.squeeze(0) if squeeze else hidden

    def prefix_states(
        self, x: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        """hidden_states plus per-layer attention K/V for continuation reuse.

        Scoring several short continuations of one padded prompt batch only
        needs the prompt forwarded once; extend_states appends the tails
        against the returned caches.
        """
        if x.ndim != 3:
            raise ValueError("prefix_states expects a batched [B, L, d] input")
        return self._prefix_core(x, pad_mask)

    def extend_states(
        self,
        tail: torch.Tensor,
        caches: list[tuple[torch.Tensor, torch.Tensor]],
        lengths: torch.Tensor,
        pad_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Hidden states for tail embeddings appended after each row's prompt.

        tail: [B, T, d]; lengths: [B] true (unpadded) prompt lengths, giving
        each tail row its absolute positions; pad_mask: the prefix [B, L]
        padding mask. Gradients flow through the caches into the prefix.
        """
        b, t, d = tail.shape
        l_past = pad_mask.shape[1]
        max_pos = int(lengths.max().item()) + t
        if max_pos > self.cfg.max_len:
            raise ValueError(f"sequence length {max_pos} exceeds max_len {self.cfg.max_len}")
        pos_ids = lengths.view(b, 1) + torch.arange(t, device=tail.device).view(1, t)
        h = tail + self.pos_emb(pos_ids)
        # tail queries see every non-pad prefix key plus earlier tail keys
        prefix_blocked = pad_mask.view(b, 1, 1, l_past).expand(b, 1, t, l_past)
        tail_causal = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=tail.device), diagonal=1
        )
        mask = torch.cat(
            [prefix_blocked, tail_causal.view(1, 1, t, t).expand(b, 1, t, t)], dim=-1
        )
        for block, past in zip(self.blocks, caches):
            h, _ = block(h, mask, past=past)
        return self.ln_f(h)

    def project_vocab(self, hidden: torch.Tensor) -> torch.Tensor:
        """Vocabulary logits for already-computed hidden states."""
        return self.head(hidden)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def reset_trainable(self, seed: int | None = None) -> None:
        """Re-initialize the low-rank deltas (optional between stages)."""
        gen = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        for module in self.modules():
            if isinstance(module, LoRALinear):
                module.reset_delta(gen)

    def base_weight_hash(self) -> str:
        """Digest of all frozen parameters, stable across training stages."""
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            if param.requires_grad:
                continue
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
