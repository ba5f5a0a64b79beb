"""Token layout and the transformer mask predictor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import torch
from torch import nn

from diffrec.nn import (
    NEG_INF,
    AttentionBlock,
    AttentionPattern,
    assert_finite,
    build_attention_mask,
    load_checkpoint,
    register_differentiable,
    save_checkpoint,
)


@dataclass(frozen=True)
class VocabLayout:
    """Head ``m`` code ``c`` is token ``m * K + c``; [MASK] and [PAD] follow the code blocks."""

    n_heads: int
    codebook_size: int

    @property
    def mask_id(self) -> int:
        return self.n_heads * self.codebook_size

    @property
    def pad_id(self) -> int:
        return self.n_heads * self.codebook_size + 1

    @property
    def size(self) -> int:
        return self.n_heads * self.codebook_size + 2

    def token(self, head: int, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise ValueError(f"code {code} out of range for codebook size {self.codebook_size}")
        if not 0 <= head < self.n_heads:
            raise ValueError(f"head {head} out of range for {self.n_heads} heads")
        return head * self.codebook_size + code

    def head_of(self, token: int) -> int:
        if not 0 <= token < self.mask_id:
            raise ValueError(f"token {token} is not a code token")
        return token // self.codebook_size

    def code_of(self, token: int) -> int:
        if not 0 <= token < self.mask_id:
            raise ValueError(f"token {token} is not a code token")
        return token % self.codebook_size


@dataclass(frozen=True)
class SequenceLayout:
    """``max_items`` history slots of ``n_heads`` tokens, then the next-item block."""

    max_items: int
    n_heads: int

    @property
    def length(self) -> int:
        return (self.max_items + 1) * self.n_heads

    @cached_property
    def item_of(self) -> np.ndarray:
        return np.arange(self.length) // self.n_heads

    @cached_property
    def offset_of(self) -> np.ndarray:
        return np.arange(self.length) % self.n_heads

    @property
    def block(self) -> slice:
        return slice(self.length - self.n_heads, self.length)


def assemble_input(
    history: Sequence[Sequence[int]],
    next_block: Sequence[int],
    vocab: VocabLayout,
    layout: SequenceLayout,
) -> list[int]:
    """Token sequence for one example: left-padded history, then ``next_block``.

    ``history`` holds semantic ids (raw codes). ``next_block`` holds tokens
    already in vocabulary space, usually [MASK] or head-offset codes.
    """
    if len(history) > layout.max_items:
        raise ValueError(f"history of {len(history)} items exceeds max_items={layout.max_items}")
    if len(next_block) != layout.n_heads:
        raise ValueError(f"next_block must have {layout.n_heads} tokens")
    tokens = [vocab.pad_id] * ((layout.max_items - len(history)) * layout.n_heads)
    for sid in history:
        if len(sid) != layout.n_heads:
            raise ValueError(f"semantic id {list(sid)} does not have {layout.n_heads} codes")
        tokens.extend(vocab.token(m, c) for m, c in enumerate(sid))
    tokens.extend(int(t) for t in next_block)
    return tokens


def encode_histories(
    histories: Sequence[Sequence[Sequence[int]]], vocab: VocabLayout, layout: SequenceLayout
) -> np.ndarray:
    """Vectorised ``assemble_input`` for the history part; returns [N, L] with the block set to [MASK]."""
    out = np.full((len(histories), layout.length), vocab.pad_id, dtype=np.int64)
    offsets = np.arange(layout.n_heads) * vocab.codebook_size
    hist_len = layout.max_items * layout.n_heads
    for row, hist in enumerate(histories):
        if len(hist) > layout.max_items:
            raise ValueError(f"history of {len(hist)} items exceeds max_items={layout.max_items}")
        if len(hist):
            codes = np.asarray(hist, dtype=np.int64)
            if codes.min() < 0 or codes.max() >= vocab.codebook_size:
                raise ValueError("code out of range")
            out[row, hist_len - codes.size : hist_len] = (codes + offsets).ravel()
    out[:, layout.block] = vocab.mask_id
    return out


@dataclass
class PredictorConfig:
    layers: int = 4
    d_model: int = 256
    heads: int = 8
    ffn_hidden: int | None = None
    attention: str = "bidirectional"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be at least 1, got {self.layers}")
        AttentionPattern(self.attention)


class MaskPredictor(nn.Module):
    """Transformer encoder over the token layout with head-restricted outputs.

    At a position with within-item offset m, every logit outside head m's
    code block (including the special tokens) is fixed at -1e9.
    """

    def __init__(self, vocab: VocabLayout, layout: SequenceLayout, config: PredictorConfig):
        super().__init__()
        if vocab.n_heads != layout.n_heads:
            raise ValueError("vocab and sequence layouts disagree on the number of heads")
        self.vocab, self.layout, self.config = vocab, layout, config
        torch.manual_seed(config.seed)
        self.token_emb = nn.Embedding(vocab.size, config.d_model)
        self.pos_emb = nn.Embedding(layout.length, config.d_model)
        self.blocks = nn.ModuleList(
            AttentionBlock(config.d_model, config.heads, config.ffn_hidden, config.dropout)
            for _ in range(config.layers)
        )
        self.ln_out = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, vocab.size)

        item_of = torch.from_numpy(layout.item_of)
        self.register_buffer("item_of", item_of, persistent=False)
        token_head = torch.arange(vocab.size) // vocab.codebook_size  # specials land past the last head
        offset = torch.from_numpy(layout.offset_of)
        self.register_buffer("outside_head", token_head[None, :] != offset[:, None], persistent=False)
        self.register_buffer("offset", offset, persistent=False)
        self.pattern = AttentionPattern(config.attention)

    def forward(self, tokens: torch.Tensor, block_only: bool = False) -> torch.Tensor:
        """Logits [..., L, vocab] for tokens [..., L].

        With ``block_only`` the result is ``block_log_probs(tokens)`` instead.
        """
        if block_only:
            return self.block_log_probs(tokens)
        lead = tokens.shape[:-1]
        logits = self.head(self._hidden(tokens)).masked_fill(self.outside_head, NEG_INF)
        assert_finite(logits, "predictor logits")
        return logits.reshape(*lead, self.layout.length, self.vocab.size)

    def head_log_probs(self, tokens: torch.Tensor) -> torch.Tensor:
        """Log-probabilities [..., L, K] over each position's own code block.

        Matches the log-softmax of ``forward`` on that block (the -1e9 entries
        vanish under exp) without materialising full-vocabulary logits.
        """
        m, k = self.vocab.n_heads, self.vocab.codebook_size
        lead = tokens.shape[:-1]
        h = self._hidden(tokens)
        weight = self.head.weight[: m * k].view(m, k, -1)[self.offset]
        bias = self.head.bias[: m * k].view(m, k)[self.offset]
        logits = torch.einsum("nld,lkd->nlk", h, weight) + bias
        assert_finite(logits, "predictor logits")
        return torch.log_softmax(logits, dim=-1).reshape(*lead, self.layout.length, k)

    def block_log_probs(self, tokens: torch.Tensor) -> torch.Tensor:
        """Log-probabilities [N, n_heads, K] over each next-item position's own code block."""
        return self.head_log_probs(tokens)[:, self.layout.block]

    def _hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.layout.length:
            raise ValueError(f"expected sequences of length {self.layout.length}, got {tokens.shape[-1]}")
        tokens = tokens.reshape(-1, self.layout.length)
        if tokens.min() < 0 or tokens.max() >= self.vocab.size:
            raise ValueError("token id out of range")
        allow = build_attention_mask(self.pattern, self.item_of, tokens == self.vocab.pad_id)
        x = self.token_emb(tokens) + self.pos_emb.weight
        for block in self.blocks:
            x = block(x, allow)
        return self.ln_out(x)


@register_differentiable("mask_predictor")
def _predictor_case(gen):
    vocab, layout = VocabLayout(2, 3), SequenceLayout(2, 2)
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))
    model = MaskPredictor(vocab, layout, PredictorConfig(layers=1, d_model=8, heads=2, ffn_hidden=8, seed=seed))
    model = model.double()
    tokens = torch.tensor([[vocab.pad_id, vocab.pad_id, 1, 4, vocab.mask_id, 3]])
    names = [n for n, _ in model.named_parameters()]

    def fn(*ps):
        # head-restricted log-probs of the next-item block; the -1e9 fill never enters
        return torch.func.functional_call(model, dict(zip(names, ps)), (tokens,), {"block_only": True})

    return fn, [p.detach().clone() for p in model.parameters()]


def save_predictor(path, model: MaskPredictor, extra: dict | None = None) -> None:
    meta = {
        "kind": "predictor",
        "vocab": asdict(model.vocab),
        "layout": {"max_items": model.layout.max_items, "n_heads": model.layout.n_heads},
        "config": asdict(model.config),
        **(extra or {}),
    }
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_predictor(path) -> tuple[MaskPredictor, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "predictor":
        raise ValueError(f"{path}: not a predictor checkpoint")
    model = MaskPredictor(
        VocabLayout(**meta["vocab"]), SequenceLayout(**meta["layout"]), PredictorConfig(**meta["config"])
    )
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
