"""Adaptive-order beam search over the masked next-item block.

Decoding works on raw codes: a block is a length-M array with ``MASKED``
(-1) at unfilled positions. Scoring is delegated to a callable returning
log-probabilities [n, M, K] for a batch of blocks, so the search can be
checked against hand-built probability tables as well as a trained model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

MASKED = -1
ORDERS = ("adaptive", "left2right", "right2left")

# score(rows, blocks) -> log-probs [n, M, K]; rows[i] says which context blocks[i] belongs to
BatchScorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DecodeConfig:
    steps: int = 4
    beam: int = 10
    k: int = 10
    order: str = "adaptive"
    mode: str = "beam"
    rerun: str = "position"  # re-score after every committed position, or once per step

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.mode not in ("beam", "greedy"):
            raise ValueError(f"mode must be 'beam' or 'greedy', got {self.mode!r}")
        if self.rerun not in ("position", "step"):
            raise ValueError(f"rerun must be 'position' or 'step', got {self.rerun!r}")
        if self.steps < 1 or self.beam < 1 or self.k < 1:
            raise ValueError("steps, beam and k must be positive")

    def check(self, n_heads: int) -> None:
        if not 1 <= self.steps <= n_heads or n_heads % self.steps:
            raise ValueError(f"steps={self.steps} must divide the SID length {n_heads}")

    @property
    def width(self) -> int:
        return 1 if self.mode == "greedy" else self.beam


@dataclass(frozen=True)
class DecodeState:
    tokens: tuple[int, ...]
    logprob: float = 0.0
    pending: tuple[int, ...] = ()  # positions selected this step but not yet committed
    path: tuple[int, ...] = ()  # positions in the order they were committed

    @property
    def filled(self) -> frozenset[int]:
        return frozenset(p for p, t in enumerate(self.tokens) if t != MASKED)

    @classmethod
    def empty(cls, n_heads: int) -> "DecodeState":
        return cls((MASKED,) * n_heads)


def select_positions(state: DecodeState, log_probs: np.ndarray, count: int) -> list[int]:
    """The ``count`` unfilled positions with the highest max probability.

    Ordered by descending confidence, lower position first on ties.
    """
    unfilled = [p for p, t in enumerate(state.tokens) if t == MASKED]
    if len(unfilled) < count:
        raise ValueError(f"asked for {count} positions but only {len(unfilled)} are unfilled")
    conf = np.exp(log_probs.max(axis=-1))
    ranked = sorted(unfilled, key=lambda p: (-conf[p], p))
    return ranked[:count]


def fixed_positions(state: DecodeState, order: str, count: int) -> list[int]:
    seq = range(len(state.tokens)) if order == "left2right" else reversed(range(len(state.tokens)))
    return [p for p in seq if state.tokens[p] == MASKED][:count]


def top_tokens(log_probs: np.ndarray, width: int) -> np.ndarray:
    """Indices of the ``width`` largest entries, lower index first on ties."""
    order = np.argsort(-log_probs, kind="stable")
    return order[:width]


def expand_position(
    beams: Sequence[DecodeState],
    positions: Sequence[int],
    log_probs: np.ndarray,
    width: int,
) -> tuple[list[DecodeState], list[int]]:
    """Expand beam i at ``positions[i]`` with its top-``width`` tokens, then prune.

    ``log_probs[i]`` is beam i's distribution [K] at that position. The union
    of children keeps the ``width`` best by log-prob, ties going to the lower
    token and then the earlier parent. Returns the survivors and the index of
    each survivor's parent.
    """
    cand = []  # (-logprob, token, parent)
    for i, (beam, pos) in enumerate(zip(beams, positions)):
        if beam.tokens[pos] != MASKED:
            raise ValueError(f"position {pos} is already filled in beam {i}")
        for tok in top_tokens(log_probs[i], width):
            cand.append((-(beam.logprob + float(log_probs[i][tok])), int(tok), i))
    cand.sort()
    children, parents = [], []
    for neg, tok, i in cand[:width]:
        beam, pos = beams[i], positions[i]
        tokens = list(beam.tokens)
        tokens[pos] = tok
        pending = tuple(p for p in beam.pending if p != pos)
        children.append(DecodeState(tuple(tokens), -neg, pending, beam.path + (pos,)))
        parents.append(i)
    return children, parents


@dataclass
class Decoded:
    entries: list[tuple[tuple[int, ...], float]]
    shortfall: bool = False
    paths: list[tuple[int, ...]] = field(default_factory=list)


def decode_many(
    n_contexts: int,
    n_heads: int,
    config: DecodeConfig,
    score: BatchScorer,
    on_step: Callable[[int, list[list[DecodeState]]], None] | None = None,
) -> list[Decoded]:
    """Decode one next-item block per context, all contexts in lockstep.

    Every round scores all live beams of all contexts in a single ``score``
    call. Each beam chooses its own positions (adaptive order) from the
    scores at the start of a step, then commits them one at a time.
    ``on_step(t, beams)`` is called after each step t (1-based).
    """
    config.check(n_heads)
    per_step = n_heads // config.steps
    width = config.width
    beams = [[DecodeState.empty(n_heads)] for _ in range(n_contexts)]
    cached: list[list[np.ndarray]] = [[] for _ in range(n_contexts)]

    for t in range(1, config.steps + 1):
        for i in range(per_step):
            if i == 0 or config.rerun == "position":
                cached = _score_all(beams, score)
            if i == 0:
                for u in range(n_contexts):
                    beams[u] = [replace(b, pending=tuple(_choose(b, lp, config.order, per_step))) for b, lp in zip(beams[u], cached[u])]
            for u in range(n_contexts):
                positions = [b.pending[0] for b in beams[u]]
                rows = np.stack([lp[p] for lp, p in zip(cached[u], positions)])
                beams[u], parents = expand_position(beams[u], positions, rows, width)
                cached[u] = [cached[u][j] for j in parents]
        if on_step is not None:
            on_step(t, beams)

    return [_finish(b, config.k) for b in beams]


def _choose(state: DecodeState, log_probs: np.ndarray, order: str, count: int) -> list[int]:
    if order == "adaptive":
        return select_positions(state, log_probs, count)
    return fixed_positions(state, order, count)


def _score_all(beams: list[list[DecodeState]], score: BatchScorer) -> list[list[np.ndarray]]:
    rows = np.array([u for u, bs in enumerate(beams) for _ in bs], dtype=np.int64)
    blocks = np.array([b.tokens for bs in beams for b in bs], dtype=np.int64)
    lp = np.asarray(score(rows, blocks), dtype=np.float64)
    out, start = [], 0
    for bs in beams:
        out.append(list(lp[start : start + len(bs)]))
        start += len(bs)
    return out


def _finish(beams: list[DecodeState], k: int) -> Decoded:
    seen, entries, paths = set(), [], []
    for b in sorted(beams, key=lambda s: -s.logprob):  # stable: pruning order breaks ties
        if b.tokens not in seen:
            seen.add(b.tokens)
            entries.append((b.tokens, b.logprob))
            paths.append(b.path)
    return Decoded(entries, len(entries) < k, paths)


def decode(
    history,
    config: DecodeConfig,
    predict: Callable[[object, np.ndarray], np.ndarray],
    n_heads: int,
) -> Decoded:
    """Decode a single context; ``predict(history, blocks)`` returns [n, M, K] log-probs."""
    return decode_many(1, n_heads, config, lambda rows, blocks: predict(history, blocks))[0]


def greedy_decode(
    predict: Callable[[np.ndarray], np.ndarray],
    n_heads: int,
    steps: int,
    order: str = "adaptive",
) -> tuple[tuple[int, ...], float]:
    """Temperature-0 iterative unmasking of one block, without any beam bookkeeping.

    ``predict(block)`` returns [M, K] log-probs for a single block. Each step
    picks its positions up front, then fills them one at a time with the
    argmax token, re-scoring after every fill.
    """
    block = np.full(n_heads, MASKED, dtype=np.int64)
    total = 0.0
    per_step = n_heads // steps
    for _ in range(steps):
        lp = np.asarray(predict(block), dtype=np.float64)
        open_ = [p for p in range(n_heads) if block[p] == MASKED]
        if order == "adaptive":
            chosen = sorted(open_, key=lambda p: (-np.exp(lp[p].max()), p))[:per_step]
        elif order == "left2right":
            chosen = open_[:per_step]
        else:
            chosen = open_[::-1][:per_step]
        for j, pos in enumerate(chosen):
            if j:
                lp = np.asarray(predict(block), dtype=np.float64)
            tok = int(np.argmax(lp[pos]))
            block[pos] = tok
            total += float(lp[pos][tok])
    return tuple(int(c) for c in block), total


# --------------------------------------------------------------------------
# model adapter


def model_scorer(model, histories: np.ndarray, batch_size: int = 4096) -> BatchScorer:
    """Scorer backed by a ``MaskPredictor``.

    ``histories`` is [n_contexts, L] token rows (block positions are
    overwritten), e.g. from ``predictor.encode_histories``.
    """
    import torch

    vocab, layout = model.vocab, model.layout
    offsets = np.arange(layout.n_heads) * vocab.codebook_size

    def score(rows: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        tokens = histories[rows].copy()
        tokens[:, layout.block] = np.where(blocks == MASKED, vocab.mask_id, blocks + offsets)
        out = []
        with torch.no_grad():
            for start in range(0, len(tokens), batch_size):
                chunk = torch.from_numpy(tokens[start : start + batch_size])
                out.append(model.block_log_probs(chunk).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, layout.n_heads, vocab.codebook_size))

    return score
