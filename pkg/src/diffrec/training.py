"""Masking processes, the two masked-token losses, and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Collection, NamedTuple, Sequence

import numpy as np
import torch

from diffrec.corpus import SplitCorpus
from diffrec.io import write_csv
from diffrec.nn import AdamW
from diffrec.predictor import MaskPredictor, PredictorConfig, SequenceLayout, VocabLayout, encode_histories
from diffrec.tokenizer import SidCatalog

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss_total", "loss_item", "loss_his", "val_recall@10", "wall_ms")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lambda_his: float = 1.0
    epochs: int = 150
    lr: float = 1e-3
    weight_decay: float = 0.005
    batch_size: int = 1024
    patience: int = 10
    val_users: int = 1000  # validation subset used for early stopping; 0 = all
    seed: int = 0

    def __post_init__(self):
        if self.lambda_his < 0:
            raise ValueError(f"lambda_his must be non-negative, got {self.lambda_his}")


@dataclass
class MaskSample:
    ratio: float
    positions: np.ndarray  # sorted masked positions
    original: np.ndarray
    masked: np.ndarray


def sample_mask(
    tokens: Sequence[int],
    eligible: Collection[int],
    rng: np.random.Generator,
    mask_id: int,
    ratio: float | None = None,
) -> MaskSample:
    """Mask each eligible position independently with probability r ~ U(0, 1).

    A draw that masks nothing is thrown away and redrawn (r included), so the
    1/r loss weight stays finite. ``ratio`` pins r, for tests.
    """
    eligible = np.array(sorted(eligible), dtype=np.int64)
    if eligible.size == 0:
        raise ValueError("no eligible positions to mask")
    original = np.asarray(tokens)
    while True:
        r = rng.uniform() if ratio is None else ratio
        hit = rng.uniform(size=eligible.size) < r
        if hit.any():
            break
    masked = original.copy()
    masked[eligible[hit]] = mask_id
    return MaskSample(float(r), eligible[hit], original, masked)


def sample_mask_batch(
    eligible: np.ndarray, rng: np.random.Generator, ratio: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``sample_mask`` over a boolean eligibility matrix [N, L].

    Returns (masked positions [N, L] bool, ratios [N]).
    """
    n = eligible.shape[0]
    if not eligible.any(axis=1).all():
        raise ValueError("every row needs at least one eligible position")
    ratios = np.empty(n)
    hit = np.zeros_like(eligible)
    todo = np.arange(n)
    while todo.size:
        r = rng.uniform(size=todo.size) if ratio is None else np.full(todo.size, ratio)
        h = (rng.uniform(size=(todo.size, eligible.shape[1])) < r[:, None]) & eligible[todo]
        ok = h.any(axis=1)
        ratios[todo[ok]] = r[ok]
        hit[todo[ok]] = h[ok]
        todo = todo[~ok]
    return hit, ratios


def masked_nll(log_probs: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor, ratio: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``(1/r) * sum over masked positions of -log p(target)``."""
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_row = -(picked * masked).sum(-1) / ratio
    return per_row.mean()


class LossTerms(NamedTuple):
    total: torch.Tensor
    item: torch.Tensor
    his: torch.Tensor


def _mask_inputs(clean: np.ndarray, layout: SequenceLayout, vocab: VocabLayout, rng: np.random.Generator, ratio=None):
    """Build the inputs of both masking processes from clean sequences [N, L]."""
    n, length = clean.shape
    block = np.zeros(length, dtype=bool)
    block[layout.block] = True

    item_hit, item_r = sample_mask_batch(np.broadcast_to(block, clean.shape), rng, ratio)
    item_in = np.where(item_hit, vocab.mask_id, clean)

    his_eligible = (clean != vocab.pad_id) & ~block
    his_hit, his_r = sample_mask_batch(his_eligible, rng, ratio)
    his_in = np.where(his_hit | block, vocab.mask_id, clean)
    return item_in, item_hit, item_r, his_in, his_hit, his_r


def diffusion_losses(
    predict: Callable[[torch.Tensor], torch.Tensor],
    clean: np.ndarray,
    layout: SequenceLayout,
    vocab: VocabLayout,
    rng: np.random.Generator,
    lambda_his: float,
    ratio: float | None = None,
    head_local: bool = False,
) -> LossTerms:
    """Next-item and history masking losses on one batch, with one predictor pass.

    ``clean`` rows are full sequences: history followed by the true next-item
    tokens. The next-item loss masks part of the final block with the history
    visible; the history loss masks part of the history and hides the whole
    block, which is left out of that loss.

    With ``head_local`` the predictor returns log-probabilities [N, L, K] over
    each position's own code block (``MaskPredictor.head_log_probs``) instead
    of full-vocabulary logits.
    """
    item_in, item_hit, item_r, his_in, his_hit, his_r = _mask_inputs(clean, layout, vocab, rng, ratio)
    n = clean.shape[0]
    inputs = torch.from_numpy(np.concatenate([item_in, his_in]))
    if head_local:
        log_probs = predict(inputs)
        # pad slots fall outside [0, K); they are never masked, so clipping only keeps gather in range
        codes = clean - layout.offset_of * vocab.codebook_size
        targets = torch.from_numpy(np.clip(codes, 0, vocab.codebook_size - 1))
    else:
        log_probs = torch.log_softmax(predict(inputs), dim=-1)
        targets = torch.from_numpy(clean)
    item = masked_nll(log_probs[:n], targets, torch.from_numpy(item_hit), torch.from_numpy(item_r))
    his = masked_nll(log_probs[n:], targets, torch.from_numpy(his_hit), torch.from_numpy(his_r))
    return LossTerms(item + lambda_his * his, item, his)


def loss_item_mask(predict, clean, layout, vocab, rng, ratio=None) -> torch.Tensor:
    item_in, item_hit, item_r, *_ = _mask_inputs(clean, layout, vocab, rng, ratio)
    log_probs = torch.log_softmax(predict(torch.from_numpy(item_in)), dim=-1)
    return masked_nll(log_probs, torch.from_numpy(clean), torch.from_numpy(item_hit), torch.from_numpy(item_r))


def loss_his_mask(predict, clean, layout, vocab, rng, ratio=None) -> torch.Tensor:
    *_, his_in, his_hit, his_r = _mask_inputs(clean, layout, vocab, rng, ratio)
    log_probs = torch.log_softmax(predict(torch.from_numpy(his_in)), dim=-1)
    return masked_nll(log_probs, torch.from_numpy(clean), torch.from_numpy(his_hit), torch.from_numpy(his_r))


# --------------------------------------------------------------------------
# data


def clean_sequences(
    examples: Sequence[tuple[Sequence[Sequence[int]], Sequence[int]]], vocab: VocabLayout, layout: SequenceLayout
) -> np.ndarray:
    """[N, L] token rows of (history sids, target sid) pairs with the target in the block."""
    rows = encode_histories([h for h, _ in examples], vocab, layout)
    targets = np.array([t for _, t in examples], dtype=np.int64).reshape(len(examples), layout.n_heads)
    rows[:, layout.block] = targets + np.arange(layout.n_heads) * vocab.codebook_size
    return rows


def tokenized_examples(examples, catalog: SidCatalog):
    return [([catalog[i] for i in hist], catalog[target]) for _, hist, target in examples]


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: MaskPredictor
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_recall: float = float("nan")


def train(
    split: SplitCorpus,
    catalog: SidCatalog,
    codebook_size: int,
    predictor_config: PredictorConfig,
    config: TrainConfig,
    validate: Callable[[MaskPredictor], float] | None = None,
    log_path=None,
) -> TrainResult:
    """Train a mask predictor on the training prefixes of ``split``.

    ``validate`` maps the model to validation Recall@10; it drives early
    stopping and the best-epoch snapshot. Without it the last epoch is kept.
    """
    vocab = VocabLayout(catalog.n_heads, codebook_size)
    layout = SequenceLayout(split.max_history, catalog.n_heads)
    model = MaskPredictor(vocab, layout, predictor_config)
    clean = clean_sequences(tokenized_examples(split.train_examples(), catalog), vocab, layout)
    if len(clean) == 0:
        raise ValueError("no training examples (every user has a single-item training prefix)")
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    result = TrainResult(model)
    best_state, stale, step = None, 0, 0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(clean))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(clean), config.batch_size)):
            idx = order[start : start + config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, b])
            terms = diffusion_losses(
                model.head_log_probs, clean[idx], layout, vocab, rng, config.lambda_his, head_local=True
            )
            if not torch.isfinite(terms.total):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}, step {step}")
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            step += 1
            sums += len(idx) * np.array([terms.total.item(), terms.item.item(), terms.his.item()])
        sums /= len(clean)
        model.eval()
        recall = validate(model) if validate is not None else float("nan")
        row = {
            "epoch": epoch,
            "step": step,
            "loss_total": sums[0],
            "loss_item": sums[1],
            "loss_his": sums[2],
            "val_recall@10": recall,
            "wall_ms": int((time.perf_counter() - started) * 1000),
        }
        result.log.append(row)
        log.info("epoch %d loss %.4f (item %.4f his %.4f) val R@10 %.4f", epoch, *sums, recall)
        if log_path is not None:
            write_csv(log_path, LOG_COLUMNS, [[r[c] for c in LOG_COLUMNS] for r in result.log])

        if validate is None:
            result.best_epoch = epoch
            continue
        if best_state is None or recall > result.best_recall:
            result.best_recall, result.best_epoch, stale = recall, epoch, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result

