"""Glue between the pieces: tokenized examples in, metrics and generations out."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from diffrec.decoding import DecodeConfig, Decoded, decode_many, model_scorer
from diffrec.metrics import KS, EvalResult, aggregate, rank_metrics, sids_to_items
from diffrec.predictor import MaskPredictor, encode_histories
from diffrec.tokenizer import SidCatalog

log = logging.getLogger(__name__)

Example = tuple[str, Sequence[str], str]  # (user, history items, target item)


def decode_examples(
    model: MaskPredictor,
    examples: Sequence[Example],
    catalog: SidCatalog,
    config: DecodeConfig,
    chunk: int = 1024,
) -> list[Decoded]:
    """Run the decoder for every example, ``chunk`` contexts per lockstep batch."""
    out: list[Decoded] = []
    for start in range(0, len(examples), chunk):
        part = examples[start : start + chunk]
        histories = encode_histories([[catalog[i] for i in hist] for _, hist, _ in part], model.vocab, model.layout)
        out.extend(decode_many(len(part), model.vocab.n_heads, config, model_scorer(model, histories)))
    return out


def evaluate(
    model: MaskPredictor,
    examples: Sequence[Example],
    catalog: SidCatalog,
    config: DecodeConfig,
    ks: Sequence[int] = KS,
) -> tuple[EvalResult, list[Decoded]]:
    decoded = decode_examples(model, examples, catalog, config)
    rows, shortfall, invalid, generated = [], 0, 0, 0
    for (_, _, target), dec in zip(examples, decoded):
        items, bad = sids_to_items([sid for sid, _ in dec.entries], catalog)
        invalid += bad
        generated += len(dec.entries)
        shortfall += len(items) < config.k
        rows.append(rank_metrics(items, target, ks))
    return aggregate(rows, shortfall, invalid, generated), decoded


def subsample(examples: Sequence[Example], limit: int, seed: int) -> list[Example]:
    """Deterministic subset of at most ``limit`` examples (all of them if limit is 0)."""
    examples = list(examples)
    if not limit or limit >= len(examples):
        return examples
    keep = np.sort(np.random.default_rng(seed).choice(len(examples), size=limit, replace=False))
    return [examples[i] for i in keep]


def recall_validator(examples: Sequence[Example], catalog: SidCatalog, config: DecodeConfig, k: int = 10):
    """``train``'s validation hook: Recall@k of beam decoding on ``examples``."""

    def validate(model: MaskPredictor) -> float:
        result, _ = evaluate(model, examples, catalog, config, ks=(k,))
        return result[f"recall@{k}"]

    return validate
