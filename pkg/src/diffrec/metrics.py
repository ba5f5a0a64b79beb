"""Recall@k and NDCG@k under leave-one-out evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from diffrec.io import write_csv
from diffrec.tokenizer import SidCatalog

KS = (1, 5, 10)
RESULT_COLUMNS = (
    "dataset", "model", "order", "T", "B",
    "recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10",
    "invalid_rate", "users",
)


def sids_to_items(ranked_sids: Iterable[Sequence[int]], catalog: SidCatalog) -> tuple[list[str], int]:
    """Expand ranked SIDs into ranked items; also count SIDs that match no item.

    Colliding items take consecutive ranks in ascending item-id order.
    """
    items, invalid = [], 0
    for sid in ranked_sids:
        hits = catalog.items_for(sid)
        if not hits:
            invalid += 1
        items.extend(hits)
    return items, invalid


def rank_metrics(ranked_items: Sequence[str], target: str, ks: Sequence[int] = KS) -> dict[str, float]:
    try:
        rank = list(ranked_items).index(target) + 1
    except ValueError:
        rank = None
    out = {}
    for k in ks:
        hit = rank is not None and rank <= k
        out[f"recall@{k}"] = 1.0 if hit else 0.0
        out[f"ndcg@{k}"] = 1.0 / math.log2(rank + 1) if hit else 0.0
    return out


@dataclass
class EvalResult:
    metrics: dict[str, float]
    users: int
    shortfall: int = 0
    invalid_rate: float = 0.0
    per_user: list[dict] = field(default_factory=list, repr=False)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]


def aggregate(rows: Sequence[dict[str, float]], shortfall: int = 0, invalid: int = 0, generated: int = 0) -> EvalResult:
    if not rows:
        raise ValueError("no users to aggregate")
    keys = rows[0].keys()
    means = {k: math.fsum(r[k] for r in rows) / len(rows) for k in keys}
    return EvalResult(means, len(rows), shortfall, invalid / generated if generated else 0.0, list(rows))


def results_row(result: EvalResult, **labels) -> list:
    values = {**labels, **result.metrics, "invalid_rate": result.invalid_rate, "users": result.users}
    return [values.get(c, "") for c in RESULT_COLUMNS]


def write_results(path, rows: Iterable[list]) -> None:
    write_csv(path, RESULT_COLUMNS, rows)
