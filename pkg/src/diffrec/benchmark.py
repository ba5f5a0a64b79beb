"""End-to-end synthetic benchmark: seeded Markov corpus, tokenizer, predictor, three decoders."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

# Small enough for one CPU core: 2 layers, d_model 128, 4-item histories.
BENCHMARK_CONFIG = {
    "dataset": "synthetic-markov",
    "max_history": 4,
    "synth": {"n_items": 1000, "n_users": 5000, "seq_len": 10, "n_clusters": 20},
    "tokenizer": {"n_heads": 4, "codebook_size": 256, "sub_dim": 16, "hidden": [256], "epochs": 300, "batch_size": 256},
    "predictor": {"layers": 2, "d_model": 128, "heads": 4},
    "train": {"epochs": 6, "batch_size": 256, "lr": 2e-3, "patience": 2, "val_users": 500},
    "decode": {"steps": 4, "beam": 10, "k": 10},
}

VARIANTS = {
    "adaptive": {"order": "adaptive"},
    "left2right": {"order": "left2right"},
    "greedy": {"order": "adaptive", "mode": "greedy"},
}


@dataclass
class BenchmarkResult:
    metrics: dict[str, dict[str, float]]
    train_seconds: float
    tokenizer_seconds: float
    collision_rate: float
    best_epoch: int
    timings: dict[str, float] = field(default_factory=dict)
    n_items: int = 1000

    @property
    def random_recall10(self) -> float:
        """Recall@10 of ten uniformly drawn items."""
        return 10 / self.n_items


def run_benchmark(workdir, seed: int = 0, overrides: list[str] | None = None) -> BenchmarkResult:
    """Run the full pipeline through the CLI commands and evaluate each decoder variant."""
    from diffrec.cli import (
        Workdir,
        _load_catalog,
        _load_model,
        _load_split,
        _record_run,
        _row,
        cmd_synth_data,
        cmd_train,
        cmd_train_tokenizer,
        resolve_config,
    )
    from diffrec.metrics import write_results
    from diffrec.nn import load_checkpoint
    from diffrec.pipeline import evaluate
    from diffrec.tokenizer import SidCatalog

    config = resolve_config(None, seed, overrides or [], base=BENCHMARK_CONFIG)
    wd = Workdir(Path(workdir), config)

    timings = {}

    def timed(name, fn):
        started = time.perf_counter()
        outputs = fn(wd)
        timings[name] = time.perf_counter() - started
        _record_run(wd, name, timings[name], outputs)
        log.info("%s took %.1f s", name, timings[name])

    timed("synth-data", cmd_synth_data)
    timed("train-tokenizer", cmd_train_tokenizer)
    timed("train", cmd_train)

    split = _load_split(wd)
    catalog = _load_catalog(wd, split)
    model = _load_model(wd, catalog)
    examples = list(split.test_examples())
    metrics, rows = {}, []
    for name, changes in VARIANTS.items():
        dc = dataclasses.replace(config.decode, **changes)
        started = time.perf_counter()
        result, _ = evaluate(model, examples, catalog, dc)
        timings[f"evaluate-{name}"] = time.perf_counter() - started
        metrics[name] = dict(result.metrics)
        rows.append(_row(config, result, dc, model.config.attention))
        log.info("%s: %s", name, {k: round(v, 4) for k, v in result.metrics.items()})
    write_results(wd.results, rows)

    _, meta = load_checkpoint(wd.model)
    return BenchmarkResult(
        metrics=metrics,
        train_seconds=timings["train"],
        tokenizer_seconds=timings["train-tokenizer"],
        collision_rate=SidCatalog.load(wd.sids).collision_rate(),
        best_epoch=meta.get("best_epoch", -1),
        timings=timings,
        n_items=config.synth.n_items,
    )
