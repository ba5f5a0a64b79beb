"""Command-line driver: ``diffrec <command> [--config F] [--workdir D] [--seed N] [key=value ...]``.

Every command reads a JSON config (optional), applies dotted overrides such
as ``decode.T=2`` or ``train.epochs=5``, echoes the resolved config to
``workdir/config.json`` and records the run in ``workdir/manifest.json``.

Exit codes: 0 success, 1 invalid config or inputs, 2 failure while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from diffrec import __version__

log = logging.getLogger("diffrec")

COMMANDS = ("synth-data", "train-tokenizer", "tokenize", "train", "evaluate", "decode", "ablate")
ALIASES = {"decode.T": "decode.steps", "decode.B": "decode.beam"}
SEEDED = ("synth", "tokenizer", "predictor", "train")


class UsageError(Exception):
    """Bad configuration or missing inputs (exit code 1)."""


@dataclass
class SynthConfig:
    n_items: int = 1000
    n_users: int = 5000
    seq_len: int = 10
    n_clusters: int = 20
    dim: int = 64
    cluster_std: float = 0.3
    concentration: float = 0.1
    popularity_exponent: float = 1.0
    seed: int = 0


def _component_types():
    from diffrec.decoding import DecodeConfig
    from diffrec.predictor import PredictorConfig
    from diffrec.tokenizer import TokenizerConfig
    from diffrec.training import TrainConfig

    return {
        "synth": SynthConfig,
        "tokenizer": TokenizerConfig,
        "predictor": PredictorConfig,
        "train": TrainConfig,
        "decode": DecodeConfig,
    }


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    interactions: str | None = None  # default: workdir/data/interactions.jsonl
    embeddings: str | None = None  # default: workdir/data/embeddings.emb
    seed: int = 0
    min_len: int = 3
    max_history: int = 20
    eval_users: int = 0  # 0 = every test user
    synth: SynthConfig = field(default_factory=SynthConfig)
    tokenizer: object = None
    predictor: object = None
    train: object = None
    decode: object = None

    def __post_init__(self):
        types = _component_types()
        for name, cls in types.items():
            value = getattr(self, name)
            if value is None:
                setattr(self, name, cls())
            elif isinstance(value, dict):
                setattr(self, name, _build(cls, value, name))
        if self.max_history < 1:
            raise UsageError(f"max_history must be at least 1, got {self.max_history}")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown config key {where}.{unknown[0]}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where} config: {exc}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: str | None, seed: int | None, overrides: list[str], base: dict | None = None) -> RunConfig:
    """``base``, then the file, then seed propagation, then dotted overrides (last wins)."""
    raw: dict = json.loads(json.dumps(base or {}))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{p}: top level must be an object")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
    if seed is not None:
        raw["seed"] = seed
    if "seed" in raw:
        # --seed wins everywhere; a seed in the file only fills sections that lack one
        for name in SEEDED:
            section = raw.setdefault(name, {})
            if not isinstance(section, dict):
                raise UsageError(f"config section {name} must be an object")
            if seed is not None or "seed" not in section:
                section["seed"] = raw["seed"]

    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key = ALIASES.get(key, key)
        *parents, leaf = key.split(".")
        node = raw
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override {key}: {part} is not a section")
        node[leaf] = _parse_value(value)

    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]}")
    for name in _component_types():
        if name in raw and not isinstance(raw[name], dict):
            raise UsageError(f"config section {name} must be an object")
    try:
        return RunConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# --------------------------------------------------------------------------
# workdir


class Workdir:
    def __init__(self, root: Path, config: RunConfig):
        self.root = root
        self.config = config
        data = root / "data"
        self.interactions = Path(config.interactions) if config.interactions else data / "interactions.jsonl"
        self.embeddings = Path(config.embeddings) if config.embeddings else data / "embeddings.emb"
        self.tokenizer = root / "tokenizer.ckpt"
        self.sids = root / "sids.jsonl"
        self.model = root / "model.ckpt"
        self.train_log = root / "train_log.csv"
        self.results = root / "results.csv"
        self.generations = root / "generations.jsonl"
        self.ablation = root / "ablation.csv"
        self.manifest = root / "manifest.json"

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.is_file():
                raise UsageError(f"required input not found: {p}")


def _config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _record_run(wd: Workdir, command: str, wall: float, outputs: list[Path]) -> None:
    from diffrec.io import atomic_write

    manifest = {}
    if wd.manifest.is_file():
        try:
            manifest = json.loads(wd.manifest.read_text())
        except json.JSONDecodeError:
            manifest = {}
    manifest.setdefault("runs", {})[command] = {
        "config_sha256": _config_hash(wd.config),
        "seed": wd.config.seed,
        "version": _version(),
        "wall_time_s": round(wall, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": [str(p.relative_to(wd.root)) if p.is_relative_to(wd.root) else str(p) for p in outputs],
    }
    atomic_write(wd.manifest, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write(wd.root / "config.json", json.dumps(wd.config.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# shared loading


def _load_split(wd: Workdir):
    from diffrec.corpus import build_split, load_interactions

    wd.require(wd.interactions)
    split = build_split(load_interactions(wd.interactions), wd.config.min_len, wd.config.max_history)
    if not split.users:
        raise UsageError(f"{wd.interactions}: no user has at least {wd.config.min_len} interactions")
    return split


def _load_catalog(wd: Workdir, split):
    from diffrec.tokenizer import SidCatalog

    wd.require(wd.sids)
    try:
        catalog = SidCatalog.load(wd.sids)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    missing = [i for i in split.items if i not in catalog.item_to_sid]
    if missing:
        raise UsageError(f"{wd.sids}: no semantic id for item {missing[0]!r}")
    k = wd.config.tokenizer.codebook_size
    if any(c >= k for sid in catalog.sid_to_items for c in sid):
        raise UsageError(f"{wd.sids}: codes exceed tokenizer.codebook_size={k}")
    return catalog


def _load_model(wd: Workdir, catalog):
    from diffrec.predictor import load_predictor

    wd.require(wd.model)
    try:
        model, meta = load_predictor(wd.model)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{wd.model}: unreadable checkpoint ({exc})") from None
    if model.vocab.n_heads != catalog.n_heads:
        raise UsageError(f"{wd.model}: model expects {model.vocab.n_heads}-token ids, catalog has {catalog.n_heads}")
    try:
        wd.config.decode.check(catalog.n_heads)
    except ValueError as exc:
        raise UsageError(f"decode: {exc}") from None
    return model


def _test_examples(wd: Workdir, split):
    from diffrec.pipeline import subsample

    return subsample(list(split.test_examples()), wd.config.eval_users, wd.config.seed)


def _row(config: RunConfig, result, decode_cfg, attention: str):
    from diffrec.metrics import results_row

    name = f"diffrec-{attention}" + ("-greedy" if decode_cfg.mode == "greedy" else "")
    return results_row(
        result, dataset=config.dataset, model=name, order=decode_cfg.order, T=decode_cfg.steps, B=decode_cfg.width
    )


def _fit(wd: Workdir, split, catalog, predictor_cfg, log_path):
    from diffrec.pipeline import recall_validator, subsample
    from diffrec.training import train

    cfg = wd.config
    val = subsample(list(split.valid_examples()), cfg.train.val_users, cfg.train.seed)
    validate = recall_validator(val, catalog, dataclasses.replace(cfg.decode, k=10, mode="beam"))
    return train(split, catalog, cfg.tokenizer.codebook_size, predictor_cfg, cfg.train, validate, log_path)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(wd: Workdir) -> list[Path]:
    from diffrec.corpus import generate_synthetic_corpus

    out = wd.interactions.parent
    if wd.embeddings.parent != out:
        raise UsageError("synth-data writes interactions and embeddings to one directory")
    syn = generate_synthetic_corpus(out, **asdict(wd.config.synth))
    if syn.interactions_path != wd.interactions:
        syn.interactions_path.replace(wd.interactions)
    if syn.embeddings_path != wd.embeddings:
        syn.embeddings_path.replace(wd.embeddings)
    log.info("wrote %d items and %d users to %s", wd.config.synth.n_items, wd.config.synth.n_users, out)
    return [wd.interactions, wd.embeddings]


def cmd_train_tokenizer(wd: Workdir) -> list[Path]:
    from diffrec.corpus import load_embeddings
    from diffrec.io import write_csv
    from diffrec.tokenizer import save_tokenizer, train_tokenizer

    wd.require(wd.embeddings)
    embeddings = load_embeddings(wd.embeddings)
    result = train_tokenizer(embeddings, wd.config.tokenizer)
    save_tokenizer(wd.tokenizer, result.model)
    curve = wd.root / "tokenizer_log.csv"
    write_csv(curve, ("epoch", "loss", "recon", "vq"), [[h[c] for c in ("epoch", "loss", "recon", "vq")] for h in result.history])
    result.catalog.save(wd.sids)
    log.info("collision rate %.4f, codes used per head %s", result.catalog.collision_rate(), result.catalog.code_usage())
    return [wd.tokenizer, curve, wd.sids]


def cmd_tokenize(wd: Workdir) -> list[Path]:
    from diffrec.corpus import load_embeddings
    from diffrec.tokenizer import load_tokenizer, tokenize_catalog

    wd.require(wd.embeddings, wd.tokenizer)
    model = load_tokenizer(wd.tokenizer)
    catalog = tokenize_catalog(model, load_embeddings(wd.embeddings))
    catalog.save(wd.sids)
    log.info("collision rate %.4f, codes used per head %s", catalog.collision_rate(), catalog.code_usage())
    return [wd.sids]


def cmd_train(wd: Workdir) -> list[Path]:
    from diffrec.predictor import save_predictor

    split = _load_split(wd)
    catalog = _load_catalog(wd, split)
    result = _fit(wd, split, catalog, wd.config.predictor, wd.train_log)
    save_predictor(wd.model, result.model, {"best_epoch": result.best_epoch, "best_recall": result.best_recall})
    return [wd.model, wd.train_log]


def cmd_evaluate(wd: Workdir) -> list[Path]:
    from diffrec.metrics import write_results
    from diffrec.pipeline import evaluate

    wd.require(wd.model, wd.sids, wd.interactions)
    split = _load_split(wd)
    catalog = _load_catalog(wd, split)
    model = _load_model(wd, catalog)
    result, _ = evaluate(model, _test_examples(wd, split), catalog, wd.config.decode)
    write_results(wd.results, [_row(wd.config, result, wd.config.decode, model.config.attention)])
    log.info("%s", {k: round(v, 4) for k, v in result.metrics.items()})
    return [wd.results]


def cmd_decode(wd: Workdir) -> list[Path]:
    from diffrec.io import write_jsonl
    from diffrec.pipeline import decode_examples

    wd.require(wd.model, wd.sids, wd.interactions)
    split = _load_split(wd)
    catalog = _load_catalog(wd, split)
    model = _load_model(wd, catalog)
    examples = _test_examples(wd, split)
    decoded = decode_examples(model, examples, catalog, wd.config.decode)
    records = (
        {"user_id": user, "rank": rank, "sid": list(sid), "logprob": logprob}
        for (user, _, _), dec in zip(examples, decoded)
        for rank, (sid, logprob) in enumerate(dec.entries[: wd.config.decode.k], start=1)
    )
    write_jsonl(wd.generations, records)
    return [wd.generations]


def cmd_ablate(wd: Workdir) -> list[Path]:
    from diffrec.decoding import ORDERS
    from diffrec.metrics import write_results
    from diffrec.nn import AttentionPattern
    from diffrec.pipeline import evaluate

    wd.require(wd.model, wd.sids, wd.interactions)
    cfg = wd.config
    split = _load_split(wd)
    catalog = _load_catalog(wd, split)
    model = _load_model(wd, catalog)
    examples = _test_examples(wd, split)
    m = catalog.n_heads
    rows = []

    for order in ORDERS:
        dc = dataclasses.replace(cfg.decode, order=order)
        result, _ = evaluate(model, examples, catalog, dc)
        rows.append(_row(cfg, result, dc, model.config.attention))
        log.info("order %s: recall@10 %.4f", order, result["recall@10"])
    for steps in (t for t in range(1, m + 1) if m % t == 0):
        dc = dataclasses.replace(cfg.decode, steps=steps)
        result, _ = evaluate(model, examples, catalog, dc)
        rows.append(_row(cfg, result, dc, model.config.attention))
        log.info("T=%d: recall@10 %.4f", steps, result["recall@10"])
    for pattern in AttentionPattern:
        if pattern.value == model.config.attention:
            variant = model
        else:
            pcfg = dataclasses.replace(model.config, attention=pattern.value)
            variant = _fit(wd, split, catalog, pcfg, None).model
        result, _ = evaluate(variant, examples, catalog, cfg.decode)
        rows.append(_row(cfg, result, cfg.decode, pattern.value))
        log.info("attention %s: recall@10 %.4f", pattern.value, result["recall@10"])
        write_results(wd.ablation, rows)
    write_results(wd.ablation, rows)
    return [wd.ablation]


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "decode": cmd_decode,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffrec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--workdir", default="runs/default", help="artifact directory (default: %(default)s)")
    parser.add_argument("--seed", type=int, help="seed for every component")
    parser.add_argument("--threads", type=int, help="torch intra-op threads (default: all cores)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"--threads must be positive, got {args.threads}")
        config = resolve_config(args.config, args.seed, args.overrides)
        wd = Workdir(Path(args.workdir), config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    import torch

    from diffrec.corpus import CorpusError

    if args.threads is not None:
        torch.set_num_threads(args.threads)
    started = time.perf_counter()
    try:
        outputs = HANDLERS[args.command](wd)
        _record_run(wd, args.command, time.perf_counter() - started, outputs)
    except (UsageError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (top-level boundary: report and exit 2)
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
