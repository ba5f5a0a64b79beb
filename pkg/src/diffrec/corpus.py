"""Interaction logs, item embeddings, and the leave-one-out split."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from diffrec.io import atomic_write

EMBEDDING_MAGIC = b"EMB1"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


def load_interactions(path) -> list[Interaction]:
    """Parse a JSON-lines interaction log, dropping exact duplicate rows.

    Records keep file order. Errors name the 1-based line number.
    """
    records: list[Interaction] = []
    seen: set[Interaction] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(raw, dict):
                raise CorpusError(f"{path}: line {lineno}: expected an object")
            for key in ("user_id", "item_id", "timestamp"):
                if key not in raw:
                    raise CorpusError(f"{path}: line {lineno}: missing field {key!r}")
            user, item, ts = raw["user_id"], raw["item_id"], raw["timestamp"]
            if not isinstance(user, str) or not isinstance(item, str):
                raise CorpusError(f"{path}: line {lineno}: user_id and item_id must be strings")
            if isinstance(ts, bool) or not isinstance(ts, int):
                raise CorpusError(f"{path}: line {lineno}: timestamp must be an integer")
            rec = Interaction(user, item, ts)
            if rec not in seen:
                seen.add(rec)
                records.append(rec)
    if not records:
        raise CorpusError(f"{path}: no interactions")
    return records


def write_interactions(path, records: Iterable[Interaction]) -> None:
    lines = (
        json.dumps({"user_id": r.user_id, "item_id": r.item_id, "timestamp": r.timestamp}) + "\n"
        for r in records
    )
    atomic_write(path, "".join(lines))


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    train: tuple[str, ...]
    valid_target: str
    test_target: str


@dataclass
class SplitCorpus:
    """Leave-one-out split: last item is the test target, second-to-last validation.

    Histories handed out by the ``*_examples`` methods are truncated to the
    most recent ``max_history`` items.
    """

    users: list[UserSplit]
    max_history: int
    _items: list[str] = field(default_factory=list, repr=False)

    @property
    def items(self) -> list[str]:
        if not self._items:
            seen = set()
            for u in self.users:
                seen.update(u.train)
                seen.update((u.valid_target, u.test_target))
            self._items = sorted(seen)
        return self._items

    def _clip(self, history: tuple[str, ...]) -> tuple[str, ...]:
        return history[-self.max_history :] if self.max_history else ()

    def train_examples(self) -> Iterator[tuple[str, tuple[str, ...], str]]:
        """Every (user, history, target) inside the training prefixes.

        Each item of a training prefix after the first is a target, conditioned
        on the items before it.
        """
        for u in self.users:
            for j in range(1, len(u.train)):
                yield u.user_id, self._clip(u.train[:j]), u.train[j]

    def valid_examples(self) -> Iterator[tuple[str, tuple[str, ...], str]]:
        for u in self.users:
            yield u.user_id, self._clip(u.train), u.valid_target

    def test_examples(self) -> Iterator[tuple[str, tuple[str, ...], str]]:
        for u in self.users:
            yield u.user_id, self._clip(u.train + (u.valid_target,)), u.test_target


def build_split(interactions: Iterable[Interaction], min_len: int = 3, max_history: int = 20) -> SplitCorpus:
    if min_len < 3:
        raise ValueError(f"min_len must be at least 3, got {min_len}")
    if max_history < 1:
        raise ValueError(f"max_history must be positive, got {max_history}")
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, rec in enumerate(interactions):
        per_user.setdefault(rec.user_id, []).append((rec.timestamp, order, rec.item_id))
    users = []
    for user_id, rows in per_user.items():
        if len(rows) < min_len:
            continue
        seq = [item for _, _, item in sorted(rows)]
        users.append(UserSplit(user_id, tuple(seq[:-2]), seq[-2], seq[-1]))
    return SplitCorpus(users, max_history)


# --------------------------------------------------------------------------
# embeddings


def write_embeddings(path, embeddings: Mapping[str, np.ndarray]) -> None:
    ids = list(embeddings)
    dims = {np.asarray(embeddings[i]).shape for i in ids}
    if len(dims) > 1:
        raise CorpusError(f"embedding vectors have different shapes: {sorted(dims)}")
    dim = dims.pop()[0] if dims else 0
    parts = [EMBEDDING_MAGIC, struct.pack("<II", len(ids), dim)]
    for item_id in ids:
        raw = item_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(embeddings[item_id], dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def load_embeddings(path, required: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Read an ``EMB1`` file into ``{item_id: float32 vector}``.

    If ``required`` is given, every id in it must be present.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != EMBEDDING_MAGIC:
        raise CorpusError(f"{path}: not an EMB1 embedding file")
    count, dim = struct.unpack_from("<II", blob, 4)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(blob):
            raise CorpusError(f"{path}: truncated file")
        (n,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        item_id = blob[offset : offset + n].decode("utf-8")
        offset += n
        end = offset + 4 * dim
        if end > len(blob):
            raise CorpusError(f"{path}: truncated vector for item {item_id!r} (expected dimension {dim})")
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float32)
        offset = end
        if not np.isfinite(vec).all():
            raise CorpusError(f"{path}: non-finite values for item {item_id!r}")
        out[item_id] = vec
    if offset != len(blob):
        raise CorpusError(f"{path}: {len(blob) - offset} trailing bytes; dimension mismatch?")
    if required is not None:
        missing = sorted(set(required) - out.keys())
        if missing:
            more = f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""
            raise CorpusError(f"{path}: no embedding for item {missing[0]!r}{more}")
    return out


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticCorpus:
    interactions_path: Path
    embeddings_path: Path
    item_ids: list[str]
    labels: np.ndarray  # cluster of each item, aligned with item_ids
    transition: np.ndarray  # planted [n_clusters, n_clusters] Markov matrix


def generate_synthetic_corpus(
    out_dir,
    n_items: int = 1000,
    n_users: int = 5000,
    seq_len: int = 10,
    n_clusters: int = 20,
    seed: int = 0,
    dim: int = 64,
    cluster_std: float = 0.3,
    concentration: float = 0.1,
    popularity_exponent: float = 1.0,
) -> SyntheticCorpus:
    """Clustered item embeddings plus user sequences from a Markov chain over clusters.

    Each user starts in a uniformly drawn cluster and moves between clusters
    by a planted transition matrix whose rows are Dirichlet(concentration)
    draws. Within a cluster, items are picked with Zipf-like popularity.
    """
    if not 1 <= n_clusters <= n_items:
        raise ValueError(f"need 1 <= n_clusters <= n_items, got {n_clusters} and {n_items}")
    rng = np.random.default_rng(seed)
    width = len(str(n_items - 1))
    item_ids = [f"i{i:0{width}d}" for i in range(n_items)]
    labels = np.concatenate([np.arange(n_clusters), rng.integers(0, n_clusters, n_items - n_clusters)])
    labels = rng.permutation(labels)

    centers = rng.normal(size=(n_clusters, dim))
    vectors = centers[labels] + cluster_std * rng.normal(size=(n_items, dim))

    transition = rng.dirichlet(np.full(n_clusters, concentration), size=n_clusters)
    members = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    popularity = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** popularity_exponent
        popularity.append(w / w.sum())

    records = []
    wu = len(str(n_users - 1))
    for u in range(n_users):
        user = f"u{u:0{wu}d}"
        ts = 1_600_000_000 + int(rng.integers(0, 86_400))
        c = int(rng.integers(n_clusters))
        for _ in range(seq_len):
            item = members[c][rng.choice(len(members[c]), p=popularity[c])]
            records.append(Interaction(user, item_ids[item], ts))
            ts += int(rng.integers(60, 86_400))
            c = int(rng.choice(n_clusters, p=transition[c]))

    out = Path(out_dir)
    interactions_path = out / "interactions.jsonl"
    embeddings_path = out / "embeddings.emb"
    write_interactions(interactions_path, records)
    write_embeddings(embeddings_path, {i: v for i, v in zip(item_ids, vectors)})
    return SyntheticCorpus(interactions_path, embeddings_path, item_ids, labels, transition)
