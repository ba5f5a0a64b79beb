"""Multi-head VQ-VAE item tokenizer.

An MLP encoder maps an item embedding to a latent vector, the latent is cut
into ``n_heads`` equal sub-vectors, and each sub-vector is snapped to the
nearest entry of its own codebook. The chosen indices form the item's
semantic ID; the concatenated code vectors are decoded back to the input.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from diffrec.io import atomic_write
from diffrec.nn import AdamW, assert_finite, load_checkpoint, mlp, register_differentiable, save_checkpoint

log = logging.getLogger(__name__)

SID = tuple[int, ...]


@dataclass
class TokenizerConfig:
    n_heads: int = 4
    codebook_size: int = 256
    sub_dim: int = 32
    hidden: tuple[int, ...] = (512,)
    alpha: float = 0.25
    epochs: int = 10_000
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 2048
    revive_every: int = 10
    kmeans_init: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.n_heads < 1 or self.codebook_size < 1 or self.sub_dim < 1:
            raise ValueError("n_heads, codebook_size and sub_dim must be positive")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def latent_dim(self) -> int:
        return self.n_heads * self.sub_dim


class MultiHeadVQVAE(nn.Module):
    def __init__(self, input_dim: int, config: TokenizerConfig):
        super().__init__()
        self.input_dim = input_dim
        self.config = config
        self.encoder = mlp([input_dim, *config.hidden, config.latent_dim])
        self.decoder = mlp([config.latent_dim, *reversed(config.hidden), input_dim])
        self.codebooks = nn.Parameter(torch.randn(config.n_heads, config.codebook_size, config.sub_dim))

    def encode(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {v.shape[-1]}")
        return assert_finite(self.encoder(v), "encoder output")

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return quantize(z, self.codebooks)

    def forward(self, v: torch.Tensor) -> "VQLoss":
        return vq_vae_loss(v, self, self.config.alpha)

    @torch.no_grad()
    def semantic_ids(self, v: torch.Tensor) -> torch.Tensor:
        codes, _ = self.quantize(self.encode(v))
        return codes


def quantize(z: torch.Tensor, codebooks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code per head by squared Euclidean distance.

    ``z`` is [..., n_heads * sub_dim] and ``codebooks`` [n_heads, K, sub_dim].
    Returns integer codes [..., n_heads] and the quantized latent (same shape
    as ``z``). Ties go to the lowest code index.
    """
    n_heads, _, sub_dim = codebooks.shape
    if z.shape[-1] != n_heads * sub_dim:
        raise ValueError(f"latent has {z.shape[-1]} dims, codebooks expect {n_heads * sub_dim}")
    parts = z.reshape(*z.shape[:-1], n_heads, 1, sub_dim)
    dist = ((parts - codebooks) ** 2).sum(-1)  # [..., n_heads, K]
    codes = dist.argmin(dim=-1)  # first minimum on ties
    heads = torch.arange(n_heads)
    zq = codebooks[heads, codes]  # [..., n_heads, sub_dim]
    return codes, zq.reshape(z.shape)


class VQLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    vq: torch.Tensor
    codebook: torch.Tensor  # ||sg[z] - e||^2 term
    commitment: torch.Tensor  # alpha * ||z - sg[e]||^2 term
    codes: torch.Tensor


def vq_vae_loss(v: torch.Tensor, model: MultiHeadVQVAE, alpha: float) -> VQLoss:
    """Reconstruction + VQ loss, averaged over the batch.

    The decoder sees a straight-through copy of the quantized latent, so the
    reconstruction gradient reaches the encoder unchanged. Codebooks learn only
    from the codebook term; the encoder gets the alpha-weighted commitment term.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    z = model.encode(v)
    codes, zq = quantize(z, model.codebooks)
    n_heads = model.codebooks.shape[0]
    zh = z.reshape(*z.shape[:-1], n_heads, -1)
    eh = zq.reshape(*zq.shape[:-1], n_heads, -1)
    codebook = ((zh.detach() - eh) ** 2).sum((-1, -2)).mean()
    commitment = alpha * ((zh - eh.detach()) ** 2).sum((-1, -2)).mean()
    z_st = z + (zq - z).detach()
    recon = ((v - model.decoder(z_st)) ** 2).sum(-1).mean()
    vq = codebook + commitment
    total = recon + vq
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite VQ-VAE loss")
    return VQLoss(total, recon, vq, codebook, commitment, codes)


@register_differentiable("mlp_encoder")
def _encoder_case(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    enc = mlp([5, 7, 4]).double()
    names = [n for n, _ in enc.named_parameters()]

    def fn(x, *ps):
        return torch.func.functional_call(enc, dict(zip(names, ps)), (x,))

    return fn, [torch.randn(3, 5, generator=gen, dtype=torch.float64), *(p.detach().clone() for p in enc.parameters())]


@register_differentiable("vq_vae_loss")
def _vq_case(gen):
    # Only the decoder sees a true gradient: quantization is piecewise constant, so
    # encoder and codebook gradients are the straight-through / stop-gradient routing.
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    model = MultiHeadVQVAE(6, TokenizerConfig(n_heads=2, codebook_size=3, sub_dim=2, hidden=(5,))).double()
    v = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    names = [n for n, _ in model.decoder.named_parameters()]

    def fn(*ps):
        params = {f"decoder.{n}": p for n, p in zip(names, ps)}
        return torch.func.functional_call(model, params, (v,), strict=False).total

    return fn, [p.detach().clone() for p in model.decoder.parameters()]


# --------------------------------------------------------------------------
# catalog


class SidCatalog:
    """Item id <-> semantic id maps. Colliding items share one SID."""

    def __init__(self, item_to_sid: Mapping[str, Sequence[int]]):
        self.item_to_sid: dict[str, SID] = {i: tuple(int(c) for c in s) for i, s in item_to_sid.items()}
        lengths = {len(s) for s in self.item_to_sid.values()}
        if len(lengths) > 1:
            raise ValueError(f"semantic ids of different lengths: {sorted(lengths)}")
        self.sid_to_items: dict[SID, list[str]] = {}
        for item in sorted(self.item_to_sid):
            self.sid_to_items.setdefault(self.item_to_sid[item], []).append(item)

    def __len__(self) -> int:
        return len(self.item_to_sid)

    def __getitem__(self, item_id: str) -> SID:
        return self.item_to_sid[item_id]

    @property
    def n_heads(self) -> int:
        return len(next(iter(self.item_to_sid.values()))) if self.item_to_sid else 0

    def items_for(self, sid: Sequence[int]) -> list[str]:
        return self.sid_to_items.get(tuple(sid), [])

    def collision_rate(self) -> float:
        """Fraction of items whose SID is already taken by another item: 1 - #sids / #items."""
        return 1.0 - len(self.sid_to_items) / len(self.item_to_sid) if self.item_to_sid else 0.0

    def code_usage(self) -> list[int]:
        """Number of distinct codes used per head."""
        sids = np.array(list(self.item_to_sid.values()))
        return [len(np.unique(sids[:, m])) for m in range(sids.shape[1])]

    def save(self, path) -> None:
        lines = (json.dumps({"item_id": i, "sid": list(s)}) + "\n" for i, s in sorted(self.item_to_sid.items()))
        atomic_write(path, "".join(lines))

    @classmethod
    def load(cls, path) -> "SidCatalog":
        mapping = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        rec = json.loads(line)
                        mapping[rec["item_id"]] = rec["sid"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise ValueError(f"{path}: line {lineno}: bad catalog record ({exc})") from None
        return cls(mapping)


def tokenize_catalog(model: MultiHeadVQVAE, embeddings: Mapping[str, np.ndarray]) -> SidCatalog:
    ids = sorted(embeddings)
    if not ids:
        return SidCatalog({})
    # one row at a time in float64 keeps each item's SID independent of its batch neighbours
    mat = torch.from_numpy(np.stack([embeddings[i] for i in ids]).astype(np.float64))
    with torch.no_grad():
        model64 = _as_float64(model)
        codes = torch.stack([model64.semantic_ids(row) for row in mat]).numpy()
    return SidCatalog({i: c for i, c in zip(ids, codes)})


def _as_float64(model: MultiHeadVQVAE) -> MultiHeadVQVAE:
    clone = MultiHeadVQVAE(model.input_dim, model.config)
    clone.load_state_dict(model.state_dict())
    return clone.double()


# --------------------------------------------------------------------------
# training


@dataclass
class TokenizerResult:
    model: MultiHeadVQVAE
    catalog: SidCatalog
    item_ids: list[str]
    history: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _init_codebooks(model: MultiHeadVQVAE, data: torch.Tensor, config: TokenizerConfig, rng: np.random.Generator):
    with torch.no_grad():
        z = model.encode(data).reshape(len(data), config.n_heads, config.sub_dim).numpy()
        books = []
        for m in range(config.n_heads):
            centers = None
            if config.kmeans_init and len(np.unique(z[:, m], axis=0)) >= config.codebook_size:
                from sklearn.cluster import KMeans

                km = KMeans(n_clusters=config.codebook_size, n_init=1, random_state=config.seed + m).fit(z[:, m])
                if len(np.unique(km.labels_)) == config.codebook_size:
                    centers = km.cluster_centers_
            if centers is None:
                scale = z[:, m].std() or 1.0
                centers = rng.normal(scale=scale, size=(config.codebook_size, config.sub_dim))
            books.append(centers)
        model.codebooks.copy_(torch.from_numpy(np.stack(books)).to(model.codebooks.dtype))


def train_tokenizer(embeddings: Mapping[str, np.ndarray], config: TokenizerConfig) -> TokenizerResult:
    """Fit the VQ-VAE on every catalog item and tokenize the catalog.

    Deterministic for a given ``config.seed``. Codes unused over an epoch are
    re-seeded to random encoder outputs every ``revive_every`` epochs.
    """
    item_ids = sorted(embeddings)
    if not item_ids:
        raise ValueError("empty catalog")
    data = torch.from_numpy(np.stack([embeddings[i] for i in item_ids]).astype(np.float32))
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = MultiHeadVQVAE(data.shape[1], config)
    _init_codebooks(model, data, config, rng)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    history = []
    n = len(data)
    for epoch in range(config.epochs):
        order = torch.from_numpy(rng.permutation(n))
        used = torch.zeros(config.n_heads, config.codebook_size, dtype=torch.bool)
        totals = np.zeros(3)
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            loss = vq_vae_loss(batch, model, config.alpha)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            used[torch.arange(config.n_heads), loss.codes] = True
            totals += len(batch) * np.array([loss.total.item(), loss.recon.item(), loss.vq.item()])
        totals /= n
        history.append({"epoch": epoch, "loss": totals[0], "recon": totals[1], "vq": totals[2]})
        if config.revive_every and (epoch + 1) % config.revive_every == 0 and epoch + 1 < config.epochs:
            _revive_dead_codes(model, data, used, rng)

    catalog = tokenize_catalog(model, dict(zip(item_ids, data.numpy())))
    notes = []
    for m, count in enumerate(catalog.code_usage()):
        if count < 2:
            msg = f"codebook collapse: head {m} uses only {count} distinct code(s)"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
    return TokenizerResult(model, catalog, item_ids, history, notes)


def _revive_dead_codes(model: MultiHeadVQVAE, data: torch.Tensor, used: torch.Tensor, rng: np.random.Generator):
    dead = (~used).nonzero().tolist()
    if not dead:
        return
    with torch.no_grad():
        z = model.encode(data).reshape(len(data), *model.codebooks.shape[::2])
        for m, k in dead:
            model.codebooks[m, k] = z[rng.integers(len(data)), m]
    log.debug("revived %d dead codes", len(dead))


# --------------------------------------------------------------------------
# persistence


def save_tokenizer(path, model: MultiHeadVQVAE) -> None:
    meta = {"kind": "tokenizer", "input_dim": model.input_dim, "config": asdict(model.config)}
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_tokenizer(path) -> MultiHeadVQVAE:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise ValueError(f"{path}: not a tokenizer checkpoint")
    model = MultiHeadVQVAE(meta["input_dim"], TokenizerConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model
