"""Small differentiable core shared by the tokenizer and the mask predictor.

Everything here is plain torch: layers are ``nn.Module`` subclasses and
gradients come from autograd. What this module adds on top is the pieces the
rest of the package needs to control precisely: attention with arbitrary
boolean masks, an AdamW with decoupled weight decay, a central-difference
gradient checker, and a small binary checkpoint format.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from diffrec.io import atomic_write

NEG_INF = -1e9
CHECKPOINT_MAGIC = b"DRW1"


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Run the enclosed block with float64 as torch's default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# attention masks


class AttentionPattern(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"
    INTER_ITEM_CAUSAL = "inter-item-causal"
    INTRA_ITEM_CAUSAL = "intra-item-causal"


def pattern_matrix(pattern: AttentionPattern | str, item_of: torch.Tensor) -> torch.Tensor:
    """Boolean [L, L] matrix, ``allow[i, j]`` meaning query i may read key j.

    ``item_of[p]`` is the item slot that position p belongs to; positions of
    one item must be contiguous.
    """
    pattern = AttentionPattern(pattern)
    length = item_of.shape[0]
    pos = torch.arange(length)
    qi, kj = item_of[:, None], item_of[None, :]
    if pattern is AttentionPattern.BIDIRECTIONAL:
        return torch.ones(length, length, dtype=torch.bool)
    if pattern is AttentionPattern.CAUSAL:
        return pos[None, :] <= pos[:, None]
    if pattern is AttentionPattern.INTER_ITEM_CAUSAL:
        return kj <= qi
    return (kj != qi) | (pos[None, :] <= pos[:, None])


def build_attention_mask(
    pattern: AttentionPattern | str, item_of: torch.Tensor, pad: torch.Tensor
) -> torch.Tensor:
    """Combine a pattern with padding into a [B, L, L] boolean mask.

    Padding keys are never readable. A row left with no readable key (a
    padding query under a causal-style pattern, or any padding query when all
    keys before it are padding) is given its own position so that softmax
    stays defined; such rows only feed padding outputs.
    """
    base = pattern_matrix(pattern, item_of)
    if pad.dim() == 1:
        pad = pad[None, :]
    allow = base[None, :, :] & ~pad[:, None, :]
    empty = ~allow.any(dim=-1)
    if empty.any():
        eye = torch.eye(base.shape[0], dtype=torch.bool)[None]
        allow = allow | (empty[..., None] & eye)
    return allow


# --------------------------------------------------------------------------
# layers


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        *lead, length, d_model = x.shape
        if allow.shape[-2:] != (length, length):
            raise ValueError(f"mask shape {tuple(allow.shape)} does not match sequence length {length}")
        if not allow.any(dim=-1).all():
            raise ValueError("attention mask has a row with every key disallowed")
        head_dim = d_model // self.n_heads
        q, k, v = (t.reshape(*lead, length, self.n_heads, head_dim).transpose(-3, -2) for t in (self.q(x), self.k(x), self.v(x)))
        scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        # allow is [..., L, L]; add the head axis
        scores = scores.masked_fill(~allow.unsqueeze(-3), NEG_INF)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(-3, -2).reshape(*lead, length, d_model)
        return self.out(mixed)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.up = nn.Linear(d_model, hidden)
        self.down = nn.Linear(hidden, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(self.dropout(F.gelu(self.up(x))))


class AttentionBlock(nn.Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""

    def __init__(self, d_model: int, n_heads: int, ffn_hidden: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_hidden or 4 * d_model, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.ln_attn(x), allow))
        return x + self.dropout(self.ffn(self.ln_ffn(x)))


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    """Linear layers with ReLU between them (none after the last)."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------
# optimizer


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay.

    Each step first shrinks parameters by ``1 - lr * weight_decay`` and then
    applies the bias-corrected Adam update. Per-parameter state holds
    ``step``, ``exp_avg`` and ``exp_avg_sq``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        if weight_decay < 0:
            raise ValueError(f"invalid weight decay {weight_decay}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd = group["lr"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                optimizer_step(p, p.grad, state, lr=lr, betas=(beta1, beta2), eps=eps, weight_decay=wd)
        return loss


def optimizer_step(param, grad, state, *, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place AdamW update of one parameter tensor; ``state`` is mutated too."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")
    beta1, beta2 = betas
    state["step"] += 1
    t = state["step"]
    m, v = state["exp_avg"], state["exp_avg_sq"]
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    if weight_decay:
        param.mul_(1 - lr * weight_decay)
    denom = (v / (1 - beta2**t)).sqrt_().add_(eps)
    param.addcdiv_(m, denom, value=-lr / (1 - beta1**t))


# --------------------------------------------------------------------------
# gradient checking


def check_gradient(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output coordinate contributes. Inputs should be float64. The error for a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    assert_finite(out, "function output")
    proj = None
    if out.dim() > 0:
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar(*xs):
        y = fn(*xs)
        return (y * proj).sum() if proj is not None else y

    value = scalar(*inputs)
    if value.requires_grad:
        analytic = torch.autograd.grad(value, inputs, allow_unused=True)
    else:  # output does not depend on the inputs at all
        analytic = [None] * len(inputs)
    worst = 0.0
    with torch.no_grad():
        for idx, (x, g) in enumerate(zip(inputs, analytic)):
            g = torch.zeros_like(x) if g is None else g
            assert_finite(g, f"analytic gradient of input {idx}")
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = scalar(*inputs).item()
                flat[j] = orig - eps
                down = scalar(*inputs).item()
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                if not math.isfinite(numeric):
                    raise NonFiniteError(f"non-finite finite difference at input {idx}, coordinate {j}")
                a = g.view(-1)[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# Gradient-check cases: name -> factory(generator) returning (fn, float64 inputs).
# Modules register the differentiable operations they define.
DIFFERENTIABLE_OPS: dict[str, Callable[[torch.Generator], tuple[Callable, list[torch.Tensor]]]] = {}


def register_differentiable(name: str):
    def deco(factory):
        DIFFERENTIABLE_OPS[name] = factory
        return factory

    return deco


def _rand(gen: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


@register_differentiable("linear")
def _linear_case(gen):
    return (lambda x, w, b: F.linear(x, w, b)), [_rand(gen, 3, 5), _rand(gen, 4, 5), _rand(gen, 4)]


@register_differentiable("layer_norm")
def _layer_norm_case(gen):
    return (lambda x, w, b: F.layer_norm(x, (6,), w, b)), [_rand(gen, 3, 6), _rand(gen, 6), _rand(gen, 6)]


@register_differentiable("softmax")
def _softmax_case(gen):
    return (lambda x: torch.softmax(x, -1)), [_rand(gen, 3, 7)]


@register_differentiable("softmax_cross_entropy")
def _xent_case(gen):
    target = torch.randint(0, 8, (4,), generator=gen)
    return (lambda x: F.cross_entropy(x, target)), [_rand(gen, 4, 8)]


@register_differentiable("embedding")
def _embedding_case(gen):
    idx = torch.randint(0, 6, (5,), generator=gen)
    return (lambda w: F.embedding(idx, w)), [_rand(gen, 6, 3)]


@register_differentiable("gelu")
def _gelu_case(gen):
    return F.gelu, [_rand(gen, 10)]


def _module_case(module: nn.Module, x: torch.Tensor, *extra):
    """Gradient case over the module input and all of its parameters."""
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone() for _, p in module.named_parameters()]

    def fn(inp, *ps):
        return torch.func.functional_call(module, dict(zip(names, ps)), (inp, *extra))

    return fn, [x, *params]


@register_differentiable("masked_attention")
def _attention_case(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    attn = MultiHeadAttention(8, 2).double()
    item_of = torch.arange(4) // 2
    pattern = list(AttentionPattern)[int(torch.randint(0, 4, (1,), generator=gen))]
    allow = build_attention_mask(pattern, item_of, torch.zeros(4, dtype=torch.bool))[0]
    return _module_case(attn, _rand(gen, 4, 8), allow)


@register_differentiable("attention_block")
def _block_case(gen):
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    block = AttentionBlock(8, 2, 16).double()
    allow = pattern_matrix(AttentionPattern.CAUSAL, torch.arange(4))
    return _module_case(block, _rand(gen, 4, 8), allow)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write ``DRW1`` + u32 manifest length + JSON manifest + raw float32 data."""
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")  # tobytes() is C-order
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"version": 1, "tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DRW1 checkpoint")
    (size,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8 : 8 + size].decode("utf-8"))
    data = memoryview(blob)[8 + size :]
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(tuple(entry["shape"])).astype(np.float32))
    return tensors, manifest.get("meta", {})
