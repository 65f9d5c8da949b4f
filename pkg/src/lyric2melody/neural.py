"""Differentiable building blocks, optimizer plumbing and gradient checking.

Gradients come from torch autograd; :func:`gradcheck` verifies them against
central finite differences computed entry by entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    pass


def _shapes(*tensors: Tensor) -> str:
    return " and ".join(str(tuple(t.shape)) for t in tensors)


# ---------------------------------------------------------------------------
# operators


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {_shapes(a, b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: cannot broadcast {_shapes(a, b)}") from None
    return a + b


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding table must be 2-D, got {tuple(table.shape)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding ids outside 0..{table.shape[0] - 1}")
    return F.embedding(ids, table)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {tuple(x.shape)} vs params {_shapes(weight, bias)}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def causal_mask(t: int, device=None) -> Tensor:
    """True where attention is forbidden (key after query)."""
    return torch.ones(t, t, dtype=torch.bool, device=device).triu(1)


def multihead_attention(
    x: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    heads: int,
    causal: bool,
    key_padding: Tensor | None = None,
) -> Tensor:
    """Self-attention over ``x`` of shape (batch, time, d).

    Weights use the ``nn.Linear`` layout: ``w_qkv`` is (3d, d), ``w_out`` (d, d).
    ``key_padding`` is (batch, time), True at padded positions.
    """
    if x.dim() != 3:
        raise ShapeError(f"attention input must be (batch, time, d), got {tuple(x.shape)}")
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    if w_qkv.shape != (3 * d, d) or w_out.shape != (d, d):
        raise ShapeError(f"attention weights {_shapes(w_qkv, w_out)} do not match width {d}")
    dh = d // heads
    qkv = F.linear(x, w_qkv, b_qkv).view(b, t, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    blocked = None
    if causal:
        blocked = causal_mask(t, x.device)
    if key_padding is not None:
        if key_padding.shape != (b, t):
            raise ShapeError(f"key padding {tuple(key_padding.shape)} does not match input {(b, t)}")
        pad = key_padding[:, None, None, :]
        blocked = pad if blocked is None else (blocked | pad)
    if blocked is not None:
        scores = scores.masked_fill(blocked, float("-inf"))
    y = softmax(scores) @ v
    return F.linear(y.transpose(1, 2).reshape(b, t, d), w_out, b_out)


def causal_multihead_attention(x, w_qkv, b_qkv, w_out, b_out, heads, key_padding=None):
    return multihead_attention(x, w_qkv, b_qkv, w_out, b_out, heads, True, key_padding)


def bidirectional_multihead_attention(x, w_qkv, b_qkv, w_out, b_out, heads, key_padding=None):
    return multihead_attention(x, w_qkv, b_qkv, w_out, b_out, heads, False, key_padding)


def cross_entropy(logits: Tensor, targets: Tensor, pad_id: int = 0) -> Tensor:
    """Mean token NLL, ignoring targets equal to ``pad_id``."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_id)


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return table.to(dtype)


# ---------------------------------------------------------------------------
# modules


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: Tensor, causal: bool, key_padding: Tensor | None = None) -> Tensor:
        return multihead_attention(
            x, self.qkv.weight, self.qkv.bias, self.out.weight, self.out.bias, self.heads, causal, key_padding
        )

    def step(self, x: Tensor, cache: dict) -> Tensor:
        """Causal attention for one new position given cached keys and values."""
        b, t, d = x.shape
        if t != 1:
            raise ShapeError(f"incremental attention takes one position, got {t}")
        dh = d // self.heads
        q, k, v = F.linear(x, self.qkv.weight, self.qkv.bias).view(b, 3, self.heads, 1, dh).unbind(1)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        y = softmax((q @ k.transpose(-1, -2)) / math.sqrt(dh)) @ v
        return self.out(y.transpose(1, 2).reshape(b, 1, d))


class Block(nn.Module):
    """Pre-norm transformer layer: attention then GELU feed-forward, both residual."""

    def __init__(self, d: int, heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, causal: bool, key_padding: Tensor | None = None) -> Tensor:
        h = layer_norm(x, self.ln1.weight, self.ln1.bias)
        x = x + self.drop(self.attn(h, causal, key_padding))
        h = layer_norm(x, self.ln2.weight, self.ln2.bias)
        return x + self.drop(self.ff2(gelu(self.ff1(h))))

    def step(self, x: Tensor, cache: dict) -> Tensor:
        x = x + self.attn.step(layer_norm(x, self.ln1.weight, self.ln1.bias), cache)
        h = layer_norm(x, self.ln2.weight, self.ln2.bias)
        return x + self.ff2(gelu(self.ff1(h)))


class TransformerStack(nn.Module):
    """Stack of blocks with an optional additive signal before every block.

    The additive signal is how in-attention conditioning enters: the same
    (batch, time, d) tensor is added to the hidden state entering each layer.
    """

    def __init__(self, layers: int, d: int, heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(d, heads, d_ff, dropout) for _ in range(layers))
        self.ln = nn.LayerNorm(d)

    def forward(
        self,
        x: Tensor,
        causal: bool,
        key_padding: Tensor | None = None,
        layer_input: Tensor | None = None,
    ) -> Tensor:
        for block in self.blocks:
            if layer_input is not None:
                x = x + layer_input
            x = block(x, causal, key_padding)
        return layer_norm(x, self.ln.weight, self.ln.bias)

    def step(self, x: Tensor, caches: list[dict], layer_input: Tensor | None = None) -> Tensor:
        """Advance a causal stack by one position; ``caches`` holds one dict per block."""
        for block, cache in zip(self.blocks, caches):
            if layer_input is not None:
                x = x + layer_input
            x = block.step(x, cache)
        return layer_norm(x, self.ln.weight, self.ln.bias)


def init_weights(module: nn.Module, seed: int) -> None:
    """Scaled uniform init: linear weights in +-1/sqrt(fan_in), zero biases."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, sub in module.named_modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.Embedding):
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1)
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int = 200
    peak: float = 1e-4
    decay_steps: int = 150_000
    floor: float = 5e-6


def lr_schedule(step: int, cfg: Schedule = Schedule()) -> float:
    """Linear warm-up to ``peak`` then cosine decay to ``floor``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup_steps:
        return cfg.peak * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak
    progress = (step - cfg.warmup_steps) / max(cfg.decay_steps, 1)
    if progress >= 1:
        return cfg.floor
    return cfg.floor + (cfg.peak - cfg.floor) * (1 + math.cos(math.pi * progress)) / 2


def make_adam(params: Iterable[Tensor], betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=0.0, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Adam, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"{'ok' if v < self.tolerance else 'FAIL'} {k}: {v:.2e}" for k, v in self.errors.items()]
        return "\n".join(lines)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-5,
    eps: float = 1e-6,
    max_entries: int = 24,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients with central differences.

    Each tensor in ``params`` must be a float64 leaf requiring grad. Up to
    ``max_entries`` entries per tensor are probed: the largest analytic
    gradients plus a random sample. The error reported per tensor is the
    largest absolute discrepancy divided by the largest gradient magnitude
    among the probed entries.
    """
    tensors = list(params.values())
    for name, t in params.items():
        if t.dtype != torch.float64:
            raise TypeError(f"gradcheck needs float64 tensors, {name} is {t.dtype}")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    errors, checked = {}, {}
    for (name, t), g in zip(params.items(), grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        flat_g = g.reshape(-1)
        n = flat_g.numel()
        if n <= max_entries:
            idx = torch.arange(n)
        else:
            top = torch.topk(flat_g.abs(), max_entries // 2).indices
            rest = torch.randperm(n, generator=gen)[: max_entries - len(top)]
            idx = torch.unique(torch.cat([top, rest]))
        flat = t.data.view(-1)
        numeric = torch.empty(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
        analytic = flat_g[idx]
        scale = max(analytic.abs().max().item(), numeric.abs().max().item())
        diff = (analytic - numeric).abs().max().item()
        errors[name] = diff / scale if scale > 1e-9 else diff
        checked[name] = len(idx)
    return GradcheckReport(errors, tolerance, checked)
