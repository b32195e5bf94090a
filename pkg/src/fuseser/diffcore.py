"""Differentiable building blocks for the fusion heads.

Every layer operates on a single unbatched sequence of shape ``(T, D)``;
the trainer loops over utterances inside a batch. Autograd supplies the
analytic gradients and :func:`finite_diff_gradcheck` is the independent
oracle that verifies them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import torch
from torch import nn

from .errors import ConfigError, DataError

LEAKY_SLOPE = 0.2
LN_EPS = 1e-5
DROPOUT = 0.1


def glorot_(w: torch.Tensor) -> torch.Tensor:
    """In-place Glorot uniform init for a ``(fan_in, fan_out)`` matrix."""
    fan_in, fan_out = w.shape[0], w.shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound)
    return w


def _check_cols(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 2:
        raise ConfigError(f"{what}: expected a 2-D (T, D) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigError(
            f"{what}: input shape {tuple(x.shape)} does not match expected feature dim {expected}"
        )


class Linear(nn.Module):
    """``y = x W + b`` with ``W`` stored as ``(in_dim, out_dim)``."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(glorot_(torch.empty(in_dim, out_dim)))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ConfigError(
                f"linear: input shape {tuple(x.shape)} incompatible with weight shape "
                f"{tuple(self.weight.shape)}"
            )
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def mean_pool(x: torch.Tensor) -> torch.Tensor:
    if x.shape[0] < 1:
        raise DataError("mean_pool: empty sequence")
    return x.mean(dim=0)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + LN_EPS) * self.scale + self.shift


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads.

    The key projection has no bias: a key bias adds the same value to every
    score in a row, so softmax cancels it and its gradient is identically zero.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim)
        self.k_proj = Linear(dim, dim, bias=False)
        self.v_proj = Linear(dim, dim)
        self.out_proj = Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (T, D) -> (H, T, D/H)
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def forward(
        self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        for name, t in (("query", q), ("key", k), ("value", v)):
            _check_cols(t, self.dim, f"attention {name}")
        if k.shape[0] != v.shape[0]:
            raise ConfigError(f"attention: key length {k.shape[0]} != value length {v.shape[0]}")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = qh @ kh.transpose(1, 2) / math.sqrt(self.head_dim)
        weights = softmax_rows(scores)
        ctx = (weights @ vh).transpose(0, 1).reshape(q.shape[0], self.dim)
        return self.out_proj(ctx), weights


class TransformerEncoderLayer(nn.Module):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))`` with a 4x GELU FFN."""

    def __init__(self, dim: int, heads: int, dropout: float = DROPOUT):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ff_in = Linear(dim, 4 * dim)
        self.ff_out = Linear(4 * dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h)
        x = x + self.drop(attn_out)
        h = self.ff_out(torch.nn.functional.gelu(self.ff_in(self.norm2(x))))
        return x + self.drop(h)


class _GRUDirection(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        # gate order along the last axis: update, reset, candidate
        self.w_in = nn.Parameter(torch.empty(in_dim, 3 * hidden))
        self.w_rec = nn.Parameter(torch.empty(hidden, 3 * hidden))
        self.bias = nn.Parameter(torch.zeros(3 * hidden))
        for i in range(3):
            glorot_(self.w_in.data[:, i * hidden : (i + 1) * hidden])
            glorot_(self.w_rec.data[:, i * hidden : (i + 1) * hidden])

    def forward(self, x: torch.Tensor, reverse: bool) -> torch.Tensor:
        H = self.hidden
        xw = x @ self.w_in + self.bias
        h = x.new_zeros(H)
        order = range(x.shape[0] - 1, -1, -1) if reverse else range(x.shape[0])
        outs: list[torch.Tensor] = [None] * x.shape[0]  # type: ignore[list-item]
        for t in order:
            xz, xr, xh = xw[t, :H], xw[t, H : 2 * H], xw[t, 2 * H :]
            hz = h @ self.w_rec[:, : 2 * H]
            z = torch.sigmoid(xz + hz[:H])
            r = torch.sigmoid(xr + hz[H:])
            cand = torch.tanh(xh + (r * h) @ self.w_rec[:, 2 * H :])
            h = (1 - z) * h + z * cand
            outs[t] = h
        return torch.stack(outs)


class BiGRU(nn.Module):
    """Bidirectional GRU; output ``(T, 2 * hidden)`` as ``[forward | backward]``."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        if hidden < 1:
            raise ConfigError(f"GRU hidden size must be >= 1, got {hidden}")
        self.in_dim = in_dim
        self.fwd = _GRUDirection(in_dim, hidden)
        self.bwd = _GRUDirection(in_dim, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_cols(x, self.in_dim, "bigru")
        return torch.cat([self.fwd(x, reverse=False), self.bwd(x, reverse=True)], dim=1)


def adjacency_matrix(n: int, edges: Iterable[tuple[int, int]] | None = None) -> torch.Tensor:
    """Boolean ``(n, n)`` mask, ``mask[i, j]`` meaning ``j`` is a neighbour of ``i``.

    ``edges=None`` gives the fully connected graph with self-loops.
    """
    if edges is None:
        return torch.ones(n, n, dtype=torch.bool)
    mask = torch.zeros(n, n, dtype=torch.bool)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ConfigError(f"edge ({i}, {j}) out of range for {n} nodes")
        mask[i, j] = True
    return mask


class GATLayer(nn.Module):
    """Single-head graph attention layer (LeakyReLU scores, ELU outputs)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.proj = Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(glorot_(torch.empty(out_dim, 1)).squeeze(1))
        self.att_dst = nn.Parameter(glorot_(torch.empty(out_dim, 1)).squeeze(1))

    def forward(
        self, x: torch.Tensor, adjacency: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        _check_cols(x, self.in_dim, "gat")
        n = x.shape[0]
        mask = adjacency_matrix(n) if adjacency is None else adjacency
        if mask.shape != (n, n):
            raise ConfigError(f"gat: adjacency shape {tuple(mask.shape)} for {n} nodes")
        empty = (~mask.any(dim=1)).nonzero().flatten().tolist()
        if empty:
            raise ConfigError(f"gat: nodes {empty} have no neighbours")
        wh = self.proj(x)
        src = (wh @ self.att_src).unsqueeze(1)
        dst = (wh @ self.att_dst).unsqueeze(0)
        pre = src + dst
        scores = torch.nn.functional.leaky_relu(pre, LEAKY_SLOPE)
        # When no neighbour score in row i crosses zero, LeakyReLU is linear on the
        # row and the source term is a row constant that softmax cancels. Drop it
        # outright so the cancellation is exact rather than up to rounding.
        all_pos = torch.where(mask, pre > 0, True).all(dim=1, keepdim=True)
        all_neg = torch.where(mask, pre < 0, True).all(dim=1, keepdim=True)
        scores = torch.where(all_pos, dst, torch.where(all_neg, LEAKY_SLOPE * dst, scores))
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = softmax_rows(scores)
        return torch.nn.functional.elu(alpha @ wh), alpha


class SwiGLU(nn.Module):
    """``(swish(x Wg + bg) * (x Wu + bu)) Wo + bo``."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float = DROPOUT):
        super().__init__()
        self.gate = Linear(in_dim, hidden)
        self.up = Linear(in_dim, hidden)
        self.out = Linear(hidden, out_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = self.gate(x)
        return self.out(self.drop(g * torch.sigmoid(g) * self.up(x)))


class ReluMLP(nn.Module):
    """Default classifier head: linear, ReLU, dropout, linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dropout: float = DROPOUT):
        super().__init__()
        self.hidden = Linear(in_dim, hidden)
        self.out = Linear(hidden, out_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.drop(torch.relu(self.hidden(x))))


class AttentivePool(nn.Module):
    """``softmax_t(u . tanh(W x_t + b))``-weighted sum of frames."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.dim = dim
        self.proj = Linear(dim, hidden)
        self.context = nn.Parameter(glorot_(torch.empty(hidden, 1)).squeeze(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_cols(x, self.dim, "attentive_pool")
        scores = torch.tanh(self.proj(x)) @ self.context
        w = softmax_rows(scores)
        return w @ x


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: str
    checked: int
    finite: bool = True
    message: str = ""
    analytic: float = 0.0
    numeric: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.finite and self.max_rel_err < tol


def _terms(fn, values, weights):
    """Per-element contributions to the scalar loss."""
    out = fn(values)
    if isinstance(out, tuple):
        out = out[0]
    return out * weights if weights is not None else out


def finite_diff_gradcheck(
    fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    weights: torch.Tensor | None = None,
    chunk: int = 256,
) -> GradcheckReport:
    """Compare autograd gradients of ``sum(fn(tensors))`` with central differences.

    ``fn`` maps a dict of named tensors to the op output and must be a pure
    function of it. Each element is perturbed by ``+-eps``; perturbed
    evaluations are batched with ``torch.func.vmap``. ``weights`` replaces the
    plain sum with a weighted sum, for ops whose output sum is constant.
    Per-element relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = {n: t.detach().clone() for n, t in tensors.items()}
    leaves = {n: t.clone().requires_grad_(True) for n, t in base.items()}
    loss = _terms(fn, leaves, weights).sum()
    if not torch.isfinite(loss):
        return GradcheckReport(math.inf, "", 0, finite=False, message="non-finite forward value")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)

    worst_err, worst_at, checked, worst_pair = 0.0, "", 0, (0.0, 0.0)
    with torch.no_grad():
        for name, g in zip(names, grads):
            t = base[name]
            ana = torch.zeros(t.numel(), dtype=t.dtype) if g is None else g.reshape(-1)
            num = torch.empty_like(ana)
            for lo in range(0, t.numel(), chunk):
                idx = torch.arange(lo, min(lo + chunk, t.numel()))
                bump = torch.zeros(len(idx), t.numel(), dtype=t.dtype)
                bump[torch.arange(len(idx)), idx] = eps
                bump = bump.reshape(len(idx), *t.shape)

                def f_one(v, name=name):
                    vals = dict(base)
                    vals[name] = v
                    return _terms(fn, vals, weights)

                f = torch.func.vmap(f_one)
                f_plus = f(t.unsqueeze(0) + bump)
                f_minus = f(t.unsqueeze(0) - bump)
                if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                    return GradcheckReport(
                        math.inf, name, checked, finite=False,
                        message="non-finite forward value under perturbation",
                    )
                # difference before summing: avoids rounding at the magnitude of the total
                diff = (f_plus - f_minus).reshape(len(idx), -1).sum(dim=1)
                num[idx] = diff / (2 * eps)
            denom = torch.clamp(torch.maximum(ana.abs(), num.abs()), min=1e-8)
            err = (ana - num).abs() / denom
            checked += err.numel()
            if err.numel() and err.max().item() > worst_err:
                k = int(err.argmax())
                worst_err, worst_at = err[k].item(), f"{name}[{k}]"
                worst_pair = (ana[k].item(), num[k].item())
    return GradcheckReport(worst_err, worst_at, checked, analytic=worst_pair[0], numeric=worst_pair[1])


class _Thunk(nn.Module):
    def __init__(self, module: nn.Module, forward: Callable[..., torch.Tensor]):
        super().__init__()
        self.module = module
        self.fwd = forward

    def forward(self, **inputs: torch.Tensor) -> torch.Tensor:
        return self.fwd(**inputs)


def gradcheck_module(
    module: nn.Module,
    forward: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor] | None = None,
    eps: float = 1e-5,
    weights: torch.Tensor | None = None,
) -> GradcheckReport:
    """Gradcheck every parameter of ``module`` plus the named ``inputs``.

    ``forward(**inputs)`` must run ``module`` (it may call it several times or
    through helper code). The module is put in eval mode so dropout is the
    identity.
    """
    module.eval()
    thunk = _Thunk(module, forward)
    inputs = dict(inputs or {})
    tensors = {f"module.{n}": p.detach() for n, p in module.named_parameters()}
    tensors.update({f"input.{n}": t.detach() for n, t in inputs.items()})

    def fn(values: dict[str, torch.Tensor]):
        params = {n: v for n, v in values.items() if n.startswith("module.")}
        kw = {n[len("input."):]: v for n, v in values.items() if n.startswith("input.")}
        return torch.func.functional_call(thunk, params, args=(), kwargs=kw)

    return finite_diff_gradcheck(fn, tensors, eps=eps, weights=weights)
