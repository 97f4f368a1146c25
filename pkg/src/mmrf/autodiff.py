"""Differentiable kernel set used by the fields and losses.

The reverse pass runs on torch's autograd graph; this module fixes the closed
set of kernels the engine is allowed to use, adds the kernels torch does not
provide in the required form (a deterministic table gather/scatter and the
fused hash-grid lookup), and provides the finite-difference harness.

Determinism: the table scatter in :func:`gather_interpolate` sorts
contributions by destination row before reduction, so gradients are a fixed
function of the inputs.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import EmptyTape, ShapeMismatch

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("mmrf_tape", default=None)


class Tape:
    """Ordered record of the kernels executed while the tape is active.

    The gradient graph itself lives on the tensors; the tape keeps the op
    sequence (for diagnostics and the empty-tape check) and scopes recording.
    """

    def __init__(self):
        self.ops: list[str] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)


def _record(name: str) -> None:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.ops.append(name)


def backward(tape: Tape, output: torch.Tensor, output_grad: torch.Tensor | None = None) -> None:
    """Accumulate d(output)/d(parameter) into every parameter's ``.grad``."""
    if tape is None or len(tape) == 0:
        raise EmptyTape("no differentiable operations were recorded")
    if output_grad is None:
        if output.numel() != 1:
            raise ShapeMismatch("non-scalar output needs an explicit output_grad")
        output_grad = torch.ones_like(output)
    torch.autograd.backward(output, output_grad)


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


# --------------------------------------------------------------------------
# forward kernels


def linear(weight: torch.Tensor, bias: torch.Tensor | None, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1] or (bias is not None and bias.shape[0] != weight.shape[0]):
        raise ShapeMismatch(f"linear: weight {tuple(weight.shape)} vs input {tuple(x.shape)}")
    _record("linear")
    return torch.nn.functional.linear(x, weight, bias)


def relu(x: torch.Tensor) -> torch.Tensor:
    _record("relu")
    return torch.relu(x)


def softplus(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """``log(1 + exp(βx)) / β`` without overflow (linear once βx > 20)."""
    _record("softplus")
    return torch.nn.functional.softplus(x, beta=float(beta), threshold=20.0)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    _record("sigmoid")
    return torch.sigmoid(x)


def sin(x: torch.Tensor) -> torch.Tensor:
    _record("sin")
    return torch.sin(x)


def cos(x: torch.Tensor) -> torch.Tensor:
    _record("cos")
    return torch.cos(x)


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _record("multiply")
    return a * b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _record("add")
    return a + b


def reduce_sum(x: torch.Tensor, dim=None) -> torch.Tensor:
    _record("reduce_sum")
    return x.sum() if dim is None else x.sum(dim=dim)


def sorted_scatter_add(n_rows: int, index: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Sum ``values[i]`` into row ``index[i]`` of a zero ``(n_rows, F)`` table.

    Contributions are ordered by destination (stable sort) before the
    reduction, so the summation order is a fixed function of the inputs and
    never of how the reduction is scheduled.
    """
    order = torch.argsort(index, stable=True)
    out = torch.zeros((n_rows,) + tuple(values.shape[1:]), dtype=values.dtype)
    out.index_add_(0, index[order], values[order])
    return out


class _GatherInterpolate(torch.autograd.Function):
    @staticmethod
    def forward(ctx, table, index, weights):
        # table (R, F); index (N, K) int64; weights (N, K)
        rows = table[index]  # (N, K, F)
        ctx.save_for_backward(table, index, weights)
        return torch.einsum("nk,nkf->nf", weights, rows)

    @staticmethod
    def backward(ctx, grad):
        table, index, weights = ctx.saved_tensors
        grad_table = grad_weights = None
        if ctx.needs_input_grad[0]:
            contrib = weights.unsqueeze(-1) * grad.unsqueeze(1)  # (N, K, F)
            grad_table = sorted_scatter_add(table.shape[0], index.reshape(-1),
                                            contrib.reshape(-1, table.shape[1]))
        if ctx.needs_input_grad[2]:
            grad_weights = torch.einsum("nf,nkf->nk", grad, table[index])
        return grad_table, None, grad_weights


def gather_interpolate(table: torch.Tensor, corner_indices: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of table rows: ``out[n] = Σ_k weights[n,k] · table[idx[n,k]]``."""
    if corner_indices.shape != weights.shape or table.dim() != 2:
        raise ShapeMismatch(f"gather_interpolate: index {tuple(corner_indices.shape)} "
                            f"vs weights {tuple(weights.shape)}")
    _record("gather_interpolate")
    return _GatherInterpolate.apply(table, corner_indices, weights)


class _HashInterpolate(torch.autograd.Function):
    @staticmethod
    def forward(ctx, table, positions, meta):
        from ._kernels import hash_encode_forward

        res, dense, offsets, mask = meta
        pos = positions.detach().contiguous().numpy()
        tab = table.detach().contiguous().numpy()
        ctx.save_for_backward(table, positions)
        ctx.meta = meta
        return torch.from_numpy(hash_encode_forward(pos, tab, res, dense, offsets, mask))

    @staticmethod
    def backward(ctx, grad):
        from ._kernels import hash_encode_backward

        table, positions = ctx.saved_tensors
        res, dense, offsets, mask = ctx.meta
        want_table, want_pos = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        gt, gp = hash_encode_backward(positions.detach().contiguous().numpy(),
                                      grad.detach().contiguous().numpy().astype(table.numpy().dtype, copy=False),
                                      table.detach().contiguous().numpy(), res, dense, offsets, mask,
                                      want_table, want_pos)
        return (torch.from_numpy(gt) if want_table else None,
                torch.from_numpy(gp) if want_pos else None, None)


def hash_interpolate(table: torch.Tensor, positions: torch.Tensor, meta) -> torch.Tensor:
    """Fused multi-level hash lookup + trilinear interpolation.

    ``meta`` is ``(resolutions, dense_flags, level_offsets, hash_mask)``.
    Equivalent to computing the 8 corner rows/weights per level and calling
    :func:`gather_interpolate`, without materializing them.
    """
    if positions.dim() != 2 or positions.shape[1] != 3:
        raise ShapeMismatch(f"hash_interpolate: positions must be (N, 3), got {tuple(positions.shape)}")
    _record("gather_interpolate")
    return _HashInterpolate.apply(table, positions.to(table.dtype), meta)


# --------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    flagged: dict[str, int] = field(default_factory=dict)
    probes: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_error.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_error.items():
            verdict = "ok" if err <= self.tol else "FAIL"
            out.append(f"{name}: max rel err {err:.2e} over {self.probes[name]} probes "
                       f"({self.flagged.get(name, 0)} non-differentiable) {verdict}")
        return out


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tol: float,
    step: float = 1e-3,
    n_probes: int = 20,
    atol: float = 1e-6,
    kink_tol: float = 0.05,
    seed: int = 0,
) -> FDReport:
    """Compare autograd gradients of a scalar ``fn`` against central differences.

    Half the probes per parameter go to the entries with the largest analytic
    gradient, the rest are uniform. Probes where the one-sided slopes disagree
    by more than ``kink_tol`` (relative) sit on a kink and are reported as
    flagged instead of counted.
    """
    rng = np.random.default_rng(seed)
    plist = list(params.values())
    zero_grad(plist)
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = {k: p.grad.detach().clone().reshape(-1) for k, p in params.items()}
    report = FDReport(tol=tol)
    with torch.no_grad():
        f0 = float(fn())
        for name, p in params.items():
            flat = p.data.view(-1)
            g = analytic[name]
            n = flat.numel()
            k = min(n, n_probes)
            top = torch.argsort(g.abs(), descending=True, stable=True)[: (k + 1) // 2].numpy()
            others = np.setdiff1d(np.arange(n), top)
            rest = rng.choice(others, size=k - len(top), replace=False)
            idx = np.sort(np.concatenate([top, rest]).astype(np.int64))
            worst, kinks = 0.0, 0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = float(fn())
                flat[i] = orig - step
                fm = float(fn())
                flat[i] = orig
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd)) + 10 * atol:
                    kinks += 1
                    continue
                num = (fp - fm) / (2 * step)
                a = g[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), atol))
            report.max_rel_error[name] = worst
            report.flagged[name] = kinks
            report.probes[name] = len(idx)
    zero_grad(plist)
    return report
