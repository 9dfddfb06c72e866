"""Rotation parametrization and the gradient plumbing shared by every stage.

Gradients are computed by torch's reverse-mode autograd; this module wraps it
behind a small contract (``backward`` returns a :class:`GradientBuffer`) and
provides a central finite-difference checker used by the test-suite.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

DEGENERATE_TOL = 1e-9


class DegenerateRotationError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient stops being finite."""

    def __init__(self, node: str, message: str = ""):
        self.node = node
        super().__init__(message or f"non-finite value at {node!r}")


def _check_rot6(a1: torch.Tensor, a2: torch.Tensor) -> None:
    n1 = torch.linalg.norm(a1, dim=-1)
    if bool((n1 <= DEGENERATE_TOL).any()):
        raise DegenerateRotationError("first 6D column has zero norm")
    c1 = a1 / n1[..., None]
    perp = a2 - (a2 * c1).sum(-1, keepdim=True) * c1
    if bool((torch.linalg.norm(perp, dim=-1) <= DEGENERATE_TOL * torch.clamp(
            torch.linalg.norm(a2, dim=-1), min=1.0)).any()):
        raise DegenerateRotationError("6D columns are parallel")


def rot6d_to_matrix(r, check: bool = True):
    """Map 6D vectors ``(..., 6)`` to rotation matrices ``(..., 3, 3)``.

    Gram-Schmidt on the two 3-vectors; the third column is their cross product.
    Accepts numpy arrays (returns numpy) or tensors (differentiable).
    """
    as_numpy = not isinstance(r, torch.Tensor)
    t = torch.as_tensor(np.asarray(r, dtype=np.float64)) if as_numpy else r
    a1, a2 = t[..., :3], t[..., 3:6]
    if check:
        _check_rot6(a1.detach(), a2.detach())
    c1 = a1 / torch.linalg.norm(a1, dim=-1, keepdim=True)
    u2 = a2 - (a2 * c1).sum(-1, keepdim=True) * c1
    c2 = u2 / torch.linalg.norm(u2, dim=-1, keepdim=True)
    c3 = torch.cross(c1, c2, dim=-1)
    m = torch.stack([c1, c2, c3], dim=-1)
    return m.numpy() if as_numpy else m


def matrix_to_rot6d(m):
    """Inverse of :func:`rot6d_to_matrix` for orthonormal input (first two columns)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def all_finite(t: torch.Tensor) -> bool:
    """True when no entry is inf or nan."""
    # A float64 sum is non-finite exactly when some entry is (float32 inputs
    # cannot overflow it) and is much cheaper than an elementwise test.
    return bool(torch.isfinite(t.sum(dtype=torch.float64)))


@dataclass
class GradientBuffer:
    """Per-parameter derivatives of a scalar objective, keyed by parameter name."""

    grads: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def all_finite(self) -> bool:
        return all(all_finite(g) for g in self.grads.values())


def backward(objective: torch.Tensor, params: Mapping[str, torch.Tensor]) -> GradientBuffer:
    """Reverse-mode derivatives of ``objective`` w.r.t. every entry of ``params``.

    Parameters the objective does not depend on get an all-zero entry.
    """
    if not bool(torch.isfinite(objective.detach()).all()):
        raise NonFiniteError("objective")
    names = list(params)
    tensors = [params[n] for n in names]
    if objective.requires_grad:
        grads = torch.autograd.grad(objective, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    buf = GradientBuffer()
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not all_finite(g):
            raise NonFiniteError(name, f"non-finite gradient for parameter {name!r}")
        buf.grads[name] = g
    return buf


@dataclass
class FDReport:
    """Outcome of a finite-difference check, grouped by parameter name."""

    entries: Dict[str, list] = field(default_factory=dict)

    def add(self, group, index, analytic, numeric, rel, skipped=False):
        self.entries.setdefault(group, []).append(
            dict(index=index, analytic=analytic, numeric=numeric, rel=rel, skipped=skipped))

    def max_rel(self, group: Optional[str] = None) -> float:
        groups = [group] if group else list(self.entries)
        vals = [e["rel"] for g in groups for e in self.entries[g] if not e["skipped"]]
        return max(vals) if vals else 0.0

    def pass_fraction(self, tol: float, group: Optional[str] = None) -> float:
        groups = [group] if group else list(self.entries)
        vals = [e["rel"] < tol for g in groups for e in self.entries[g] if not e["skipped"]]
        return float(np.mean(vals)) if vals else 1.0

    def n_checked(self, group: Optional[str] = None) -> int:
        groups = [group] if group else list(self.entries)
        return sum(not e["skipped"] for g in groups for e in self.entries[g])


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float | Mapping[str, float] = 1e-4,
    indices: Optional[Mapping[str, Sequence[int]]] = None,
    n_samples: int = 20,
    seed: int = 0,
    signature: Optional[Callable[[], object]] = None,
    floor: float = 1e-8,
) -> FDReport:
    """Compare ``backward`` against central differences ``(f(p+h) - f(p-h)) / 2h``.

    ``fn`` re-evaluates the objective from the current (in-place mutated)
    parameter tensors. When ``signature`` is given, a sample whose perturbation
    changes the signature (e.g. a fragment depth-order change) is marked skipped.
    """
    rng = np.random.default_rng(seed)
    grads = backward(fn(), params)
    report = FDReport()
    for name, p in params.items():
        step = h[name] if isinstance(h, Mapping) else h
        flat = p.data.view(-1)
        if indices is not None and name in indices:
            idx = list(indices[name])
        else:
            k = min(n_samples, flat.numel())
            idx = sorted(rng.choice(flat.numel(), size=k, replace=False).tolist())
        g = grads[name].reshape(-1)
        with torch.no_grad():
            base_sig = signature() if signature else None
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = fn().item()
                sp = signature() if signature else None
                flat[i] = orig - step
                fm = fn().item()
                sm = signature() if signature else None
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                analytic = g[i].item()
                skipped = signature is not None and not (sp == base_sig == sm)
                report.add(name, i, analytic, numeric, relative_error(analytic, numeric, floor), skipped)
    return report
