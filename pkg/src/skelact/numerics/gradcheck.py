"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError, ValidationError
from .tensor import Tape, Tensor


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    h: float
    checked: int
    max_rel_err: float
    worst: list[GradCheckEntry] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"grad check {status}: {self.checked} elements, "
            f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, h {self.h:.1e})"
        ]
        for e in self.worst:
            lines.append(
                f"  {e.param}{list(e.index)}: analytic {e.analytic:+.6e} "
                f"numeric {e.numeric:+.6e} rel err {e.rel_err:.3e}"
            )
        return "\n".join(lines)


def _pick_indices(
    params: Sequence[tuple[str, Tensor]], samples: int, rng: np.random.Generator
) -> list[tuple[str, Tensor, int]]:
    """Spread the element budget over the parameters, at least one each."""
    total = sum(p.size for _, p in params)
    if total <= samples:
        return [(name, p, i) for name, p in params for i in range(p.size)]
    sizes = np.array([p.size for _, p in params], dtype=np.float64)
    counts = np.maximum(1, np.floor(samples * sizes / total).astype(int))
    counts = np.minimum(counts, sizes.astype(int))
    # top up to the requested budget, largest tensors first
    short = samples - int(counts.sum())
    order = np.argsort(-sizes)
    i = 0
    while short > 0:
        j = order[i % len(order)]
        if counts[j] < sizes[j]:
            counts[j] += 1
            short -= 1
        i += 1
    picks = []
    for (name, p), c in zip(params, counts):
        flat = rng.choice(p.size, size=int(c), replace=False)
        picks.extend((name, p, int(idx)) for idx in sorted(flat))
    return picks


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    report_worst: int = 10,
) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    ``f`` must be deterministic (dropout disabled, fixed normalization mode)
    and must read its parameters from the ``params`` tensors, which are
    perturbed in place.  For every sampled element the check requires

        |analytic - numeric| / max(1, |numeric|) <= tol

    with numeric = (f(x+h) - f(x-h)) / 2h.  A random subsample of at least
    ``samples`` elements is used when the parameters are large; each
    parameter tensor contributes at least one element.

    Raises NumericalError when any evaluation produces a non-finite value,
    naming the offending parameter element.
    """
    params = list(params)
    if not params:
        raise ValidationError("grad_check needs at least one parameter")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))

    with Tape() as tape:
        for _, p in params:
            tape.watch(p)
        out = f()
        if out.size != 1:
            raise ValidationError(f"grad_check needs a scalar function, got shape {out.shape}")
        if not math.isfinite(float(out.data)):
            raise NumericalError("non-finite loss at the unperturbed point")
        tape.backward(out)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params
        }
    for _, p in params:
        p.grad = None

    entries: list[GradCheckEntry] = []
    for name, p, idx in _pick_indices(params, samples, rng):
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        lp = float(f().data)
        flat[idx] = orig - h
        lm = float(f().data)
        flat[idx] = orig
        index = np.unravel_index(idx, p.shape)
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericalError(f"non-finite loss while perturbing {name}{list(index)}")
        numeric = (lp - lm) / (2.0 * h)
        ana = float(analytic[name].reshape(-1)[idx])
        rel = abs(ana - numeric) / max(1.0, abs(numeric))
        entries.append(GradCheckEntry(name, tuple(int(i) for i in index), ana, numeric, rel))

    entries.sort(key=lambda e: e.rel_err, reverse=True)
    max_err = entries[0].rel_err if entries else 0.0
    return GradCheckReport(
        passed=max_err <= tol,
        tol=tol,
        h=h,
        checked=len(entries),
        max_rel_err=max_err,
        worst=entries[:report_worst],
    )
