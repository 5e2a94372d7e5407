"""Finite-difference gradient checking.

Values produced by stop-gradient, straight-through and index-selection ops are
recorded on the first (analytic) evaluation and replayed during the perturbed
evaluations. The finite differences therefore differentiate the same surrogate
function that backpropagation does; the report says whether a straight-through
estimator was involved so callers know the check is against that surrogate
rather than the true (almost everywhere zero) derivative of quantization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float
    straight_through: bool
    frozen_ops: dict[str, int] = field(default_factory=dict)
    non_finite: bool = False
    worst: str = ""

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        st = " (straight-through surrogate)" if self.straight_through else ""
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} entries"
            f", tol {self.tol:g}{st}"
        )


def _as_named(wrt) -> dict[str, Tensor]:
    if isinstance(wrt, Tensor):
        return {"x": wrt}
    if isinstance(wrt, Mapping):
        return dict(wrt)
    return {str(i): t for i, t in enumerate(wrt)}


def gradient_check(
    f: Callable[[], Tensor],
    wrt: Tensor | Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-3,
    floor: float = 1e-3,
    max_entries: int | None = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``f`` closes over the tensors in ``wrt``; their data is perturbed in place
    and restored. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    At most ``max_entries`` randomly chosen entries per tensor are probed.
    """
    tensors = _as_named(wrt)
    for t in tensors.values():
        t.grad = None
    tape = ops.FrozenTape()
    with ops.frozen_tape(tape):
        out = f()
    if out.data.size != 1:
        raise ValueError("gradient_check needs a scalar function")
    if not np.isfinite(out.data).all():
        return GradCheckReport(np.inf, np.inf, 0, tol, False, non_finite=True)
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def evaluate() -> float:
        tape.rewind()
        with no_grad(), ops.frozen_tape(tape):
            return float(f().data)

    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, count, worst_name = 0.0, 0.0, 0, ""
    non_finite = False
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i].copy()
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                non_finite = True
                continue
            numeric = (fp - fm) / (2.0 * eps)
            a = float(a_flat[i])
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), floor)
            count += 1
            worst_abs = max(worst_abs, abs_err)
            if rel > worst_rel:
                worst_rel, worst_name = rel, f"{name}[{int(i)}]"
    kinds: dict[str, int] = {}
    for k in tape.kinds:
        kinds[k] = kinds.get(k, 0) + 1
    return GradCheckReport(
        max_rel_error=worst_rel,
        max_abs_error=worst_abs,
        n_checked=count,
        tol=tol,
        straight_through="straight_through" in kinds,
        frozen_ops=kinds,
        non_finite=non_finite,
        worst=worst_name,
    )
