"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from nablanet.tensor import Tape, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    failures: list = field(default_factory=list)  # human-readable locations
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_error <= self.tol

    def summary(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        state = "PASS" if self.passed else "FAIL"
        return f"{state} max_rel_err={self.max_error:.3e} (worst: {worst}, tol {self.tol:g})"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    # normalize by the tensor's gradient scale; per-element ratios are
    # meaningless for components that are zero analytically
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the tensors in ``inputs`` on each
    call. Inputs should be float64. ``max_entries`` caps the number of randomly
    chosen coordinates probed per tensor (all when None).
    """
    report = GradCheckReport(tol=tol)
    for t in inputs.values():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 tensors, got {t.dtype} for {t.name or '?'}")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = fn()
    if not np.all(np.isfinite(loss.data)):
        report.failures.append("loss: non-finite forward value")
        return report
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                up = float(fn().data)
                flat[i] = orig - step
                down = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                report.failures.append(f"{name}[{np.unravel_index(i, t.shape)}]: non-finite output")
                numeric[k] = np.nan
                continue
            numeric[k] = (up - down) / (2 * step)
        a = analytic.reshape(-1)[idx]
        ok = np.isfinite(numeric)
        report.errors[name] = _relative_error(a[ok], numeric[ok], floor)
        if report.errors[name] > tol:
            worst = idx[ok][np.argmax(np.abs(a[ok] - numeric[ok]))]
            report.failures.append(f"{name}[{np.unravel_index(worst, t.shape)}]: rel err {report.errors[name]:.3e}")
    return report
