"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, finite_checks, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    per_input: dict[str, float] = field(default_factory=dict)
    refined: int = 0  # probes re-measured at a smaller step after a kink was detected

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference noise by nothing.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    name: str = "op",
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` against central differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar by a
    fixed random projection so every output element contributes. Inputs
    with ``requires_grad`` set are checked; ``max_entries`` caps how many
    coordinates per input are probed (chosen at random).

    Each probe also yields the forward and backward one-sided slopes; their
    disagreement (plus a roundoff allowance) bounds the error of the
    central difference; it is large when the step straddles a ReLU/max-pool
    kink. Probes whose uncertainty is significant at ``tolerance`` are
    re-measured with steps ``epsilon/10`` and ``epsilon/100`` and the
    estimate with the smallest uncertainty is kept. The analytic gradient
    plays no part in that choice.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks run in float64, got {t.dtype}")

    with no_grad():
        probe = fn(*inputs)
    proj = rng.uniform(0.5, 1.5, size=probe.shape) * rng.choice([-1.0, 1.0], size=probe.shape)

    def scalar_loss() -> float:
        with no_grad(), finite_checks(False):
            return float((fn(*inputs).data * proj).sum())

    base = scalar_loss()

    def probe_at(flat: np.ndarray, i: int, eps: float) -> tuple[float, float]:
        orig = flat[i]
        flat[i] = orig + eps
        plus = scalar_loss()
        flat[i] = orig - eps
        minus = scalar_loss()
        flat[i] = orig
        # one-sided disagreement plus the cancellation error of the step
        spread = abs((plus - base) - (base - minus)) / (2 * eps)
        roundoff = 4 * np.finfo(np.float64).eps * max(abs(base), 1.0) / eps
        return (plus - minus) / (2 * eps), spread, roundoff

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    loss = ops.sum(ops.mul(out, Tensor(proj.astype(out.dtype))))
    loss.backward()

    worst_err, worst_at, checked, refined = 0.0, "", 0, 0
    per_input: dict[str, float] = {}
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        label = t.name or f"input{k}"
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idxs.size)
        for m, i in enumerate(idxs):
            value, spread, roundoff = probe_at(flat, i, epsilon)
            if spread - roundoff > 0.5 * tolerance * max(abs(value), floor):
                refined += 1
                uncertainty = spread + roundoff
                for eps in (epsilon / 10, epsilon / 100):
                    v, s, r = probe_at(flat, i, eps)
                    if s + r < uncertainty:
                        value, uncertainty = v, s + r
            numeric[m] = value
        err = relative_error(analytic.reshape(-1)[idxs], numeric, floor)
        checked += idxs.size
        per_input[label] = float(err.max(initial=0.0))
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst_at = f"{label}[{int(idxs[err.argmax()])}]"
    return GradCheckReport(name, worst_err, tolerance, checked, worst_at, per_input, refined)
