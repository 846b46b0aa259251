"""Central finite-difference oracle for the autodiff engine."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.errors import ContractError, OracleError
from core.tensor import Graph, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
ABS_FLOOR = 1e-7


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: Optional[str] = None
    errors: List[float] = field(default_factory=list)


def _relative_error(analytic: float, numeric: float, atol: float = ABS_FLOOR) -> float:
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise ContractError(f"gradient oracle needs a scalar function, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def _analytic_grads(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor]) -> List[np.ndarray]:
    saved = [(leaf.requires_grad, leaf.grad) for leaf in leaves]
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    try:
        with Graph() as graph:
            loss = loss_fn()
            _scalar(loss)
            if loss.requires_grad:
                graph.backward(loss)
        return [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    finally:
        for leaf, (requires_grad, grad) in zip(leaves, saved):
            leaf.requires_grad = requires_grad
            leaf.grad = grad


def _numeric(loss_fn: Callable[[], Tensor], leaf: Tensor, flat_index: int, h: float) -> float:
    flat = leaf.data.reshape(-1)
    original = flat[flat_index]
    try:
        flat[flat_index] = original + h
        plus = _scalar(loss_fn())
        flat[flat_index] = original - h
        minus = _scalar(loss_fn())
    finally:
        flat[flat_index] = original
    return (plus - minus) / (2.0 * h)


def _assert_deterministic(loss_fn: Callable[[], Tensor]) -> None:
    first, second = _scalar(loss_fn()), _scalar(loss_fn())
    if first != second:
        raise OracleError(f"function is not deterministic: {first!r} != {second!r}")


def check_leaves(loss_fn: Callable[[], Tensor],
                 leaves: Dict[str, Tensor],
                 coords: Optional[Dict[str, Sequence[int]]] = None,
                 h: float = DEFAULT_STEP,
                 tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare autodiff and central differences on (a subset of) several leaves.

    ``loss_fn`` takes no arguments and reads the leaves by closure; the leaves
    are perturbed in place and restored.
    """
    _assert_deterministic(loss_fn)
    names = list(leaves)
    analytic = dict(zip(names, _analytic_grads(loss_fn, [leaves[n] for n in names])))

    worst_err, worst_at, errors = 0.0, None, []
    for name in names:
        leaf = leaves[name]
        indices = range(leaf.size) if coords is None or name not in coords else coords[name]
        grad_flat = analytic[name].reshape(-1)
        for idx in indices:
            err = _relative_error(float(grad_flat[idx]), _numeric(loss_fn, leaf, int(idx), h))
            errors.append(err)
            if err > worst_err or worst_at is None:
                worst_err, worst_at = max(err, worst_err), f"{name}[{idx}]"

    report = GradCheckReport(max_rel_err=worst_err, passed=worst_err <= tol,
                             checked=len(errors), worst=worst_at, errors=errors)
    logger.debug("gradcheck: %d coordinates, max_rel_err=%.3e at %s",
                 report.checked, report.max_rel_err, report.worst)
    return report


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Check d f(x) / dx against central differences at every coordinate of ``x``."""
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    return check_leaves(lambda: f(x), {"x": x}, h=h, tol=tol)


def sample_coordinates(leaves: Dict[str, Tensor], n_samples: int,
                       rng: np.random.Generator) -> Dict[str, List[int]]:
    """Spread ``n_samples`` flat indices over the leaves, at least one per leaf."""
    names = list(leaves)
    if not names:
        return {}
    per_leaf = max(1, n_samples // len(names))
    picked = {}
    for name in names:
        size = leaves[name].size
        count = min(size, per_leaf)
        picked[name] = sorted(rng.choice(size, size=count, replace=False).tolist())
    return picked
