"""Central finite-difference verification of analytic gradients.

Runs in 64-bit precision only.  The reported relative error for a gradient
pair (a, f) is |a - f| / max(|a|, |f|, 1), so near-zero gradients are
compared absolutely and everything else relatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)

    def __str__(self):
        lines = [f"max relative error: {self.max_rel_error:.3e}"]
        for name, err in sorted(self.per_tensor.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_error(a: np.ndarray, f: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1.0)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def _require_f64(arrs):
    for a in arrs:
        if a.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit precision")


def _numeric_grad(fn, arr: np.ndarray, step: float) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def grad_check_layer(layer, x: np.ndarray, step: float = 1e-3, mode: str = "train",
                     seed: int = 0) -> GradCheckReport:
    """Check one layer's input and parameter gradients against central FD.

    The scalar objective is sum(forward(x) * R) for a fixed random projection
    R, which exercises the full Jacobian.  Stochastic layers (dropout) are
    re-seeded identically on every forward evaluation.
    """
    x = np.array(x, dtype=np.float64)
    params = layer.params()
    _require_f64([x] + [p.data for p in params.values()])

    def fwd():
        return layer.forward(x, mode=mode, rng=np.random.default_rng(seed))

    proj = np.random.default_rng(seed + 1).standard_normal(fwd().shape)

    def objective():
        return float(np.sum(fwd() * proj))

    objective()  # leaves a fresh forward cache for backward
    for p in params.values():
        p.zero_grad()
    gx = layer.backward(np.array(proj), need_input_grad=True)

    per = {"input": _rel_error(gx, _numeric_grad(objective, x, step))}
    for name, p in params.items():
        per[name] = _rel_error(p.grad, _numeric_grad(objective, p.data, step))
    return GradCheckReport(max(per.values()), per)


def grad_check_network(net, x: np.ndarray, class_targets, orient_targets=None,
                       gamma: float = 0.5, step: float = 1e-3,
                       seed: int = 0) -> GradCheckReport:
    """Check a two-head network end to end through its combined loss."""
    from .model import orion_loss

    x = np.array(x, dtype=np.float64)
    params = net.named_params()
    _require_f64([x] + [p.data for p in params.values()])

    def loss_value():
        heads = net.forward(x, mode="train", rng=np.random.default_rng(seed))
        return orion_loss(heads, class_targets, orient_targets, gamma)[0]

    loss_value()
    heads = net.forward(x, mode="train", rng=np.random.default_rng(seed))
    _, _, _, g_class, g_orient = orion_loss(heads, class_targets, orient_targets, gamma,
                                            with_grads=True)
    for p in params.values():
        p.zero_grad()
    gx = net.backward(g_class, g_orient, need_input_grad=True)

    per = {"input": _rel_error(gx, _numeric_grad(loss_value, x, step))}
    for name, p in params.items():
        per[name] = _rel_error(p.grad, _numeric_grad(loss_value, p.data, step))
    return GradCheckReport(max(per.values()), per)


def grad_check(module, x, **kwargs) -> GradCheckReport:
    """Dispatch to the layer or network checker based on the module type."""
    if hasattr(module, "named_params"):
        return grad_check_network(module, x, **kwargs)
    return grad_check_layer(module, x, **kwargs)
