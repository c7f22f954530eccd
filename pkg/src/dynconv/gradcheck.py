"""Central finite-difference checks for primitives and whole models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Prng

# below this magnitude a gradient entry is compared in absolute terms
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``x`` may be a non-contiguous view; entries are addressed by coordinate.
    """
    idx = range(x.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else x.size)
    for k, i in enumerate(idx):
        at = np.unravel_index(i, x.shape)
        orig = x[at]
        x[at] = orig + eps
        fp = f()
        x[at] = orig - eps
        fm = f()
        x[at] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out if indices is not None else out.reshape(x.shape)


def check_vjp(forward, inputs: list[np.ndarray], vjp, rng: Prng, eps: float = 1e-5) -> float:
    """Max relative error of ``vjp`` for the probe loss ``sum(forward(*inputs) * r)``.

    ``vjp(r, *inputs)`` must return one cotangent per input (None to skip).
    Every entry of every input is checked.
    """
    out = forward(*inputs)
    r = rng.normal(np.shape(out))
    analytic = vjp(r, *inputs)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        if g is None:
            continue
        num = numerical_grad(lambda: float(np.sum(forward(*inputs) * r)), x, eps)
        worst = max(worst, float(relative_error(g, num).max()))
    return worst


def _differences(f, f0: float, p: np.ndarray, direction: np.ndarray, eps: float):
    """Central, forward and backward differences of ``f`` along ``direction``."""
    orig = p.copy()
    p += eps * direction
    fp = f()
    p[...] = orig - eps * direction
    fm = f()
    p[...] = orig
    return (fp - fm) / (2 * eps), (fp - f0) / eps, (f0 - fm) / eps


def _probe(f, f0, p, direction, analytic, eps, tolerance, report):
    """One check; a kink crossed by the finite difference triggers a retry at eps/100.

    A kink shows up as disagreeing one-sided differences.  ReLU and max-pool
    switches are hit with small probability by a step of ``eps``; a real
    vjp error does not go away with a smaller step.
    """
    central, fwd, bwd = _differences(f, f0, p, direction, eps)
    err = float(relative_error(analytic, central))
    if err > tolerance and float(relative_error(fwd, bwd)) > tolerance:
        report.kink_retries += 1
        central = _differences(f, f0, p, direction, eps / 100)[0]
        err = float(relative_error(analytic, central))
    return err, central


@dataclass
class GradcheckReport:
    worst: dict = field(default_factory=dict)  # parameter name -> worst relative error
    failures: list = field(default_factory=list)  # (name, index, analytic, numeric)
    tolerance: float = 1e-4
    kink_retries: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.worst.values(), default=0.0)


def check_model(model, x, y, rng: Prng, eps: float = 1e-5, tolerance: float = 1e-4,
                entries_per_param: int = 4) -> GradcheckReport:
    """Compare backprop gradients of the mean loss with central differences.

    For each parameter tensor, ``entries_per_param`` sampled coordinates
    and one random direction (covering every coordinate at once) are
    checked.  Frozen parameters are skipped.  Runs in inference mode, so
    dropout is off.
    """
    model.net.zero_grad()
    model.loss_and_grad(x, y, train=False)
    grads = {k: v.copy() for k, v in model.gradients().items()}
    frozen = model.frozen_names()
    loss = lambda: model.loss(x, y)  # noqa: E731
    report = GradcheckReport(tolerance=tolerance)
    f0 = loss()
    for name, p in model.parameters().items():
        if name in frozen:
            continue
        g = grads[name]
        m = min(entries_per_param, p.size)
        probes = []
        for i in rng.permutation(p.size)[:m]:
            e = np.zeros(p.size)
            e[i] = 1.0
            probes.append((int(i), e.reshape(p.shape)))
        probes.append(("direction", rng.normal(p.shape)))
        worst = 0.0
        for where, direction in probes:
            analytic = float(np.sum(g * direction))
            err, numeric = _probe(loss, f0, p, direction.astype(p.dtype), analytic, eps, tolerance, report)
            worst = max(worst, err)
            if err > tolerance:
                report.failures.append((name, where, analytic, numeric))
        report.worst[name] = worst
    return report
