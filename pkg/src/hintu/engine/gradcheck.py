"""Central finite-difference check of hand-written backward passes."""

from dataclasses import dataclass

import numpy as np

from hintu.errors import ConfigError, NonFiniteError


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: str

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}  max_rel_err={self.max_rel_err:.3e}  checked={self.n_checked}  worst={self.worst}"


class FunctionModule:
    """Adapts a pair of ``(forward, backward)`` callables to the layer protocol.

    ``forward(*inputs)`` returns ``(out, cache)``; ``backward(dy, cache)``
    returns one gradient per input.
    """

    def __init__(self, forward, backward):
        self._fwd = forward
        self._bwd = backward
        self._cache = None

    def forward(self, *inputs, train=True):
        out, self._cache = self._fwd(*inputs)
        return out

    def backward(self, dy):
        return self._bwd(dy, self._cache)

    def named_parameters(self, prefix=""):
        return iter(())


def _loss_and_grad(out, kind, weights, target):
    if kind == "sum":
        return float(out.sum()), np.ones_like(out)
    if kind == "weighted":
        return float((out * weights).sum()), weights
    if kind == "bce":
        loss = -(target * np.log(out) + (1 - target) * np.log(1 - out)).mean()
        grad = (out - target) / (out * (1 - out)) / out.size
        return float(loss), grad
    raise ConfigError(f"unknown grad-check loss {kind!r}")


def grad_check(module, inputs, h=1e-5, tol=1e-4, loss="weighted", target=None,
               max_checks=10_000, seed=0, train=True, params=None):
    """Compare analytic gradients against central differences.

    ``module`` needs ``forward(*inputs, train=...)``, ``backward(dy)`` and
    ``named_parameters()``.  Every input element and trainable parameter
    element is perturbed, or a seeded random subsample of ``max_checks``
    elements when there are more.  Parameters are cast to float64 for the
    check and restored afterwards.

    rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    if params is None:
        params = list(module.named_parameters())
    all_params = params
    params = [(n, p) for n, p in all_params if p.trainable]

    saved = [(p, p.data.copy()) for _, p in all_params]
    for _, p in all_params:
        p.data = p.data.astype(np.float64)
        if p.trainable:
            p.grad = np.zeros_like(p.data)

    rng = np.random.default_rng(seed)

    def run():
        out = module.forward(*inputs, train=train)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("grad_check: forward produced non-finite values")
        return out

    try:
        out = run()
        weights = rng.standard_normal(out.shape) if loss == "weighted" else None
        if loss == "bce":
            if target is None:
                raise ConfigError("grad_check with loss='bce' needs a target")
            target = np.asarray(target, dtype=np.float64)
        _, dy = _loss_and_grad(out, loss, weights, target)
        dxs = module.backward(dy)
        if not isinstance(dxs, (list, tuple)):
            dxs = [dxs]

        tensors = []  # (label, array being perturbed, analytic gradient)
        for i, (x, dx) in enumerate(zip(inputs, dxs)):
            if dx is not None:
                tensors.append((f"input{i}", x, np.asarray(dx)))
        for name, p in params:
            tensors.append((name, p.data, p.grad.copy()))
        for label, _, g in tensors:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"grad_check: analytic gradient of {label} is non-finite")

        sizes = np.array([t[1].size for t in tensors])
        total = int(sizes.sum())
        if total > max_checks:
            picks = np.sort(rng.choice(total, size=max_checks, replace=False))
        else:
            picks = np.arange(total)
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        worst_err, worst = 0.0, ""
        for flat in picks:
            t = int(np.searchsorted(offsets, flat, side="right") - 1)
            label, arr, g = tensors[t]
            idx = int(flat - offsets[t])
            view = arr.reshape(-1)
            orig = view[idx]
            view[idx] = orig + h
            lp, _ = _loss_and_grad(run(), loss, weights, target)
            view[idx] = orig - h
            lm, _ = _loss_and_grad(run(), loss, weights, target)
            view[idx] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = float(g.reshape(-1)[idx])
            if not np.isfinite(numeric):
                raise NonFiniteError(f"grad_check: non-finite numeric gradient at {label}[{idx}]")
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            if err > worst_err:
                worst_err, worst = err, f"{label}[{idx}]"
    finally:
        for p, data in saved:
            p.data = data
            if p.trainable:
                p.grad = np.zeros_like(data)

    return GradCheckReport(worst_err, worst_err < tol, len(picks), worst)
