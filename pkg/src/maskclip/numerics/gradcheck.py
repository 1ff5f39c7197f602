"""Central finite-difference gradient oracle.

Independent of the tape: the numeric side only ever calls ``f`` forward, under
``no_grad``, with one coordinate perturbed at a time.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


class NonSmoothError(ValueError):
    """``f`` has a kink at a probed coordinate; central differences are meaningless there."""


def _eval(f, params):
    with no_grad():
        out = f(params)
    v = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(v):
        raise NonFiniteError("finite_difference_check: f returned a non-finite value")
    return v


def _coords(p, max_coords, rng):
    n = p.data.size
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def finite_difference_check(f, params, eps=1e-5, max_coords=None, seed=0,
                            kink_check=False, report=False):
    """Max relative error between tape gradients and central differences.

    ``f(params)`` must return a scalar Tensor built from ``params`` (leaf
    Tensors with ``requires_grad``). Relative error at a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``. ``max_coords`` caps the coordinates
    sampled per parameter. With ``kink_check`` each coordinate is also probed
    for a first-derivative jump, which raises ``NonSmoothError``.

    With ``report=True`` returns ``(max_err, per_param)`` where ``per_param``
    maps parameter index to its own max error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("every checked parameter needs requires_grad=True")
        p.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("finite_difference_check: f returned a non-finite value")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    per_param = {}
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        g = analytic[k].reshape(-1)
        pmax = 0.0
        for i in _coords(p, max_coords, rng):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval(f, params)
            flat[i] = orig - eps
            fm = _eval(f, params)
            if kink_check:
                flat[i] = orig
                f0 = _eval(f, params)
                flat[i] = orig + 0.5 * eps
                fph = _eval(f, params)
                flat[i] = orig - 0.5 * eps
                fmh = _eval(f, params)
                # one-sided slope gap shrinks with eps for smooth f, stays put at a kink
                gap = ((fp - f0) - (f0 - fm)) / eps
                gap_half = ((fph - f0) - (f0 - fmh)) / (0.5 * eps)
                scale = max(1.0, abs(fp - fm) / (2 * eps))
                if abs(gap) > 1e-3 * scale and abs(gap_half) > 0.75 * abs(gap):
                    flat[i] = orig
                    raise NonSmoothError(f"parameter {k} coordinate {i}: one-sided slopes differ by {gap:.3g}")
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(g[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            pmax = max(pmax, err)
        per_param[k] = pmax
        worst = max(worst, pmax)
    if report:
        return worst, per_param
    return worst
