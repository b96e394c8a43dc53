"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericsError
from .tensor import Tape, Tensor


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar graph against central
    differences.

    `f` must build a scalar Tensor from `inputs` and be deterministic
    across calls (any sampling inside must come from a freshly seeded
    stream on every call). Returns the max over all input coordinates of

        |analytic - numeric| / max(1, |numeric|).
    """
    inputs = list(inputs)
    for p in inputs:
        p.grad = None
    with Tape() as tape:
        out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check: f returned shape {out.shape}, want scalar")
        if not np.isfinite(out.data).all():
            raise NumericsError("grad_check: non-finite forward output")
        tape.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in inputs
    ]

    max_rel = 0.0
    for k, p in enumerate(inputs):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(f(*inputs).data.reshape(()))
            flat[j] = orig - step
            f_minus = float(f(*inputs).data.reshape(()))
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(
                    f"grad_check: non-finite perturbed output at input {k}, coord {j}"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[k].reshape(-1)[j]
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
