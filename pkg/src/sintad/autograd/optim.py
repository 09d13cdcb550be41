"""Adam optimiser acting on :class:`Parameter` objects."""

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Apply one bias-corrected Adam update using each parameter's ``grad``.

    Moment accumulators and the step counter live on the parameter itself.
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()
