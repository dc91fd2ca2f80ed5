from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Parameter, Tape, Tensor, backward


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Union[np.ndarray, Parameter]],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` receives one Tensor per input and must return a scalar Tensor.
    Arrays are wrapped as float64 Parameters; Parameters are used as given
    (the caller controls their precision). With ``max_coords`` only a random
    subset of coordinates per input is perturbed.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    params = [
        p if isinstance(p, Parameter) else Parameter(np.array(p, dtype=np.float64), name=f"in{k}")
        for k, p in enumerate(inputs)
    ]
    for p in params:
        p.zero_grad()
    tensors = [p.value for p in params]

    with Tape():
        loss = fn(*tensors)
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> float:
        return float(fn(*tensors).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            worst = max(worst, err)
    return worst
