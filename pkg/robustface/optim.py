"""SGD with heavy-ball momentum over EncoderParams."""

from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import OptimizerError, ShapeError
from .model import EncoderParams
from .tensor import Gradients

Velocity = Dict[str, np.ndarray]


def sgd_step(
    params: EncoderParams,
    grads: Gradients,
    lr: float,
    momentum: float,
    velocity: Optional[Mapping[str, np.ndarray]] = None,
    names: Optional[Iterable[str]] = None,
) -> Tuple[EncoderParams, Velocity]:
    """
    ``v <- momentum * v + g``; ``p <- p - lr * v`` for each named parameter.

    Returns the new parameters and velocity; the inputs are not modified.
    Parameters outside ``names`` (default: all) keep their values and velocity.
    """
    if lr < 0:
        raise OptimizerError("*", f"learning rate must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise OptimizerError("*", f"momentum must lie in [0, 1), got {momentum}")
    velocity = dict(velocity or {})
    lr32, m32 = np.float32(lr), np.float32(momentum)
    updates = {}
    for name in (names if names is not None else params.names()):
        tensor = params[name]
        g = np.asarray(grads[tensor], dtype=np.float32)
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient of '{name}'", g.shape, tensor.shape)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(name)
        v = velocity.get(name)
        v = g if v is None else m32 * v + g
        velocity[name] = v.astype(np.float32)
        updates[name] = (tensor.data - lr32 * velocity[name]).astype(np.float32)
    return params.replace(updates), velocity
