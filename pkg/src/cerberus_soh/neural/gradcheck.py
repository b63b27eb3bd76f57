"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericError
from .autodiff import Tensor


def grad_check(
    closure: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and numerical gradients.

    ``closure`` rebuilds the scalar loss from the current parameter values.
    With ``max_coords`` set and exceeded, a seeded random subsample of that
    many coordinates is checked (at least one per tensor when possible).
    Relative error is ``|ga - gn| / max(|ga|, |gn|, floor)``. The floor sits
    above central-difference roundoff (about eps * |loss| / h, ~1e-11 for
    O(1) losses), so coordinates whose true gradient is smaller than that
    noise are judged on absolute agreement instead of amplified noise.
    """
    for p in params.values():
        p.zero_grad()
    loss = closure()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss at the evaluation point")
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        names = list(params)
        picked = {(k, int(rng.integers(params[k].data.size))) for k in names[:max_coords]}
        rest = [c for c in coords if c not in picked]
        extra = rng.choice(len(rest), size=max_coords - len(picked), replace=False)
        coords = sorted(picked | {rest[j] for j in extra}, key=lambda c: (names.index(c[0]), c[1]))

    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = closure().item()
        flat[i] = orig - h
        down = closure().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        ga = float(analytic[name].reshape(-1)[i])
        if not (np.isfinite(numeric) and np.isfinite(ga)):
            raise NumericError(f"non-finite gradient at {name}[{i}]")
        rel = abs(ga - numeric) / max(abs(ga), abs(numeric), floor)
        worst = max(worst, rel)
    return worst
