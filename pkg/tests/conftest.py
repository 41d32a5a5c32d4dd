import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from fedlora.tensor import Tensor


def fd_gradcheck(make_loss, leaf: Tensor, n_coords: int = 10, h: float = 1e-2,
                 rtol: float = 1e-2, seed: int = 0,
                 floor_abs: float = 1e-3, floor_frac: float = 0.02) -> float:
    """Central finite differences against the analytic gradient.

    Samples coordinates whose analytic gradient is materially nonzero (the
    FP32 difference quotient is pure noise where the true derivative
    vanishes) and returns the worst relative error seen.
    """
    for t in (leaf,):
        t.grad = None
    loss = make_loss()
    loss.backward()
    analytic = leaf.grad.reshape(-1).copy()
    floor = max(floor_abs, floor_frac * float(np.abs(analytic).max()))
    eligible = np.flatnonzero(np.abs(analytic) >= floor)
    assert eligible.size >= 1, "no active coordinates to sample"
    rng = np.random.default_rng(seed)
    coords = rng.choice(eligible, size=min(n_coords, eligible.size), replace=False)
    flat = leaf.data.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        lp = float(make_loss().data)
        flat[i] = orig - h
        lm = float(make_loss().data)
        flat[i] = orig
        numeric = (lp - lm) / (2 * h)
        err = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]))
        worst = max(worst, err)
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.4g}"
    return worst
