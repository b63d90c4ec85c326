from __future__ import annotations

import numpy as np

from pairattack import autodiff as ad


def finite_diff_grad(f, x0: np.ndarray, coords, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at the given flat coordinates."""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[c] += h
        xm.flat[c] -= h
        out[i] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def analytic_grad(loss_fn, x0: np.ndarray) -> np.ndarray:
    """Gradient of loss_fn(x tensor) -> scalar tensor via a fresh tape."""
    tape = ad.Tape()
    x = ad.Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True, tape=tape)
    loss = loss_fn(x)
    grads = ad.backward(loss)
    return grads[x]


def assert_grad_close(loss_np, loss_t, x0, coords, h=1e-4, rtol=1e-4, atol=1e-8):
    """Check tape gradient against central differences at selected coords."""
    g = analytic_grad(loss_t, x0)
    fd = finite_diff_grad(loss_np, x0, coords, h=h)
    an = np.array([g.flat[c] for c in coords])
    err = np.abs(an - fd)
    bound = rtol * np.maximum(np.abs(an), np.abs(fd)) + atol
    assert np.all(err <= bound), (
        f"gradient mismatch: max err {err.max():.3e} vs bound {bound[err.argmax()]:.3e} "
        f"at coord {coords[int(err.argmax())]}"
    )
