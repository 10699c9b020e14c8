"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from memroute.tensor.core import Tensor, backward, no_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numerical_grad(f: Callable[[], Tensor], arr: np.ndarray, h: float = 1e-5,
                   coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``arr``, which is perturbed in place.

    Only the flat positions in ``coords`` are evaluated (all when ``None``); the
    remaining entries of the returned array are zero.
    """
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    if coords is None:
        coords = np.arange(flat.size)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for scalar ``f(x)``.

    The error at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must be deterministic; stochastic pieces need frozen noise.
    """
    if x.dtype != "f64":
        raise TypeError("grad_check requires an f64 input; finite differences are useless in f32")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    probe = Tensor(x.data.copy())
    numeric = numerical_grad(lambda: f(probe), probe.data, h)
    return float(_rel_err(analytic, numeric).max(initial=0.0))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      h: float = 1e-5, max_coords: Optional[int] = None,
                      seed: int = 0) -> dict:
    """Check every named parameter of a closure-style loss.

    ``loss_fn`` reads the parameters it closes over; their ``.data`` arrays are
    perturbed in place. At most ``max_coords`` randomly chosen coordinates per
    parameter are differenced. Returns ``{name: max relative error}``.
    """
    for name, p in params.items():
        if p.dtype != "f64":
            raise TypeError(f"parameter {name} is {p.dtype}; grad checks need f64")
        p.grad = None
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    result = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = numerical_grad(loss_fn, p.data, h, coords)
        if coords is None:
            err = _rel_err(analytic, numeric)
        else:
            err = _rel_err(analytic.reshape(-1)[coords], numeric.reshape(-1)[coords])
        result[name] = float(err.max(initial=0.0))
        p.grad = None
    return result
