"""Shared test utilities: the central finite-difference oracle and the
relative-error criterion used by every gradient check."""

import numpy as np

from delibmt.tensor import Tensor

FD_H = 1e-5
REL_TOL = 1e-4


def finite_diff_grad(loss_fn, arr: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every element.

    loss_fn receives the perturbed array and must return a python float;
    run under float64 for meaningful comparisons.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(arr)
        flat[i] = orig - h
        down = loss_fn(arr)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build_loss, arrays: dict[str, np.ndarray],
                    tol: float = REL_TOL) -> None:
    """Assert analytic gradients match central finite differences.

    build_loss(tensors: dict[str, Tensor]) -> scalar Tensor. Each named
    array becomes a requires_grad tensor; the FD oracle re-evaluates the
    loss under elementwise perturbations of that same array.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"

        def loss_at(perturbed, _name=name):
            probe = {
                k: Tensor(perturbed.copy() if k == _name else v.data.copy())
                for k, v in tensors.items()
            }
            return build_loss(probe).item()

        fd = finite_diff_grad(loss_at, t.data.copy())
        err = rel_err(t.grad, fd)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"


def directional_grad_check(build_loss, arrays: dict[str, np.ndarray],
                           rng: np.random.Generator, directions: int = 8,
                           tol: float = REL_TOL, h: float = FD_H) -> None:
    """Directional finite differences for big composites: compares g.u
    against (L(x+hu) - L(x-hu)) / 2h along random unit directions."""
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for _ in range(directions):
        units = {}
        for k, v in arrays.items():
            u = rng.normal(size=v.shape)
            u /= np.linalg.norm(u.reshape(-1)) + 1e-12
            units[k] = u
        analytic = sum(
            float(np.sum(tensors[k].grad * units[k])) for k in arrays
        )

        def loss_shift(sign):
            probe = {
                k: Tensor(tensors[k].data + sign * h * units[k])
                for k in arrays
            }
            return build_loss(probe).item()

        numeric = (loss_shift(+1.0) - loss_shift(-1.0)) / (2.0 * h)
        err = rel_err(np.asarray([analytic]), np.asarray([numeric]))
        assert err < tol, f"directional gradient mismatch: rel err {err:.3e}"
