import numpy as np
import torch


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function at x.

    fn must accept a detached tensor of the same shape and return a python
    float or 0-dim tensor; x should be float64 for the 1e-4 comparisons.
    """
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = float(fn(flat.reshape(x.shape)))
        flat[i] = orig - h
        f_minus = float(fn(flat.reshape(x.shape)))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad.reshape(x.shape)


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    na = float(torch.linalg.vector_norm(a))
    nb = float(torch.linalg.vector_norm(b))
    denom = max(na, nb, 1e-12)
    return float(torch.linalg.vector_norm(a - b)) / denom


def assert_grad_matches_fd(fn, x: torch.Tensor, tol: float = 1e-4,
                           h: float = 1e-5) -> float:
    """Compare autograd's gradient of fn at x against central differences."""
    x = x.detach().clone().requires_grad_(True)
    loss = fn(x)
    loss.backward()
    analytic = x.grad.detach().clone()
    numeric = fd_gradient(lambda t: fn(t).item(), x, h=h)
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def seeded_torch(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g
