"""Central finite-difference oracle, independent of the autodiff path."""
import numpy as np

from hotline_ser.numerics import Tensor


def numeric_grad(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d tensor by central differences; fn must return a scalar Tensor."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_grads(fn, tensors, tol: float = 1e-4) -> float:
    """Max relative error between analytic and finite-difference grads.

    Gradients that vanish identically (attention key biases only shift every
    logit of a row) leave differencing noise that grows with |fn|, so each
    tensor's denominator is floored at 1e-3 of the largest gradient in the check.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    pairs = [(t.grad if t.grad is not None else np.zeros_like(t.data), numeric_grad(fn, t)) for t in tensors]
    scale = max(max(np.max(np.abs(a)), np.max(np.abs(n))) for a, n in pairs)
    worst = max(rel_error(a, n, floor=max(1e-6, 1e-3 * scale)) for a, n in pairs)
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e}"
    return worst
