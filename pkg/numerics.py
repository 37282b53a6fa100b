"""
Dense float64 matrix primitives and statistical kernels shared by every module.

Matrices are plain numpy arrays of dtype float64 with two dimensions. The
helpers here validate shapes and finiteness so the callers can stay short.
"""


import numpy as np


class NumericError(ValueError):
    """Raised for shape mismatches, invalid parameters and non-finite results."""


def make_rng(seed, *keys):
    """Create a deterministic generator from a seed and optional stream keys.

    Args:
        seed: Non-negative integer seed
        keys: Extra non-negative integers selecting an independent stream
            (for example the epoch number)

    Returns:
        numpy Generator backed by PCG64, identical on every platform
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise NumericError(f"Seeds must be non-negative, got {entropy}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_mat(x, name="matrix"):
    """Return x as a 2-D float64 array, checking that every entry is finite."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise NumericError(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def as_vec(x, name="vector"):
    """Return x as a non-empty 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise NumericError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise NumericError(f"{name} must not be empty")
    return v


def check_finite(x, name="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def matmul(a, b):
    """Matrix product with a shape check; an empty contraction yields zeros."""
    a = as_mat(a, "left operand")
    b = as_mat(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise NumericError(f"Dimension mismatch: {a.shape[0]}x{a.shape[1]} times {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_axis(m, temperature=1.0, axis=-1):
    """Temperature-scaled softmax along one axis with max-subtraction."""
    if not temperature > 0:
        raise NumericError(f"Temperature must be positive, got {temperature}")
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise NumericError("Softmax of an empty array")
    z = m / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_scaled(v, temperature):
    """exp(v_i / t) / sum_j exp(v_j / t) for a 1-D input."""
    v = as_vec(v, "softmax input")
    return softmax_axis(v, temperature, axis=0)


def variance(v):
    """Population variance (divides by n). Constant input gives exactly 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise NumericError(f"Variance needs at least 2 values, got shape {v.shape}")
    if np.all(v == v[0]):
        return 0.0
    return float(np.var(v))


def variance_rows(m):
    """Population variance of each row of a (..., n) array, n >= 2."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] < 2:
        raise NumericError(f"Variance needs at least 2 values per row, got shape {m.shape}")
    var = np.var(m, axis=-1)
    constant = np.all(m == m[..., :1], axis=-1)
    return np.where(constant, 0.0, var)


def l2_normalize(v, eps=1e-12):
    """Scale v to unit L2 norm; the norm is floored at eps.

    Returns:
        Tuple of (normalized vector, norm used as divisor)
    """
    norm = max(float(np.sqrt(np.dot(v, v))), eps)
    return v / norm, norm


def cosine_matrix(x, y):
    """Cosine similarity of every row of x against every row of y."""
    x = as_mat(x, "x")
    y = as_mat(y, "y")
    if x.shape[1] != y.shape[1]:
        raise NumericError(f"Column mismatch: x has {x.shape[1]} columns, y has {y.shape[1]}")
    x_norm = np.linalg.norm(x, axis=1)
    y_norm = np.linalg.norm(y, axis=1)
    for name, norms in (("x", x_norm), ("y", y_norm)):
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise NumericError(f"Zero-norm row {int(zero[0])} in {name}")
    sims = (x / x_norm[:, None]) @ (y / y_norm[:, None]).T
    return np.clip(sims, -1.0, 1.0)


def logsumexp(v):
    """log(sum(exp(v))) computed around the maximum."""
    v = as_vec(v, "logsumexp input")
    top = np.max(v)
    if not np.isfinite(top):
        raise NumericError("logsumexp input contains NaN or Inf")
    return float(top + np.log(np.sum(np.exp(v - top))))
