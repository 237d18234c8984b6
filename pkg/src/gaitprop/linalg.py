"""Dense linear-algebra kernel.

Tensors are plain row-major numpy arrays. 64-bit floats are the default;
``precision=32`` selects float32 for speed experiments.
"""

import numpy as np

from .errors import InvalidDimensionError, NumericalError, ShapeError, SingularMatrixError

#: Condition-number estimate above which a matrix is treated as singular.
CONDITION_CAP = 1e12


def resolve_dtype(precision=64):
    if precision in (64, "64", np.float64):
        return np.float64
    if precision in (32, "32", np.float32):
        return np.float32
    raise ValueError(f"unsupported precision {precision!r}; expected 32 or 64")


def as_tensor(values, dtype=np.float64):
    """Return a C-contiguous copy of ``values`` with the requested dtype."""
    return np.array(values, dtype=dtype, order="C", copy=True)


def check_finite(t, what="tensor", layer=None):
    if not np.all(np.isfinite(t)):
        raise NumericalError(f"non-finite values in {what}", layer=layer)
    return t


def orthogonal_init(n, seed, dtype=np.float64):
    """Seeded random orthogonal ``n x n`` matrix.

    The orthogonal factor of a QR decomposition of a standard-normal matrix,
    with column signs flipped so that the triangular factor has a positive
    diagonal (which makes the factorization, and hence the output, unique).
    """
    if int(n) != n or n < 1:
        raise InvalidDimensionError(f"orthogonal_init needs n >= 1, got {n}")
    n = int(n)
    a = np.random.default_rng(seed).standard_normal((n, n))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    return np.ascontiguousarray(q, dtype=dtype)


def condition_estimate(m, m_inv):
    """1-norm condition number from a matrix and its computed inverse."""
    return np.linalg.norm(m, 1) * np.linalg.norm(m_inv, 1)


def invert_square(m, layer=None, cap=CONDITION_CAP):
    """Exact inverse of a square matrix via LU with partial pivoting.

    Raises :class:`SingularMatrixError` when the matrix is singular or its
    condition estimate exceeds ``cap``. ``layer`` is only used to label the
    error message.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"invert_square needs a square matrix, got shape {m.shape}")
    if m.shape[0] < 1:
        raise InvalidDimensionError("empty matrix")
    check_finite(m, "matrix to invert", layer=layer)
    # LAPACK getrf/getri in float64 regardless of the storage precision.
    work = m.astype(np.float64, copy=True)
    try:
        inv = np.linalg.inv(work)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is singular ({exc})", layer=layer) from None
    if not np.all(np.isfinite(inv)):
        raise SingularMatrixError("matrix is singular (non-finite inverse)", layer=layer)
    cond = condition_estimate(work, inv)
    if not np.isfinite(cond) or cond > cap:
        raise SingularMatrixError(
            f"matrix is near-singular (condition estimate {cond:.3e} > {cap:.0e})",
            layer=layer,
        )
    return inv.astype(m.dtype, copy=False)


def l2_norm(v):
    """Euclidean norm of a tensor of any shape, as a Python float."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.sum(v * v)))
