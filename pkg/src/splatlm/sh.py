"""Real spherical-harmonics basis up to degree 3, with analytic direction gradients.

Constants and sign conventions follow the ones commonly used for splat colors,
so degree-1 terms are (-y, z, -x) ordered.
"""

import numpy as np

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

COLOR_OFFSET = 0.5


def num_coefficients(degree: int) -> int:
    """Coefficients per color channel for SH degree ``degree``."""
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    Args:
        dirs: Unit direction vectors, shape (N, 3).
        degree: Maximum SH degree, 0..3.

    Returns:
        Basis values, shape (N, (degree+1)^2).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    k = num_coefficients(degree)
    out = np.empty((n, k))
    out[:, 0] = _C0
    if degree < 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -_C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = -_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = _C2[0] * xy
    out[:, 5] = _C2[1] * yz
    out[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = _C2[3] * xz
    out[:, 8] = _C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = _C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = _C3[1] * xy * z
    out[:, 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis function with respect to the direction vector.

    Args:
        dirs: Unit direction vectors, shape (N, 3).
        degree: Maximum SH degree, 0..3.

    Returns:
        Gradients, shape (N, (degree+1)^2, 3).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    k = num_coefficients(degree)
    g = np.zeros((n, k, 3))
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -_C1
    g[:, 2, 2] = _C1
    g[:, 3, 0] = -_C1
    if degree < 2:
        return g
    g[:, 4, 0] = _C2[0] * y
    g[:, 4, 1] = _C2[0] * x
    g[:, 5, 1] = _C2[1] * z
    g[:, 5, 2] = _C2[1] * y
    g[:, 6, 0] = _C2[2] * (-2.0 * x)
    g[:, 6, 1] = _C2[2] * (-2.0 * y)
    g[:, 6, 2] = _C2[2] * (4.0 * z)
    g[:, 7, 0] = _C2[3] * z
    g[:, 7, 2] = _C2[3] * x
    g[:, 8, 0] = _C2[4] * (2.0 * x)
    g[:, 8, 1] = _C2[4] * (-2.0 * y)
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 9, 0] = _C3[0] * 6.0 * x * y
    g[:, 9, 1] = _C3[0] * (3.0 * xx - 3.0 * yy)
    g[:, 10, 0] = _C3[1] * y * z
    g[:, 10, 1] = _C3[1] * x * z
    g[:, 10, 2] = _C3[1] * x * y
    g[:, 11, 0] = _C3[2] * (-2.0 * x * y)
    g[:, 11, 1] = _C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[:, 11, 2] = _C3[2] * 8.0 * y * z
    g[:, 12, 0] = _C3[3] * (-6.0 * x * z)
    g[:, 12, 1] = _C3[3] * (-6.0 * y * z)
    g[:, 12, 2] = _C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[:, 13, 0] = _C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[:, 13, 1] = _C3[4] * (-2.0 * x * y)
    g[:, 13, 2] = _C3[4] * 8.0 * x * z
    g[:, 14, 0] = _C3[5] * 2.0 * x * z
    g[:, 14, 1] = _C3[5] * (-2.0 * y * z)
    g[:, 14, 2] = _C3[5] * (xx - yy)
    g[:, 15, 0] = _C3[6] * (3.0 * xx - 3.0 * yy)
    g[:, 15, 1] = _C3[6] * (-6.0 * x * y)
    return g


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color from SH coefficients.

    Args:
        coeffs: Per-channel coefficients, shape (3, (L+1)^2).
        view_dir: Unit viewing direction, shape (3,).

    Returns:
        RGB color, shape (3,): ``max(coeffs @ basis + 0.5, 0)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    k = coeffs.shape[1]
    degree = int(round(np.sqrt(k))) - 1
    if num_coefficients(degree) != k:
        raise ValueError(f"coefficient count {k} is not a valid (L+1)^2")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64)[None, :], degree)[0]
    return np.maximum(coeffs @ basis + COLOR_OFFSET, 0.0)
