"""Small 3x3 tensor algebra.

Every function accepts either a single ``(3, 3)`` array or a stack with
arbitrary leading batch dimensions ``(..., 3, 3)``.  Voigt vectors use the
ordering (11, 22, 33, 12, 13, 23) and store raw tensor components (no
engineering-shear doubling).
"""

from __future__ import annotations

import numpy as np

VOIGT_PAIRS: tuple[tuple[int, int], ...] = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
_ROWS = np.array([p[0] for p in VOIGT_PAIRS])
_COLS = np.array([p[1] for p in VOIGT_PAIRS])

SYMMETRY_TOL = 1e-10

IDENTITY = np.eye(3)


def transpose(t: np.ndarray) -> np.ndarray:
    return np.swapaxes(t, -1, -2)


def sym(t: np.ndarray) -> np.ndarray:
    """Symmetric part; exactly symmetric in floating point."""
    return 0.5 * (t + transpose(t))


def trace(t: np.ndarray) -> np.ndarray:
    return t[..., 0, 0] + t[..., 1, 1] + t[..., 2, 2]


def fnorm(t: np.ndarray) -> np.ndarray:
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(t * t, axis=(-2, -1)))


def det(t: np.ndarray) -> np.ndarray:
    return np.linalg.det(t)


def inv(t: np.ndarray) -> np.ndarray:
    return np.linalg.inv(t)


def spherical(s: np.ndarray) -> np.ndarray:
    """Scalar (or stack of scalars) times the identity."""
    s = np.asarray(s, dtype=float)
    return s[..., None, None] * IDENTITY


def dev(t: np.ndarray) -> np.ndarray:
    return t - spherical(trace(t) / 3.0)


def dev_and_norm(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deviatoric part of ``t`` and its Frobenius norm."""
    d = dev(np.asarray(t, dtype=float))
    return d, fnorm(d)


def polar_rotation(f: np.ndarray) -> np.ndarray:
    """Rotation ``R`` of the right polar decomposition ``F = R U``.

    ``U`` is built from the eigendecomposition of ``F^T F``; no iteration.

    Raises:
        ValueError: if any ``det(F) <= 0`` (singular or reflecting input).
    """
    f = np.asarray(f, dtype=float)
    if np.any(det(f) <= 0.0):
        raise ValueError("polar_rotation requires det(F) > 0")
    w, v = np.linalg.eigh(sym(f.swapaxes(-1, -2) @ f))
    u_inv = (v / np.sqrt(w)[..., None, :]) @ transpose(v)
    return f @ u_inv


def green_strain(f: np.ndarray) -> np.ndarray:
    """Green-Lagrange strain ``E = (F^T F - I) / 2``."""
    f = np.asarray(f, dtype=float)
    return 0.5 * (sym(transpose(f) @ f) - IDENTITY)


def left_cauchy_green(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return sym(f @ transpose(f))


def voigt_pack(t: np.ndarray) -> np.ndarray:
    """Pack symmetric tensors into Voigt6 vectors.

    Raises:
        ValueError: if the input is not symmetric to within 1e-10 (scaled by
            the largest component when that exceeds one).
    """
    t = np.asarray(t, dtype=float)
    scale = np.maximum(1.0, np.max(np.abs(t), axis=(-2, -1)))
    asym = np.max(np.abs(t - transpose(t)), axis=(-2, -1))
    if np.any(asym > SYMMETRY_TOL * scale):
        raise ValueError(f"voigt_pack: asymmetric input (max |t - t^T| = {np.max(asym):.3e})")
    return t[..., _ROWS, _COLS]


def voigt_unpack(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 6:
        raise ValueError(f"voigt_unpack: expected trailing dimension 6, got {v.shape}")
    t = np.empty(v.shape[:-1] + (3, 3))
    t[..., _ROWS, _COLS] = v
    t[..., _COLS, _ROWS] = v
    return t


def unit_basis_sym(i: int, j: int) -> np.ndarray:
    """``(e_i (x) e_j + e_j (x) e_i) / 2``."""
    e = np.zeros((3, 3))
    e[i, j] += 0.5
    e[j, i] += 0.5
    return e
