"""Axis-angle rotation helpers (exponential map and its derivatives).

All rotations are 3x3 row-major matrices acting on column vectors. Axis-angle
vectors are in radians; the zero vector maps exactly to the identity. The
batched and single-vector entry points share one formula so results agree
bitwise.
"""

import numpy as np

_SMALL_THETA2 = 1e-8  # below this theta^2, Taylor coefficients take over


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix [w]x such that skew(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def skew_many(w: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (n, 3) -> (n, 3, 3)."""
    n = w.shape[0]
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -w[:, 2]
    K[:, 0, 2] = w[:, 1]
    K[:, 1, 0] = w[:, 2]
    K[:, 1, 2] = -w[:, 0]
    K[:, 2, 0] = -w[:, 1]
    K[:, 2, 1] = w[:, 0]
    return K


def _sin_cos_coeffs(theta2: np.ndarray):
    """Coefficients (a, b) with R = I + a [w]x + b [w]x^2.

    a = sin(theta)/theta, b = (1 - cos(theta))/theta^2, with second-order
    Taylor expansions taking over for tiny angles (exact identity at zero).
    """
    small = theta2 < _SMALL_THETA2
    safe = np.where(small, 1.0, theta2)
    theta = np.sqrt(safe)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe)
    return a, b


def exp_map_many(w: np.ndarray) -> np.ndarray:
    """Batched Rodrigues map, (n, 3) -> (n, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    K = skew_many(w)
    K2 = np.einsum("nij,njk->nik", K, K)
    a, b = _sin_cos_coeffs(np.einsum("nc,nc->n", w, w))
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * K2


def exp_map(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for one axis-angle vector; exact identity at w=0."""
    return exp_map_many(np.asarray(w, dtype=np.float64)[None])[0]


def dexp_map_many(w: np.ndarray) -> np.ndarray:
    """Batched derivative of the Rodrigues map: (n, 3, 3, 3), [:, k] = dR/dw_k.

    Closed form of Gallego & Yezzi away from zero, second-order expansion
    near zero (where dR/dw_k -> skew(e_k)).
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    theta2 = np.einsum("nc,nc->n", w, w)
    small = theta2 < _SMALL_THETA2
    R = exp_map_many(w)
    K = skew_many(w)
    out = np.empty((n, 3, 3, 3))
    eye = np.eye(3)
    safe_t2 = np.where(small, 1.0, theta2)
    ImR = eye[None] - R
    for k in range(3):
        ek = eye[k]
        # large-angle branch
        v = w[:, k][:, None] * w + np.cross(w, ImR[:, :, k])
        large = np.einsum("nij,njk->nik", skew_many(v / safe_t2[:, None]), R)
        # small-angle branch: skew(e_k) + 0.5 (E_k K + K E_k)
        Ek = skew(ek)
        small_branch = Ek[None] + 0.5 * (np.einsum("ij,njk->nik", Ek, K) + np.einsum("nij,jk->nik", K, Ek))
        out[:, k] = np.where(small[:, None, None], small_branch, large)
    return out


def dexp_map(w: np.ndarray) -> np.ndarray:
    """Derivative of the Rodrigues map for one vector: (3, 3, 3)."""
    return dexp_map_many(np.asarray(w, dtype=np.float64)[None])[0]


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project one or many 3x3 matrices onto SO(3) via the polar factor."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    Rb = R[None] if single else R
    U, _, Vt = np.linalg.svd(Rb)
    det = np.linalg.det(np.einsum("nij,njk->nik", U, Vt))
    D = np.repeat(np.eye(3)[None], Rb.shape[0], axis=0)
    D[:, 2, 2] = np.sign(det)
    out = np.einsum("nij,njk,nkl->nil", U, D, Vt)
    return out[0] if single else out


def rotation_tangent_generators() -> np.ndarray:
    """The three so(3) generators G_k = skew(e_k), shape (3, 3, 3)."""
    return np.stack([skew(np.eye(3)[k]) for k in range(3)])
