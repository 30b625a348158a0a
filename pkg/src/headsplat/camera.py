"""Pinhole / orthographic camera and Gaussian projection to screen space.

Projection follows the local-affine (EWA-style) approximation: the 3D
covariance r diag(s^2) r^T is pushed through the Jacobian of the projection
at the Gaussian mean, and a small isotropic regularizer keeps the 2D
covariance invertible. Pixel (i, j) has center coordinates (j + 0.5, i + 0.5).
"""

from dataclasses import dataclass, field

import numpy as np

COV2D_REG = 0.3       # pixels^2, added to both cov2d diagonal entries
NEAR_PLANE = 0.01     # camera-space z below which Gaussians are culled


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))   # world->camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mode: str = "perspective"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.mode not in ("perspective", "orthographic"):
            raise ValueError(f"unknown camera mode {self.mode!r}")

    @staticmethod
    def default(width: int, height: int, distance: float = 3.0) -> "Camera":
        """Camera on the +z axis looking at the origin down -z.

        The world-to-camera rotation flips x and z so that camera z increases
        away from the eye and the image stays right-handed.
        """
        rot = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
        trans = -rot @ np.array([0.0, 0.0, distance])
        return Camera(
            width=width, height=height,
            fx=float(width), fy=float(width),
            cx=width / 2.0, cy=height / 2.0,
            rotation=rot, translation=trans,
        )

    def center_world(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ProjectedSplats:
    """Screen-space Gaussians (only entries where visible is True are valid)."""

    mean2d: np.ndarray     # (N, 2) pixel coordinates
    cov2d: np.ndarray      # (N, 2, 2)
    conic: np.ndarray      # (N, 2, 2) inverse of cov2d
    depth: np.ndarray      # (N,) camera-space z
    visible: np.ndarray    # (N,) bool, in front of the near plane
    t_cam: np.ndarray      # (N, 3) camera-space positions (saved for backward)


def project(u: np.ndarray, r: np.ndarray, s: np.ndarray, camera: Camera) -> ProjectedSplats:
    """Project global Gaussians (u, r, s) into screen space.

    perspective: mean = (fx x/z + cx, fy y/z + cy), cov2d = J W Sigma W^T J^T
    with J the projection Jacobian at the mean. orthographic: J has constant
    rows (fx, 0, 0), (0, fy, 0). Both add COV2D_REG * I.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    n = u.shape[0]
    r = np.asarray(r, dtype=np.float64).reshape(n, 3, 3)
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))

    W = camera.rotation
    t = np.einsum("ij,nj->ni", W, u) + camera.translation
    visible = t[:, 2] > NEAR_PLANE

    # 3D covariance in world space, then rotated into camera space via J W
    sigma = np.einsum("nij,nj,nkj->nik", r, s * s, r)

    mean2d = np.zeros((n, 2))
    J = np.zeros((n, 2, 3))
    if camera.mode == "perspective":
        z = np.where(visible, t[:, 2], 1.0)  # placeholder z for culled rows
        mean2d[:, 0] = camera.fx * t[:, 0] / z + camera.cx
        mean2d[:, 1] = camera.fy * t[:, 1] / z + camera.cy
        J[:, 0, 0] = camera.fx / z
        J[:, 0, 2] = -camera.fx * t[:, 0] / (z * z)
        J[:, 1, 1] = camera.fy / z
        J[:, 1, 2] = -camera.fy * t[:, 1] / (z * z)
    else:
        mean2d[:, 0] = camera.fx * t[:, 0] + camera.cx
        mean2d[:, 1] = camera.fy * t[:, 1] + camera.cy
        J[:, 0, 0] = camera.fx
        J[:, 1, 1] = camera.fy

    M = np.einsum("nij,jk->nik", J, W)           # (N, 2, 3)
    cov2d = np.einsum("nij,njk,nlk->nil", M, sigma, M)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det

    return ProjectedSplats(mean2d=mean2d, cov2d=cov2d, conic=conic,
                           depth=t[:, 2].copy(), visible=visible, t_cam=t)


def project_backward(
    u: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    camera: Camera,
    splats: ProjectedSplats,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
):
    """VJP of project (culled rows receive zero gradients).

    Returns (d_u, d_r_full, d_s): gradients w.r.t. global position, the full
    3x3 rotation, and global scale.
    """
    n = u.shape[0]
    W = camera.rotation
    t = splats.t_cam
    vis = splats.visible

    sigma_d = np.einsum("nij,nj,nkj->nik", r, s * s, r)

    if camera.mode == "perspective":
        z = np.where(vis, t[:, 2], 1.0)
        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = camera.fx / z
        J[:, 0, 2] = -camera.fx * t[:, 0] / (z * z)
        J[:, 1, 1] = camera.fy / z
        J[:, 1, 2] = -camera.fy * t[:, 1] / (z * z)
    else:
        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = camera.fx
        J[:, 1, 1] = camera.fy

    M = np.einsum("nij,jk->nik", J, W)

    d_mean2d = d_mean2d * vis[:, None]
    d_cov2d = d_cov2d * vis[:, None, None]

    # cov2d = M Sigma M^T (+ const): dSigma = M^T dC M ; dM = (dC + dC^T) M Sigma
    d_sigma = np.einsum("nji,njk,nkl->nil", M, d_cov2d, M)
    dC_sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_M = np.einsum("nij,njk,nkl->nil", dC_sym, M, sigma_d)
    d_J = np.einsum("nik,jk->nij", d_M, W)

    # Sigma = sum_k s_k^2 r_k r_k^T
    dS_sym = 0.5 * (d_sigma + np.swapaxes(d_sigma, 1, 2))
    d_r = 2.0 * np.einsum("nij,njk,nk->nik", dS_sym, r, s * s)
    d_s = 2.0 * s * np.einsum("nik,nij,njk->nk", r, dS_sym, r)

    # mean2d path and J(t) path back to camera-space position t
    d_t = np.zeros((n, 3))
    if camera.mode == "perspective":
        z = np.where(vis, t[:, 2], 1.0)
        d_t += np.einsum("nij,ni->nj", J, d_mean2d)  # J is exactly d(mean)/dt
        z2 = z * z
        z3 = z2 * z
        d_t[:, 0] += -camera.fx / z2 * d_J[:, 0, 2]
        d_t[:, 1] += -camera.fy / z2 * d_J[:, 1, 2]
        d_t[:, 2] += (
            -camera.fx / z2 * d_J[:, 0, 0]
            - camera.fy / z2 * d_J[:, 1, 1]
            + 2.0 * camera.fx * t[:, 0] / z3 * d_J[:, 0, 2]
            + 2.0 * camera.fy * t[:, 1] / z3 * d_J[:, 1, 2]
        )
    else:
        d_t += np.einsum("nij,ni->nj", J, d_mean2d)

    d_u = np.einsum("ji,nj->ni", W, d_t)
    return d_u * vis[:, None], d_r * vis[:, None, None], d_s * vis[:, None]
