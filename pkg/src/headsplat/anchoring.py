"""Triangle-local frames, Gaussian binding, and speaker-specific compensation.

Each Gaussian stores position/rotation/scale relative to a frame attached to
its parent triangle: origin P at a barycentric point, rotation R built from
the first edge and the normal, scale S the mean edge length. Speaker-specific
blendshape banks add per-Gaussian position/rotation/color offsets driven by a
latent pose produced from the pose coefficients by a small perceptron.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateTriangleError
from .rotations import dexp_map_many, exp_map, exp_map_many, rotation_tangent_generators

_DEGENERATE_CROSS = 1e-12


# --------------------------------------------------------------------------
# gaussian set


@dataclass
class GaussianSet:
    """Structure-of-arrays container for triangle-bound Gaussians."""

    u_local: np.ndarray      # (N, 3) local position
    r_local: np.ndarray      # (N, 3, 3) local rotation
    s_local: np.ndarray      # (N, 3) local scale, componentwise > 0
    alpha: np.ndarray        # (N,) opacity in [0, 1]
    kappa0: np.ndarray       # (N, 3) zeroth-order SH coefficients
    kappa_rest: np.ndarray   # (N, R, 3) higher-order SH coefficients
    parent: np.ndarray       # (N,) parent triangle index
    eta_logits: np.ndarray   # (N, 3) softmax logits for barycentric weights

    def __post_init__(self):
        self.u_local = np.asarray(self.u_local, dtype=np.float64)
        self.r_local = np.asarray(self.r_local, dtype=np.float64)
        self.s_local = np.asarray(self.s_local, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.kappa0 = np.asarray(self.kappa0, dtype=np.float64)
        self.kappa_rest = np.asarray(self.kappa_rest, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.eta_logits = np.asarray(self.eta_logits, dtype=np.float64)

    def __len__(self) -> int:
        return self.u_local.shape[0]

    @property
    def sh_degree(self) -> int:
        rest = self.kappa_rest.shape[1]
        return 0 if rest == 0 else int(np.sqrt(rest + 1)) - 1

    def eta(self) -> np.ndarray:
        """Barycentric weights: softmax of the logits, rows on the simplex."""
        z = self.eta_logits - self.eta_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def validate(self, n_triangles: int | None = None):
        n = len(self)
        if self.r_local.shape != (n, 3, 3) or self.s_local.shape != (n, 3):
            raise ValueError("gaussian attribute shape mismatch")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ValueError("alpha must lie in [0, 1]")
        if np.any(self.s_local <= 0):
            raise ValueError("s_local must be componentwise positive")
        if n_triangles is not None and n and (self.parent.min() < 0 or self.parent.max() >= n_triangles):
            raise ValueError("parent triangle index out of range")
        for name in ("u_local", "r_local", "s_local", "alpha", "kappa0", "kappa_rest", "eta_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"gaussian field {name} contains non-finite values")

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.u_local.copy(), self.r_local.copy(), self.s_local.copy(),
            self.alpha.copy(), self.kappa0.copy(), self.kappa_rest.copy(),
            self.parent.copy(), self.eta_logits.copy(),
        )

    def select(self, idx: np.ndarray) -> "GaussianSet":
        return GaussianSet(
            self.u_local[idx], self.r_local[idx], self.s_local[idx],
            self.alpha[idx], self.kappa0[idx], self.kappa_rest[idx],
            self.parent[idx], self.eta_logits[idx],
        )

    @staticmethod
    def concatenate(parts: list) -> "GaussianSet":
        return GaussianSet(
            np.concatenate([p.u_local for p in parts]),
            np.concatenate([p.r_local for p in parts]),
            np.concatenate([p.s_local for p in parts]),
            np.concatenate([p.alpha for p in parts]),
            np.concatenate([p.kappa0 for p in parts]),
            np.concatenate([p.kappa_rest for p in parts]),
            np.concatenate([p.parent for p in parts]),
            np.concatenate([p.eta_logits for p in parts]),
        )


@dataclass
class SpeakerBlendShapes:
    """Latent-pose perceptron weights plus per-Gaussian compensation banks."""

    w1: np.ndarray       # (H, P) hidden layer of the psi -> gamma perceptron
    b1: np.ndarray       # (H,)
    w2: np.ndarray       # (L, H) output layer
    b2: np.ndarray       # (L,)
    w_pos: np.ndarray    # (N, L, 3) position-offset bank
    w_rot: np.ndarray    # (N, L, 3) axis-angle-increment bank
    w_color: np.ndarray  # (N, L, 3) color-offset bank

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "w_pos", "w_rot", "w_color"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def latent_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def n_rows(self) -> int:
        return self.w_pos.shape[0]

    def validate(self, n_gaussians: int | None = None):
        L = self.latent_dim
        H = self.w1.shape[0]
        if self.b1.shape != (H,) or self.w2.shape != (L, H) or self.b2.shape != (L,):
            raise ValueError("perceptron weight shapes inconsistent")
        for name in ("w_pos", "w_rot", "w_color"):
            bank = getattr(self, name)
            if bank.shape[1:] != (L, 3):
                raise ValueError(f"{name} must have shape (N, {L}, 3)")
            if bank.shape[0] != self.n_rows:
                raise ValueError("bank row counts differ")
        if n_gaussians is not None and self.n_rows != n_gaussians:
            raise ValueError(
                f"bank rows ({self.n_rows}) must match gaussian count ({n_gaussians})"
            )
        for name in ("w1", "b1", "w2", "b2", "w_pos", "w_rot", "w_color"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"blendshape field {name} contains non-finite values")

    def copy(self) -> "SpeakerBlendShapes":
        return SpeakerBlendShapes(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.w_pos.copy(), self.w_rot.copy(), self.w_color.copy(),
        )

    def select_rows(self, idx: np.ndarray) -> "SpeakerBlendShapes":
        return replace(self, w_pos=self.w_pos[idx], w_rot=self.w_rot[idx], w_color=self.w_color[idx])

    @staticmethod
    def zeros(n: int, latent_dim: int = 16, psi_dim: int = 6, hidden_dim: int = 16) -> "SpeakerBlendShapes":
        return SpeakerBlendShapes(
            np.zeros((hidden_dim, psi_dim)), np.zeros(hidden_dim),
            np.zeros((latent_dim, hidden_dim)), np.zeros(latent_dim),
            np.zeros((n, latent_dim, 3)), np.zeros((n, latent_dim, 3)), np.zeros((n, latent_dim, 3)),
        )


# --------------------------------------------------------------------------
# triangle frames


def compute_frame(v0, v1, v2, eta, triangle_index: int = -1):
    """Local frame of one triangle: returns (P, R, S).

    P is the barycentric point eta0*v0 + eta1*v1 + eta2*v2; R's columns are
    the unit first edge, the unit normal, and their cross product; S is the
    mean edge length.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    e01, e02, e12 = v1 - v0, v2 - v0, v2 - v1
    c = np.cross(e01, e02)
    cn = np.linalg.norm(c)
    if cn <= _DEGENERATE_CROSS:
        raise DegenerateTriangleError(triangle_index)
    n0 = e01 / np.linalg.norm(e01)
    n1 = c / cn
    n2 = np.cross(n0, n1)
    P = eta[0] * v0 + eta[1] * v1 + eta[2] * v2
    R = np.stack([n0, n1, n2], axis=1)
    S = (np.linalg.norm(e01) + np.linalg.norm(e02) + np.linalg.norm(e12)) / 3.0
    return P, R, S


def compute_triangle_frames(vertices: np.ndarray, triangles: np.ndarray):
    """(R, S) for every triangle, vectorized; P is per-Gaussian (see below).

    Returns (R (F,3,3), S (F,)). Raises DegenerateTriangleError naming the
    first triangle whose edges are collinear.
    """
    tv = vertices[triangles]             # (F, 3, 3)
    e01 = tv[:, 1] - tv[:, 0]
    e02 = tv[:, 2] - tv[:, 0]
    e12 = tv[:, 2] - tv[:, 1]
    c = np.cross(e01, e02)
    cn = np.linalg.norm(c, axis=1)
    bad = np.nonzero(cn <= _DEGENERATE_CROSS)[0]
    if bad.size:
        raise DegenerateTriangleError(int(bad[0]))
    n0 = e01 / np.linalg.norm(e01, axis=1, keepdims=True)
    n1 = c / cn[:, None]
    n2 = np.cross(n0, n1)
    R = np.stack([n0, n1, n2], axis=2)
    S = (np.linalg.norm(e01, axis=1) + np.linalg.norm(e02, axis=1) + np.linalg.norm(e12, axis=1)) / 3.0
    return R, S


def frame_origins(vertices: np.ndarray, triangles: np.ndarray, parent: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-Gaussian frame origin: barycentric point on the parent triangle."""
    tv = vertices[triangles[parent]]     # (N, 3, 3)
    return np.einsum("ni,nic->nc", eta, tv)


def to_global(u_local, r_local, s_local, P, R, S):
    """Local -> global: u = R u_local + P, r = R r_local, s = S * s_local.

    Accepts single attributes (3,), (3,3), (3,) or batches with a leading N
    axis; the frame arguments batch the same way. The local position is not
    scaled by S.
    """
    u_local = np.asarray(u_local, dtype=np.float64)
    if u_local.ndim == 1:
        u = R @ u_local + P
        r = R @ r_local
        s = S * np.asarray(s_local, dtype=np.float64)
        return u, r, s
    u = np.einsum("nij,nj->ni", R, u_local) + P
    r = np.einsum("nij,njk->nik", R, r_local)
    s = np.asarray(S)[:, None] * s_local
    return u, r, s


def from_global(u, r, s, P, R, S):
    """Inverse of to_global for one Gaussian."""
    u_local = R.T @ (np.asarray(u) - P)
    r_local = R.T @ r
    s_local = np.asarray(s) / S
    return u_local, r_local, s_local


# --------------------------------------------------------------------------
# latent pose and compensation


def latent_pose(psi: np.ndarray, bank: SpeakerBlendShapes) -> np.ndarray:
    """Latent pose gamma = w2 @ tanh(w1 @ psi + b1) + b2."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (bank.w1.shape[1],):
        raise ValueError(f"psi dimension {psi.shape} does not match perceptron input {bank.w1.shape[1]}")
    h = np.tanh(bank.w1 @ psi + bank.b1)
    return bank.w2 @ h + bank.b2


def latent_pose_backward(psi: np.ndarray, bank: SpeakerBlendShapes, d_gamma: np.ndarray):
    """VJP of latent_pose: returns (d_w1, d_b1, d_w2, d_b2, d_psi)."""
    pre = bank.w1 @ psi + bank.b1
    h = np.tanh(pre)
    d_w2 = np.outer(d_gamma, h)
    d_b2 = d_gamma.copy()
    d_h = bank.w2.T @ d_gamma
    d_pre = d_h * (1.0 - h * h)
    d_w1 = np.outer(d_pre, psi)
    d_b1 = d_pre.copy()
    d_psi = bank.w1.T @ d_pre
    return d_w1, d_b1, d_w2, d_b2, d_psi


def compensate(gaussians: GaussianSet, gamma: np.ndarray, bank: SpeakerBlendShapes):
    """Apply speaker blendshape offsets in local space.

    Returns (u_comp (N,3), r_comp (N,3,3), kappa0_comp (N,3), rot_increment
    (N,3)). The rotation increment is retained because the backward pass
    needs the exponential-map derivative at that point.
    """
    bank.validate(len(gaussians))
    u_comp = gaussians.u_local + np.einsum("nlc,l->nc", bank.w_pos, gamma)
    w_inc = np.einsum("nlc,l->nc", bank.w_rot, gamma)
    r_comp = np.einsum("nij,njk->nik", gaussians.r_local, exp_map_many(w_inc))
    kappa0_comp = gaussians.kappa0 + np.einsum("nlc,l->nc", bank.w_color, gamma)
    return u_comp, r_comp, kappa0_comp, w_inc


def compensate_backward(
    gaussians: GaussianSet,
    gamma: np.ndarray,
    bank: SpeakerBlendShapes,
    w_inc: np.ndarray,
    d_u_comp: np.ndarray,
    d_r_comp: np.ndarray,
    d_kappa0_comp: np.ndarray,
):
    """VJP of compensate.

    d_r_comp is a full (N,3,3) matrix gradient. Returns a dict with gradients
    for u_local, kappa0, the local-rotation tangent (axis-angle at identity,
    right-multiplied), the three banks, and gamma.
    """
    d_u_local = d_u_comp.copy()
    d_kappa0 = d_kappa0_comp.copy()
    d_w_pos = np.einsum("l,nc->nlc", gamma, d_u_comp)
    d_w_color = np.einsum("l,nc->nlc", gamma, d_kappa0_comp)
    d_gamma = np.einsum("nlc,nc->l", bank.w_pos, d_u_comp)
    d_gamma += np.einsum("nlc,nc->l", bank.w_color, d_kappa0_comp)

    gens = rotation_tangent_generators()
    E = exp_map_many(w_inc)
    # r_comp = r_local @ E; gradient to r_local as a full matrix
    d_r_local = np.einsum("nij,nkj->nik", d_r_comp, E)
    # tangent parameterization r_local = r0 @ exp(delta) at delta = 0
    d_r_tangent = np.einsum("nij,kjl,nil->nk", gaussians.r_local, gens, d_r_local)
    # increment path: d/dw of exp(w) contracted with upstream
    dE = dexp_map_many(w_inc)
    d_E = np.einsum("nji,njk->nik", gaussians.r_local, d_r_comp)
    d_w_inc = np.einsum("nkij,nij->nk", dE, d_E)
    d_w_rot = np.einsum("l,nc->nlc", gamma, d_w_inc)
    d_gamma += np.einsum("nlc,nc->l", bank.w_rot, d_w_inc)
    return {
        "u_local": d_u_local,
        "r_tangent": d_r_tangent,
        "kappa0": d_kappa0,
        "w_pos": d_w_pos,
        "w_rot": d_w_rot,
        "w_color": d_w_color,
        "gamma": d_gamma,
    }


# --------------------------------------------------------------------------
# frame and to_global backward passes


def frames_backward(vertices, triangles, parent, eta, R, S, d_P, d_R, d_S):
    """VJP of (frame_origins, compute_triangle_frames) for bound Gaussians.

    d_P, d_R, d_S are per-Gaussian upstream gradients ((N,3), (N,3,3), (N,)).
    Returns (d_vertices (K,3), d_eta (N,3)) where the vertex gradient
    accumulates over all Gaussians in index order.
    """
    n = parent.shape[0]
    d_vertices = np.zeros_like(vertices)
    d_eta = np.zeros((n, 3))

    tri_of_g = triangles[parent]          # (N, 3) vertex ids
    tv = vertices[tri_of_g]               # (N, 3, 3)

    # origin path: P = sum_i eta_i v_i
    d_eta += np.einsum("nic,nc->ni", tv, d_P)
    dv = np.einsum("ni,nc->nic", eta, d_P)   # (N, 3verts, 3)

    # rotation / scale paths, vectorized over gaussians
    e01 = tv[:, 1] - tv[:, 0]
    e02 = tv[:, 2] - tv[:, 0]
    e12 = tv[:, 2] - tv[:, 1]
    l01 = np.linalg.norm(e01, axis=1, keepdims=True)
    l02 = np.linalg.norm(e02, axis=1, keepdims=True)
    l12 = np.linalg.norm(e12, axis=1, keepdims=True)
    c = np.cross(e01, e02)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    n0 = e01 / l01
    n1 = c / cn
    dn0 = d_R[:, :, 0].copy()
    dn1 = d_R[:, :, 1].copy()
    dn2 = d_R[:, :, 2]
    # n2 = n0 x n1: pull back through the cross product
    dn0 += np.cross(n1, dn2)
    dn1 += np.cross(dn2, n0)
    # normalize pullbacks: d(e/|e|) = (g - n (n.g)) / |e|
    de01 = (dn0 - n0 * np.einsum("nc,nc->n", n0, dn0)[:, None]) / l01
    dc = (dn1 - n1 * np.einsum("nc,nc->n", n1, dn1)[:, None]) / cn
    # c = e01 x e02
    de01 += np.cross(e02, dc)
    de02 = np.cross(dc, e01)
    # scale path
    ds = (d_S / 3.0)[:, None]
    de01 += ds * n0
    de02 += ds * (e02 / l02)
    de12 = ds * (e12 / l12)

    dv[:, 0] += -de01 - de02
    dv[:, 1] += de01 - de12
    dv[:, 2] += de02 + de12
    # deterministic scatter-add in gaussian-major order
    np.add.at(d_vertices, tri_of_g.reshape(-1), dv.reshape(-1, 3))
    return d_vertices, d_eta


def to_global_backward(u_local, r_local, s_local, P, R, S, d_u, d_r, d_s):
    """VJP of the batched to_global.

    Returns gradients (d_u_local, d_r_local_full, d_s_local, d_P, d_R, d_S).
    """
    d_u_local = np.einsum("nji,nj->ni", R, d_u)
    d_P = d_u.copy()
    d_R = np.einsum("nc,nd->ncd", d_u, u_local)
    d_R += np.einsum("nik,njk->nij", d_r, r_local)
    d_r_local = np.einsum("nji,njk->nik", R, d_r)
    d_s_local = np.asarray(S)[:, None] * d_s
    d_S = np.einsum("nc,nc->n", s_local, d_s)
    return d_u_local, d_r_local, d_s_local, d_P, d_R, d_S


def softmax_backward(eta: np.ndarray, d_eta: np.ndarray) -> np.ndarray:
    """VJP of the row-wise softmax producing eta from logits."""
    dot = np.einsum("ni,ni->n", eta, d_eta)
    return eta * (d_eta - dot[:, None])


# --------------------------------------------------------------------------
# density control primitives


def densify_clone(gaussians: GaussianSet, bank: SpeakerBlendShapes, index: int):
    """Duplicate one Gaussian; the child shares parent triangle, eta, and bank row."""
    idx = np.array([index])
    child = gaussians.select(idx)
    new_g = GaussianSet.concatenate([gaussians, child])
    new_bank = replace(
        bank,
        w_pos=np.concatenate([bank.w_pos, bank.w_pos[idx]]),
        w_rot=np.concatenate([bank.w_rot, bank.w_rot[idx]]),
        w_color=np.concatenate([bank.w_color, bank.w_color[idx]]),
    )
    return new_g, new_bank


def densify_split(gaussians: GaussianSet, bank: SpeakerBlendShapes, index: int, rng: np.random.Generator):
    """Replace one Gaussian by two children with s_local / 1.6.

    Child positions are drawn from the parent's local covariance
    r diag(s^2) r^T; children keep the parent triangle, eta, and a copy of
    the parent's bank row.
    """
    keep = np.arange(len(gaussians)) != index
    parent_g = gaussians.select(np.array([index]))
    children = []
    for _ in range(2):
        eps = rng.standard_normal(3)
        offset = parent_g.r_local[0] @ (parent_g.s_local[0] * eps)
        c = parent_g.select(np.array([0]))
        c.u_local = c.u_local + offset[None]
        c.s_local = c.s_local / 1.6
        children.append(c)
    new_g = GaussianSet.concatenate([gaussians.select(np.nonzero(keep)[0])] + children)
    row = np.array([index])
    new_bank = replace(
        bank,
        w_pos=np.concatenate([bank.w_pos[keep], bank.w_pos[row], bank.w_pos[row]]),
        w_rot=np.concatenate([bank.w_rot[keep], bank.w_rot[row], bank.w_rot[row]]),
        w_color=np.concatenate([bank.w_color[keep], bank.w_color[row], bank.w_color[row]]),
    )
    return new_g, new_bank
