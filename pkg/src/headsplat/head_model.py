"""Parametric head mesh: blendshapes, joint skinning, and rigid attachments.

The deformation pipeline is

    v = attachment_sync(lbs(v_base + blend_shapes(params), joint_transforms(psi)))

where blendshapes are a plain linear basis, joints form a forward-kinematics
chain of axis-angle rotations about rest joint positions, and attachment
groups (teeth / inner mouth) rigidly follow the mean displacement of their
source lip vertices.
"""

from dataclasses import dataclass, field

import numpy as np

from .rotations import dexp_map, exp_map

# semantic category ids used by triangle_category
CATEGORY_FACE = 0
CATEGORY_LIPS = 1
CATEGORY_TEETH = 2
CATEGORY_OTHER = 3


@dataclass
class MotionParams:
    """Per-frame parameter vectors: shape, expression, and per-joint pose."""

    beta: np.ndarray      # (n_beta,) shape coefficients
    epsilon: np.ndarray   # (n_eps,) expression coefficients
    psi: np.ndarray       # (3 * n_joints,) axis-angle per joint, radians

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        for name in ("beta", "epsilon", "psi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"MotionParams.{name} contains non-finite values")

    @property
    def stacked(self) -> np.ndarray:
        """Concatenated (beta, epsilon, psi) vector."""
        return np.concatenate([self.beta, self.epsilon, self.psi])

    @staticmethod
    def zeros(n_beta: int, n_eps: int, n_joints: int) -> "MotionParams":
        return MotionParams(np.zeros(n_beta), np.zeros(n_eps), np.zeros(3 * n_joints))


@dataclass
class HeadModel:
    """Canonical mesh plus everything needed to deform it."""

    v_base: np.ndarray             # (K, 3) canonical vertex positions
    triangles: np.ndarray          # (F, 3) vertex indices
    bs_basis: np.ndarray           # (P, K, 3) offset field per parameter
    skin_weights: np.ndarray       # (K, J) rows sum to 1, nonnegative
    joint_rest: np.ndarray         # (J, 3) rest joint positions
    joint_parents: np.ndarray      # (J,) parent index, -1 for root
    triangle_category: np.ndarray  # (F,) semantic category id per triangle
    attachment_groups: list = field(default_factory=list)  # [(attached_idx, source_idx)]
    n_beta: int = 0
    n_eps: int = 0

    def __post_init__(self):
        self.v_base = np.asarray(self.v_base, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.bs_basis = np.asarray(self.bs_basis, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joint_rest = np.asarray(self.joint_rest, dtype=np.float64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.triangle_category = np.asarray(self.triangle_category, dtype=np.int64)
        self.attachment_groups = [
            (np.asarray(a, dtype=np.int64), np.asarray(s, dtype=np.int64))
            for a, s in self.attachment_groups
        ]

    @property
    def n_vertices(self) -> int:
        return self.v_base.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_rest.shape[0]

    @property
    def n_pose_corrective(self) -> int:
        """Number of pose-corrective basis columns (0 if the asset has none)."""
        return self.bs_basis.shape[0] - self.n_beta - self.n_eps

    def validate(self):
        """Raise ValueError on any violated structural invariant."""
        K, J = self.n_vertices, self.n_joints
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= K):
            raise ValueError("triangle index out of vertex range")
        if self.skin_weights.shape != (K, J):
            raise ValueError("skin_weights shape mismatch")
        if np.any(self.skin_weights < 0):
            raise ValueError("skin weights must be nonnegative")
        if np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skin weight rows must sum to 1")
        if self.bs_basis.shape[1:] != (K, 3):
            raise ValueError("bs_basis vertex dimension mismatch")
        if self.n_pose_corrective not in (0, 3 * J):
            raise ValueError("bs_basis must cover beta+eps, optionally plus 3*J pose correctives")
        if self.triangle_category.shape != (self.n_triangles,):
            raise ValueError("triangle_category length mismatch")
        if self.joint_parents.shape != (J,):
            raise ValueError("joint_parents length mismatch")
        for j in range(J):
            p = self.joint_parents[j]
            if p >= j or p < -1:
                raise ValueError("joints must be topologically ordered with parent < child")
        lip_verts = self.lip_vertex_indices()
        for attached, source in self.attachment_groups:
            if source.size == 0:
                raise ValueError("attachment group has empty source set")
            if attached.size and (attached.min() < 0 or attached.max() >= K):
                raise ValueError("attachment index out of range")
            if source.min() < 0 or source.max() >= K:
                raise ValueError("attachment source index out of range")
            if not np.all(np.isin(source, lip_verts)):
                raise ValueError("attachment sources must lie in the lip region")

    def lip_vertex_indices(self) -> np.ndarray:
        """Sorted indices of vertices touched by lip-category triangles."""
        lips = self.triangles[self.triangle_category == CATEGORY_LIPS]
        return np.unique(lips)

    def param_dim(self) -> int:
        """Total trainable parameter dimension (beta + eps + 3*J)."""
        return self.n_beta + self.n_eps + 3 * self.n_joints


def blend_shapes(params: MotionParams, model: HeadModel) -> np.ndarray:
    """Linear vertex offsets: sum_k p_k * basis_k, shape (K, 3).

    Uses beta and epsilon always, plus psi when the asset carries
    pose-corrective columns.
    """
    p = np.concatenate([params.beta, params.epsilon])
    if model.n_pose_corrective:
        p = np.concatenate([p, params.psi])
    if p.shape[0] != model.bs_basis.shape[0]:
        raise ValueError(
            f"parameter dimension {p.shape[0]} does not match "
            f"basis count {model.bs_basis.shape[0]}"
        )
    return np.einsum("p,pkc->kc", p, model.bs_basis)


def joint_transforms(psi: np.ndarray, model: HeadModel):
    """Forward kinematics; returns world transforms (A, b) relative to rest.

    A is (J, 3, 3), b is (J, 3): joint j maps a point x to A[j] @ x + b[j].
    With psi == 0 every transform is exactly the identity.
    """
    psi = np.asarray(psi, dtype=np.float64)
    J = model.n_joints
    if psi.shape != (3 * J,):
        raise ValueError(f"psi must have 3 entries per joint, got shape {psi.shape}")
    A = np.empty((J, 3, 3))
    b = np.empty((J, 3))
    for j in range(J):
        R = exp_map(psi[3 * j : 3 * j + 3])
        g = model.joint_rest[j]
        # local: x -> R (x - g) + g
        Al, bl = R, g - R @ g
        p = model.joint_parents[j]
        if p < 0:
            A[j], b[j] = Al, bl
        else:
            A[j] = A[p] @ Al
            b[j] = A[p] @ bl + b[p]
    return A, b


def lbs(vertices: np.ndarray, transforms, skin_weights: np.ndarray) -> np.ndarray:
    """Linear blend skinning in displacement form.

    v' = v + sum_j w_j ((A_j v + b_j) - v), which returns the input bitwise
    when every transform is the identity.
    """
    A, b = transforms
    K = vertices.shape[0]
    if skin_weights.shape[0] != K or skin_weights.shape[1] != A.shape[0]:
        raise ValueError("skin weight matrix does not match vertices/joints")
    moved = np.einsum("jab,kb->jka", A, vertices) + b[:, None, :]  # (J, K, 3)
    disp = moved - vertices[None, :, :]
    return vertices + np.einsum("kj,jkc->kc", skin_weights, disp)


def attachment_sync(model: HeadModel, vertices: np.ndarray) -> np.ndarray:
    """Move attached vertices by the mean displacement of their lip sources.

    All group displacements are measured against the canonical mesh and read
    from the same input snapshot, so groups never feed each other.
    """
    out = vertices.copy()
    for attached, source in model.attachment_groups:
        if source.size == 0:
            raise ValueError("attachment group has empty source set")
        disp = (vertices[source] - model.v_base[source]).mean(axis=0)
        out[attached] = model.v_base[attached] + disp
    return out


def deform(model: HeadModel, params: MotionParams) -> np.ndarray:
    """Full deformation: blendshapes, then skinning, then attachment sync."""
    x = model.v_base + blend_shapes(params, model)
    v = lbs(x, joint_transforms(params.psi, model), model.skin_weights)
    return attachment_sync(model, v)


def _fk_derivatives(psi: np.ndarray, model: HeadModel):
    """d(A_j, b_j)/d(psi_q) for every joint j and pose component q.

    Returns (dA, db) with shapes (3J, J, 3, 3) and (3J, J, 3).
    """
    J = model.n_joints
    locals_A = []
    locals_b = []
    dlocals = []
    for j in range(J):
        w = psi[3 * j : 3 * j + 3]
        R = exp_map(w)
        g = model.joint_rest[j]
        locals_A.append(R)
        locals_b.append(g - R @ g)
        dlocals.append(dexp_map(w))  # (3,3,3)

    dA = np.zeros((3 * J, J, 3, 3))
    db = np.zeros((3 * J, J, 3))
    # world transforms, forward pass
    A = np.empty((J, 3, 3))
    b = np.empty((J, 3))
    for j in range(J):
        p = model.joint_parents[j]
        if p < 0:
            A[j], b[j] = locals_A[j], locals_b[j]
        else:
            A[j] = A[p] @ locals_A[j]
            b[j] = A[p] @ locals_b[j] + b[p]
    # derivative pass: dW_j = dW_p L_j + W_p dL_j (dL nonzero only at its own joint)
    for q in range(3 * J):
        jq, cq = divmod(q, 3)
        for j in range(J):
            p = model.joint_parents[j]
            dAl = np.zeros((3, 3))
            dbl = np.zeros(3)
            if j == jq:
                dR = dlocals[j][cq]
                dAl = dR
                dbl = -dR @ model.joint_rest[j]
            if p < 0:
                dA[q, j] = dAl
                db[q, j] = dbl
            else:
                dA[q, j] = dA[q, p] @ locals_A[j] + A[p] @ dAl
                db[q, j] = dA[q, p] @ locals_b[j] + A[p] @ dbl + db[q, p]
    return dA, db


def deform_with_jacobian(model: HeadModel, params: MotionParams):
    """Deformed vertices plus the Jacobian dv/d(beta, eps, psi).

    Returns (v, Jac) with v of shape (K, 3) and Jac of shape (K, 3, P_total)
    where P_total = n_beta + n_eps + 3*J. Used by the fitter for FLAME-style
    parameter fine-tuning and by the motion translator's vertex losses.
    """
    K = model.n_vertices
    nb, ne, nj3 = model.n_beta, model.n_eps, 3 * model.n_joints
    P_total = nb + ne + nj3

    x = model.v_base + blend_shapes(params, model)
    A, b = joint_transforms(params.psi, model)
    moved = np.einsum("jab,kb->jka", A, x) + b[:, None, :]
    v = x + np.einsum("kj,jkc->kc", model.skin_weights, moved - x[None, :, :])

    # d(lbs)/dx is per-vertex M_k = I + sum_j w_kj (A_j - I)
    M = np.eye(3)[None] + np.einsum("kj,jab->kab", model.skin_weights, A - np.eye(3)[None])

    jac = np.zeros((K, 3, P_total))
    # linear blendshape columns; corrective columns sit at the psi positions
    for p_i in range(model.bs_basis.shape[0]):
        jac[:, :, p_i] += np.einsum("kab,kb->ka", M, model.bs_basis[p_i])
    # pose path through the kinematic chain
    dA, db = _fk_derivatives(params.psi, model)
    for q in range(nj3):
        dmoved = np.einsum("jab,kb->jka", dA[q], x) + db[q][:, None, :]
        jac[:, :, nb + ne + q] += np.einsum("kj,jkc->kc", model.skin_weights, dmoved)

    # attachment sync: attached rows become the mean of their source rows
    v_out = v.copy()
    for attached, source in model.attachment_groups:
        disp = (v[source] - model.v_base[source]).mean(axis=0)
        v_out[attached] = model.v_base[attached] + disp
        jac[attached] = jac[source].mean(axis=0)[None]
    return v_out, jac


def make_synthetic_head(
    seed: int = 0,
    n_rings: int = 6,
    n_segments: int = 8,
    n_beta: int = 4,
    n_eps: int = 10,
) -> HeadModel:
    """Deterministic sphere-like test head with two joints and teeth attachments.

    Geometry: a UV sphere of radius 1 centred at the origin plus a small
    interior "teeth" plate in the lower front. Triangles facing the lower
    front are labelled lips, teeth plate triangles teeth, back triangles
    other, the rest face. Joint 0 is the head root at the origin; joint 1 is
    a jaw pivot that drives the lower-front region. Expression basis column 0
    opens the jaw region downward; remaining columns are smooth random bumps.
    """
    rng = np.random.default_rng(seed)

    verts = [np.array([0.0, 1.0, 0.0])]
    for r in range(1, n_rings):
        phi = np.pi * r / n_rings
        for s in range(n_segments):
            th = 2 * np.pi * s / n_segments
            verts.append(
                np.array([np.sin(phi) * np.sin(th), np.cos(phi), np.sin(phi) * np.cos(th)])
            )
    verts.append(np.array([0.0, -1.0, 0.0]))
    v = np.array(verts)

    tris = []
    # top cap
    for s in range(n_segments):
        tris.append([0, 1 + s, 1 + (s + 1) % n_segments])
    # bands
    for r in range(n_rings - 2):
        a0 = 1 + r * n_segments
        b0 = 1 + (r + 1) * n_segments
        for s in range(n_segments):
            s1 = (s + 1) % n_segments
            tris.append([a0 + s, b0 + s, b0 + s1])
            tris.append([a0 + s, b0 + s1, a0 + s1])
    # bottom cap
    last = len(v) - 1
    c0 = 1 + (n_rings - 2) * n_segments
    for s in range(n_segments):
        tris.append([c0 + s, last, c0 + (s + 1) % n_segments])
    tris = np.array(tris, dtype=np.int64)

    # teeth plate: small quad tucked behind the lower front of the sphere
    k0 = len(v)
    plate = np.array(
        [
            [-0.15, -0.55, 0.55],
            [0.15, -0.55, 0.55],
            [-0.15, -0.7, 0.5],
            [0.15, -0.7, 0.5],
        ]
    )
    v = np.vstack([v, plate])
    teeth_tris = np.array([[k0, k0 + 2, k0 + 1], [k0 + 1, k0 + 2, k0 + 3]], dtype=np.int64)
    tris = np.vstack([tris, teeth_tris])

    # categories from canonical triangle centroids
    centroids = v[tris].mean(axis=1)
    cat = np.full(len(tris), CATEGORY_FACE, dtype=np.int64)
    lips_mask = (centroids[:, 1] < -0.35) & (centroids[:, 2] > 0.55)
    cat[lips_mask] = CATEGORY_LIPS
    cat[centroids[:, 2] < -0.3] = CATEGORY_OTHER
    cat[len(tris) - 2 :] = CATEGORY_TEETH

    K = v.shape[0]
    # joints: head root at origin, jaw pivot low and slightly forward
    joint_rest = np.array([[0.0, 0.0, 0.0], [0.0, -0.3, 0.3]])
    joint_parents = np.array([-1, 0], dtype=np.int64)
    # jaw weight: smooth falloff over the lower-front region, zero on teeth
    # (teeth follow the lips through the attachment rule instead)
    jaw = np.clip(-v[:, 1], 0.0, None) * np.clip(v[:, 2] + 0.2, 0.0, None)
    jaw = np.minimum(jaw / max(jaw.max(), 1e-9) * 1.5, 1.0)
    jaw[k0:] = 0.0
    weights = np.stack([1.0 - jaw, jaw], axis=1)

    # blendshape basis: jaw-open expression plus smooth random bumps
    basis = np.zeros((n_beta + n_eps, K, 3))
    for i in range(n_beta):
        center = rng.standard_normal(3)
        center /= np.linalg.norm(center)
        fall = np.exp(-np.sum((v - center) ** 2, axis=1) / 0.5)
        basis[i] = fall[:, None] * rng.normal(0.0, 0.08, size=3)
    mouth_zone = np.exp(-np.sum((v - np.array([0.0, -0.6, 0.8])) ** 2, axis=1) / 0.35)
    basis[n_beta, :, 1] = -0.25 * mouth_zone
    for i in range(1, n_eps):
        center = rng.standard_normal(3)
        center /= np.linalg.norm(center)
        fall = np.exp(-np.sum((v - center) ** 2, axis=1) / 0.3)
        basis[n_beta + i] = fall[:, None] * rng.normal(0.0, 0.05, size=3)
    basis[:, k0:, :] = 0.0  # teeth carry no blendshape offsets

    lip_sources = np.unique(tris[cat == CATEGORY_LIPS])
    groups = [(np.arange(k0, K, dtype=np.int64), lip_sources)]

    model = HeadModel(
        v_base=v,
        triangles=tris,
        bs_basis=basis,
        skin_weights=weights,
        joint_rest=joint_rest,
        joint_parents=joint_parents,
        triangle_category=cat,
        attachment_groups=groups,
        n_beta=n_beta,
        n_eps=n_eps,
    )
    model.validate()
    return model
