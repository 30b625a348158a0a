"""Depth-sorted alpha compositing of projected Gaussians, tiled and reference.

Pipeline per image:

  1. project Gaussians to screen space (camera.project)
  2. evaluate per-Gaussian colors (spherical harmonics, or a fixed semantic
     palette keyed by the parent triangle's category)
  3. sort front-to-back by camera depth, ties broken by Gaussian index
  4. composite per pixel:  C = sum_i c_i a_i prod_{j<i} (1 - a_j) + T_fin * bg
     with a_i = min(alpha_i * exp(-0.5 d^T conic d), 0.99), contributions
     below 1/255 skipped, and traversal stopped once transmittance < 1e-4

The tile renderer bins each Gaussian into the 16x16 pixel tiles its
guaranteed-visible footprint touches and must produce bitwise-identical
pixels to the brute-force all-Gaussians-per-pixel reference. To keep that
contract, both paths evaluate the *same* floating-point expressions in the
same per-pixel order; only the traversal strategy differs. Compositing uses
cumprod/cumsum, whose strict left-fold semantics match a scalar loop.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import Camera, ProjectedSplats, project

TILE = 16
ALPHA_CLAMP = 0.99
SKIP_ALPHA = 1.0 / 255.0
EARLY_EXIT_T = 1e-4
# beyond this Mahalanobis power the splat is below SKIP_ALPHA for any alpha <= 1
_CULL_POWER = float(np.log(255.0))

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# fixed semantic palette by category id: face, lips, teeth, other
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],  # face: red
        [1.0, 1.0, 0.0],  # lips: yellow
        [1.0, 1.0, 1.0],  # teeth: white
        [0.0, 0.0, 1.0],  # other: blue
    ]
)


# --------------------------------------------------------------------------
# colors


def sh_colors(u: np.ndarray, kappa0: np.ndarray, kappa_rest: np.ndarray, camera: Camera):
    """Per-Gaussian RGB from spherical harmonics, clamped to [0, 1].

    Order 0 always applies; when kappa_rest carries three rows the order-1
    terms are evaluated with the unit direction from the camera center to the
    Gaussian. Returns (colors (N,3), cache) where cache holds what the
    backward pass needs.
    """
    raw = SH_C0 * kappa0 + 0.5
    cache = {"dir": None, "norm": None}
    if kappa_rest.shape[1] >= 3:
        rel = u - camera.center_world()
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        d = rel / norm
        raw = raw + (
            -SH_C1 * d[:, 1:2] * kappa_rest[:, 0]
            + SH_C1 * d[:, 2:3] * kappa_rest[:, 1]
            - SH_C1 * d[:, 0:1] * kappa_rest[:, 2]
        )
        cache["dir"] = d
        cache["norm"] = norm
    colors = np.clip(raw, 0.0, 1.0)
    cache["unclamped"] = (raw > 0.0) & (raw < 1.0)
    return colors, cache


def sh_colors_backward(kappa_rest: np.ndarray, cache: dict, d_colors: np.ndarray):
    """VJP of sh_colors: returns (d_kappa0, d_kappa_rest, d_u)."""
    g = d_colors * cache["unclamped"]
    d_kappa0 = SH_C0 * g
    d_kappa_rest = np.zeros_like(kappa_rest)
    d_u = np.zeros((g.shape[0], 3))
    if kappa_rest.shape[1] >= 3:
        d = cache["dir"]
        d_kappa_rest[:, 0] = -SH_C1 * d[:, 1:2] * g
        d_kappa_rest[:, 1] = SH_C1 * d[:, 2:3] * g
        d_kappa_rest[:, 2] = -SH_C1 * d[:, 0:1] * g
        d_dir = np.zeros_like(d)
        d_dir[:, 0] = -SH_C1 * np.einsum("nc,nc->n", kappa_rest[:, 2], g)
        d_dir[:, 1] = -SH_C1 * np.einsum("nc,nc->n", kappa_rest[:, 0], g)
        d_dir[:, 2] = SH_C1 * np.einsum("nc,nc->n", kappa_rest[:, 1], g)
        # dir = rel / |rel| ; pull back through the normalization
        proj = d_dir - d * np.einsum("nc,nc->n", d, d_dir)[:, None]
        d_u = proj / cache["norm"]
    return d_kappa0, d_kappa_rest, d_u


def semantic_colors(parent: np.ndarray, triangle_category: np.ndarray, palette: np.ndarray = PALETTE):
    """Fixed per-Gaussian color from the parent triangle's category id."""
    return palette[triangle_category[parent]]


# --------------------------------------------------------------------------
# scalar building blocks (spec-level operations, used directly by tests)


def evaluate_alpha(mean2d, cov2d, alpha, pixel) -> float:
    """Effective opacity of one splat at one pixel (clamped at 0.99)."""
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    A = cov2d[1, 1] / det
    C = cov2d[0, 0] / det
    B = -cov2d[0, 1] / det
    power = 0.5 * (A * d[0] * d[0] + C * d[1] * d[1]) + B * d[0] * d[1]
    return float(min(alpha * np.exp(-power), ALPHA_CLAMP))


def composite(contributions, background) -> np.ndarray:
    """Front-to-back fold over (color, alpha) pairs onto a background.

    Contributions with alpha below 1/255 are skipped; traversal stops when
    transmittance drops below 1e-4; the residual transmittance multiplies the
    background.
    """
    bg = np.asarray(background, dtype=np.float64)
    C = np.zeros(3)
    T = 1.0
    for color, a in contributions:
        if a < SKIP_ALPHA:
            continue
        if T < EARLY_EXIT_T:
            break
        C = C + np.asarray(color, dtype=np.float64) * (a * T)
        T = T * (1.0 - a)
    return C + T * bg


# --------------------------------------------------------------------------
# shared per-tile math


def _alpha_matrix(mean2d, conic, alpha, px, py):
    """a_eff for a block of Gaussians (rows) against pixel centers (cols).

    The expression structure here is load-bearing: the brute-force reference
    evaluates the identical expressions, so the two renderers agree bitwise.
    """
    dx = px[None, :] - mean2d[:, 0][:, None]
    dy = py[None, :] - mean2d[:, 1][:, None]
    A = conic[:, 0, 0][:, None]
    B = conic[:, 0, 1][:, None]
    C = conic[:, 1, 1][:, None]
    power = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
    a = alpha[:, None] * np.exp(-power)
    a = np.minimum(a, ALPHA_CLAMP)
    return np.where(a >= SKIP_ALPHA, a, 0.0)


def _composite_block(a_eff, colors, background):
    """Sequential front-to-back compositing of an (n, p) opacity block.

    Returns pixels (p, 3). Excluded contributions are exact zeros, which
    leave the transmittance product unchanged bit-for-bit.
    """
    n, p = a_eff.shape
    ch = colors.shape[1]
    t_rows = np.empty((n + 1, p))
    t_rows[0] = 1.0
    if n:
        np.cumprod(1.0 - a_eff, axis=0, out=t_rows[1:])
    active = t_rows[:-1] >= EARLY_EXIT_T
    if n:
        w = a_eff * t_rows[:-1] * active
        contrib = np.cumsum(w[:, :, None] * colors[:, None, :], axis=0)[-1]
    else:
        contrib = np.zeros((p, ch))
    stopped = t_rows < EARLY_EXIT_T
    has_stop = stopped.any(axis=0)
    first = np.argmax(stopped, axis=0)
    t_fin = np.where(has_stop, t_rows[first, np.arange(p)], t_rows[n])
    return contrib + t_fin[:, None] * background[None, :]


def _sorted_visible_order(splats: ProjectedSplats) -> np.ndarray:
    idx = np.nonzero(splats.visible)[0]
    return idx[np.argsort(splats.depth[idx], kind="stable")]


def _tile_bins(splats: ProjectedSplats, order: np.ndarray, width: int, height: int):
    """Per-tile lists of Gaussian indices (each list in global sorted order).

    The binning radius covers every pixel where a splat could exceed the
    1/255 skip threshold, so tiles see exactly the contributions the
    reference renderer keeps.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    bins = [[] for _ in range(tiles_x * tiles_y)]
    mean = splats.mean2d
    rx = np.sqrt(2.0 * _CULL_POWER * splats.cov2d[:, 0, 0]) + 1.0
    ry = np.sqrt(2.0 * _CULL_POWER * splats.cov2d[:, 1, 1]) + 1.0
    x0 = np.clip(np.floor(mean[:, 0] - rx).astype(np.int64), 0, width - 1)
    x1 = np.clip(np.ceil(mean[:, 0] + rx).astype(np.int64), 0, width - 1)
    y0 = np.clip(np.floor(mean[:, 1] - ry).astype(np.int64), 0, height - 1)
    y1 = np.clip(np.ceil(mean[:, 1] + ry).astype(np.int64), 0, height - 1)
    off_image = (
        (mean[:, 0] + rx < 0) | (mean[:, 0] - rx > width)
        | (mean[:, 1] + ry < 0) | (mean[:, 1] - ry > height)
    )
    for g in order:
        if off_image[g]:
            continue
        for ty in range(y0[g] // TILE, y1[g] // TILE + 1):
            for tx in range(x0[g] // TILE, x1[g] // TILE + 1):
                bins[ty * tiles_x + tx].append(g)
    return bins, tiles_x, tiles_y


def _tile_pixels(tid, tiles_x, width, height):
    ty, tx = divmod(tid, tiles_x)
    r0, r1 = ty * TILE, min((ty + 1) * TILE, height)
    c0, c1 = tx * TILE, min((tx + 1) * TILE, width)
    jj, ii = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
    px = (jj + 0.5).ravel().astype(np.float64)
    py = (ii + 0.5).ravel().astype(np.float64)
    return (r0, r1, c0, c1), px, py


@dataclass
class RenderCapture:
    """Everything the backward pass needs to re-derive per-pixel weights."""

    order_bins: list          # per-tile gaussian index arrays, sorted
    tiles_x: int
    tiles_y: int
    width: int
    height: int
    background: np.ndarray


def rasterize(
    splats: ProjectedSplats,
    alpha: np.ndarray,
    colors: np.ndarray,
    width: int,
    height: int,
    background,
    n_threads: int = 1,
    capture: bool = False,
):
    """Tile-based rasterization; returns (image (H,W,3), capture | None)."""
    bg = np.asarray(background, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    ch = colors.shape[1]
    order = _sorted_visible_order(splats)
    bins, tiles_x, tiles_y = _tile_bins(splats, order, width, height)
    bins = [np.asarray(b, dtype=np.int64) for b in bins]
    image = np.empty((height, width, ch))

    def run_tile(tid):
        (r0, r1, c0, c1), px, py = _tile_pixels(tid, tiles_x, width, height)
        ids = bins[tid]
        a_eff = _alpha_matrix(splats.mean2d[ids], splats.conic[ids], alpha[ids], px, py)
        # rows that are zero at every tile pixel add exact zeros and multiply
        # the transmittance by exactly 1.0, so dropping them preserves bits
        live = a_eff.any(axis=1)
        if not live.all():
            a_eff = a_eff[live]
            ids = ids[live]
        pix = _composite_block(a_eff, colors[ids], bg)
        image[r0:r1, c0:c1] = pix.reshape(r1 - r0, c1 - c0, ch)

    tile_ids = range(tiles_x * tiles_y)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run_tile, tile_ids))
    else:
        for tid in tile_ids:
            run_tile(tid)

    cap = None
    if capture:
        cap = RenderCapture(order_bins=bins, tiles_x=tiles_x, tiles_y=tiles_y,
                            width=width, height=height, background=bg)
    return image, cap


def rasterize_reference(splats: ProjectedSplats, alpha: np.ndarray, colors: np.ndarray,
                        width: int, height: int, background):
    """Brute-force per-pixel compositing over all visible Gaussians.

    Correctness oracle for the tiled renderer: no binning, no culling, one
    pixel at a time, explicit front-to-back loop.
    """
    bg = np.asarray(background, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    order = _sorted_visible_order(splats)
    mean = splats.mean2d[order]
    conic = splats.conic[order]
    al = alpha[order]
    col = colors[order]
    image = np.empty((height, width, colors.shape[1]))
    for i in range(height):
        for j in range(width):
            a_eff = _alpha_matrix(mean, conic, al, np.array([j + 0.5]), np.array([i + 0.5]))[:, 0]
            C = np.zeros(colors.shape[1])
            T = 1.0
            # skipped contributions are exact zeros; iterating only the rest
            # leaves the fold unchanged
            for k in np.nonzero(a_eff)[0]:
                if T < EARLY_EXIT_T:
                    break
                a = a_eff[k]
                C = C + col[k] * (a * T)
                T = T * (1.0 - a)
            image[i, j] = C + T * bg
    return image


def rasterize_backward(splats: ProjectedSplats, alpha: np.ndarray, colors: np.ndarray,
                       cap: RenderCapture, d_image: np.ndarray):
    """VJP of rasterize w.r.t. splat geometry, opacity, and colors.

    Per-tile gradients are reduced in fixed tile order, so the result is
    independent of thread scheduling. Returns a dict with d_mean2d (N,2),
    d_cov2d (N,2,2), d_alpha (N,), d_colors (N,3).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    n_total = splats.mean2d.shape[0]
    d_mean2d = np.zeros((n_total, 2))
    d_conic = np.zeros((n_total, 2, 2))
    d_alpha = np.zeros(n_total)
    d_colors = np.zeros((n_total, colors.shape[1]))
    bg = cap.background

    for tid, ids in enumerate(cap.order_bins):
        if len(ids) == 0:
            continue
        (r0, r1, c0, c1), px, py = _tile_pixels(tid, cap.tiles_x, cap.width, cap.height)
        dI = d_image[r0:r1, c0:c1].reshape(-1, colors.shape[1])

        mean = splats.mean2d[ids]
        conic = splats.conic[ids]
        al = alpha[ids]
        col = colors[ids]

        dx = px[None, :] - mean[:, 0][:, None]
        dy = py[None, :] - mean[:, 1][:, None]
        A = conic[:, 0, 0][:, None]
        B = conic[:, 0, 1][:, None]
        Cc = conic[:, 1, 1][:, None]
        power = 0.5 * (A * dx * dx + Cc * dy * dy) + B * dx * dy
        G = np.exp(-power)
        raw = al[:, None] * G
        unclamped = raw < ALPHA_CLAMP
        a = np.minimum(raw, ALPHA_CLAMP)
        included = a >= SKIP_ALPHA
        a_eff = np.where(included, a, 0.0)

        n, p = a_eff.shape
        t_rows = np.empty((n + 1, p))
        t_rows[0] = 1.0
        np.cumprod(1.0 - a_eff, axis=0, out=t_rows[1:])
        active = t_rows[:-1] >= EARLY_EXIT_T
        w = a_eff * t_rows[:-1] * active          # composited weights (n, p)
        stopped = t_rows < EARLY_EXIT_T
        has_stop = stopped.any(axis=0)
        first = np.argmax(stopped, axis=0)
        t_fin = np.where(has_stop, t_rows[first, np.arange(p)], t_rows[n])

        # colors: dC/dc_i = w_i
        d_colors[ids] += np.einsum("np,pc->nc", w, dI)

        # opacity: dC/da_i = c_i T_i - V_i / (1 - a_i), V_i = everything behind i.
        # project channels onto dI first so the suffix scan stays 2-D
        cdot = np.einsum("nc,pc->np", col, dI)
        bgdot = dI @ bg
        q = w * cdot
        v_scal = np.flip(np.cumsum(np.flip(q, axis=0), axis=0), axis=0)
        v_scal = np.concatenate([v_scal[1:], np.zeros((1, p))], axis=0)
        v_scal = v_scal + (t_fin * bgdot)[None, :]
        d_a = cdot * t_rows[:-1] - v_scal / (1.0 - a_eff)
        d_raw = d_a * (active & included & unclamped)
        d_alpha[ids] += np.einsum("np,np->n", d_raw, G)
        d_G = d_raw * al[:, None]
        d_power = -G * d_G

        gx = A * dx + B * dy
        gy = Cc * dy + B * dx
        d_mean2d[ids, 0] += -np.einsum("np,np->n", d_power, gx)
        d_mean2d[ids, 1] += -np.einsum("np,np->n", d_power, gy)
        # power reads conic[0,0], conic[0,1] (full dx*dy weight), conic[1,1]
        d_conic_tile = np.zeros((n, 2, 2))
        d_conic_tile[:, 0, 0] = np.einsum("np,np->n", d_power, 0.5 * dx * dx)
        d_conic_tile[:, 1, 1] = np.einsum("np,np->n", d_power, 0.5 * dy * dy)
        d_conic_tile[:, 0, 1] = np.einsum("np,np->n", d_power, dx * dy)
        d_conic[ids] += d_conic_tile

    # conic = inv(cov2d): d_cov = -conic d_conic conic (conic symmetric)
    d_cov2d = -np.einsum("nij,njk,nkl->nil", splats.conic, d_conic, splats.conic)
    return {"mean2d": d_mean2d, "cov2d": d_cov2d, "alpha": d_alpha, "colors": d_colors}


# --------------------------------------------------------------------------
# public render entry points


def render_splats(u, r, s, alpha, colors, camera: Camera, background,
                  n_threads: int = 1, capture: bool = False, reference: bool = False):
    """Render pre-transformed global Gaussians; returns (image, capture)."""
    splats = project(u, r, s, camera)
    if reference:
        return rasterize_reference(splats, alpha, colors, camera.width, camera.height, background), None
    return rasterize(splats, alpha, colors, camera.width, camera.height, background,
                     n_threads=n_threads, capture=capture)


def composite_inpaint(i_ori: np.ndarray, i_gau: np.ndarray, mask: np.ndarray, refiner=None) -> np.ndarray:
    """Mask-weighted recomposition of a rendered face into the source frame.

    I = (1 - M) * I_ori + M * F(I_gau + (1 - M) * I_ori); the refiner F
    defaults to the identity.
    """
    if i_ori.shape != i_gau.shape:
        raise ValueError("image dimensions differ")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[:, :, None]
    if m.shape[:2] != i_ori.shape[:2]:
        raise ValueError("mask dimensions differ from images")
    inner = i_gau + (1.0 - m) * i_ori
    refined = inner if refiner is None else refiner(inner)
    return (1.0 - m) * i_ori + m * refined
