"""Scene assembly: the forward path from motion parameters to rendered frames.

Composes head deformation, per-Gaussian triangle frames, speaker blendshape
compensation, the local-to-global transform, and rasterization in both color
and semantic modes. The fitter drives the same forward with capture enabled
and runs the matching backward chain.
"""

from dataclasses import dataclass, field

import numpy as np

from .anchoring import (
    GaussianSet,
    SpeakerBlendShapes,
    compensate,
    compute_triangle_frames,
    frame_origins,
    latent_pose,
    to_global,
)
from .camera import Camera, ProjectedSplats, project
from .head_model import HeadModel, MotionParams, deform
from .renderer import PALETTE, rasterize, rasterize_reference, semantic_colors, sh_colors


@dataclass
class Scene:
    """A renderable rig: head asset, bound Gaussians, banks, camera, background."""

    model: HeadModel
    gaussians: GaussianSet
    bank: SpeakerBlendShapes
    camera: Camera
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)

    def copy(self) -> "Scene":
        return Scene(self.model, self.gaussians.copy(), self.bank.copy(),
                     self.camera, self.background.copy())

    def validate(self):
        self.model.validate()
        self.gaussians.validate(self.model.n_triangles)
        self.bank.validate(len(self.gaussians))


@dataclass
class FrameData:
    """One training frame: drive parameters plus supervision images."""

    params: MotionParams
    target: np.ndarray            # (H, W, 3) color target
    semantic: np.ndarray | None = None   # (H, W, 3) semantic target
    mask: np.ndarray | None = None       # (H, W) face-coverage mask


@dataclass
class GlobalState:
    """Intermediates of the parameter -> global-Gaussian forward pass."""

    vertices: np.ndarray
    gamma: np.ndarray
    u_comp: np.ndarray
    r_comp: np.ndarray
    kappa0_comp: np.ndarray
    w_inc: np.ndarray
    eta: np.ndarray
    P: np.ndarray
    R: np.ndarray
    S: np.ndarray
    u: np.ndarray
    r: np.ndarray
    s: np.ndarray


def gaussian_globals(model: HeadModel, gaussians: GaussianSet, bank: SpeakerBlendShapes,
                     params: MotionParams) -> GlobalState:
    """Drive the Gaussians through one set of motion parameters."""
    v = deform(model, params)
    gamma = latent_pose(params.psi, bank)
    u_comp, r_comp, k0_comp, w_inc = compensate(gaussians, gamma, bank)
    eta = gaussians.eta()
    R_tri, S_tri = compute_triangle_frames(v, model.triangles)
    P = frame_origins(v, model.triangles, gaussians.parent, eta)
    R = R_tri[gaussians.parent]
    S = S_tri[gaussians.parent]
    u, r, s = to_global(u_comp, r_comp, gaussians.s_local, P, R, S)
    return GlobalState(vertices=v, gamma=gamma, u_comp=u_comp, r_comp=r_comp,
                       kappa0_comp=k0_comp, w_inc=w_inc, eta=eta, P=P, R=R, S=S,
                       u=u, r=r, s=s)


@dataclass
class FrameForward:
    """Rendered images of one frame plus everything backward needs."""

    state: GlobalState
    splats: ProjectedSplats
    color_image: np.ndarray
    semantic_image: np.ndarray | None
    colors: np.ndarray
    sh_cache: dict
    semantic_palette_colors: np.ndarray | None
    color_capture: object
    semantic_capture: object


def render_frame(scene: Scene, params: MotionParams, mode: str = "color",
                 n_threads: int = 1, reference: bool = False) -> np.ndarray:
    """Render one frame in one mode (no gradient bookkeeping)."""
    st = gaussian_globals(scene.model, scene.gaussians, scene.bank, params)
    splats = project(st.u, st.r, st.s, scene.camera)
    if mode == "color":
        colors, _ = sh_colors(st.u, st.kappa0_comp, scene.gaussians.kappa_rest, scene.camera)
    elif mode == "semantic":
        colors = semantic_colors(scene.gaussians.parent, scene.model.triangle_category, PALETTE)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    cam = scene.camera
    if reference:
        return rasterize_reference(splats, scene.gaussians.alpha, colors, cam.width, cam.height, scene.background)
    img, _ = rasterize(splats, scene.gaussians.alpha, colors, cam.width, cam.height,
                       scene.background, n_threads=n_threads)
    return img


def forward_frame(scene: Scene, params: MotionParams, *, semantic: bool = True,
                  n_threads: int = 1, capture: bool = False) -> FrameForward:
    """Full forward used by the fitter.

    Color and semantic modes share their compositing weights, so both render
    in a single fused pass over stacked channels; the per-channel arithmetic
    is identical to two separate passes, bit for bit.
    """
    st = gaussian_globals(scene.model, scene.gaussians, scene.bank, params)
    splats = project(st.u, st.r, st.s, scene.camera)
    cam = scene.camera
    colors, sh_cache = sh_colors(st.u, st.kappa0_comp, scene.gaussians.kappa_rest, cam)
    img_s, cap_s, pal = None, None, None
    if semantic:
        pal = semantic_colors(scene.gaussians.parent, scene.model.triangle_category, PALETTE)
        stacked = np.concatenate([colors, pal], axis=1)
        bg6 = np.concatenate([scene.background, scene.background])
        img6, cap = rasterize(splats, scene.gaussians.alpha, stacked, cam.width, cam.height,
                              bg6, n_threads=n_threads, capture=capture)
        img_c, img_s = img6[:, :, :3], img6[:, :, 3:]
        cap_c = cap_s = cap
    else:
        img_c, cap_c = rasterize(splats, scene.gaussians.alpha, colors, cam.width, cam.height,
                                 scene.background, n_threads=n_threads, capture=capture)
    return FrameForward(state=st, splats=splats, color_image=img_c, semantic_image=img_s,
                        colors=colors, sh_cache=sh_cache, semantic_palette_colors=pal,
                        color_capture=cap_c, semantic_capture=cap_s)
