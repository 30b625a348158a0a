"""Bit-exact serialization for every asset the engine consumes or produces.

All binary containers are little-endian with an 8-byte ASCII magic. Counts
and indices are uint32, signed ints int32, floats 32-bit IEEE. Readers frame
every field by name and fail with a diagnostic naming the offending field;
writers emit fields in the same order, so save(load(x)) is byte-identity.

Formats (payloads in field order, after the magic):

  HSHEAD01  head asset
      counts: n_vertices, n_triangles, n_joints, n_beta, n_eps,
              n_pose_corrective, n_attachment_groups (u32 each)
      vertices f32[K,3]; triangles u32[F,3]; blendshape_basis f32[P,K,3];
      skin_weights f32[K,J]; joint_rest f32[J,3]; joint_parents i32[J];
      triangle_category i32[F];
      per group: n_attached u32, n_source u32, attached u32[], source u32[]

  HSGAUS01  gaussian set + speaker blendshape banks
      counts: n_gaussians, sh_rest, latent_dim, psi_dim, hidden_dim (u32)
      u_local f32[N,3]; r_local f32[N,3,3]; s_local f32[N,3]; alpha f32[N];
      kappa0 f32[N,3]; kappa_rest f32[N,R,3]; parent u32[N];
      eta_logits f32[N,3]; w1 f32[H,P]; b1 f32[H]; w2 f32[L,H]; b2 f32[L];
      w_pos f32[N,L,3]; w_rot f32[N,L,3]; w_color f32[N,L,3]

  HSPARM01  motion parameter sequence
      counts: n_beta, n_eps, n_psi, n_frames (u32); frame_rate f32 (> 0)
      payload f32[T, n_beta+n_eps+n_psi]

  HSCKPT01  fit checkpoint
      gaussian-set fields as in HSGAUS01, then parameter-sequence fields as
      in HSPARM01 (the fine-tuned per-frame parameters), then iteration u32,
      then n_moments u32 and per entry: name_len u32, ascii name,
      step_count u32, ndim u32, dims u32[], m f32[...], v f32[...]

  HSTRAN01  translator checkpoint
      counts: vocab, n_timbres, n_speakers, dim, hidden, out_dim, heads (u32)
      content f32[V,D]; timbre f32[S,D]; id f32[P,D]; wq,wk,wv,wo f32[D,D];
      w1 f32[D,H]; b1 f32[H]; w2 f32[H,N]; b2 f32[N]

  HSCORP01  toy translator corpus
      counts: n_items, vocab, n_timbres, n_speakers, param_dim (u32)
      per item: n_tokens u32, timbre u32, speaker u32, n_frames u32,
      tokens u32[], params f32[T,N]

Images are binary PPM (P6, maxval 255) and masks binary PGM (P5, maxval
255); float images in [0, 1] quantize by round(v * 255).
"""

import json
import struct


import numpy as np

from .anchoring import GaussianSet, SpeakerBlendShapes
from .camera import Camera
from .errors import AssetFormatError
from .fitter import AdamState, FitConfig
from .head_model import HeadModel
from .objectives import LossWeights
from .translator import ToyAudio, TranslatorModel

MAGIC_HEAD = b"HSHEAD01"
MAGIC_GAUSS = b"HSGAUS01"
MAGIC_PARAMS = b"HSPARM01"
MAGIC_CHECKPOINT = b"HSCKPT01"
MAGIC_TRANSLATOR = b"HSTRAN01"
MAGIC_CORPUS = b"HSCORP01"


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic]

    def u32(self, value: int):
        self.parts.append(struct.pack("<I", int(value)))

    def i32(self, value: int):
        self.parts.append(struct.pack("<i", int(value)))

    def f32(self, value: float):
        self.parts.append(struct.pack("<f", float(value)))

    def f32_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def u32_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<u4").tobytes())

    def i32_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<i4").tobytes())

    def ascii(self, text: str):
        raw = text.encode("ascii")
        self.u32(len(raw))
        self.parts.append(raw)

    def tobytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, label: str, magic: bytes):
        self.data = data
        self.off = 0
        self.label = label
        got = self._take(len(magic), "magic")
        if got != magic:
            raise AssetFormatError(f"{label}: bad magic {got!r}, expected {magic!r}")

    def _fail(self, field: str, why: str):
        raise AssetFormatError(f"{self.label}: malformed field '{field}': {why}")

    def _take(self, n: int, field: str) -> bytes:
        if n < 0 or self.off + n > len(self.data):
            self._fail(field, f"needs {n} bytes at offset {self.off}, "
                              f"file has {len(self.data)}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, field: str, max_value: int = 2 ** 31) -> int:
        v = struct.unpack("<I", self._take(4, field))[0]
        if v > max_value:
            self._fail(field, f"value {v} out of sane range")
        return int(v)

    def i32(self, field: str) -> int:
        return struct.unpack("<i", self._take(4, field))[0]

    def f32(self, field: str) -> float:
        return float(struct.unpack("<f", self._take(4, field))[0])

    def _array(self, field: str, shape, dtype) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 0
        nbytes = count * 4
        raw = self._take(nbytes, field)
        return np.frombuffer(raw, dtype=dtype, count=count).reshape(shape)

    def f32_array(self, field: str, shape) -> np.ndarray:
        with np.errstate(invalid="ignore"):  # fuzzed bits may be signaling NaNs
            arr = self._array(field, shape, "<f4").astype(np.float64)
        if not np.all(np.isfinite(arr)):
            self._fail(field, "contains non-finite values")
        return arr

    def u32_array(self, field: str, shape) -> np.ndarray:
        return self._array(field, shape, "<u4").astype(np.int64)

    def i32_array(self, field: str, shape) -> np.ndarray:
        return self._array(field, shape, "<i4").astype(np.int64)

    def ascii(self, field: str) -> str:
        n = self.u32(field, max_value=4096)
        raw = self._take(n, field)
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError:
            self._fail(field, "not ascii")

    def finish(self):
        if self.off != len(self.data):
            raise AssetFormatError(
                f"{self.label}: {len(self.data) - self.off} trailing bytes after last field")


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise AssetFormatError(f"{path}: cannot read: {exc}") from exc


def _write_file(path, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(payload)


# --------------------------------------------------------------------------
# head asset


def save_head(path, model: HeadModel):
    w = _Writer(MAGIC_HEAD)
    K, F, J = model.n_vertices, model.n_triangles, model.n_joints
    for v in (K, F, J, model.n_beta, model.n_eps, model.n_pose_corrective,
              len(model.attachment_groups)):
        w.u32(v)
    w.f32_array(model.v_base)
    w.u32_array(model.triangles)
    w.f32_array(model.bs_basis)
    w.f32_array(model.skin_weights)
    w.f32_array(model.joint_rest)
    w.i32_array(model.joint_parents)
    w.i32_array(model.triangle_category)
    for attached, source in model.attachment_groups:
        w.u32(attached.shape[0])
        w.u32(source.shape[0])
        w.u32_array(attached)
        w.u32_array(source)
    _write_file(path, w.tobytes())


def load_head(path) -> HeadModel:
    r = _Reader(_read_file(path), str(path), MAGIC_HEAD)
    K = r.u32("n_vertices")
    F = r.u32("n_triangles")
    J = r.u32("n_joints")
    n_beta = r.u32("n_beta")
    n_eps = r.u32("n_eps")
    n_corr = r.u32("n_pose_corrective")
    n_groups = r.u32("n_attachment_groups", max_value=10_000)
    P = n_beta + n_eps + n_corr
    v_base = r.f32_array("vertices", (K, 3))
    triangles = r.u32_array("triangles", (F, 3))
    basis = r.f32_array("blendshape_basis", (P, K, 3))
    weights = r.f32_array("skin_weights", (K, J))
    joint_rest = r.f32_array("joint_rest", (J, 3))
    joint_parents = r.i32_array("joint_parents", (J,))
    category = r.i32_array("triangle_category", (F,))
    groups = []
    for gi in range(n_groups):
        na = r.u32(f"attachment_group[{gi}].n_attached")
        ns = r.u32(f"attachment_group[{gi}].n_source")
        attached = r.u32_array(f"attachment_group[{gi}].attached", (na,))
        source = r.u32_array(f"attachment_group[{gi}].source", (ns,))
        groups.append((attached, source))
    r.finish()
    model = HeadModel(v_base=v_base, triangles=triangles, bs_basis=basis,
                      skin_weights=weights, joint_rest=joint_rest,
                      joint_parents=joint_parents, triangle_category=category,
                      attachment_groups=groups, n_beta=n_beta, n_eps=n_eps)
    try:
        model.validate()
    except ValueError as exc:
        raise AssetFormatError(f"{path}: invalid head asset: {exc}") from exc
    return model


# --------------------------------------------------------------------------
# gaussian set + banks


def _write_gaussians_into(w: _Writer, gaussians: GaussianSet, bank: SpeakerBlendShapes):
    n = len(gaussians)
    R = gaussians.kappa_rest.shape[1]
    L = bank.latent_dim
    P = bank.w1.shape[1]
    H = bank.w1.shape[0]
    for v in (n, R, L, P, H):
        w.u32(v)
    w.f32_array(gaussians.u_local)
    w.f32_array(gaussians.r_local)
    w.f32_array(gaussians.s_local)
    w.f32_array(gaussians.alpha)
    w.f32_array(gaussians.kappa0)
    w.f32_array(gaussians.kappa_rest)
    w.u32_array(gaussians.parent)
    w.f32_array(gaussians.eta_logits)
    w.f32_array(bank.w1)
    w.f32_array(bank.b1)
    w.f32_array(bank.w2)
    w.f32_array(bank.b2)
    w.f32_array(bank.w_pos)
    w.f32_array(bank.w_rot)
    w.f32_array(bank.w_color)


def _read_gaussians_from(r: _Reader):
    n = r.u32("n_gaussians")
    R = r.u32("sh_rest", max_value=64)
    L = r.u32("latent_dim", max_value=4096)
    P = r.u32("psi_dim", max_value=4096)
    H = r.u32("hidden_dim", max_value=4096)
    gaussians = GaussianSet(
        u_local=r.f32_array("u_local", (n, 3)),
        r_local=r.f32_array("r_local", (n, 3, 3)),
        s_local=r.f32_array("s_local", (n, 3)),
        alpha=r.f32_array("alpha", (n,)),
        kappa0=r.f32_array("kappa0", (n, 3)),
        kappa_rest=r.f32_array("kappa_rest", (n, R, 3)),
        parent=r.u32_array("parent", (n,)),
        eta_logits=r.f32_array("eta_logits", (n, 3)),
    )
    bank = SpeakerBlendShapes(
        w1=r.f32_array("w1", (H, P)),
        b1=r.f32_array("b1", (H,)),
        w2=r.f32_array("w2", (L, H)),
        b2=r.f32_array("b2", (L,)),
        w_pos=r.f32_array("w_pos", (n, L, 3)),
        w_rot=r.f32_array("w_rot", (n, L, 3)),
        w_color=r.f32_array("w_color", (n, L, 3)),
    )
    return gaussians, bank


def save_gaussians(path, gaussians: GaussianSet, bank: SpeakerBlendShapes):
    w = _Writer(MAGIC_GAUSS)
    _write_gaussians_into(w, gaussians, bank)
    _write_file(path, w.tobytes())


def load_gaussians(path):
    r = _Reader(_read_file(path), str(path), MAGIC_GAUSS)
    gaussians, bank = _read_gaussians_from(r)
    r.finish()
    try:
        gaussians.validate()
        bank.validate(len(gaussians))
    except ValueError as exc:
        raise AssetFormatError(f"{path}: invalid gaussian set: {exc}") from exc
    return gaussians, bank


# --------------------------------------------------------------------------
# parameter sequences


def _write_params_into(w: _Writer, seq: np.ndarray, dims, frame_rate: float):
    nb, ne, npsi = dims
    T = seq.shape[0]
    for v in (nb, ne, npsi, T):
        w.u32(v)
    w.f32(frame_rate)
    w.f32_array(seq)


def _read_params_from(r: _Reader):
    nb = r.u32("n_beta")
    ne = r.u32("n_eps")
    npsi = r.u32("n_psi")
    T = r.u32("n_frames")
    rate = r.f32("frame_rate")
    if not (rate > 0) or not np.isfinite(rate):
        raise AssetFormatError(f"{r.label}: malformed field 'frame_rate': must be positive")
    seq = r.f32_array("parameters", (T, nb + ne + npsi))
    return seq, (nb, ne, npsi), rate


def save_params(path, seq: np.ndarray, dims, frame_rate: float = 25.0):
    """seq is (T, n_beta + n_eps + n_psi); dims = (n_beta, n_eps, n_psi)."""
    if seq.ndim != 2 or seq.shape[1] != sum(dims):
        raise ValueError("parameter sequence does not match stated dims")
    w = _Writer(MAGIC_PARAMS)
    _write_params_into(w, seq, dims, frame_rate)
    _write_file(path, w.tobytes())


def load_params(path):
    """Returns (seq (T, N) float64, (n_beta, n_eps, n_psi), frame_rate)."""
    r = _Reader(_read_file(path), str(path), MAGIC_PARAMS)
    out = _read_params_from(r)
    r.finish()
    return out


# --------------------------------------------------------------------------
# fit checkpoint


def save_checkpoint(path, gaussians: GaussianSet, bank: SpeakerBlendShapes,
                    params_seq: np.ndarray, dims, adam: AdamState, iteration: int,
                    frame_rate: float = 25.0):
    w = _Writer(MAGIC_CHECKPOINT)
    _write_gaussians_into(w, gaussians, bank)
    _write_params_into(w, params_seq, dims, frame_rate)
    w.u32(iteration)
    names = sorted(adam.m.keys())
    w.u32(len(names))
    for name in names:
        w.ascii(name)
        w.u32(adam.t[name])
        arr = adam.m[name]
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.f32_array(arr)
        w.f32_array(adam.v[name])
    _write_file(path, w.tobytes())


def load_checkpoint(path):
    r = _Reader(_read_file(path), str(path), MAGIC_CHECKPOINT)
    gaussians, bank = _read_gaussians_from(r)
    params_seq, dims, rate = _read_params_from(r)
    iteration = r.u32("iteration")
    n_names = r.u32("n_moments", max_value=100_000)
    adam = AdamState()
    for _ in range(n_names):
        name = r.ascii("moment_name")
        t = r.u32(f"moment[{name}].step_count")
        ndim = r.u32(f"moment[{name}].ndim", max_value=8)
        shape = tuple(r.u32(f"moment[{name}].dim") for _ in range(ndim))
        adam.m[name] = r.f32_array(f"moment[{name}].m", shape)
        adam.v[name] = r.f32_array(f"moment[{name}].v", shape)
        adam.t[name] = t
    r.finish()
    try:
        gaussians.validate()
        bank.validate(len(gaussians))
    except ValueError as exc:
        raise AssetFormatError(f"{path}: invalid checkpoint: {exc}") from exc
    return gaussians, bank, params_seq, dims, rate, adam, iteration


# --------------------------------------------------------------------------
# translator checkpoint and corpus


def save_translator(path, model: TranslatorModel):
    w = _Writer(MAGIC_TRANSLATOR)
    V, D = model.content_table.shape
    S = model.timbre_table.shape[0]
    P = model.id_table.shape[0]
    H = model.w1.shape[1]
    N = model.w2.shape[1]
    for v in (V, S, P, D, H, N, model.n_heads):
        w.u32(v)
    for name in ("content_table", "timbre_table", "id_table", "wq", "wk", "wv",
                 "wo", "w1", "b1", "w2", "b2"):
        w.f32_array(getattr(model, name))
    _write_file(path, w.tobytes())


def load_translator(path) -> TranslatorModel:
    r = _Reader(_read_file(path), str(path), MAGIC_TRANSLATOR)
    V = r.u32("vocab")
    S = r.u32("n_timbres")
    P = r.u32("n_speakers")
    D = r.u32("dim")
    H = r.u32("hidden")
    N = r.u32("out_dim")
    heads = r.u32("heads", max_value=64)
    if heads == 0 or D % heads:
        raise AssetFormatError(f"{path}: malformed field 'heads': must divide dim {D}")
    model = TranslatorModel(
        content_table=r.f32_array("content_table", (V, D)),
        timbre_table=r.f32_array("timbre_table", (S, D)),
        id_table=r.f32_array("id_table", (P, D)),
        wq=r.f32_array("wq", (D, D)),
        wk=r.f32_array("wk", (D, D)),
        wv=r.f32_array("wv", (D, D)),
        wo=r.f32_array("wo", (D, D)),
        w1=r.f32_array("w1", (D, H)),
        b1=r.f32_array("b1", (H,)),
        w2=r.f32_array("w2", (H, N)),
        b2=r.f32_array("b2", (N,)),
        n_heads=heads,
    )
    r.finish()
    return model


def save_corpus(path, items: list, vocab: int, n_timbres: int, n_speakers: int, param_dim: int):
    """items: list of (ToyAudio, params (T, N) | None, speaker_id)."""
    w = _Writer(MAGIC_CORPUS)
    for v in (len(items), vocab, n_timbres, n_speakers, param_dim):
        w.u32(v)
    for audio, params, speaker in items:
        w.u32(audio.tokens.shape[0])
        w.u32(audio.timbre)
        w.u32(speaker)
        t_frames = 0 if params is None else params.shape[0]
        w.u32(t_frames)
        w.u32_array(audio.tokens)
        if params is not None:
            w.f32_array(params)
    _write_file(path, w.tobytes())


def load_corpus(path):
    """Returns (items, vocab, n_timbres, n_speakers, param_dim)."""
    r = _Reader(_read_file(path), str(path), MAGIC_CORPUS)
    n_items = r.u32("n_items", max_value=1_000_000)
    vocab = r.u32("vocab")
    n_timbres = r.u32("n_timbres")
    n_speakers = r.u32("n_speakers")
    param_dim = r.u32("param_dim")
    items = []
    for i in range(n_items):
        n_tok = r.u32(f"item[{i}].n_tokens")
        timbre = r.u32(f"item[{i}].timbre")
        speaker = r.u32(f"item[{i}].speaker")
        t_frames = r.u32(f"item[{i}].n_frames")
        tokens = r.u32_array(f"item[{i}].tokens", (n_tok,))
        if tokens.size and tokens.max() >= vocab:
            raise AssetFormatError(f"{path}: malformed field 'item[{i}].tokens': id out of vocab")
        params = r.f32_array(f"item[{i}].params", (t_frames, param_dim)) if t_frames else None
        items.append((ToyAudio(tokens=tokens, timbre=timbre), params, speaker))
    r.finish()
    return items, vocab, n_timbres, n_speakers, param_dim


# --------------------------------------------------------------------------
# per-frame global gaussian dumps

MAGIC_GLOBALS = b"HSGLOB01"


def save_globals(path, u: np.ndarray, r: np.ndarray, s: np.ndarray,
                 alpha: np.ndarray, kappa0: np.ndarray):
    """Global-space gaussian attributes of one animated frame."""
    w = _Writer(MAGIC_GLOBALS)
    w.u32(u.shape[0])
    w.f32_array(u)
    w.f32_array(r)
    w.f32_array(s)
    w.f32_array(alpha)
    w.f32_array(kappa0)
    _write_file(path, w.tobytes())


def load_globals(path):
    """Returns (u (N,3), r (N,3,3), s (N,3), alpha (N,), kappa0 (N,3))."""
    r_ = _Reader(_read_file(path), str(path), MAGIC_GLOBALS)
    n = r_.u32("n_gaussians")
    u = r_.f32_array("u", (n, 3))
    rot = r_.f32_array("r", (n, 3, 3))
    s = r_.f32_array("s", (n, 3))
    alpha = r_.f32_array("alpha", (n,))
    kappa0 = r_.f32_array("kappa0", (n, 3))
    r_.finish()
    return u, rot, s, alpha, kappa0


# --------------------------------------------------------------------------
# images: binary PPM (P6) and PGM (P5)


def save_image(path, image: np.ndarray):
    """Float [0,1] image -> 8-bit binary PPM (3-channel) or PGM (1-channel)."""
    image = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if image.ndim == 3 and image.shape[2] == 3:
        header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    elif image.ndim == 2:
        header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    else:
        raise ValueError("image must be (H, W, 3) or (H, W)")
    _write_file(path, header + data.tobytes())


def load_image(path) -> np.ndarray:
    """PPM/PGM -> float64 image in [0, 1]."""
    data = _read_file(path)
    if len(data) < 2 or data[:2] not in (b"P6", b"P5"):
        raise AssetFormatError(f"{path}: malformed field 'magic': not a binary PPM/PGM")
    magic = data[:2]
    # header: three whitespace-separated tokens (width, height, maxval),
    # comments allowed, then a single whitespace byte before the payload
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise AssetFormatError(f"{path}: malformed field 'header': truncated")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise AssetFormatError(f"{path}: malformed field 'header': non-integer token")
    if maxval != 255 or width < 1 or height < 1:
        raise AssetFormatError(f"{path}: malformed field 'header': unsupported dimensions/maxval")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) != need or pos + need != len(data):
        raise AssetFormatError(
            f"{path}: malformed field 'pixels': expected {need} bytes, got {len(data) - pos}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


# --------------------------------------------------------------------------
# run configuration (strict JSON)


_CAMERA_KEYS = {"width", "height", "fx", "fy", "cx", "cy", "mode", "rotation", "translation"}
_TRANSLATOR_KEYS = {"dim", "hidden", "heads", "vocab", "n_timbres", "n_speakers",
                    "epochs", "lr", "pretrain_epochs", "pretrain_k", "pretrain_tau",
                    "pretrain_lr", "content_weight", "seed"}

_TRANSLATOR_DEFAULTS = {
    "dim": 32, "hidden": 32, "heads": 2, "vocab": 12, "n_timbres": 4,
    "n_speakers": 4, "epochs": 40, "lr": 2e-3, "pretrain_epochs": 60,
    "pretrain_k": 3, "pretrain_tau": 0.2, "pretrain_lr": 5e-2,
    "content_weight": 1.0, "seed": 0,
}


class RunConfig:
    """Validated run configuration with documented defaults.

    Construct from a dict (`RunConfig.from_dict`) or a JSON file
    (`load_config`). Unknown keys anywhere raise AssetFormatError.
    """

    def __init__(self, camera: Camera, background, weights: LossWeights,
                 fit: FitConfig, palette: np.ndarray, seed: int, translator: dict):
        self.camera = camera
        self.background = np.asarray(background, dtype=np.float64)
        self.weights = weights
        self.fit = fit
        self.palette = palette
        self.seed = seed
        self.translator = translator

    @staticmethod
    def default(width: int = 64, height: int = 64, seed: int = 0) -> "RunConfig":
        from .renderer import PALETTE

        weights = LossWeights()
        fit = FitConfig(weights=weights, seed=seed)
        return RunConfig(camera=Camera.default(width, height), background=np.array([0.1, 0.1, 0.12]),
                         weights=weights, fit=fit, palette=PALETTE.copy(), seed=seed,
                         translator=dict(_TRANSLATOR_DEFAULTS))

    @staticmethod
    def from_dict(raw: dict, label: str = "config") -> "RunConfig":
        from .renderer import PALETTE

        known_top = {"seed", "background", "camera", "palette", "loss_weights", "fit", "translator"}
        unknown = set(raw) - known_top
        if unknown:
            raise AssetFormatError(f"{label}: unknown keys {sorted(unknown)}")

        seed = int(raw.get("seed", 0))
        background = np.asarray(raw.get("background", [0.1, 0.1, 0.12]), dtype=np.float64)
        if background.shape != (3,):
            raise AssetFormatError(f"{label}: background must have 3 components")

        cam_raw = dict(raw.get("camera", {}))
        unknown = set(cam_raw) - _CAMERA_KEYS
        if unknown:
            raise AssetFormatError(f"{label}: unknown camera keys {sorted(unknown)}")
        width = int(cam_raw.get("width", 64))
        height = int(cam_raw.get("height", 64))
        default_cam = Camera.default(width, height)
        try:
            camera = Camera(
                width=width, height=height,
                fx=float(cam_raw.get("fx", default_cam.fx)),
                fy=float(cam_raw.get("fy", default_cam.fy)),
                cx=float(cam_raw.get("cx", default_cam.cx)),
                cy=float(cam_raw.get("cy", default_cam.cy)),
                rotation=np.asarray(cam_raw.get("rotation", default_cam.rotation), dtype=np.float64),
                translation=np.asarray(cam_raw.get("translation", default_cam.translation), dtype=np.float64),
                mode=cam_raw.get("mode", "perspective"),
            )
        except ValueError as exc:
            raise AssetFormatError(f"{label}: invalid camera: {exc}") from exc

        pal_raw = dict(raw.get("palette", {}))
        names = ["face", "lips", "teeth", "other"]
        unknown = set(pal_raw) - set(names)
        if unknown:
            raise AssetFormatError(f"{label}: unknown palette keys {sorted(unknown)}")
        palette = PALETTE.copy()
        for i, name in enumerate(names):
            if name in pal_raw:
                palette[i] = np.asarray(pal_raw[name], dtype=np.float64)

        lw_raw = dict(raw.get("loss_weights", {}))
        weights = LossWeights()
        known = set(vars(weights))
        unknown = set(lw_raw) - known
        if unknown:
            raise AssetFormatError(f"{label}: unknown loss_weights keys {sorted(unknown)}")
        for k, v in lw_raw.items():
            setattr(weights, k, float(v))
        try:
            weights.validate()
        except ValueError as exc:
            raise AssetFormatError(f"{label}: invalid loss_weights: {exc}") from exc

        fit_raw = dict(raw.get("fit", {}))
        fit = FitConfig(weights=weights, seed=seed)
        known = set(vars(fit)) - {"weights"}
        unknown = set(fit_raw) - known
        if unknown:
            raise AssetFormatError(f"{label}: unknown fit keys {sorted(unknown)}")
        for k, v in fit_raw.items():
            current = getattr(fit, k)
            setattr(fit, k, type(current)(v))
        try:
            fit.validate()
        except ValueError as exc:
            raise AssetFormatError(f"{label}: invalid fit config: {exc}") from exc

        tr = dict(_TRANSLATOR_DEFAULTS)
        tr_raw = dict(raw.get("translator", {}))
        unknown = set(tr_raw) - _TRANSLATOR_KEYS
        if unknown:
            raise AssetFormatError(f"{label}: unknown translator keys {sorted(unknown)}")
        tr.update(tr_raw)

        return RunConfig(camera=camera, background=background, weights=weights,
                         fit=fit, palette=palette, seed=seed, translator=tr)

    def to_dict(self) -> dict:
        cam = self.camera
        return {
            "seed": self.seed,
            "background": [float(x) for x in self.background],
            "camera": {
                "width": cam.width, "height": cam.height,
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "mode": cam.mode,
                "rotation": [[float(x) for x in row] for row in cam.rotation],
                "translation": [float(x) for x in cam.translation],
            },
            "palette": {name: [float(x) for x in self.palette[i]]
                        for i, name in enumerate(["face", "lips", "teeth", "other"])},
            "loss_weights": {k: float(v) for k, v in vars(self.weights).items()},
            "fit": {k: (v if isinstance(v, (int, bool)) else float(v))
                    for k, v in vars(self.fit).items() if k != "weights"},
            "translator": dict(self.translator),
        }


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="ascii") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise AssetFormatError(f"{path}: cannot read: {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise AssetFormatError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise AssetFormatError(f"{path}: config root must be an object")
    return RunConfig.from_dict(raw, label=str(path))


def save_config(path, config: RunConfig):
    write_json_stable(path, config.to_dict())


def write_json_stable(path, payload: dict):
    """JSON with sorted keys and fixed separators so outputs are byte-stable."""
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, separators=(",", ": "))
        fh.write("\n")


# --------------------------------------------------------------------------
# synthetic desk-scale benchmark


def _smooth_motion_sequence(model: HeadModel, n_frames: int, rng) -> np.ndarray:
    """Smooth sinusoidal parameter tracks: jaw-open drive plus minor channels."""
    nb, ne, npsi = model.n_beta, model.n_eps, 3 * model.n_joints
    t = np.arange(n_frames) / n_frames
    seq = np.zeros((n_frames, nb + ne + npsi))
    seq[:, :nb] = rng.normal(0.0, 0.08, nb)[None, :]
    seq[:, nb] = 0.45 * np.abs(np.sin(2.0 * np.pi * 2.0 * t + rng.uniform(0, np.pi)))
    for c in range(1, min(ne, 5)):
        freq = rng.integers(1, 4)
        seq[:, nb + c] = rng.uniform(0.05, 0.15) * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    # jaw joint rotation about x, small head wobble on the root
    seq[:, nb + ne + 2] = 0.03 * np.sin(2.0 * np.pi * t + rng.uniform(0, 2 * np.pi))
    seq[:, nb + ne + 3] = 0.12 * np.sin(2.0 * np.pi * 2.0 * t + rng.uniform(0, 2 * np.pi))
    return seq


def _coverage_mask(scene, params) -> np.ndarray:
    """1 inside rendered-face coverage: alpha-weight sum above 0.5.

    Rendering all-white Gaussians on a black background yields exactly the
    per-pixel compositing weight sum, i.e. 1 - residual transmittance.
    """
    from .scene import Scene as _Scene
    from .scene import render_frame as _render

    probe = _Scene(model=scene.model, gaussians=scene.gaussians.copy(), bank=scene.bank,
                   camera=scene.camera, background=np.zeros(3))
    probe.gaussians.kappa0[:] = 0.5 / 0.28209479177387814  # SH order 0 -> color 1.0
    probe.gaussians.kappa_rest = np.zeros((len(probe.gaussians), 0, 3))
    img = _render(probe, params, "color")
    coverage = img[:, :, 0]
    return (coverage >= 0.5).astype(np.float64)


def make_synthetic_dataset(out_dir, seed: int = 0, n_gaussians: int = 200,
                           n_train: int = 20, n_holdout: int = 5, size: int = 64):
    """Deterministic fitting benchmark rendered through the engine itself.

    Writes a ground-truth scene (nonzero speaker blendshape banks), target
    color frames, semantic maps, coverage masks, a perturbed initial scene
    (banks zeroed), perturbed training-frame parameters, a toy translator
    corpus, and config/manifest files. Byte-identical for a fixed seed.
    """
    import os

    from .head_model import MotionParams as _MP
    from .head_model import make_synthetic_head
    from .renderer import SH_C0
    from .rotations import exp_map_many
    from .scene import Scene as _Scene
    from .scene import forward_frame as _forward

    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("frames", "semantic", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    model = make_synthetic_head(seed=seed)
    nb, ne, npsi = model.n_beta, model.n_eps, 3 * model.n_joints

    centroids = model.v_base[model.triangles].mean(axis=1)
    front = np.nonzero(centroids[:, 2] > -0.2)[0]
    parent = front[rng.integers(0, front.size, n_gaussians)]
    gaussians = GaussianSet(
        u_local=rng.normal(0.0, 0.12, (n_gaussians, 3)),
        r_local=exp_map_many(rng.normal(0.0, 0.8, (n_gaussians, 3))),
        s_local=np.exp(rng.uniform(np.log(0.07), np.log(0.16), (n_gaussians, 3))),
        alpha=rng.uniform(0.55, 0.95, n_gaussians),
        kappa0=(rng.uniform(0.15, 0.85, (n_gaussians, 3)) - 0.5) / SH_C0,
        kappa_rest=rng.normal(0.0, 0.03, (n_gaussians, 3, 3)),
        parent=parent,
        eta_logits=rng.normal(0.0, 0.6, (n_gaussians, 3)),
    )
    bank = SpeakerBlendShapes(
        w1=rng.normal(0.0, 0.4, (16, npsi)),
        b1=np.zeros(16),
        w2=rng.normal(0.0, 0.4, (16, 16)),
        b2=np.zeros(16),
        w_pos=rng.normal(0.0, 0.05, (n_gaussians, 16, 3)),
        w_rot=rng.normal(0.0, 0.04, (n_gaussians, 16, 3)),
        w_color=rng.normal(0.0, 0.15, (n_gaussians, 16, 3)),
    )

    config = RunConfig.default(width=size, height=size, seed=seed)
    scene = _Scene(model=model, gaussians=gaussians, bank=bank,
                   camera=config.camera, background=config.background)
    scene.validate()

    n_frames = n_train + n_holdout
    seq_gt = _smooth_motion_sequence(model, n_frames, rng)

    for t in range(n_frames):
        p = _MP(seq_gt[t, :nb], seq_gt[t, nb:nb + ne], seq_gt[t, nb + ne:])
        fwd = _forward(scene, p, semantic=True)
        save_image(os.path.join(out_dir, "frames", f"frame_{t:04d}.ppm"), fwd.color_image)
        save_image(os.path.join(out_dir, "semantic", f"sem_{t:04d}.ppm"), fwd.semantic_image)
        save_image(os.path.join(out_dir, "masks", f"mask_{t:04d}.pgm"), _coverage_mask(scene, p))

    # perturbed starting point: attribute noise everywhere, banks zeroed,
    # training-frame parameters jittered (held-out parameters stay exact)
    init = gaussians.copy()
    init.u_local = init.u_local + rng.normal(0.0, 0.05, init.u_local.shape)
    init.r_local = np.einsum("nij,njk->nik", init.r_local,
                             exp_map_many(rng.normal(0.0, 0.2, (n_gaussians, 3))))
    init.s_local = init.s_local * np.exp(rng.normal(0.0, 0.2, init.s_local.shape))
    init.alpha = np.clip(init.alpha + rng.uniform(-0.15, 0.15, n_gaussians), 0.3, 0.95)
    init.kappa0 = init.kappa0 + rng.normal(0.0, 0.25, init.kappa0.shape)
    init.kappa_rest = init.kappa_rest * 0.0
    init.eta_logits = init.eta_logits + rng.normal(0.0, 0.3, init.eta_logits.shape)
    zero_bank = SpeakerBlendShapes.zeros(n_gaussians, latent_dim=16, psi_dim=npsi, hidden_dim=16)
    zero_bank.w1 = bank.w1.copy()   # keep the latent-pose map; banks start silent
    zero_bank.w2 = bank.w2.copy()

    seq_init = seq_gt.copy()
    seq_init[:n_train, nb:] += rng.normal(0.0, 0.03, (n_train, ne + npsi))
    seq_init[:n_train, :nb] += rng.normal(0.0, 0.02, (n_train, nb))

    save_head(os.path.join(out_dir, "head.hshead"), model)
    save_gaussians(os.path.join(out_dir, "gaussians_gt.hsgaus"), gaussians, bank)
    save_gaussians(os.path.join(out_dir, "gaussians_init.hsgaus"), init, zero_bank)
    save_params(os.path.join(out_dir, "params_gt.hsparm"), seq_gt, (nb, ne, npsi))
    save_params(os.path.join(out_dir, "params_init.hsparm"), seq_init, (nb, ne, npsi))

    # toy translator corpus: two speakers, jaw amplitude ratio 2:1, motion a
    # deterministic function of the audio tokens
    tr = config.translator
    vocab = tr["vocab"]
    items = []
    for item_i in range(8):
        speaker = item_i % 2
        amp = 0.6 if speaker == 0 else 0.3
        tokens = rng.integers(0, vocab, 32)
        t_axis = np.arange(32) / 32.0
        y = np.zeros((32, nb + ne + npsi))
        y[:, nb] = amp * tokens / max(vocab - 1, 1)
        y[:, nb + 1] = 0.2 * amp * np.sin(2 * np.pi * 2 * t_axis)
        items.append((ToyAudio(tokens=tokens, timbre=int(rng.integers(0, tr["n_timbres"]))),
                      y, speaker))
    save_corpus(os.path.join(out_dir, "corpus.hscorp"), items, vocab,
                tr["n_timbres"], tr["n_speakers"], nb + ne + npsi)

    save_config(os.path.join(out_dir, "config.json"), config)
    write_json_stable(os.path.join(out_dir, "manifest.json"), {
        "n_frames": n_frames,
        "train_frames": list(range(n_train)),
        "holdout_frames": list(range(n_train, n_frames)),
        "width": size,
        "height": size,
        "n_gaussians": n_gaussians,
        "seed": seed,
    })
    return out_dir
