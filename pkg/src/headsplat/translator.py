"""Desk-scale audio-to-motion translator.

A deterministic toy featurizer stands in for a pretrained audio encoder:
per-frame features are a content-table lookup plus an additive timbre offset.
Contrastive pretraining with a synthetic timbre-conversion operator teaches
the featurizer to suppress the timbre component while a content-anchoring
term preserves what the featurizer already encodes. A single-block
two-head attention decoder fused with a speaker identity embedding maps
feature sequences to per-frame motion parameter vectors, trained against
the reconstruction + smoothness + latent-consistency objective.
"""

from dataclasses import dataclass

import numpy as np

from .head_model import HeadModel, MotionParams, deform_with_jacobian
from .objectives import (
    LossWeights,
    info_nce,
    info_nce_backward,
    latent_consistency_backward_from_features,
    rec_loss,
    rec_loss_backward,
    smooth_loss,
    smooth_loss_backward,
    translator_total,
)


@dataclass
class ToyAudio:
    """Frame-aligned token sequence with a speaker timbre id."""

    tokens: np.ndarray
    timbre: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


@dataclass
class TranslatorModel:
    """Featurizer tables, identity embeddings, and the attention decoder."""

    content_table: np.ndarray   # (vocab, D)
    timbre_table: np.ndarray    # (timbres, D)
    id_table: np.ndarray        # (speakers, D)
    wq: np.ndarray              # (D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray              # (D, H)
    b1: np.ndarray              # (H,)
    w2: np.ndarray              # (H, N)
    b2: np.ndarray              # (N,)
    n_heads: int = 2

    TRAINABLE_DECODER = ("id_table", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")

    @property
    def dim(self) -> int:
        return self.content_table.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "TranslatorModel":
        return TranslatorModel(
            self.content_table.copy(), self.timbre_table.copy(), self.id_table.copy(),
            self.wq.copy(), self.wk.copy(), self.wv.copy(), self.wo.copy(),
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.n_heads,
        )


def make_translator(out_dim: int, vocab: int = 12, n_timbres: int = 4, n_speakers: int = 4,
                    dim: int = 32, hidden: int = 32, n_heads: int = 2, seed: int = 0,
                    timbre_scale: float = 0.8) -> TranslatorModel:
    """Seeded model; timbre offsets start large so pretraining has work to do.

    The output head starts at zero so an untrained model predicts zero
    motion.
    """
    rng = np.random.default_rng(seed)
    sc = 1.0 / np.sqrt(dim)
    return TranslatorModel(
        content_table=rng.normal(0, 0.5, (vocab, dim)),
        timbre_table=rng.normal(0, timbre_scale, (n_timbres, dim)),
        id_table=rng.normal(0, 0.1, (n_speakers, dim)),
        wq=rng.normal(0, sc, (dim, dim)),
        wk=rng.normal(0, sc, (dim, dim)),
        wv=rng.normal(0, sc, (dim, dim)),
        wo=rng.normal(0, sc, (dim, dim)),
        w1=rng.normal(0, sc, (dim, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, out_dim)),
        b2=np.zeros(out_dim),
        n_heads=n_heads,
    )


# --------------------------------------------------------------------------
# featurizer


def encode_audio(audio: ToyAudio, model: TranslatorModel) -> np.ndarray:
    """Per-frame features: content embedding plus the speaker timbre offset."""
    vocab = model.content_table.shape[0]
    if audio.tokens.size and (audio.tokens.min() < 0 or audio.tokens.max() >= vocab):
        raise ValueError("unknown content token")
    if not (0 <= audio.timbre < model.timbre_table.shape[0]):
        raise ValueError(f"unknown timbre id {audio.timbre}")
    return model.content_table[audio.tokens] + model.timbre_table[audio.timbre]


def synthetic_timbre_convert(audio: ToyAudio, new_timbre: int) -> ToyAudio:
    """Replace the timbre id, keeping content tokens untouched."""
    return ToyAudio(tokens=audio.tokens.copy(), timbre=int(new_timbre))


# --------------------------------------------------------------------------
# decoder


def _attention_forward(x: np.ndarray, model: TranslatorModel):
    """Residual multi-head self-attention block; returns (h, cache)."""
    T, D = x.shape
    nh = model.n_heads
    dh = D // nh
    q = x @ model.wq
    k = x @ model.wk
    v = x @ model.wv
    qh = q.reshape(T, nh, dh).transpose(1, 0, 2)   # (nh, T, dh)
    kh = k.reshape(T, nh, dh).transpose(1, 0, 2)
    vh = v.reshape(T, nh, dh).transpose(1, 0, 2)
    scores = np.einsum("htd,hsd->hts", qh, kh) / np.sqrt(dh)
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)        # (nh, T, T)
    ctx = np.einsum("hts,hsd->htd", attn, vh)
    concat = ctx.transpose(1, 0, 2).reshape(T, D)
    out = concat @ model.wo
    h = x + out
    return h, (x, qh, kh, vh, attn, concat)


def _attention_backward(model: TranslatorModel, cache, d_h: np.ndarray):
    """VJP of _attention_forward; returns (d_x, grads dict)."""
    x, qh, kh, vh, attn, concat = cache
    T, D = x.shape
    nh = model.n_heads
    dh = D // nh
    d_x = d_h.copy()
    d_out = d_h
    d_wo = concat.T @ d_out
    d_concat = d_out @ model.wo.T
    d_ctx = d_concat.reshape(T, nh, dh).transpose(1, 0, 2)
    d_attn = np.einsum("htd,hsd->hts", d_ctx, vh)
    d_vh = np.einsum("hts,htd->hsd", attn, d_ctx)
    # softmax rows over s
    dot = np.einsum("hts,hts->ht", d_attn, attn)
    d_scores = attn * (d_attn - dot[:, :, None])
    d_scores /= np.sqrt(dh)
    d_qh = np.einsum("hts,hsd->htd", d_scores, kh)
    d_kh = np.einsum("hts,htd->hsd", d_scores, qh)
    d_q = d_qh.transpose(1, 0, 2).reshape(T, D)
    d_k = d_kh.transpose(1, 0, 2).reshape(T, D)
    d_v = d_vh.transpose(1, 0, 2).reshape(T, D)
    grads = {
        "wq": x.T @ d_q,
        "wk": x.T @ d_k,
        "wv": x.T @ d_v,
        "wo": d_wo,
    }
    d_x += d_q @ model.wq.T + d_k @ model.wk.T + d_v @ model.wv.T
    return d_x, grads


def decode_motion(features: np.ndarray, speaker_id: int, model: TranslatorModel) -> np.ndarray:
    """Map a (T, D) feature sequence to (T, N) motion parameters."""
    y, _ = decode_motion_with_cache(features, speaker_id, model)
    return y


def decode_motion_with_cache(features: np.ndarray, speaker_id: int, model: TranslatorModel):
    if not (0 <= speaker_id < model.id_table.shape[0]):
        raise ValueError(f"unknown speaker id {speaker_id}")
    x = features + model.id_table[speaker_id]
    h, attn_cache = _attention_forward(x, model)
    pre = h @ model.w1 + model.b1
    act = np.tanh(pre)
    y = act @ model.w2 + model.b2
    return y, (x, h, act, attn_cache)


def decode_motion_backward(model: TranslatorModel, cache, d_y: np.ndarray):
    """VJP of decode_motion: returns (grads dict incl. id row, d_features)."""
    x, h, act, attn_cache = cache
    grads = {
        "w2": act.T @ d_y,
        "b2": d_y.sum(axis=0),
    }
    d_act = d_y @ model.w2.T
    d_pre = d_act * (1.0 - act * act)
    grads["w1"] = h.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    d_h = d_pre @ model.w1.T
    d_x, attn_grads = _attention_backward(model, attn_cache, d_h)
    grads.update(attn_grads)
    grads["id_row"] = d_x.sum(axis=0)
    return grads, d_x


# --------------------------------------------------------------------------
# frozen encoder stubs (Eq. 7 companions at desk scale)


def make_asr_stub(vocab: int, dim: int, seed: int = 1234):
    """Frozen random projection of content tokens; timbre never enters."""
    rng = np.random.default_rng(seed)
    table = rng.normal(0, 0.5, (vocab, dim))

    def encode(audio: ToyAudio) -> np.ndarray:
        return table[audio.tokens]

    return encode


def make_lip_encoder_stub(n_lip_vertices: int, dim: int, seed: int = 4321):
    """Frozen random linear map over per-frame lip-region vertex coordinates."""
    rng = np.random.default_rng(seed)
    mat = rng.normal(0, 1.0 / np.sqrt(3 * n_lip_vertices), (3 * n_lip_vertices, dim))

    def encode(vertices: np.ndarray, lip_idx: np.ndarray) -> np.ndarray:
        T = vertices.shape[0]
        return vertices[:, lip_idx, :].reshape(T, -1) @ mat

    def backward(d_features: np.ndarray, lip_idx: np.ndarray, n_vertices: int) -> np.ndarray:
        T = d_features.shape[0]
        d_flat = d_features @ mat.T
        d_v = np.zeros((T, n_vertices, 3))
        d_v[:, lip_idx, :] = d_flat.reshape(T, lip_idx.size, 3)
        return d_v

    encode.backward = backward
    return encode


# --------------------------------------------------------------------------
# optimizer (same adaptive-moment scheme as the fitter, dict-keyed)


class _Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, grad):
        if name not in self.m:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        self.m[name] = 0.9 * self.m[name] + 0.1 * grad
        self.v[name] = 0.999 * self.v[name] + 0.001 * grad * grad
        m_hat = self.m[name] / (1.0 - 0.9 ** t)
        v_hat = self.v[name] / (1.0 - 0.999 ** t)
        return self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


# --------------------------------------------------------------------------
# contrastive pretraining


def segment_audio(audio: ToyAudio, n_segments: int):
    """Split into n_segments near-equal chunks sharing the timbre id."""
    if audio.tokens.size < n_segments:
        raise ValueError("audio too short for requested segmentation")
    return [ToyAudio(tokens=chunk, timbre=audio.timbre)
            for chunk in np.array_split(audio.tokens, n_segments)]


def pooled_feature(audio: ToyAudio, model: TranslatorModel) -> np.ndarray:
    """Mean over frame features; the segment-level contrastive unit."""
    return encode_audio(audio, model).mean(axis=0)


def make_contrastive_batch(audio: ToyAudio, k: int, n_timbres: int, rng: np.random.Generator):
    """Anchor, timbre-converted positive, and k same-timbre negatives."""
    segments = segment_audio(audio, k + 1)
    anchor_i = int(rng.integers(0, k + 1))
    anchor = segments[anchor_i]
    other = [t for t in range(n_timbres) if t != anchor.timbre]
    positive = synthetic_timbre_convert(anchor, other[int(rng.integers(0, len(other)))])
    negatives = [s for i, s in enumerate(segments) if i != anchor_i]
    return anchor, positive, negatives


def contrastive_loss(model: TranslatorModel, anchor, positive, negatives, tau: float,
                     content_init: np.ndarray, content_weight: float) -> float:
    af = pooled_feature(anchor, model)
    pf = pooled_feature(positive, model)
    nf = np.stack([pooled_feature(s, model) for s in negatives])
    anchor_term = content_weight * float(np.mean((model.content_table - content_init) ** 2))
    return info_nce(af, pf, nf, tau) + anchor_term


def pretrain_contrastive(model: TranslatorModel, corpus: list, k: int, tau: float,
                         epochs: int, seed: int = 0, lr: float = 5e-2,
                         content_weight: float = 1.0) -> TranslatorModel:
    """Fine-tune featurizer tables with InfoNCE plus content anchoring.

    Each step draws one corpus item, segments it into k+1 chunks, converts
    the anchor chunk to a random other timbre for the positive, and uses the
    remaining chunks as negatives. The content-anchoring MSE keeps content
    rows near their pretraining values, standing in for the text-preservation
    constraint whose ASR decoder is out of scope here.
    """
    if k < 1:
        raise ValueError("need at least one negative segment")
    for audio in corpus:
        if audio.tokens.size < k + 1:
            raise ValueError("k exceeds available segments in a corpus item")
    model = model.copy()
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    content_init = model.content_table.copy()
    n_timbres = model.timbre_table.shape[0]
    vocab, dim = model.content_table.shape
    adam = _Adam(lr)

    for _ in range(epochs):
        for audio in corpus:
            anchor, positive, negatives = make_contrastive_batch(audio, k, n_timbres, rng)
            af = pooled_feature(anchor, model)
            pf = pooled_feature(positive, model)
            nf = np.stack([pooled_feature(s, model) for s in negatives])
            d_a, d_p, d_n = info_nce_backward(af, pf, nf, tau)

            d_content = np.zeros_like(model.content_table)
            d_timbre = np.zeros_like(model.timbre_table)

            def scatter(seg: ToyAudio, d_feat: np.ndarray):
                w = d_feat[None, :] / seg.tokens.size
                np.add.at(d_content, seg.tokens, np.broadcast_to(w, (seg.tokens.size, dim)))
                d_timbre[seg.timbre] += d_feat

            scatter(anchor, d_a)
            scatter(positive, d_p)
            for s, d in zip(negatives, d_n):
                scatter(s, d)
            d_content += content_weight * 2.0 * (model.content_table - content_init) / model.content_table.size

            model.content_table -= adam.step("content", d_content)
            model.timbre_table -= adam.step("timbre", d_timbre)
    return model


# --------------------------------------------------------------------------
# translator training


@dataclass
class MotionSample:
    """One supervised item: audio, ground-truth parameter sequence, speaker."""

    audio: ToyAudio
    y_true: np.ndarray          # (T, N)
    speaker_id: int


def split_params(model: HeadModel, y_t: np.ndarray) -> MotionParams:
    nb, ne = model.n_beta, model.n_eps
    return MotionParams(y_t[:nb], y_t[nb:nb + ne], y_t[nb + ne:])


def lip_motion_amplitude(head: HeadModel, y_seq: np.ndarray) -> float:
    """Mean lip-vertex displacement from canonical; the aperture proxy."""
    lip_idx = head.lip_vertex_indices()
    total = 0.0
    for t in range(y_seq.shape[0]):
        from .head_model import deform

        v = deform(head, split_params(head, y_seq[t]))
        total += float(np.linalg.norm(v[lip_idx] - head.v_base[lip_idx], axis=1).mean())
    return total / y_seq.shape[0]


def translator_sample_loss(model: TranslatorModel, sample: MotionSample, head: HeadModel,
                           weights: LossWeights, asr_stub, lip_stub):
    """Loss components of one sample; returns (total, dict)."""
    feats = encode_audio(sample.audio, model)
    y_hat = decode_motion(feats, sample.speaker_id, model)
    T = y_hat.shape[0]
    lip_idx = head.lip_vertex_indices()

    v_hat = np.empty((T, head.n_vertices, 3))
    v_true = np.empty((T, head.n_vertices, 3))
    from .head_model import deform

    for t in range(T):
        v_hat[t] = deform(head, split_params(head, y_hat[t]))
        v_true[t] = deform(head, split_params(head, sample.y_true[t]))

    rec = rec_loss(y_hat, sample.y_true, v_hat, v_true, weights)
    sth = smooth_loss(y_hat, sample.y_true, weights)
    audio_feat = asr_stub(sample.audio)
    lip_feat = lip_stub(v_hat, lip_idx)
    T_, D_ = audio_feat.shape
    lat = weights.lambda_lat * float(np.sum((audio_feat - lip_feat) ** 2)) / (D_ * T_)
    return translator_total(rec, sth, lat), {"rec": rec, "sth": sth, "lat": lat}


def train_translator(model: TranslatorModel, dataset: list, head: HeadModel,
                     weights: LossWeights, epochs: int, seed: int = 0,
                     lr: float = 2e-3) -> TranslatorModel:
    """Optimize the decoder and identity embeddings against Eq.-style losses.

    Featurizer tables stay frozen (they belong to the pretrained encoder);
    the decoder, head, and identity embeddings train with Adam. Deterministic
    for a fixed seed: samples are visited in a seeded shuffled order.
    """
    model = model.copy()
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    adam = _Adam(lr)
    lip_stub = make_lip_encoder_stub(head.lip_vertex_indices().size, model.dim)
    asr_stub = make_asr_stub(model.content_table.shape[0], model.dim)
    lip_idx = head.lip_vertex_indices()

    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for si in order:
            sample = dataset[si]
            feats = encode_audio(sample.audio, model)
            y_hat, cache = decode_motion_with_cache(feats, sample.speaker_id, model)
            T = y_hat.shape[0]

            v_hat = np.empty((T, head.n_vertices, 3))
            v_true = np.empty((T, head.n_vertices, 3))
            jacs = []
            from .head_model import deform

            for t in range(T):
                v_hat[t], jac = deform_with_jacobian(head, split_params(head, y_hat[t]))
                jacs.append(jac)
                v_true[t] = deform(head, split_params(head, sample.y_true[t]))

            d_y, d_v = rec_loss_backward(y_hat, sample.y_true, v_hat, v_true, weights)
            d_y = d_y + smooth_loss_backward(y_hat, sample.y_true, weights)
            audio_feat = asr_stub(sample.audio)
            lip_feat = lip_stub(v_hat, lip_idx)
            d_lip = latent_consistency_backward_from_features(audio_feat, lip_feat, weights)
            d_v = d_v + lip_stub.backward(d_lip, lip_idx, head.n_vertices)
            for t in range(T):
                d_y[t] += np.einsum("kcp,kc->p", jacs[t], d_v[t])

            grads, _ = decode_motion_backward(model, cache, d_y)
            for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
                arr = getattr(model, name)
                arr -= adam.step(name, grads[name])
            d_id = np.zeros_like(model.id_table)
            d_id[sample.speaker_id] = grads["id_row"]
            model.id_table -= adam.step("id_table", d_id)
    return model
