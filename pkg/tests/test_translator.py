import numpy as np
import pytest

from headsplat.head_model import make_synthetic_head
from headsplat.objectives import LossWeights, info_nce
from headsplat.translator import (
    MotionSample,
    ToyAudio,
    contrastive_loss,
    decode_motion,
    decode_motion_backward,
    decode_motion_with_cache,
    encode_audio,
    lip_motion_amplitude,
    make_asr_stub,
    make_contrastive_batch,
    make_lip_encoder_stub,
    make_translator,
    pooled_feature,
    pretrain_contrastive,
    segment_audio,
    synthetic_timbre_convert,
    train_translator,
    translator_sample_loss,
)

OUT_DIM = 20  # 4 beta + 10 eps + 6 psi of the synthetic head


def small_model(seed=0, **kw):
    return make_translator(out_dim=OUT_DIM, vocab=8, n_timbres=3, n_speakers=3,
                           dim=16, hidden=12, n_heads=2, seed=seed, **kw)


# --- featurizer -------------------------------------------------------------


def test_encode_zero_tables_gives_zero_features():
    m = small_model()
    m.content_table[:] = 0.0
    m.timbre_table[:] = 0.0
    f = encode_audio(ToyAudio([0, 1, 2], 1), m)
    assert np.array_equal(f, np.zeros((3, 16)))


def test_encode_same_content_same_timbre_identical():
    m = small_model()
    f1 = encode_audio(ToyAudio([3, 1, 4], 2), m)
    f2 = encode_audio(ToyAudio([3, 1, 4], 2), m)
    assert np.array_equal(f1, f2)


def test_encode_is_table_plus_offset():
    m = small_model()
    audio = ToyAudio([5, 0], 1)
    f = encode_audio(audio, m)
    assert np.array_equal(f[0], m.content_table[5] + m.timbre_table[1])
    assert np.array_equal(f[1], m.content_table[0] + m.timbre_table[1])


def test_encode_unknown_token_raises():
    m = small_model()
    with pytest.raises(ValueError):
        encode_audio(ToyAudio([99], 0), m)
    with pytest.raises(ValueError):
        encode_audio(ToyAudio([0], 17), m)


def test_timbre_convert_involution_and_content():
    audio = ToyAudio([1, 2, 3, 4], 0)
    conv = synthetic_timbre_convert(audio, 2)
    assert conv.timbre == 2
    assert np.array_equal(conv.tokens, audio.tokens)
    back = synthetic_timbre_convert(conv, 0)
    assert back.timbre == audio.timbre
    assert np.array_equal(back.tokens, audio.tokens)


# --- decoder ----------------------------------------------------------------


def test_decode_zero_weights_gives_zero_params():
    m = small_model()
    feats = encode_audio(ToyAudio([0, 1, 2, 3], 0), m)
    y = decode_motion(feats, 0, m)  # w2 and b2 start at zero
    assert np.array_equal(y, np.zeros((4, OUT_DIM)))


def test_decode_output_shape_and_purity():
    m = small_model()
    m.w2 = np.random.default_rng(1).normal(0, 0.1, m.w2.shape)
    feats = encode_audio(ToyAudio([0, 1, 2, 3, 4], 1), m)
    y1 = decode_motion(feats, 1, m)
    y2 = decode_motion(feats, 1, m)
    assert y1.shape == (5, OUT_DIM)
    assert np.array_equal(y1, y2)


def test_decode_unknown_speaker_raises():
    m = small_model()
    feats = encode_audio(ToyAudio([0], 0), m)
    with pytest.raises(ValueError):
        decode_motion(feats, 7, m)


def test_decode_single_frame_matches_closed_form():
    # with one token, each head's softmax is the scalar 1, so the block output
    # is x + (x Wv) Wo, followed by the tanh head
    m = small_model(seed=3)
    rng = np.random.default_rng(4)
    m.w2 = rng.normal(0, 0.2, m.w2.shape)
    m.b2 = rng.normal(0, 0.2, m.b2.shape)
    audio = ToyAudio([5], 2)
    feats = encode_audio(audio, m)
    got = decode_motion(feats, 1, m)

    x = feats + m.id_table[1]
    h = x + (x @ m.wv) @ m.wo
    want = np.tanh(h @ m.w1 + m.b1) @ m.w2 + m.b2
    assert np.allclose(got, want, atol=1e-12)


def test_decode_backward_matches_fd():
    m = small_model(seed=5)
    rng = np.random.default_rng(6)
    m.w2 = rng.normal(0, 0.2, m.w2.shape)
    m.b2 = rng.normal(0, 0.2, m.b2.shape)
    feats = encode_audio(ToyAudio([0, 3, 1, 6], 1), m)
    up = rng.normal(size=(4, OUT_DIM))

    def f(model):
        return float(np.sum(decode_motion(feats, 2, model) * up))

    _, cache = decode_motion_with_cache(feats, 2, m)
    grads, _ = decode_motion_backward(m, cache, up)
    h = 1e-6
    for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
        arr = getattr(m, name)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            mp, mm = m.copy(), m.copy()
            getattr(mp, name)[idx] += h
            getattr(mm, name)[idx] -= h
            fd = (f(mp) - f(mm)) / (2 * h)
            assert abs(grads[name][idx] - fd) < 1e-5, (name, idx)
    # identity row
    for d in range(m.dim):
        mp, mm = m.copy(), m.copy()
        mp.id_table[2, d] += h
        mm.id_table[2, d] -= h
        fd = (f(mp) - f(mm)) / (2 * h)
        assert abs(grads["id_row"][d] - fd) < 1e-5


# --- pretraining ------------------------------------------------------------


def make_corpus(rng, n_items=6, length=24, vocab=8, n_timbres=3):
    return [ToyAudio(rng.integers(0, vocab, length), int(rng.integers(0, n_timbres)))
            for _ in range(n_items)]


def test_segment_audio_partitions_tokens():
    audio = ToyAudio(np.arange(10), 1)
    segs = segment_audio(audio, 3)
    assert len(segs) == 3
    assert np.array_equal(np.concatenate([s.tokens for s in segs]), np.arange(10))
    assert all(s.timbre == 1 for s in segs)


def test_pretrain_zero_epochs_is_noop():
    m = small_model()
    rng = np.random.default_rng(7)
    corpus = make_corpus(rng)
    m2 = pretrain_contrastive(m, corpus, k=3, tau=0.2, epochs=0, seed=0)
    assert np.array_equal(m2.content_table, m.content_table)
    assert np.array_equal(m2.timbre_table, m.timbre_table)


def test_pretrain_k_too_large_raises():
    m = small_model()
    with pytest.raises(ValueError):
        pretrain_contrastive(m, [ToyAudio(np.arange(3), 0)], k=5, tau=0.2, epochs=1)


def test_pretrain_reduces_loss_on_first_batch():
    m = small_model(seed=8)
    rng = np.random.default_rng(9)
    corpus = make_corpus(rng, n_items=8, length=30)
    anchor, positive, negatives = make_contrastive_batch(
        corpus[0], 3, m.timbre_table.shape[0], np.random.default_rng(0))
    before = contrastive_loss(m, anchor, positive, negatives, 0.2, m.content_table.copy(), 1.0)
    trained = pretrain_contrastive(m, corpus, k=3, tau=0.2, epochs=40, seed=1)
    after = contrastive_loss(trained, anchor, positive, negatives, 0.2, m.content_table.copy(), 1.0)
    assert after < before


def test_pretrain_improves_anchor_positive_similarity():
    m = small_model(seed=10, timbre_scale=1.2)
    rng = np.random.default_rng(11)
    corpus = make_corpus(rng, n_items=10, length=30)
    trained = pretrain_contrastive(m, corpus, k=3, tau=0.2, epochs=60, seed=2)

    def cosine(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

    eval_rng = np.random.default_rng(12)
    held = make_corpus(eval_rng, n_items=20, length=30)
    wins = 0
    total = 0
    for audio in held:
        anchor, positive, negatives = make_contrastive_batch(audio, 3, 3, eval_rng)
        af = pooled_feature(anchor, trained)
        pf = pooled_feature(positive, trained)
        sims_n = [cosine(af, pooled_feature(s, trained)) for s in negatives]
        wins += cosine(af, pf) > max(sims_n)
        total += 1
    assert wins / total >= 0.8


# --- training ---------------------------------------------------------------


def sine_motion(head, T, amplitude, rng):
    y = np.zeros((T, head.param_dim()))
    t = np.arange(T)
    # jaw-open expression channel plus small secondary channels
    y[:, head.n_beta] = amplitude * np.abs(np.sin(2 * np.pi * t / T))
    y[:, head.n_beta + 1] = 0.3 * amplitude * np.sin(4 * np.pi * t / T)
    return y


def test_train_zero_epochs_is_noop():
    head = make_synthetic_head(seed=0, n_rings=4, n_segments=6)
    m = make_translator(out_dim=head.param_dim(), vocab=8, dim=16, hidden=12, seed=0)
    rng = np.random.default_rng(13)
    sample = MotionSample(ToyAudio(rng.integers(0, 8, 10), 0), sine_motion(head, 10, 0.5, rng), 0)
    m2 = train_translator(m, [sample], head, LossWeights(), epochs=0)
    for name in ("wq", "w2", "id_table"):
        assert np.array_equal(getattr(m2, name), getattr(m, name))


def test_train_reduces_sample_loss():
    head = make_synthetic_head(seed=0, n_rings=4, n_segments=6)
    m = make_translator(out_dim=head.param_dim(), vocab=8, dim=16, hidden=12, seed=1)
    rng = np.random.default_rng(14)
    sample = MotionSample(ToyAudio(rng.integers(0, 8, 12), 1), sine_motion(head, 12, 0.4, rng), 0)
    weights = LossWeights()
    asr = make_asr_stub(8, 16)
    lip = make_lip_encoder_stub(head.lip_vertex_indices().size, 16)
    before, _ = translator_sample_loss(m, sample, head, weights, asr, lip)
    trained = train_translator(m, [sample], head, weights, epochs=60, seed=3, lr=5e-3)
    after, _ = translator_sample_loss(trained, sample, head, weights, asr, lip)
    assert after < before


def test_train_identity_sensitivity():
    head = make_synthetic_head(seed=0, n_rings=4, n_segments=6)
    m = make_translator(out_dim=head.param_dim(), vocab=8, dim=16, hidden=12, seed=2)
    rng = np.random.default_rng(15)
    audio = ToyAudio(rng.integers(0, 8, 12), 0)
    samples = [
        MotionSample(audio, sine_motion(head, 12, 0.8, rng), 0),
        MotionSample(audio, sine_motion(head, 12, 0.2, rng), 1),
    ]
    trained = train_translator(m, samples, head, LossWeights(), epochs=80, seed=4, lr=5e-3)
    feats = encode_audio(audio, trained)
    y0 = decode_motion(feats, 0, trained)
    y1 = decode_motion(feats, 1, trained)
    assert np.max(np.abs(y0 - y1)) > 1e-6


def test_lip_motion_amplitude_scales_with_params():
    head = make_synthetic_head(seed=0, n_rings=4, n_segments=6)
    rng = np.random.default_rng(16)
    y_small = sine_motion(head, 8, 0.2, rng)
    y_big = sine_motion(head, 8, 0.6, rng)
    a_small = lip_motion_amplitude(head, y_small)
    a_big = lip_motion_amplitude(head, y_big)
    assert a_big > 2.0 * a_small
