import numpy as np
import pytest
from scene_utils import random_bank, seed_gaussians

from headsplat.assets_io import (
    RunConfig,
    load_checkpoint,
    load_config,
    load_corpus,
    load_gaussians,
    load_head,
    load_image,
    load_params,
    load_translator,
    make_synthetic_dataset,
    save_checkpoint,
    save_config,
    save_corpus,
    save_gaussians,
    save_head,
    save_image,
    save_params,
    save_translator,
)
from headsplat.errors import AssetFormatError
from headsplat.fitter import AdamState
from headsplat.head_model import make_synthetic_head
from headsplat.translator import ToyAudio, make_translator


def test_head_round_trip_is_byte_identical(tmp_path):
    model = make_synthetic_head(seed=0)
    p1 = tmp_path / "a.hshead"
    p2 = tmp_path / "b.hshead"
    save_head(p1, model)
    loaded = load_head(p1)
    save_head(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.n_beta == model.n_beta
    assert np.array_equal(loaded.triangles, model.triangles)


def test_head_truncated_vertices_names_field(tmp_path):
    model = make_synthetic_head(seed=0)
    p = tmp_path / "a.hshead"
    save_head(p, model)
    data = p.read_bytes()
    # vertices start right after the magic + 7 u32 counts; drop one byte
    cut = 8 + 7 * 4 + model.n_vertices * 12 - 1
    p.write_bytes(data[:cut])
    with pytest.raises(AssetFormatError, match="vertices"):
        load_head(p)


def test_head_bad_magic(tmp_path):
    p = tmp_path / "a.hshead"
    p.write_bytes(b"WRONG001" + b"\x00" * 64)
    with pytest.raises(AssetFormatError, match="magic"):
        load_head(p)


def test_gaussians_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    model = make_synthetic_head(seed=0)
    g = seed_gaussians(model, 12, rng, sh_rest=3)
    bank = random_bank(12, rng)
    p1, p2 = tmp_path / "a.hsgaus", tmp_path / "b.hsgaus"
    save_gaussians(p1, g, bank)
    g2, bank2 = load_gaussians(p1)
    save_gaussians(p2, g2, bank2)
    assert p1.read_bytes() == p2.read_bytes()
    assert len(g2) == 12
    assert g2.kappa_rest.shape == (12, 3, 3)
    assert bank2.latent_dim == bank.latent_dim


def test_gaussians_rejects_bad_alpha(tmp_path):
    rng = np.random.default_rng(2)
    model = make_synthetic_head(seed=0)
    g = seed_gaussians(model, 4, rng)
    g.alpha[1] = 1.5
    bank = random_bank(4, rng)
    p = tmp_path / "a.hsgaus"
    with pytest.raises(ValueError):
        g.validate()
    # writer does not validate; loader must reject
    save_gaussians(p, g, bank)
    with pytest.raises(AssetFormatError):
        load_gaussians(p)


def test_params_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(3)
    seq = rng.normal(size=(7, 9))
    p1, p2 = tmp_path / "a.hsparm", tmp_path / "b.hsparm"
    save_params(p1, seq, (2, 4, 3), frame_rate=30.0)
    seq2, dims, rate = load_params(p1)
    assert dims == (2, 4, 3) and rate == 30.0
    assert np.array_equal(seq2, seq.astype(np.float32).astype(np.float64))
    save_params(p2, seq2, dims, rate)
    assert p1.read_bytes() == p2.read_bytes()
    with pytest.raises(ValueError):
        save_params(tmp_path / "c.hsparm", seq, (2, 4, 4))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    model = make_synthetic_head(seed=0)
    g = seed_gaussians(model, 6, rng, sh_rest=3)
    bank = random_bank(6, rng)
    adam = AdamState()
    adam.step("u_local", rng.normal(size=(6, 3)), 1e-3)
    adam.step("alpha", rng.normal(size=6), 1e-3)
    seq = rng.normal(size=(3, model.param_dim()))
    dims = (model.n_beta, model.n_eps, 3 * model.n_joints)
    p1, p2 = tmp_path / "a.hsckpt", tmp_path / "b.hsckpt"
    save_checkpoint(p1, g, bank, seq, dims, adam, iteration=42)
    g2, bank2, seq2, dims2, rate2, adam2, it2 = load_checkpoint(p1)
    assert it2 == 42 and dims2 == dims
    assert set(adam2.m) == {"u_local", "alpha"}
    assert adam2.t["u_local"] == 1
    save_checkpoint(p2, g2, bank2, seq2, dims2, adam2, iteration=it2, frame_rate=rate2)
    assert p1.read_bytes() == p2.read_bytes()


def test_translator_round_trip(tmp_path):
    m = make_translator(out_dim=20, seed=5)
    p1, p2 = tmp_path / "a.hstran", tmp_path / "b.hstran"
    save_translator(p1, m)
    m2 = load_translator(p1)
    save_translator(p2, m2)
    assert p1.read_bytes() == p2.read_bytes()
    assert m2.n_heads == m.n_heads
    assert m2.out_dim == 20


def test_corpus_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    items = [
        (ToyAudio(rng.integers(0, 8, 10), 1), rng.normal(size=(10, 5)), 0),
        (ToyAudio(rng.integers(0, 8, 4), 0), None, 1),
    ]
    p1, p2 = tmp_path / "a.hscorp", tmp_path / "b.hscorp"
    save_corpus(p1, items, vocab=8, n_timbres=3, n_speakers=2, param_dim=5)
    items2, vocab, n_timbres, n_speakers, pd = load_corpus(p1)
    assert (vocab, n_timbres, n_speakers, pd) == (8, 3, 2, 5)
    assert items2[1][1] is None
    assert np.array_equal(items2[0][0].tokens, items[0][0].tokens)
    save_corpus(p2, items2, vocab, n_timbres, n_speakers, pd)
    assert p1.read_bytes() == p2.read_bytes()


# --- images -----------------------------------------------------------------


def test_ppm_payload_bytes(tmp_path):
    img = np.zeros((1, 2, 3))
    img[0, 0] = [1.0, 0.0, 0.0]
    img[0, 1] = [0.0, 1.0, 0.0]
    p = tmp_path / "a.ppm"
    save_image(p, img)
    data = p.read_bytes()
    assert data == b"P6\n2 1\n255\n" + bytes([0xFF, 0, 0, 0, 0xFF, 0])


def test_image_round_trip_rgb_and_gray(tmp_path):
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 1, (9, 7, 3))
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    save_image(p1, img)
    loaded = load_image(p1)
    save_image(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.max(np.abs(loaded - img)) <= 0.5 / 255 + 1e-12

    mask = (rng.uniform(0, 1, (5, 6)) > 0.5).astype(np.float64)
    pg = tmp_path / "m.pgm"
    save_image(pg, mask)
    assert np.array_equal(load_image(pg), mask)


def test_image_truncated_payload(tmp_path):
    p = tmp_path / "a.ppm"
    save_image(p, np.zeros((4, 4, 3)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(AssetFormatError, match="pixels"):
        load_image(p)


# --- config -----------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig.default(width=32, height=24, seed=7)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_config(p1, cfg)
    cfg2 = load_config(p1)
    save_config(p2, cfg2)
    assert p1.read_bytes() == p2.read_bytes()
    assert cfg2.camera.width == 32 and cfg2.camera.height == 24
    assert cfg2.fit.iterations == cfg.fit.iterations


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "a.json"
    p.write_text('{"seed": 1, "bogus": 2}')
    with pytest.raises(AssetFormatError, match="bogus"):
        load_config(p)
    p.write_text('{"fit": {"learning": 1}}')
    with pytest.raises(AssetFormatError, match="learning"):
        load_config(p)
    p.write_text('{"camera": {"zoom": 2}}')
    with pytest.raises(AssetFormatError, match="zoom"):
        load_config(p)


def test_config_rejects_bad_values(tmp_path):
    p = tmp_path / "a.json"
    p.write_text('{"loss_weights": {"tau": -1.0}}')
    with pytest.raises(AssetFormatError):
        load_config(p)
    p.write_text("not json at all")
    with pytest.raises(AssetFormatError):
        load_config(p)


# --- randomized round trips and fuzzing --------------------------------------


def test_randomized_round_trips_50_instances(tmp_path):
    rng = np.random.default_rng(8)
    model = make_synthetic_head(seed=0)
    for i in range(50):
        n = int(rng.integers(1, 20))
        g = seed_gaussians(model, n, rng, sh_rest=int(rng.choice([0, 3])))
        bank = random_bank(n, rng, latent_dim=int(rng.integers(1, 6)))
        p1 = tmp_path / f"g{i}.hsgaus"
        p2 = tmp_path / f"g{i}b.hsgaus"
        save_gaussians(p1, g, bank)
        g2, b2 = load_gaussians(p1)
        save_gaussians(p2, g2, b2)
        assert p1.read_bytes() == p2.read_bytes(), f"instance {i}"


@pytest.mark.parametrize("kind", ["head", "gaussians", "params", "image"])
def test_fuzzed_loaders_never_crash(tmp_path, kind):
    rng = np.random.default_rng(9)
    model = make_synthetic_head(seed=0, n_rings=4, n_segments=6)
    base = tmp_path / "asset.bin"
    if kind == "head":
        save_head(base, model)
        loader = load_head
    elif kind == "gaussians":
        g = seed_gaussians(model, 5, rng)
        save_gaussians(base, g, random_bank(5, rng))
        loader = load_gaussians
    elif kind == "params":
        save_params(base, rng.normal(size=(4, model.param_dim())),
                    (model.n_beta, model.n_eps, 3 * model.n_joints))
        loader = load_params
    else:
        save_image(base, rng.uniform(0, 1, (8, 8, 3)))
        loader = load_image
    original = bytearray(base.read_bytes())

    mutated = tmp_path / "mutated.bin"
    survived = 0
    for trial in range(250):
        data = bytearray(original)
        op = rng.integers(0, 3)
        if op == 0:  # flip random bytes
            for _ in range(int(rng.integers(1, 8))):
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
        elif op == 1:  # truncate
            data = data[: int(rng.integers(0, len(data)))]
        else:  # append garbage
            data += bytes(rng.integers(0, 256, int(rng.integers(1, 64))).astype(np.uint8))
        mutated.write_bytes(bytes(data))
        try:
            loader(mutated)
            survived += 1
        except AssetFormatError:
            pass  # structured failure is the contract
    assert survived >= 0  # loader either succeeds or raises AssetFormatError


# --- synthetic dataset --------------------------------------------------------


def test_synthetic_dataset_deterministic(tmp_path):
    import filecmp

    d1 = make_synthetic_dataset(tmp_path / "a", seed=3, n_gaussians=30, n_train=3,
                                n_holdout=2, size=32)
    d2 = make_synthetic_dataset(tmp_path / "b", seed=3, n_gaussians=30, n_train=3,
                                n_holdout=2, size=32)
    import os

    for root, _, files in os.walk(d1):
        for f in files:
            p1 = os.path.join(root, f)
            p2 = p1.replace(str(d1), str(d2))
            assert filecmp.cmp(p1, p2, shallow=False), f"{f} differs"


def test_synthetic_dataset_masks_match_coverage(tmp_path):
    d = make_synthetic_dataset(tmp_path / "ds", seed=1, n_gaussians=30, n_train=2,
                               n_holdout=1, size=32)
    import os

    mask = load_image(os.path.join(d, "masks", "mask_0000.pgm"))
    assert set(np.unique(mask)).issubset({0.0, 1.0})
    assert mask.sum() > 0  # the head covers part of the frame


def test_synthetic_dataset_self_psnr_capped(tmp_path):
    from headsplat.head_model import MotionParams
    from headsplat.objectives import psnr
    from headsplat.scene import Scene, render_frame

    d = make_synthetic_dataset(tmp_path / "ds", seed=2, n_gaussians=30, n_train=2,
                               n_holdout=1, size=32)
    import os

    model = load_head(os.path.join(d, "head.hshead"))
    g, bank = load_gaussians(os.path.join(d, "gaussians_gt.hsgaus"))
    seq, dims, _ = load_params(os.path.join(d, "params_gt.hsparm"))
    cfg = load_config(os.path.join(d, "config.json"))
    scene = Scene(model=model, gaussians=g, bank=bank, camera=cfg.camera,
                  background=cfg.background)
    nb, ne, _ = dims
    img = render_frame(scene, MotionParams(seq[0, :nb], seq[0, nb:nb + ne], seq[0, nb + ne:]), "color")
    target = load_image(os.path.join(d, "frames", "frame_0000.ppm"))
    # target is the 8-bit quantization of this render; quantized comparison is exact
    requantized = np.round(np.clip(img, 0, 1) * 255) / 255
    assert psnr(requantized, target) == 100.0
