"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: synth, animate, render, fit, train-motion, eval, bench. Every
command is deterministic for fixed inputs and seed: reports carry stable key
order and wall-clock measurements go to a separate timing sidecar file.

Exit codes: 0 success, 2 bad arguments, 3 malformed input file, 4 numerical
failure. The HEADSPLAT_THREADS environment variable sets the default worker
count; --threads overrides it.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import assets_io
from .errors import AssetFormatError, NumericalDivergenceError
from .fitter import fit
from .head_model import MotionParams
from .objectives import psnr, ssim
from .renderer import composite_inpaint
from .scene import FrameData, Scene, gaussian_globals, render_frame
from .translator import MotionSample, ToyAudio, make_translator, pretrain_contrastive, train_translator


def _thread_count(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("HEADSPLAT_THREADS", "")
    if env.isdigit() and int(env) > 0:
        return int(env)
    return 1


def _params_rows(seq: np.ndarray, dims):
    nb, ne, _ = dims
    return [MotionParams(row[:nb].copy(), row[nb:nb + ne].copy(), row[nb + ne:].copy())
            for row in seq]


def _load_scene(head_path, gaussians_path, config):
    model = assets_io.load_head(head_path)
    gaussians, bank = assets_io.load_gaussians(gaussians_path)
    if bank.w1.shape[1] != 3 * model.n_joints:
        raise AssetFormatError(
            f"{gaussians_path}: latent-pose input dim {bank.w1.shape[1]} does not match "
            f"head pose dim {3 * model.n_joints}")
    if gaussians.parent.size and gaussians.parent.max() >= model.n_triangles:
        raise AssetFormatError(f"{gaussians_path}: parent triangle out of range for head")
    return Scene(model=model, gaussians=gaussians, bank=bank,
                 camera=config.camera, background=config.background)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    assets_io.make_synthetic_dataset(args.out, seed=args.seed, n_gaussians=args.gaussians,
                                     n_train=args.train, n_holdout=args.holdout, size=args.size)
    print(f"synthetic dataset written to {args.out}")
    return 0


def cmd_animate(args) -> int:
    config = assets_io.load_config(args.config) if args.config else assets_io.RunConfig.default()
    scene = _load_scene(args.head, args.gaussians, config)
    if args.banks:
        _, bank = assets_io.load_gaussians(args.banks)
        if bank.n_rows != len(scene.gaussians):
            raise AssetFormatError(f"{args.banks}: bank rows do not match gaussian count")
        scene.bank = bank
    seq, dims, _ = assets_io.load_params(args.params)
    os.makedirs(args.out, exist_ok=True)
    for t, params in enumerate(_params_rows(seq, dims)):
        st = gaussian_globals(scene.model, scene.gaussians, scene.bank, params)
        assets_io.save_globals(os.path.join(args.out, f"frame_{t:04d}.hsglob"),
                               st.u, st.r, st.s, scene.gaussians.alpha, st.kappa0_comp)
    print(f"wrote {seq.shape[0]} global-gaussian dumps to {args.out}")
    return 0


def cmd_render(args) -> int:
    config = assets_io.load_config(args.config)
    scene = _load_scene(args.head, args.gaussians, config)
    seq, dims, _ = assets_io.load_params(args.params)
    threads = _thread_count(args)
    os.makedirs(args.out, exist_ok=True)
    if bool(args.composite) != bool(args.masks):
        raise AssetFormatError("--composite and --masks must be given together")
    for t, params in enumerate(_params_rows(seq, dims)):
        img = render_frame(scene, params, args.mode, n_threads=threads)
        if args.composite:
            ori = assets_io.load_image(os.path.join(args.composite, f"frame_{t:04d}.ppm"))
            mask = assets_io.load_image(os.path.join(args.masks, f"mask_{t:04d}.pgm"))
            if ori.shape[:2] != img.shape[:2] or mask.shape != img.shape[:2]:
                raise AssetFormatError(f"frame {t}: composite image dimensions differ")
            img = np.clip(composite_inpaint(ori, img, mask), 0.0, 1.0)
        assets_io.save_image(os.path.join(args.out, f"frame_{t:04d}.ppm"), img)
    print(f"rendered {seq.shape[0]} frames to {args.out}")
    return 0


def _load_dataset(dataset_dir):
    manifest_path = os.path.join(dataset_dir, "manifest.json")
    import json

    try:
        with open(manifest_path, "r", encoding="ascii") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise AssetFormatError(f"{manifest_path}: cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AssetFormatError(f"{manifest_path}: malformed JSON: {exc}") from exc
    known = {"n_frames", "train_frames", "holdout_frames", "width", "height",
             "n_gaussians", "seed"}
    unknown = set(manifest) - known
    if unknown:
        raise AssetFormatError(f"{manifest_path}: unknown keys {sorted(unknown)}")
    return manifest


def cmd_fit(args) -> int:
    config = assets_io.load_config(args.config)
    manifest = _load_dataset(args.dataset)
    d = args.dataset
    model = assets_io.load_head(os.path.join(d, "head.hshead"))
    gaussians, bank = assets_io.load_gaussians(os.path.join(d, "gaussians_init.hsgaus"))
    seq, dims, rate = assets_io.load_params(os.path.join(d, "params_init.hsparm"))
    rows = _params_rows(seq, dims)

    train_frames, holdout_frames = [], []
    for t in manifest["train_frames"]:
        train_frames.append(FrameData(
            params=rows[t],
            target=assets_io.load_image(os.path.join(d, "frames", f"frame_{t:04d}.ppm")),
            semantic=assets_io.load_image(os.path.join(d, "semantic", f"sem_{t:04d}.ppm")),
            mask=assets_io.load_image(os.path.join(d, "masks", f"mask_{t:04d}.pgm")),
        ))
    for t in manifest["holdout_frames"]:
        holdout_frames.append(FrameData(
            params=rows[t],
            target=assets_io.load_image(os.path.join(d, "frames", f"frame_{t:04d}.ppm")),
        ))

    scene = Scene(model=model, gaussians=gaussians, bank=bank,
                  camera=config.camera, background=config.background)
    threads = _thread_count(args)
    scene, report = fit(scene, train_frames, config.fit, holdout=holdout_frames,
                        n_threads=threads)

    fitted_seq = np.stack([f.params.stacked for f in train_frames]
                          + [rows[t].stacked for t in manifest["holdout_frames"]])
    from .fitter import AdamState

    assets_io.save_checkpoint(args.out, scene.gaussians, scene.bank, fitted_seq, dims,
                              AdamState(), report.iterations_run, frame_rate=rate)
    report_path = args.report or (args.out + ".report.json")
    assets_io.write_json_stable(report_path, {
        "losses": report.losses,
        "holdout_psnr": report.holdout_psnr,
        "holdout_ssim": report.holdout_ssim,
        "final_gaussians": report.final_gaussians,
        "iterations_run": report.iterations_run,
        "diverged": report.diverged,
    })
    assets_io.write_json_stable(report_path + ".timing.json",
                                {"wall_clock_s": report.wall_clock_s})
    mean_psnr = float(np.mean(report.holdout_psnr)) if report.holdout_psnr else float("nan")
    print(f"fit finished: {report.iterations_run} iterations, "
          f"{report.final_gaussians} gaussians, holdout mean PSNR {mean_psnr:.2f} dB")
    return 0


def cmd_train_motion(args) -> int:
    config = assets_io.load_config(args.config)
    corpus_path = args.corpus
    if os.path.isdir(corpus_path):
        corpus_path = os.path.join(corpus_path, "corpus.hscorp")
    items, vocab, n_timbres, n_speakers, param_dim = assets_io.load_corpus(corpus_path)
    model = assets_io.load_head(args.head)
    if param_dim != model.param_dim():
        raise AssetFormatError(
            f"{corpus_path}: param dim {param_dim} does not match head {model.param_dim()}")
    tr = config.translator
    translator = make_translator(out_dim=param_dim, vocab=vocab, n_timbres=n_timbres,
                                 n_speakers=n_speakers, dim=tr["dim"], hidden=tr["hidden"],
                                 n_heads=tr["heads"], seed=tr["seed"])
    audios = [it[0] for it in items]
    translator = pretrain_contrastive(translator, audios, k=tr["pretrain_k"],
                                      tau=tr["pretrain_tau"], epochs=tr["pretrain_epochs"],
                                      seed=tr["seed"], lr=tr["pretrain_lr"],
                                      content_weight=tr["content_weight"])
    dataset = [MotionSample(audio=a, y_true=y, speaker_id=s)
               for a, y, s in items if y is not None]
    if not dataset:
        raise AssetFormatError(f"{corpus_path}: no supervised items (parameter sequences missing)")
    t0 = time.perf_counter()
    translator = train_translator(translator, dataset, model, config.weights,
                                  epochs=tr["epochs"], seed=tr["seed"], lr=tr["lr"])
    wall = time.perf_counter() - t0
    assets_io.save_translator(args.out, translator)
    from .translator import make_asr_stub, make_lip_encoder_stub, translator_sample_loss

    asr = make_asr_stub(vocab, translator.dim)
    lip = make_lip_encoder_stub(model.lip_vertex_indices().size, translator.dim)
    finals = [translator_sample_loss(translator, s, model, config.weights, asr, lip)[0]
              for s in dataset]
    assets_io.write_json_stable(args.out + ".report.json", {
        "items": len(dataset),
        "epochs": tr["epochs"],
        "final_sample_losses": finals,
    })
    assets_io.write_json_stable(args.out + ".report.json.timing.json", {"wall_clock_s": wall})
    print(f"translator trained on {len(dataset)} items; checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_files = sorted(f for f in os.listdir(args.pred) if f.endswith(".ppm"))
    gt_files = sorted(f for f in os.listdir(args.gt) if f.endswith(".ppm"))
    if not pred_files or pred_files != gt_files:
        raise AssetFormatError("prediction and ground-truth directories must hold the same frames")
    rows = []
    for name in pred_files:
        a = assets_io.load_image(os.path.join(args.pred, name))
        b = assets_io.load_image(os.path.join(args.gt, name))
        if a.shape != b.shape:
            raise AssetFormatError(f"{name}: image dimensions differ")
        rows.append((name, psnr(a, b), ssim(a, b)))
    print(f"{'frame':<20} {'psnr_db':>10} {'ssim':>10}")
    for name, p, s in rows:
        print(f"{name:<20} {p:>10.4f} {s:>10.6f}")
    mp = sum(r[1] for r in rows) / len(rows)
    ms = sum(r[2] for r in rows) / len(rows)
    print(f"{'mean':<20} {mp:>10.4f} {ms:>10.6f}")
    return 0


def cmd_bench(args) -> int:
    config = assets_io.load_config(args.config)
    scene = _load_scene(args.head, args.gaussians, config)
    threads = _thread_count(args)
    rng = np.random.default_rng(config.seed)
    nb, ne, nj = scene.model.n_beta, scene.model.n_eps, 3 * scene.model.n_joints
    phases = rng.uniform(0, 2 * np.pi, 3)
    t0 = time.perf_counter()
    for t in range(args.frames):
        x = t / max(args.frames, 1)
        params = MotionParams(np.zeros(nb), np.zeros(ne), np.zeros(nj))
        params.epsilon[0] = 0.3 * np.sin(2 * np.pi * x + phases[0])
        params.psi[2] = 0.05 * np.sin(2 * np.pi * x + phases[1])
        render_frame(scene, params, "color", n_threads=threads)
    wall = time.perf_counter() - t0
    fps = args.frames / wall if wall > 0 else float("inf")
    report = {
        "frames": args.frames,
        "gaussians": len(scene.gaussians),
        "width": scene.camera.width,
        "height": scene.camera.height,
        "threads": threads,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        assets_io.write_json_stable(os.path.join(args.out, "bench_report.json"), report)
        assets_io.write_json_stable(os.path.join(args.out, "bench_timing.json"),
                                    {"wall_clock_s": wall, "fps": fps})
    print(f"rendered {args.frames} frames of {len(scene.gaussians)} gaussians at "
          f"{scene.camera.width}x{scene.camera.height} with {threads} thread(s): "
          f"{wall:.2f} s, {fps:.2f} FPS")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headsplat",
        description="Mesh-anchored Gaussian head animation, rendering, fitting, "
                    "and toy audio-to-motion translation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--gaussians", type=int, default=200, help="ground-truth gaussian count (default 200)")
    p.add_argument("--train", type=int, default=20, help="training frames (default 20)")
    p.add_argument("--holdout", type=int, default=5, help="held-out frames (default 5)")
    p.add_argument("--size", type=int, default=64, help="image size in pixels (default 64)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("animate", help="dump per-frame global gaussian attributes")
    p.add_argument("--head", required=True, help="head asset file")
    p.add_argument("--gaussians", required=True, help="gaussian-set file")
    p.add_argument("--params", required=True, help="parameter-sequence file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--banks", default=None,
                   help="gaussian-set file whose banks replace the embedded ones "
                        "(default: use the banks embedded in --gaussians)")
    p.add_argument("--config", default=None,
                   help="run-config JSON for camera/background (default: built-in defaults)")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("render", help="render an image sequence")
    p.add_argument("--head", required=True, help="head asset file")
    p.add_argument("--gaussians", required=True, help="gaussian-set file")
    p.add_argument("--params", required=True, help="parameter-sequence file")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--out", required=True, help="output directory for PPM frames")
    p.add_argument("--mode", choices=["color", "semantic"], default="color",
                   help="render mode (default color)")
    p.add_argument("--composite", default=None,
                   help="directory of original frames for mask-based recomposition "
                        "(default: no compositing)")
    p.add_argument("--masks", default=None,
                   help="directory of PGM masks for --composite (default: none)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: HEADSPLAT_THREADS or 1)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="optimize a scene against a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory from synth")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report", default=None, help="report path (default: <out>.report.json)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: HEADSPLAT_THREADS or 1)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-motion", help="train the toy audio-to-motion translator")
    p.add_argument("--corpus", required=True, help="corpus file or dataset directory")
    p.add_argument("--head", required=True, help="head asset file")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--out", required=True, help="translator checkpoint output path")
    p.set_defaults(func=cmd_train_motion)

    p = sub.add_parser("eval", help="PSNR/SSIM table between two frame directories")
    p.add_argument("--pred", required=True, help="directory of predicted frames")
    p.add_argument("--gt", required=True, help="directory of ground-truth frames")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="rendering throughput report")
    p.add_argument("--gaussians", required=True, help="gaussian-set file")
    p.add_argument("--head", required=True, help="head asset file")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--frames", type=int, default=100, help="frames to render (default 100)")
    p.add_argument("--out", default=None,
                   help="directory for report + timing sidecar (default: print only)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: HEADSPLAT_THREADS or 1)")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AssetFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalDivergenceError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
