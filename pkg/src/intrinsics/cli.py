"""Command-line entry point.

Subcommands cover the full pipeline: synthesize desk-scale datasets, refine
Sintel-layout triplets, train the two-stream model, decompose images with a
checkpoint, evaluate dense metrics / WHDR / temporal consistency, dump
feature taps, and run the gradient-check release gate.

Dataset layout (mirrors the public Sintel structure)::

    <root>/clean/<scene>/frame_0000.png
    <root>/albedo/<scene>/frame_0000.png
    <root>/shading/<scene>/frame_0000.png   (or .pfm)
    <root>/flow/<scene>/frame_0000.flo
    <root>/occlusions/<scene>/frame_0000.png

Exit codes: 0 success, 1 usage error, 2 data/contract error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imageio, losses, metrics, net, refine, train
from .imageio import CodecError, Image, JudgementSet
from .metrics import MetricError
from .refine import RefineError
from .tensor import DomainError, GraphError, ShapeError, Tensor, finite_diff_check
from .train import TrainError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_DATA_ERRORS = (CodecError, MetricError, RefineError, TrainError, ShapeError,
                DomainError, GraphError, net.CheckpointError, FileNotFoundError,
                ValueError, OSError)


def _scenes(root, pass_name):
    base = Path(root) / pass_name
    if not base.is_dir():
        raise CodecError(f"missing dataset pass directory: {base}")
    return sorted(p.name for p in base.iterdir() if p.is_dir())


def _frame_files(root, pass_name, scene):
    base = Path(root) / pass_name / scene
    return sorted(p for p in base.iterdir() if p.suffix in (".png", ".pfm"))


def _load_scene_triplets(root, scene):
    imgs = _frame_files(root, "clean", scene)
    albs = _frame_files(root, "albedo", scene)
    shds = _frame_files(root, "shading", scene)
    if not (len(imgs) == len(albs) == len(shds)) or not imgs:
        raise CodecError(f"scene {scene}: clean/albedo/shading frame counts differ")
    return [(imageio.read_image(i), imageio.read_image(a), imageio.read_image(s))
            for i, a, s in zip(imgs, albs, shds)]


def _load_scene_flows(root, scene, n_frames):
    flow_dir = Path(root) / "flow" / scene
    occ_dir = Path(root) / "occlusions" / scene
    flows, occs = [], []
    flow_files = sorted(flow_dir.glob("*.flo")) if flow_dir.is_dir() else []
    occ_files = sorted(occ_dir.glob("*.png")) if occ_dir.is_dir() else []
    for t in range(n_frames - 1):
        flow = imageio.read_flo(flow_files[t]) if t < len(flow_files) else None
        flows.append(flow)
        if flow is not None and t < len(occ_files):
            occs.append(imageio.load_occlusion(occ_files[t], flow))
        else:
            occs.append(None)
    return flows, occs


def _hwc(image):
    data = image.data
    return np.repeat(data, 3, axis=2) if data.shape[2] == 1 else data


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out)
    rng_seed = args.seed
    if args.kind == "dense":
        samples = train.synth_dense(args.frames, size=args.size, seed=rng_seed)
        frames = [(s["image"], s["albedo"], s["shading"][:, :, :1]) for s in samples]
        flows = occs = None
    elif args.kind == "video":
        frames, flows, occs = train.synth_video(
            args.frames, size=args.size, seed=rng_seed,
            shift=(args.shift_y, args.shift_x), specular=args.specular,
            occluder=args.occluder, flicker=args.flicker)
    else:  # sparse
        samples = train.synth_sparse(args.frames, size=args.size, seed=rng_seed)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "judgements").mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(samples):
            imageio.write_image(Image(s["image"]), out / "images" / f"img_{k:04d}.png",
                                "png16")
            imageio.save_judgements(s["judgements"],
                                    out / "judgements" / f"img_{k:04d}.json")
        print(f"wrote {len(samples)} sparse samples to {out}")
        return 0

    scene = "synth"
    for name in ("clean", "albedo", "shading"):
        (out / name / scene).mkdir(parents=True, exist_ok=True)
    for t, (img, alb, shd) in enumerate(frames):
        imageio.write_image(Image(img), out / "clean" / scene / f"frame_{t:04d}.png",
                            "png16")
        imageio.write_image(Image(alb), out / "albedo" / scene / f"frame_{t:04d}.png",
                            "png16")
        imageio.write_image(Image(shd), out / "shading" / scene / f"frame_{t:04d}.png",
                            "png16")
    if flows is not None:
        (out / "flow" / scene).mkdir(parents=True, exist_ok=True)
        (out / "occlusions" / scene).mkdir(parents=True, exist_ok=True)
        for t, (flow, occ) in enumerate(zip(flows, occs)):
            imageio.write_flo(flow, out / "flow" / scene / f"frame_{t:04d}.flo")
            occ_img = Image((~occ).astype(np.float64)[:, :, None])
            imageio.write_image(occ_img, out / "occlusions" / scene / f"frame_{t:04d}.png",
                                "png8")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_refine(args):
    root, out = Path(args.input), Path(args.output)
    total = 0
    for scene in _scenes(root, "clean"):
        triplets = _load_scene_triplets(root, scene)
        if args.temporal:
            flows, occs = _load_scene_flows(root, scene, len(triplets))
            results = refine.refine_sequence(triplets, flows, occs, temporal=True,
                                             k=args.k, reg=args.reg)
        else:
            results = [refine.refine_frame(*t, k=args.k, reg=args.reg)
                       for t in triplets]
        scene_dir = out / scene
        scene_dir.mkdir(parents=True, exist_ok=True)
        for t, res in enumerate(results):
            stem = scene_dir / f"frame_{t:04d}"
            imageio.write_image(res.image, f"{stem}_image.pfm", "pfm")
            imageio.write_image(res.albedo, f"{stem}_albedo.pfm", "pfm")
            imageio.write_image(res.shading, f"{stem}_shading.pfm", "pfm")
            with open(f"{stem}.json", "w") as fh:
                json.dump(res.stats, fh, indent=1)
        total += len(results)
    print(f"refined {total} frames into {out}")
    return 0


def _load_train_dataset(config, root):
    root = Path(root)
    if config.mode == "sparse":
        samples = []
        for img_path in sorted((root / "images").glob("*.png")):
            js_path = root / "judgements" / (img_path.stem + ".json")
            samples.append({
                "image": _hwc(imageio.read_image(img_path)),
                "judgements": imageio.load_judgements(js_path),
            })
        return samples
    samples = []
    for scene in _scenes(root, "clean"):
        triplets = _load_scene_triplets(root, scene)
        frames = [{"image": _hwc(i), "albedo": _hwc(a), "shading": _hwc(s)}
                  for i, a, s in triplets]
        if config.mode == "dense":
            samples.extend(frames)
        else:
            flows, occs = _load_scene_flows(root, scene, len(frames))
            for t in range(len(frames) - 1):
                if flows[t] is None:
                    continue
                occ = occs[t] if occs[t] is not None \
                    else np.ones(flows[t].u.shape, bool)
                samples.append({"frames": (frames[t], frames[t + 1]),
                                "flow": flows[t], "occlusion": occ})
    return samples


def cmd_train(args):
    config = train.TrainConfig.from_json(args.config)
    dataset = _load_train_dataset(config, args.dataset)
    model, history = train.run_training(config, dataset, log_path=args.log,
                                        checkpoint_path=args.out)
    last = history[-1]
    print(f"trained {config.epochs} epochs; final total loss {last['total']:.6f}")
    return 0


def cmd_decompose(args):
    model = net.load_checkpoint(args.checkpoint)
    src = Path(args.input)
    paths = sorted(src.glob("*.png")) + sorted(src.glob("*.pfm")) \
        if src.is_dir() else [src]
    if not paths:
        raise CodecError(f"no images found under {src}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        img = _hwc(imageio.read_image(path))
        a, s, _, _ = net.decompose(Tensor(np.transpose(img, (2, 0, 1))), model)
        imageio.write_image(Image(np.transpose(a.data, (1, 2, 0))),
                            out / f"{path.stem}_albedo.png", "png16")
        imageio.write_image(Image(np.transpose(s.data, (1, 2, 0))),
                            out / f"{path.stem}_shading.png", "png16")
    print(f"decomposed {len(paths)} images into {out}")
    return 0


def _paired_files(pred_dir, gt_dir, layer):
    pred_base = Path(pred_dir) / layer
    gt_base = Path(gt_dir) / layer
    if not pred_base.is_dir() or not gt_base.is_dir():
        raise CodecError(f"both directories need a {layer}/ subdirectory")
    pairs = []
    for gt_path in sorted(gt_base.rglob("*")):
        if gt_path.suffix not in (".png", ".pfm"):
            continue
        rel = gt_path.relative_to(gt_base)
        for suffix in (gt_path.suffix, ".png", ".pfm"):
            cand = pred_base / rel.with_suffix(suffix)
            if cand.exists():
                pairs.append((cand, gt_path, str(rel.with_suffix(""))))
                break
        else:
            raise CodecError(f"missing prediction for {rel}")
    return pairs


def cmd_eval(args):
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in ("mse", "lmse", "dssim"):
            raise UsageError(f"unknown metric {m!r}")
    report = metrics.MetricReport()
    pairs = {layer: _paired_files(args.pred, args.gt, layer)
             for layer in ("albedo", "shading")}
    names = [name for _, _, name in pairs["albedo"]]
    for k, name in enumerate(names):
        values = {}
        for layer in ("albedo", "shading"):
            pred_path, gt_path, _ = pairs[layer][k]
            pred = _hwc(imageio.read_image(pred_path))
            gt = _hwc(imageio.read_image(gt_path))
            for m in wanted:
                if m == "mse":
                    v = metrics.mse(pred, gt, scale_invariant=not args.plain_mse)
                elif m == "lmse":
                    v = metrics.lmse(pred, gt, window=args.lmse_window,
                                     stride=args.lmse_stride)
                else:
                    v = metrics.dssim(pred, gt, halved=not args.dssim_unhalved)
                values.setdefault(m, {})[layer] = v
        for m in wanted:
            report.add(name, m, values[m]["albedo"], values[m]["shading"])
    metrics.write_report(report, args.out)
    for m in wanted:
        albedo, shading, avg = report.aggregate(m)
        print(f"{m}: albedo {albedo:.6f} shading {shading:.6f} avg {avg:.6f}")
    return 0


def cmd_eval_whdr(args):
    albedo_dir = Path(args.albedo)
    judge_dir = Path(args.judgements)
    rows = []
    for js_path in sorted(judge_dir.glob("*.json")):
        img_path = None
        for suffix in (".png", ".pfm"):
            cand_names = [js_path.stem + suffix, js_path.stem + "_albedo" + suffix]
            for cand in cand_names:
                if (albedo_dir / cand).exists():
                    img_path = albedo_dir / cand
                    break
            if img_path:
                break
        if img_path is None:
            raise CodecError(f"no albedo image for {js_path.stem}")
        albedo = _hwc(imageio.read_image(img_path))
        rows.append((js_path.stem,
                     metrics.whdr(albedo, imageio.load_judgements(js_path),
                                  delta=args.delta)))
    if not rows:
        raise CodecError(f"no judgement files under {judge_dir}")
    mean = float(np.mean([v for _, v in rows]))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("image,whdr\n")
            for name, v in rows:
                fh.write(f"{name},{v:.8f}\n")
            fh.write(f"mean,{mean:.8f}\n")
    print(f"mean WHDR over {len(rows)} images: {mean:.4f}")
    return 0


def cmd_tcm(args):
    out_frames = sorted(Path(args.output_frames).glob("*.png")) \
        + sorted(Path(args.output_frames).glob("*.pfm"))
    in_frames = sorted(Path(args.input_frames).glob("*.png")) \
        + sorted(Path(args.input_frames).glob("*.pfm"))
    if len(out_frames) != len(in_frames) or len(out_frames) < 2:
        raise CodecError("need matching output/input frame sequences (>= 2 frames)")
    flow_files = sorted(Path(args.flow).glob("*.flo"))
    occ_files = sorted(Path(args.occlusions).glob("*.png")) if args.occlusions else []
    rows = []
    maps_dir = Path(args.maps) if args.maps else None
    if maps_dir:
        maps_dir.mkdir(parents=True, exist_ok=True)
    for t in range(len(out_frames) - 1):
        flow = imageio.read_flo(flow_files[t])
        occ = imageio.load_occlusion(occ_files[t], flow) if t < len(occ_files) else None
        o_prev = _hwc(imageio.read_image(out_frames[t]))
        o_next = _hwc(imageio.read_image(out_frames[t + 1]))
        v_prev = _hwc(imageio.read_image(in_frames[t]))
        v_next = _hwc(imageio.read_image(in_frames[t + 1]))
        # the dataset flow warps frame t+1 onto frame t's grid
        score = metrics.tcm(o_prev, o_next, v_prev, v_next, flow, occ)
        rows.append((out_frames[t + 1].stem, score))
        if maps_dir:
            smap, _ = metrics.tcm_map(o_prev, o_next, v_prev, v_next, flow, occ)
            metrics.render_ticm(smap, maps_dir / f"{out_frames[t + 1].stem}_ticm.png")
    with open(args.out, "w") as fh:
        fh.write("frame,tcm\n")
        for name, score in rows:
            fh.write(f"{name},{score:.8f}\n")
        fh.write(f"mean,{float(np.mean([s for _, s in rows])):.8f}\n")
    print(f"mean TCM over {len(rows)} transitions: "
          f"{float(np.mean([s for _, s in rows])):.4f}")
    return 0


def cmd_dump_features(args):
    model = net.load_checkpoint(args.checkpoint)
    img = _hwc(imageio.read_image(args.image))
    rows = net.dump_features(model, Tensor(np.transpose(img, (2, 0, 1))), args.out)
    print(f"wrote {rows} feature rows to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .imageio import FlowField

    rng = np.random.default_rng(args.seed)

    # leaves and references live in disjoint ranges so the central differences
    # never straddle an |.| kink or a hinge
    def leaf(shape, lo=0.1, hi=0.45):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    const = lambda shape, lo=0.55, hi=0.95: Tensor(rng.uniform(lo, hi, shape))
    shape = (3, 8, 8)
    s_ref = const(shape)
    a_ref = const(shape)
    image = const(shape)
    taps_other = const(shape)
    flow = FlowField(rng.uniform(-0.8, 0.8, (8, 8)), rng.uniform(-0.8, 0.8, (8, 8)),
                     np.ones((8, 8), bool))
    omega_u = np.ones((8, 8), bool)
    js = JudgementSet(points=[(0.1, 0.2), (0.8, 0.7), (0.4, 0.9)],
                      pairs=[(0, 1, 1, 1.0), (1, 2, 0, 0.5), (2, 0, -1, 2.0)])
    guide = rng.uniform(0.1, 1.0, (8, 8, 3))
    w = losses.LossWeights()

    checks = {
        "feature_distance": lambda t: losses.feature_distance(t, taps_other, 0.3, 0.1),
        "fdd": lambda t: losses.fdd([t], [taps_other], [1.0], 0.3, 0.1),
        "fdc": lambda t: losses.fdc([t], [a_ref], [t], [s_ref], [1.0], 0.1, 0.9),
        "ssim": lambda t: losses.ssim(t, s_ref),
        "reconstruction": lambda t: losses.reconstruction_loss(
            t, s_ref, image, a_ref, s_ref, 1.0, 0.5),
        "gradient": lambda t: losses.gradient_loss(t, a_ref, s_ref, s_ref),
        "ordinal": lambda t: losses.ordinal_loss(t, js),
        "albedo_smoothness": lambda t: losses.albedo_smoothness(t, guide, 2),
        "shading_smoothness": lambda t: losses.shading_smoothness(t),
        "temporal": lambda t: losses.temporal_loss(a_ref, t, s_ref, s_ref, flow, omega_u),
        "total_dense": lambda t: losses.total_loss_dense(
            losses.reconstruction_loss(t, s_ref, image, a_ref, s_ref, 1.0, 0.5),
            losses.gradient_loss(t, a_ref, s_ref, s_ref),
            losses.fdd([t], [taps_other], [1.0], 0.3, 0.1),
            losses.fdc([t], [a_ref], [s_ref], [s_ref], [1.0], 0.1, 0.9),
            w.lambdas),
        "total_sparse": lambda t: losses.total_loss_sparse(
            losses.reconstruction_loss(t, s_ref, image, None, s_ref, 1.0, 0.5),
            losses.gradient_loss(t, None, s_ref, s_ref),
            losses.fdd([t], [taps_other], [1.0], 0.3, 0.1),
            losses.fdc([t], [a_ref], [s_ref], [s_ref], [1.0], 0.1, 0.9),
            losses.ordinal_loss(t, js),
            losses.albedo_smoothness(t, guide, 2),
            losses.shading_smoothness(t),
            w),
    }
    tol = args.tolerance
    failures = 0
    for name, fn in checks.items():
        err = finite_diff_check(fn, leaf(shape), eps=args.eps)
        status = "ok" if err < tol else "FAIL"
        if err >= tol:
            failures += 1
        print(f"gradcheck {name:<20} max rel err {err:.3e}  {status}")
    if failures:
        print(f"{failures} gradient checks failed (tolerance {tol})")
        return 2
    print(f"all {len(checks)} gradient checks passed (tolerance {tol})")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="intrinsics",
                     description="Two-stream intrinsic image decomposition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit synthetic datasets")
    p.add_argument("--kind", choices=("dense", "video", "sparse"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--specular", type=float, default=0.0)
    p.add_argument("--occluder", action="store_true")
    p.add_argument("--flicker", type=float, default=0.0)
    p.add_argument("--shift-y", type=int, default=1)
    p.add_argument("--shift-x", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("refine", help="refine Sintel-layout triplets")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--temporal", action="store_true")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--reg", type=float, default=1e-3)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="train the two-stream model")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-epoch CSV log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="split images into albedo/shading PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="dense metrics to CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default="mse,lmse,dssim")
    p.add_argument("--out", required=True)
    p.add_argument("--plain-mse", action="store_true",
                   help="disable the scale-invariant fit")
    p.add_argument("--dssim-unhalved", action="store_true")
    p.add_argument("--lmse-window", type=int, default=20)
    p.add_argument("--lmse-stride", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-whdr", help="WHDR of albedo images against judgements")
    p.add_argument("--albedo", required=True)
    p.add_argument("--judgements", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--delta", type=float, default=0.10)
    p.set_defaults(func=cmd_eval_whdr)

    p = sub.add_parser("tcm", help="temporal consistency metric per frame pair")
    p.add_argument("--output-frames", required=True)
    p.add_argument("--input-frames", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--occlusions", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--maps", default=None, help="directory for TICM heatmap PNGs")
    p.set_defaults(func=cmd_tcm)

    p = sub.add_parser("dump-features", help="per-level feature taps to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("gradcheck", help="finite-difference release gate")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-4,
                   help="central-difference step (1e-4 keeps roundoff below "
                        "truncation for these composed losses)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
