"""Command-line entry point.

Subcommands: voxelize, align, train, eval, vote, detect, analyze, synth.
Exit codes: 0 success, 2 usage error, 1 runtime failure.  All randomness is
seeded via --seed.  --threads (or the ORION_THREADS environment variable)
caps BLAS/JIT parallelism; it must take effect before numpy loads, which is
why the heavy imports live inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_threads(n):
    if n is None:
        n = os.environ.get("ORION_THREADS")
    if n is None:
        return
    n = str(int(n))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)
    if "numpy" in sys.modules:  # already loaded: fall back to runtime limits
        try:
            import numba
            numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
        except Exception:
            pass
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=int(n))
        except Exception:
            pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orion3d", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: hardware; 1 = reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("voxelize", help="mesh/cloud file to OCG1 occupancy grid")
    v.add_argument("--in", dest="infile", required=True)
    v.add_argument("--out", dest="outfile", required=True)
    v.add_argument("--points", type=int, default=50000,
                   help="surface samples for mesh input (default 50000)")
    v.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=300)
    s.add_argument("--test-per-class", type=int, default=100)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--points", type=int, default=1500)
    s.add_argument("--out", dest="outdir", required=True)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a two-head network on a dataset dir")
    t.add_argument("--data", required=True)
    t.add_argument("--out", dest="checkpoint", required=True)
    t.add_argument("--history", default=None, help="per-epoch CSV path")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--init", default=None, help="warm-start checkpoint")
    for key, typ in (("arch", str), ("gamma", float), ("lr", float),
                     ("momentum", float), ("weight-decay", float),
                     ("epochs", int), ("batch-size", int), ("seed", int),
                     ("shift-range", int), ("precision", str)):
        t.add_argument(f"--{key}", type=typ, default=None)
    t.add_argument("--rotation-aug", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dir")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out", default=None, help="metrics CSV path")

    vo = sub.add_parser("vote", help="rotation-voted classification of one cloud")
    vo.add_argument("--checkpoint", required=True)
    vo.add_argument("--in", dest="infile", required=True)
    vo.add_argument("--rotations", type=int, default=12)
    vo.add_argument("--points", type=int, default=50000)
    vo.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("detect", help="sliding-box detection over a scene cloud")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--scene", required=True)
    d.add_argument("--gt", default=None, help="ground-truth boxes CSV")
    d.add_argument("--mode", choices=("guided", "exhaustive"), default="guided")
    d.add_argument("--rotations", type=int, default=18)
    d.add_argument("--stride", type=float, default=1.0)
    d.add_argument("--min-points", type=int, default=20)
    d.add_argument("--nms-iou", type=float, default=0.3)
    d.add_argument("--eval-iou", type=float, default=0.25)
    d.add_argument("--sizes", default=None,
                   help="size stats source: boxes CSV (default: --gt)")
    d.add_argument("--out", default=None, help="detections CSV")
    d.add_argument("--report", default=None, help="PR + summary CSV")

    a = sub.add_parser("align", help="unsupervised class-wise azimuth alignment")
    a.add_argument("--in", dest="indir", required=True,
                   help="directory with one subdirectory of .xyz/.off per class")
    a.add_argument("--out", dest="manifest", required=True)
    a.add_argument("--threshold", type=float, default=0.25)
    a.add_argument("--bins", type=int, default=32)
    a.add_argument("--shells", type=int, default=8)
    a.add_argument("--reference-size", type=int, default=100)
    a.add_argument("--points", type=int, default=50000)
    a.add_argument("--seed", type=int, default=0)

    an = sub.add_parser("analyze", help="dominant-path histograms or filter snapshots")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--data", default=None, help="dataset dir for path histograms")
    an.add_argument("--split", default="test", choices=("train", "test"))
    an.add_argument("--in", dest="infile", default=None,
                    help="cloud file for activation snapshots")
    an.add_argument("--layer", default="conv1")
    an.add_argument("--filter", dest="filter_index", type=int, default=0)
    an.add_argument("--rotations", type=int, default=12)
    an.add_argument("--threshold", type=float, default=0.0)
    an.add_argument("--limit", type=int, default=None,
                    help="cap samples per histogram group")
    an.add_argument("--out-dir", required=True)
    return p


def _load_cloud(path, n_points, seed):
    from . import formats, voxel
    if str(path).endswith(".off"):
        verts, faces = formats.read_off(path)
        return voxel.sample_mesh(voxel.TriMesh(verts, faces), n_points, seed=seed)
    return formats.read_xyz(path)


def cmd_voxelize(args) -> int:
    from . import formats, voxel
    cloud = _load_cloud(args.infile, args.points, args.seed)
    formats.write_ocg(args.outfile, voxel.voxelize(cloud))
    print(f"wrote {args.outfile}")
    return 0


def cmd_synth(args) -> int:
    from .synth import save_dataset, synth_dataset
    train_items = synth_dataset(args.classes, args.per_class, noise=args.noise,
                                seed=args.seed, n_points=args.points, split="train")
    test_items = synth_dataset(args.classes, args.test_per_class, noise=args.noise,
                               seed=args.seed, n_points=args.points, split="test")
    save_dataset(args.outdir, train_items, test_items, args.classes)
    print(f"wrote {len(train_items)} train / {len(test_items)} test items to {args.outdir}")
    return 0


def cmd_train(args) -> int:
    from . import formats
    from .synth import load_dataset
    from .train import TrainConfig, train

    kwargs = {}
    if args.config:
        kwargs.update(TrainConfig.coerce(formats.read_config(args.config)))
    for key in ("arch", "gamma", "lr", "momentum", "weight_decay", "epochs",
                "batch_size", "seed", "shift_range", "precision", "rotation_aug"):
        val = getattr(args, key)
        if val is not None:
            kwargs[key] = val
    config = TrainConfig(**kwargs)

    train_samples, scheme = load_dataset(args.data, "train",
                                         keep_clouds=config.rotation_aug)
    val_samples, _ = load_dataset(args.data, "test")
    init_net = formats.load_checkpoint(args.init) if args.init else None
    net, history = train(config, train_samples, val_samples, scheme, init_net=init_net)
    formats.save_checkpoint(args.checkpoint, net)
    if args.history:
        formats.write_history_csv(args.history, history)
    last = history[-1]
    print(f"trained {config.epochs} epochs: loss {last['loss']:.4f} "
          f"val_acc {last['val_acc']:.4f} val_orient_acc {last['val_orient_acc']:.4f}")
    print(f"wrote {args.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from . import formats
    from .synth import load_dataset
    from .train import evaluate
    net = formats.load_checkpoint(args.checkpoint)
    samples, scheme = load_dataset(args.data, args.split)
    m = evaluate(net, samples, scheme)
    print(f"accuracy {m.accuracy:.4f}")
    print(f"weighted_f1 {m.weighted_f1:.4f}")
    print(f"orientation_accuracy {m.orientation_accuracy:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            for k, v in m.as_dict().items():
                fh.write(f"{k},{v}\n")
            for c, (f1, sup) in enumerate(zip(m.per_class_f1, m.support)):
                fh.write(f"f1_class{c},{f1}\n")
                fh.write(f"support_class{c},{int(sup)}\n")
    return 0


def cmd_vote(args) -> int:
    from . import formats
    from .voting import vote_classify
    net = formats.load_checkpoint(args.checkpoint)
    cloud = _load_cloud(args.infile, args.points, args.seed)
    result = vote_classify(net, cloud, rotations=args.rotations)
    names = net.scheme.names if net.scheme else [str(i) for i in range(net.n_classes)]
    print(f"class {result.final_class} ({names[result.final_class]})")
    for i, s in enumerate(result.summed_scores):
        print(f"score,{names[i]},{s:.6f}")
    return 0


def cmd_detect(args) -> int:
    from . import formats
    from .detect import box_stats, evaluate_detections, nms, propose_boxes, score_boxes
    import time

    net = formats.load_checkpoint(args.checkpoint)
    scene = formats.read_xyz(args.scene)
    gt = formats.read_boxes_csv(args.gt) if args.gt else []
    sizes_src = args.sizes or args.gt
    if not sizes_src:
        raise ValueError("detect needs --sizes or --gt to derive box sizes")
    stats = box_stats(formats.read_boxes_csv(sizes_src))

    t0 = time.perf_counter()
    proposals = propose_boxes(scene, stats, args.stride, mode=args.mode,
                              rotations=args.rotations, min_points=args.min_points)
    scored, n_eval = score_boxes(net, scene, proposals, mode=args.mode)
    kept = nms(scored, args.nms_iou)
    elapsed = time.perf_counter() - t0
    report = evaluate_detections(kept, gt, args.eval_iou,
                                 boxes_evaluated=n_eval, wall_time=elapsed)
    print(f"mode {args.mode}: {len(kept)} detections, {n_eval} boxes evaluated, "
          f"AP {report.ap:.4f}, {elapsed:.2f}s")
    if args.out:
        formats.write_boxes_csv(args.out, kept)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write("precision,recall,threshold\n")
            for p, r, th in zip(report.precisions, report.recalls, report.thresholds):
                fh.write(f"{p:.9g},{r:.9g},{th:.9g}\n")
            fh.write(f"# summary,ap={report.ap:.9g},boxes={n_eval},"
                     f"seconds={elapsed:.9g}\n")
    return 0


def cmd_align(args) -> int:
    import numpy as np
    from .align import align_objects_of_class, write_manifest_csv

    rows = []
    classes = sorted(d for d in os.listdir(args.indir)
                     if os.path.isdir(os.path.join(args.indir, d)))
    if not classes:
        raise ValueError(f"{args.indir}: no class subdirectories")
    for cls in classes:
        cdir = os.path.join(args.indir, cls)
        files = sorted(f for f in os.listdir(cdir) if f.endswith((".xyz", ".off")))
        clouds = [_load_cloud(os.path.join(cdir, f), args.points, args.seed)
                  for f in files]
        result = align_objects_of_class(
            clouds, threshold=args.threshold, bins=args.bins, shells=args.shells,
            initial_size=args.reference_size, seed=args.seed)
        print(f"{cls}: {len(clouds)} objects, K={result.level}, "
              f"mean residual {float(np.mean(result.residuals)):.6f}")
        for f, rot, res in zip(files, result.rotations, result.residuals):
            rows.append((f, cls, rot, res, result.level))
    write_manifest_csv(args.manifest, rows)
    print(f"wrote {args.manifest}")
    return 0


def cmd_analyze(args) -> int:
    import numpy as np
    from . import formats
    from .analysis import path_histograms, snapshot_activations
    from .model import orientation_target

    net = formats.load_checkpoint(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)

    if args.infile:
        cloud = _load_cloud(args.infile, 50000, 0)
        maps = snapshot_activations(net, cloud, args.layer, args.filter_index,
                                    rotations=args.rotations,
                                    threshold=args.threshold)
        for r, m in enumerate(maps):
            out = os.path.join(args.out_dir,
                               f"{args.layer}_f{args.filter_index}_rot{r:02d}.ocf")
            formats.write_ocf(out, m)
        print(f"wrote {len(maps)} activation maps to {args.out_dir}")
        return 0

    if not args.data:
        raise ValueError("analyze needs --data (histograms) or --in (snapshots)")
    from .synth import load_dataset
    samples, scheme = load_dataset(args.data, args.split)
    groups = {}
    for s in samples:
        node = orientation_target(s.class_id, s.azimuth, scheme)
        off, _ = scheme.class_block(s.class_id)
        key = (scheme.names[s.class_id], node - off)
        groups.setdefault(key, []).append(s.grid)
    if args.limit:
        groups = {k: v[:args.limit] for k, v in groups.items()}
    hists = path_histograms(net, groups)
    for hist in hists:
        cls, rot = hist.group
        path = os.path.join(args.out_dir, f"paths_{cls}_rot{rot:02d}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("layer,index,count\n")
            for layer, counts in hist.counts.items():
                for i, c in enumerate(counts):
                    if c:
                        fh.write(f"{layer},{i},{c}\n")
        entropy = hist.entropy()
        epath = os.path.join(args.out_dir, f"entropy_{cls}_rot{rot:02d}.csv")
        with open(epath, "w", encoding="utf-8") as fh:
            fh.write("layer,entropy_nats\n")
            for layer, h in entropy.items():
                fh.write(f"{layer},{h:.9g}\n")
    print(f"wrote {len(hists)} group histograms to {args.out_dir}")
    return 0


COMMANDS = {
    "voxelize": cmd_voxelize,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "vote": cmd_vote,
    "detect": cmd_detect,
    "align": cmd_align,
    "analyze": cmd_analyze,
}


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
