"""Command-line pipelines: synth, features, simulate, train, segment, baseline,
eval and ablate.

Configuration precedence is defaults < config file < flags, where the config
file holds `key = value` lines (keys match flag names with dashes or
underscores) and `#` comments.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import baselines, metrics, network, synth
from .features import DEFAULT_DELTA, DEFAULT_KNN, FEATURE_SUBSETS, build_context, compute_features
from .grow import DEFAULT_MIN_SEGMENT, GrowConfig, segment_scene
from .network import Predictor, TrainConfig, load_params, train
from .pointcloud import export_colored_ply, load_scene, read_labels, write_labels
from .search import SearchConfig
from .simulate import SimConfig, generate_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _scene_paths(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.txt"))
        if not found:
            raise FileNotFoundError(f"no scene files (*.txt) in {path}")
        return found
    return [path]


def _feature_columns(name: str | None):
    if name in (None, "", "full"):
        return None
    if name not in FEATURE_SUBSETS:
        raise UsageError(f"unknown feature subset {name!r}; pick from {sorted(FEATURE_SUBSETS)}")
    return FEATURE_SUBSETS[name]


def _load_context(scene_path, delta, knn, features_dir=None):
    cloud = load_scene(scene_path)
    feats = None
    if features_dir:
        cache = Path(features_dir) / (Path(scene_path).stem + ".features.npz")
        if cache.exists():
            data = np.load(cache)
            if data["features"].shape[0] == cloud.n_points:
                feats = data["features"]
    return build_context(cloud, delta=delta, knn=knn, features=feats)


def _add_common_scene_args(p):
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA,
                   help="neighbor radius in meters")
    p.add_argument("--knn", type=int, default=DEFAULT_KNN,
                   help="PCA neighborhood size for normals/curvature")


def build_parser(file_cfg: dict | None = None) -> _Parser:
    parser = _Parser(prog="regrow",
                     description="Point-cloud instance segmentation by learned region growing")
    parser.add_argument("--config", help="key = value config file merged under flags")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    subparsers = []

    def add_parser(name, **kwargs):
        p = sub.add_parser(name, formatter_class=fmt, **kwargs)
        subparsers.append(p)
        return p

    p = add_parser("synth", help="generate synthetic labeled rooms")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=40, help="number of training rooms")
    p.add_argument("--test", type=int, default=20, help="number of test rooms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=float, nargs=3, default=[4.0, 4.0, 2.5],
                   metavar=("X", "Y", "Z"))
    p.add_argument("--spacing", type=float, default=0.03, help="sample spacing in meters")
    p.add_argument("--objects-min", type=int, default=5)
    p.add_argument("--objects-max", type=int, default=15)
    p.add_argument("--color-noise", type=float, default=8.0)

    p = add_parser("features",
                       help="precompute and cache per-point features")
    p.add_argument("--scenes", required=True, help="scene file or directory")
    p.add_argument("--out", required=True, help="cache directory")
    _add_common_scene_args(p)
    p.add_argument("--jobs", type=int, default=1)

    p = add_parser("simulate",
                       help="simulate region growing into a training dataset")
    p.add_argument("--scenes", required=True, help="labeled scene file or directory")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--i", dest="i_size", type=int, default=512, help="inlier set size I")
    p.add_argument("--j", dest="j_size", type=int, default=512, help="neighbor set size J")
    _add_common_scene_args(p)
    p.add_argument("--alpha-min", type=float, default=0.2)
    p.add_argument("--alpha-max", type=float, default=0.4)
    p.add_argument("--decay", type=float, default=0.01, help="mistake probability decay per step")
    p.add_argument("--augment", type=int, default=1, help="augmented copies per scene")
    p.add_argument("--features", default="full", choices=sorted(FEATURE_SUBSETS),
                   help="feature subset")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip median normalization of network inputs")
    p.add_argument("--seed", type=int, default=0)

    p = add_parser("train", help="train the mask network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--enc-widths", type=int, nargs="+",
                   default=list(network.FULL_ENC_WIDTHS))
    p.add_argument("--dec-widths", type=int, nargs="+",
                   default=list(network.FULL_DEC_WIDTHS))
    p.add_argument("--skip-layer", type=int, default=2,
                   help="encoder layer feeding the decoder skip connection")
    p.add_argument("--features", default="full", choices=sorted(FEATURE_SUBSETS))
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = add_parser("segment",
                       help="segment scenes with a trained network")
    p.add_argument("--scenes", required=True, help="scene file or directory")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output directory for labels")
    p.add_argument("--strategy", default="greedy",
                   choices=["greedy", "rr-ml", "rr-np", "bs-ml", "bs-np"])
    p.add_argument("--restarts", type=int, default=10, help="random-restart rollouts")
    p.add_argument("--beam", type=int, default=3, help="beam width")
    p.add_argument("--expansions", type=int, default=3, help="expansions per beam state")
    p.add_argument("--min-segment", type=int, default=DEFAULT_MIN_SEGMENT,
                   help="segments smaller than this are reassigned")
    p.add_argument("--max-steps", type=int, default=500, help="hard cap per region")
    p.add_argument("--no-remove-mask", action="store_true",
                   help="never remove points from a region")
    p.add_argument("--random-seeding", action="store_true",
                   help="random seed points instead of min curvature")
    _add_common_scene_args(p)
    p.add_argument("--features-dir", help="cached features directory")
    p.add_argument("--ply", action="store_true", help="also export a colored PLY")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = add_parser("baseline",
                       help="classical region-growing baselines")
    p.add_argument("--scenes", required=True)
    p.add_argument("--method", required=True, choices=["threshold", "smoothness"])
    p.add_argument("--out", required=True, help="output directory for labels")
    _add_common_scene_args(p)
    p.add_argument("--features-dir")
    p.add_argument("--normal-angle-max", type=float, default=30.0)
    p.add_argument("--color-dist-max", type=float, default=0.25)
    p.add_argument("--theta-th", type=float, default=10.0)
    p.add_argument("--curvature-th", type=float, default=0.05)
    p.add_argument("--min-segment", type=int, default=DEFAULT_MIN_SEGMENT)
    p.add_argument("--jobs", type=int, default=1)

    p = add_parser("eval",
                       help="score predicted labels against ground truth")
    p.add_argument("--scenes", required=True, help="labeled scene directory")
    p.add_argument("--pred", required=True, help="directory of .labels files")
    p.add_argument("--out", required=True, help="CSV to write")

    p = add_parser("ablate",
                       help="run one configuration knob end to end")
    p.add_argument("--train-scenes", required=True)
    p.add_argument("--test-scenes", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--knob", required=True,
                   choices=["full", "no-remove", "random-seed", "no-normalize",
                            "only-xyz", "xyz-rgb", "i128-j128", "i256-j256"])
    p.add_argument("--i", dest="i_size", type=int, default=512)
    p.add_argument("--j", dest="j_size", type=int, default=512)
    _add_common_scene_args(p)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--enc-widths", type=int, nargs="+",
                   default=list(network.FULL_ENC_WIDTHS))
    p.add_argument("--dec-widths", type=int, nargs="+",
                   default=list(network.FULL_DEC_WIDTHS))
    p.add_argument("--augment", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    if file_cfg:
        for sp in subparsers:
            overrides = {}
            for a in sp._actions:
                if a.dest in file_cfg and a.dest != "help":
                    raw = file_cfg[a.dest]
                    if a.nargs in ("+", 3):
                        overrides[a.dest] = [a.type(v) if a.type else v
                                             for v in raw.split()]
                    elif isinstance(a.const, bool) or isinstance(a.default, bool):
                        overrides[a.dest] = raw.lower() in ("1", "true", "yes", "on")
                    elif a.type is not None:
                        overrides[a.dest] = a.type(raw)
                    else:
                        overrides[a.dest] = raw
            if overrides:
                sp.set_defaults(**overrides)
    return parser


def _cmd_synth(args) -> int:
    cfg = synth.RoomConfig(
        extent=tuple(args.extent), spacing=args.spacing,
        n_objects=(args.objects_min, args.objects_max),
        color_noise=args.color_noise)
    train_paths, test_paths = synth.generate_split(
        cfg, args.train, args.test, args.out, base_seed=args.seed)
    print(f"wrote {len(train_paths)} train + {len(test_paths)} test scenes to {args.out}")
    return 0


def _features_worker(task) -> str:
    scene_path, out_dir, delta, knn = task
    cloud = load_scene(scene_path)
    feats = compute_features(cloud, k=min(knn, cloud.n_points))
    out = Path(out_dir) / (Path(scene_path).stem + ".features.npz")
    np.savez(out, features=feats, delta=delta, knn=knn)
    return str(out)


def _cmd_features(args) -> int:
    Path(args.out).mkdir(parents=True, exist_ok=True)
    tasks = [(str(p), args.out, args.delta, args.knn) for p in _scene_paths(args.scenes)]
    for out in _run_tasks(_features_worker, tasks, args.jobs):
        print(out)
    return 0


def _cmd_simulate(args) -> int:
    cols = _feature_columns(args.features)
    cfg = SimConfig(
        i_size=args.i_size, j_size=args.j_size, delta=args.delta, knn=args.knn,
        alpha_range=(args.alpha_min, args.alpha_max), decay=args.decay,
        augment_copies=args.augment, feature_columns=cols,
        normalize=not args.no_normalize, seed=args.seed)
    count = generate_dataset(_scene_paths(args.scenes), cfg, args.out)
    print(f"wrote {count} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cols = _feature_columns(args.features)
    cfg = TrainConfig(
        enc_widths=tuple(args.enc_widths), dec_widths=tuple(args.dec_widths),
        skip_layer=args.skip_layer, lr=args.lr, batch_size=args.batch,
        epochs=args.epochs, seed=args.seed, checkpoint=args.out,
        feature_columns=cols, normalize=not args.no_normalize)
    _params, losses = train(args.dataset, cfg)
    for epoch, loss in enumerate(losses, start=1):
        print(f"epoch {epoch}: loss {loss:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _segment_worker(task) -> str:
    scene_path, opts = task
    params = load_params(opts["model"])
    ctx = _load_context(scene_path, opts["delta"], opts["knn"], opts.get("features_dir"))
    grow_cfg = GrowConfig(
        i_size=params.i_size, j_size=params.j_size,
        max_steps=opts["max_steps"], min_segment=opts["min_segment"],
        use_remove_mask=not opts["no_remove_mask"],
        normalize=params.normalize, feature_columns=params.feature_columns,
        seed_selection="random" if opts["random_seeding"] else "curvature")
    search_cfg = SearchConfig(strategy=opts["strategy"], restarts=opts["restarts"],
                              beam_width=opts["beam"], expansions=opts["expansions"])
    rng = np.random.default_rng(
        np.random.SeedSequence(opts["seed"], spawn_key=(_path_key(scene_path),)))
    labels, stats = segment_scene(ctx, Predictor(params), grow_cfg, search_cfg, rng)
    stem = Path(scene_path).stem
    out_dir = Path(opts["out"])
    write_labels(labels, out_dir / f"{stem}.labels")
    stats["config"] = {k: opts[k] for k in
                       ("strategy", "restarts", "beam", "expansions", "seed",
                        "min_segment", "max_steps")}
    (out_dir / f"{stem}.stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    if opts["ply"]:
        export_colored_ply(ctx.cloud, labels, out_dir / f"{stem}.ply")
    return f"{stem}: {stats['instances']} instances, {stats['inferences']} inferences"


def _path_key(path) -> int:
    digest = hashlib.sha256(Path(path).name.encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _cmd_segment(args) -> int:
    Path(args.out).mkdir(parents=True, exist_ok=True)
    opts = {
        "model": args.model, "out": args.out, "delta": args.delta, "knn": args.knn,
        "strategy": args.strategy, "restarts": args.restarts, "beam": args.beam,
        "expansions": args.expansions, "min_segment": args.min_segment,
        "max_steps": args.max_steps, "no_remove_mask": args.no_remove_mask,
        "random_seeding": args.random_seeding, "seed": args.seed, "ply": args.ply,
        "features_dir": args.features_dir,
    }
    tasks = [(str(p), opts) for p in _scene_paths(args.scenes)]
    for line in _run_tasks(_segment_worker, tasks, args.jobs):
        print(line)
    return 0


def _baseline_worker(task) -> str:
    scene_path, opts = task
    ctx = _load_context(scene_path, opts["delta"], opts["knn"], opts.get("features_dir"))
    if opts["method"] == "threshold":
        labels = baselines.grow_threshold(ctx, baselines.ThresholdConfig(
            opts["normal_angle_max"], opts["color_dist_max"], opts["min_segment"]))
    else:
        labels = baselines.grow_smoothness(ctx, baselines.SmoothnessConfig(
            opts["theta_th"], opts["curvature_th"], opts["min_segment"]))
    stem = Path(scene_path).stem
    write_labels(labels, Path(opts["out"]) / f"{stem}.labels")
    return f"{stem}: {int(labels.max())} instances"


def _cmd_baseline(args) -> int:
    Path(args.out).mkdir(parents=True, exist_ok=True)
    opts = {
        "method": args.method, "out": args.out, "delta": args.delta, "knn": args.knn,
        "normal_angle_max": args.normal_angle_max, "color_dist_max": args.color_dist_max,
        "theta_th": args.theta_th, "curvature_th": args.curvature_th,
        "min_segment": args.min_segment, "features_dir": args.features_dir,
    }
    tasks = [(str(p), opts) for p in _scene_paths(args.scenes)]
    for line in _run_tasks(_baseline_worker, tasks, args.jobs):
        print(line)
    return 0


def _run_tasks(worker, tasks, jobs: int):
    if jobs and jobs > 1 and len(tasks) > 1:
        with Pool(jobs) as pool:
            yield from pool.map(worker, tasks)
    else:
        for task in tasks:
            yield worker(task)


def _cmd_eval(args) -> int:
    names = []
    records = []
    for scene_path in _scene_paths(args.scenes):
        stem = scene_path.stem
        pred_path = Path(args.pred) / f"{stem}.labels"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing predictions for {stem}: {pred_path}")
        cloud = load_scene(scene_path)
        if cloud.gt_instance is None:
            raise ValueError(f"{scene_path} has no ground-truth instance labels")
        pred = read_labels(pred_path)
        rec = metrics.score_scene(cloud.gt_instance, pred)
        stats_path = Path(args.pred) / f"{stem}.stats.json"
        rec["steps"] = (json.loads(stats_path.read_text()).get("steps_per_region", 0.0)
                        if stats_path.exists() else 0.0)
        names.append(stem)
        records.append(rec)
    metrics.write_metrics_csv(args.out, names, records)
    means, stds = metrics.per_room_average(records)
    summary = "  ".join(f"{k}={means[k]:.3f}±{stds[k]:.3f}" for k in
                        ("nmi", "ami", "ari", "precision", "recall", "miou"))
    print(summary)
    print(f"metrics written to {args.out}")
    return 0


_ABLATION_KNOBS = {
    # knob -> (feature subset, normalize, i/j override, segment overrides)
    "full": ("full", True, None, {}),
    "no-remove": ("full", True, None, {"no_remove_mask": True}),
    "random-seed": ("full", True, None, {"random_seeding": True}),
    "no-normalize": ("full", False, None, {}),
    "only-xyz": ("xyz", True, None, {}),
    "xyz-rgb": ("xyz-rgb", True, None, {}),
    "i128-j128": ("full", True, 128, {}),
    "i256-j256": ("full", True, 256, {}),
}


def _cmd_ablate(args) -> int:
    subset, normalize, size, seg_overrides = _ABLATION_KNOBS[args.knob]
    i_size = size or args.i_size
    j_size = size or args.j_size
    workdir = Path(args.workdir)
    knob_dir = workdir / args.knob
    (workdir / "datasets").mkdir(parents=True, exist_ok=True)
    (workdir / "models").mkdir(parents=True, exist_ok=True)
    knob_dir.mkdir(parents=True, exist_ok=True)

    pipe_key = f"{subset}_{'norm' if normalize else 'raw'}_i{i_size}_j{j_size}"
    dataset = workdir / "datasets" / f"{pipe_key}.bin"
    model = workdir / "models" / f"{pipe_key}.ckpt"
    cols = _feature_columns(subset)

    if not dataset.exists():
        cfg = SimConfig(i_size=i_size, j_size=j_size, delta=args.delta, knn=args.knn,
                        augment_copies=args.augment, feature_columns=cols,
                        normalize=normalize, seed=args.seed)
        count = generate_dataset(_scene_paths(args.train_scenes), cfg, dataset)
        print(f"[{args.knob}] dataset: {count} samples")
    if not model.exists():
        cfg = TrainConfig(enc_widths=tuple(args.enc_widths),
                          dec_widths=tuple(args.dec_widths),
                          lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                          seed=args.seed, checkpoint=str(model),
                          feature_columns=cols, normalize=normalize)
        _params, losses = train(dataset, cfg)
        print(f"[{args.knob}] trained, final loss {losses[-1]:.4f}")

    pred_dir = knob_dir / "pred"
    pred_dir.mkdir(exist_ok=True)
    opts = {
        "model": str(model), "out": str(pred_dir), "delta": args.delta, "knn": args.knn,
        "strategy": "greedy", "restarts": 10, "beam": 3, "expansions": 3,
        "min_segment": DEFAULT_MIN_SEGMENT, "max_steps": 500,
        "no_remove_mask": False, "random_seeding": False, "seed": args.seed,
        "ply": False, "features_dir": None,
    }
    opts.update(seg_overrides)
    for scene in _scene_paths(args.test_scenes):
        _segment_worker((str(scene), opts))
    eval_args = argparse.Namespace(scenes=args.test_scenes, pred=str(pred_dir),
                                   out=str(knob_dir / "metrics.csv"))
    return _cmd_eval(eval_args)


_COMMANDS = {
    "synth": _cmd_synth,
    "features": _cmd_features,
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "baseline": _cmd_baseline,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        file_cfg = None
        if "--config" in argv:
            file_cfg = _load_config_file(argv[argv.index("--config") + 1])
        parser = build_parser(file_cfg)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IndexError:
        print("error: --config requires a path", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
