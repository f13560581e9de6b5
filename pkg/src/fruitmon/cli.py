"""Command line interface.

Subcommands cover the full workflow: synthesizing scene pairs (gen),
training the segmentation network (train-seg) and the re-identification
stack (train-match), running segmentation (segment) and association
(match) on single scenes, and scoring predictions (eval).  Report paths
write delimited tables plus rendered figures side by side.

Exit codes: 0 success, 2 configuration, 3 training divergence, 4 model /
shape mismatch, 5 input or output failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import figures, metrics
from .cloud import (
    AugmentConfig,
    ColoredCloud,
    SceneAnnotation,
    TemporalAssociation,
    load_ply,
    save_ply,
)
from .encoder import EncoderConfig, build_encoder, encode_all, save_descriptors
from .errors import (
    ConfigError,
    DivergenceError,
    PlyParseError,
    ShapeError,
    ValidationError,
)
from .matcher import (
    MatchConfig,
    batch_match,
    build_matcher,
    greedy_assign,
    train_matcher,
)
from .persistence import load_reid_models, load_seg_model, save_reid_models, save_seg_model
from .segmentation import (
    SegNetConfig,
    build_segnet,
    cluster_prediction,
    oracle_prediction,
    segment_cloud,
    train_segmentation,
)
from .synth import OrchardConfig, ScenePair, generate_pair, load_pair, write_pair
from .util import STREAM_DATA, stream

SCHEMA_VERSION = 1

_TUPLE_FIELDS = {
    "channels", "fruit_count", "fruit_radius", "points_per_fruit", "fruit_aspect",
    "growth_factor", "yaw_range_deg", "per_axis_rotation_range_deg", "flip_axes",
    "scale_range",
}


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return data


def _section(cls, config: dict, name: str, seed: int):
    """Build a config dataclass from a JSON section; the command seed fills
    rng_seed unless the section pins one."""
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {unknown}")
    kwargs = {}
    for key, value in section.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if "rng_seed" in names and "rng_seed" not in kwargs:
        kwargs["rng_seed"] = seed
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc


def _train_params(config: dict) -> dict:
    params = config.get("train", {})
    if not isinstance(params, dict):
        raise ConfigError("config section 'train' must be an object")
    return params


def _augment_from(params: dict, seed: int) -> AugmentConfig | None:
    if "augment" not in params:
        return None
    return _section(AugmentConfig, {"augment": params["augment"]}, "augment", seed)


def parse_grid(text: str) -> list[float]:
    """Grid syntax: ``start:stop:step`` (inclusive) or comma-separated values."""
    try:
        if ":" in text:
            parts = [float(v) for v in text.split(":")]
            if len(parts) != 3:
                raise ValueError("expected start:stop:step")
            start, stop, step = parts
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            if count < 1:
                raise ValueError("empty grid")
            return [round(start + i * step, 10) for i in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from exc


def _ensure_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# dataset discovery


def _annotated_scenes(root: str) -> list[tuple[ColoredCloud, SceneAnnotation]]:
    paths = sorted(Path(root).rglob("*.ply"))
    if not paths:
        raise ValidationError(f"{root}: no .ply files found")
    scenes = []
    for path in paths:
        cloud, ann = load_ply(path)
        if ann is None:
            raise ValidationError(f"{path}: scene has no instance annotations")
        scenes.append((cloud, ann))
    return scenes


def _pair_dirs(root: str) -> list[Path]:
    dirs = sorted(p for p in Path(root).iterdir() if (p / "scene_t0.ply").is_file())
    if not dirs:
        raise ValidationError(f"{root}: no scene-pair directories found")
    return dirs


def _load_pairs(root: str) -> list[ScenePair]:
    return [load_pair(d) for d in _pair_dirs(root)]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    config = _load_config(args.config)
    orchard = _section(OrchardConfig, config, "orchard", args.seed)
    out = _ensure_dir(args.out_dir)
    pair_seeds = stream(args.seed, STREAM_DATA).integers(0, 2**31 - 1, size=args.pairs)
    for i in range(args.pairs):
        cfg_i = dataclasses.replace(orchard, rng_seed=int(pair_seeds[i]))
        pair = generate_pair(cfg_i)
        write_pair(out / f"pair_{i:03d}", pair, cfg_i)
        print(f"pair_{i:03d}: prev={len(pair.ann_prev.instances)} "
              f"t={len(pair.ann_t.instances)} points={len(pair.cloud_t)}")
    print(f"wrote {args.pairs} scene pairs to {out}")
    return 0


def _cmd_train_seg(args) -> int:
    config = _load_config(args.config)
    seg_config = _section(SegNetConfig, config, "segnet", args.seed)
    if args.voxel_size is not None:
        seg_config = dataclasses.replace(seg_config, voxel_size=args.voxel_size)
    if args.bandwidth is not None:
        seg_config = dataclasses.replace(seg_config, bandwidth=args.bandwidth)
    params = _train_params(config)
    epochs = args.epochs if args.epochs is not None else int(params.get("epochs", 100))
    lr = args.lr if args.lr is not None else float(params.get("lr", 1e-2))

    dataset = _annotated_scenes(args.data)
    validation = _annotated_scenes(args.val_dir) if args.val_dir else None
    model = build_segnet(seg_config)
    history = train_segmentation(
        model, dataset,
        epochs=epochs, lr=lr,
        lr_decay=float(params.get("lr_decay", 0.97)),
        validation=validation,
        augment_config=_augment_from(params, args.seed),
        seed=args.seed,
        eval_interval=args.eval_interval if args.eval_interval is not None
        else int(params.get("eval_interval", 10)),
    )
    save_seg_model(args.out, model)
    _write_jsonl(f"{args.out}.log.jsonl", history)
    report_dir = _ensure_dir(args.report_dir) if args.report_dir else Path(args.out).parent
    if history:
        figures.save_training_figure(report_dir / "train_seg.png", history)
    final = history[-1] if history else {}
    print(f"trained {epochs} epochs; final loss {final.get('loss', float('nan')):.4f}"
          + (f" val PQ {final['val_pq']:.4f}" if "val_pq" in final else ""))
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_train_match(args) -> int:
    config = _load_config(args.config)
    enc_config = _section(EncoderConfig, config, "encoder", args.seed)
    match_config = _section(MatchConfig, config, "matcher", args.seed)
    if match_config.descriptor_dim != enc_config.descriptor_dim:
        raise ConfigError(
            f"matcher descriptor_dim {match_config.descriptor_dim} != "
            f"encoder output {enc_config.descriptor_dim}")
    params = _train_params(config)
    epochs = args.epochs if args.epochs is not None else int(params.get("epochs", 50))

    pairs = _load_pairs(args.data)
    validation = _load_pairs(args.val_dir) if args.val_dir else None
    enc_model = build_encoder(enc_config)
    match_model = build_matcher(match_config)
    history = train_matcher(
        enc_model, match_model, pairs,
        epochs=epochs,
        lr=args.lr if args.lr is not None else float(params.get("lr", 3e-4)),
        validation=validation,
        augment_config=_augment_from(params, args.seed),
        use_default_augment=not args.no_augment,
        seed=args.seed,
        eval_interval=args.eval_interval if args.eval_interval is not None
        else int(params.get("eval_interval", 5)),
        early_stop_train_mf1=args.early_stop_mf1,
    )
    save_reid_models(args.out, enc_model, match_model)
    _write_jsonl(f"{args.out}.log.jsonl", history)
    report_dir = _ensure_dir(args.report_dir) if args.report_dir else Path(args.out).parent
    if history:
        figures.save_training_figure(report_dir / "train_match.png", history)
    final = history[-1] if history else {}
    extras = "".join(
        f" {k} {final[k]:.4f}" for k in ("train_mf1", "val_mf1") if k in final)
    print(f"trained {final.get('steps', 0)} steps; final loss "
          f"{final.get('loss', float('nan')):.4f}{extras}")
    print(f"checkpoint: {args.out}")
    return 0


def _write_instances_csv(path, ann: SceneAnnotation) -> None:
    with open(path, "w") as fh:
        fh.write("instance_id,n_points,center_x,center_y,center_z,radius\n")
        for i, inst in enumerate(ann.instances):
            cx, cy, cz = inst.center
            fh.write(f"{i},{inst.point_indices.size},{cx:.17g},{cy:.17g},{cz:.17g},"
                     f"{inst.radius:.17g}\n")


def _cmd_segment(args) -> int:
    cloud, gt = load_ply(args.input)
    model = load_seg_model(args.model)
    if args.oracle_offsets:
        if gt is None:
            raise ValidationError(f"{args.input}: oracle offsets need an annotated scene")
        pred = oracle_prediction(cloud, gt)
        ann = cluster_prediction(cloud, pred, model.config,
                                 bandwidth=args.bandwidth, min_points=args.min_points)
    else:
        ann = segment_cloud(cloud, model, bandwidth=args.bandwidth,
                            min_points=args.min_points)
    out = _ensure_dir(args.out_dir)
    save_ply(out / "segmented.ply", cloud, ann)
    _write_instances_csv(out / "instances.csv", ann)
    figures.save_seg_figure(out / "segmentation.png", cloud, ann, gt)
    print(f"{len(ann.instances)} instances -> {out / 'segmented.ply'}")
    if gt is not None:
        report = metrics.panoptic_quality(ann, gt, iou_threshold=args.iou_threshold)
        metrics.write_json(out / "seg_report.json", metrics.seg_report_dict(report))
        metrics.write_seg_csv(out / "seg_report.csv", report)
        print(f"PQ fruit {report.fruit.pq:.4f} background {report.background.pq:.4f} "
              f"average {report.average.pq:.4f}")
    return 0


def _cmd_match(args) -> int:
    cloud_prev, ann_prev = load_ply(args.prev)
    cloud_t, ann_t = load_ply(args.current)
    if ann_prev is None or ann_t is None:
        raise ValidationError("matching needs instance-annotated scenes")
    centers_prev = np.array([i.center for i in ann_prev.instances]).reshape(-1, 3)
    centers_t = np.array([i.center for i in ann_t.instances]).reshape(-1, 3)
    out = _ensure_dir(args.out_dir)

    if args.baseline == "nn":
        if args.epsilon is None:
            raise ConfigError("--baseline nn needs --epsilon")
        assoc = baseline_mod.nn_match(ann_t.instances, ann_prev.instances, args.epsilon)
    else:
        if not args.enc or not args.matcher:
            raise ConfigError("matching needs --enc and --matcher (or --baseline nn)")
        enc_model, match_model = load_reid_models(args.enc, args.matcher)
        rng = stream(args.seed, STREAM_DATA)
        desc_prev = encode_all(cloud_prev, ann_prev.instances, enc_model, rng=rng)
        desc_t = encode_all(cloud_t, ann_t.instances, enc_model, rng=rng)
        matrix = batch_match(desc_t, centers_t, desc_prev, centers_prev, match_model)
        assoc = greedy_assign(matrix)
        if args.dump_probs:
            with open(out / "probs.csv", "w") as fh:
                header = ["query_id"] + [f"prev_{j}" for j in range(len(desc_prev))]
                fh.write(",".join(header + ["no_match"]) + "\n")
                for i, row in enumerate(matrix.values):
                    fh.write(",".join([str(i)] + [f"{v:.17g}" for v in row]) + "\n")
        if args.dump_descriptors:
            save_descriptors(out / "descriptors_prev.csv", desc_prev,
                             config=enc_model.config)
            save_descriptors(out / "descriptors_t.csv", desc_t,
                             config=enc_model.config)

    assoc.save_csv(out / "assoc.csv")
    figures.save_match_figure(out / "match.png", centers_t, centers_prev, assoc)
    matched = sum(1 for v in assoc.pairs.values() if v is not None)
    print(f"{matched} matched, {len(assoc.pairs) - matched} new -> {out / 'assoc.csv'}")
    if args.gt_assoc:
        conf = metrics.matching_confusion(assoc, TemporalAssociation.load_csv(args.gt_assoc))
        f1 = metrics.f1_scores(conf)
        payload = {
            "confusion": dataclasses.asdict(conf),
            "f1_positive": f1.f1_positive,
            "f1_negative": f1.f1_negative,
            "mf1": f1.mf1,
        }
        metrics.write_json(out / "match_report.json", payload)
        print(f"mF1 {f1.mf1:.4f} (F1+ {f1.f1_positive:.4f}, F1- {f1.f1_negative:.4f})")
    return 0


def _mapped_association(
    pred_assoc: TemporalAssociation,
    pred_t0: SceneAnnotation | None,
    gt_t0: SceneAnnotation,
    thr: float,
) -> dict:
    """Express a predicted association in ground-truth previous-instance ids.
    Without a predicted t0 segmentation the ids already refer to the ground
    truth; otherwise they pass through the instance adoption at ``thr`` and
    unrepresented targets become an impossible id (never equal to any GT)."""
    if pred_t0 is None:
        return dict(pred_assoc.pairs)
    adoption = metrics.instance_adoption(pred_t0, gt_t0, iou_threshold=thr)
    return {i: (None if j is None else adoption.get(j, -2))
            for i, j in pred_assoc.pairs.items()}


def _cmd_eval(args) -> int:
    pairs = _load_pairs(args.pairs)
    names = [d.name for d in _pair_dirs(args.pairs)]
    out = _ensure_dir(args.out_dir)
    grid = parse_grid(args.iou_grid)
    wrote = []

    seg_model = load_seg_model(args.seg_model) if args.seg_model else None
    reid = load_reid_models(args.enc, args.matcher) if args.enc and args.matcher else None

    # collect (pred_t1, pred_t0 or None, pred_assoc) per pair
    predictions = []
    if args.pred_dir:
        for name in names:
            pdir = Path(args.pred_dir) / name
            seg_t1_path = pdir / "seg_t1.ply"
            if not seg_t1_path.is_file():
                raise ValidationError(f"{pdir}: missing seg_t1.ply")
            _, pred_t1 = load_ply(seg_t1_path)
            if pred_t1 is None:
                raise ValidationError(f"{seg_t1_path}: no instance annotations")
            pred_t0 = None
            if (pdir / "seg_t0.ply").is_file():
                _, pred_t0 = load_ply(pdir / "seg_t0.ply")
            pred_assoc = TemporalAssociation.load_csv(pdir / "assoc.csv")
            predictions.append((pred_t1, pred_t0, pred_assoc))
    elif seg_model is not None or reid is not None:
        rng = stream(args.seed, STREAM_DATA)
        for pair in pairs:
            if seg_model is not None:
                pred_t0 = segment_cloud(pair.cloud_prev, seg_model)
                pred_t1 = segment_cloud(pair.cloud_t, seg_model)
            else:
                pred_t0, pred_t1 = pair.ann_prev, pair.ann_t
            if reid is not None:
                enc_model, match_model = reid
                desc_prev = encode_all(pair.cloud_prev, pred_t0.instances, enc_model, rng=rng)
                desc_t = encode_all(pair.cloud_t, pred_t1.instances, enc_model, rng=rng)
                cp = np.array([i.center for i in pred_t0.instances]).reshape(-1, 3)
                ct = np.array([i.center for i in pred_t1.instances]).reshape(-1, 3)
                matrix = batch_match(desc_t, ct, desc_prev, cp, match_model)
                pred_assoc = greedy_assign(matrix)
            else:
                pred_assoc = None
            predictions.append((pred_t1, pred_t0 if seg_model is not None else None,
                                pred_assoc))

    # segmentation report
    if predictions and (args.pred_dir or seg_model is not None):
        scene_rows = []
        sq = rq = pq = 0.0
        count = 0
        for name, pair, (pred_t1, pred_t0, _) in zip(names, pairs, predictions):
            scans = [("t1", pred_t1, pair.ann_t)]
            if pred_t0 is not None:
                scans.append(("t0", pred_t0, pair.ann_prev))
            for scan, pred, gt in scans:
                report = metrics.panoptic_quality(pred, gt)
                row = {"pair": name, "scan": scan}
                row.update(metrics.seg_report_dict(report)["average"])
                scene_rows.append(row)
                sq += report.average.sq
                rq += report.average.rq
                pq += report.average.pq
                count += 1
        payload = {
            "scenes": scene_rows,
            "mean": {"sq": sq / count, "rq": rq / count, "pq": pq / count},
        }
        metrics.write_json(out / "seg_report.json", payload)
        keys = list(scene_rows[0].keys())
        with open(out / "seg_report.csv", "w") as fh:
            fh.write(",".join(keys) + "\n")
            for row in scene_rows:
                fh.write(",".join(str(row[k]) for k in keys) + "\n")
        figures.save_seg_figure(out / "seg_first_pair.png", pairs[0].cloud_t,
                                predictions[0][0], pairs[0].ann_t)
        wrote += ["seg_report.json", "seg_report.csv", "seg_first_pair.png"]
        print(f"segmentation: mean PQ {pq / count:.4f} over {count} scans")

    # association report over the threshold grid
    has_assoc = predictions and all(p[2] is not None for p in predictions)
    if has_assoc:
        rows = []
        for thr in grid:
            total = metrics.MatchConfusion()
            for pair, (pred_t1, pred_t0, pred_assoc) in zip(pairs, predictions):
                gt_on_pred = metrics.transfer_ids(pred_t1, pair.ann_t, pair.association,
                                                  iou_threshold=thr)
                mapped = _mapped_association(pred_assoc, pred_t0, pair.ann_prev, thr)
                total = total + metrics.matching_confusion(mapped, gt_on_pred.pairs)
            f1 = metrics.f1_scores(total)
            rows.append({
                "iou_threshold": float(thr),
                "f1_positive": f1.f1_positive, "f1_negative": f1.f1_negative,
                "mf1": f1.mf1, "cm": total.cm, "mm": total.mm, "fm": total.fm,
                "tn": total.tn, "fn": total.fn,
            })
        metrics.write_match_csv(out / "match_grid.csv", rows)
        metrics.write_json(out / "match_report.json", metrics.match_report_dict(rows))
        figures.save_curve_figure(out / "match_grid.png", rows, "iou_threshold",
                                  ["mf1", "f1_positive", "f1_negative"],
                                  title="re-identification vs transfer threshold")
        wrote += ["match_grid.csv", "match_report.json", "match_grid.png"]
        avg = metrics.match_report_dict(rows)["average"]
        print(f"matching: mean mF1 {avg['mf1']:.4f} over {len(rows)} thresholds")

    # center-distance baseline on ground-truth instances
    if args.baseline == "nn":
        samples = [(p.ann_t.instances, p.ann_prev.instances, p.association) for p in pairs]
        if args.baseline_sweep:
            eps_grid = parse_grid(args.baseline_sweep)
            best_eps, curve = baseline_mod.sweep_epsilon(samples, eps_grid)
            with open(out / "baseline_sweep.csv", "w") as fh:
                fh.write("epsilon,mf1,f1_positive,f1_negative\n")
                for row in curve:
                    fh.write(f"{row['epsilon']:.17g},{row['mf1']:.17g},"
                             f"{row['f1_positive']:.17g},{row['f1_negative']:.17g}\n")
            figures.save_curve_figure(out / "baseline_sweep.png", curve, "epsilon",
                                      ["mf1"], title="nearest-center baseline sweep")
            best_row = next(r for r in curve if r["epsilon"] == best_eps)
            metrics.write_json(out / "baseline_report.json",
                               {"best_epsilon": best_eps, "curve": curve, "best": best_row})
            wrote += ["baseline_sweep.csv", "baseline_sweep.png", "baseline_report.json"]
            print(f"baseline: best epsilon {best_eps:.4g} with mF1 {best_row['mf1']:.4f}")
        else:
            if args.epsilon is None:
                raise ConfigError("--baseline nn needs --epsilon or --baseline-sweep")
            total = metrics.MatchConfusion()
            for inst_t, inst_prev, gt in samples:
                assoc = baseline_mod.nn_match(inst_t, inst_prev, args.epsilon)
                total = total + metrics.matching_confusion(assoc, gt)
            f1 = metrics.f1_scores(total)
            metrics.write_json(out / "baseline_report.json", {
                "epsilon": args.epsilon, "mf1": f1.mf1,
                "f1_positive": f1.f1_positive, "f1_negative": f1.f1_negative,
                "confusion": dataclasses.asdict(total),
            })
            wrote.append("baseline_report.json")
            print(f"baseline: mF1 {f1.mf1:.4f} at epsilon {args.epsilon:.4g}")

    if not wrote:
        raise ConfigError(
            "nothing to evaluate: give --pred-dir, models, or --baseline nn")
    print(f"reports in {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fruitmon",
        description="Fruit monitoring on colored point clouds: synthesis, "
                    "panoptic segmentation, temporal re-identification, scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
        p.add_argument("--config", help="JSON config file (schema_version 1)")

    p = sub.add_parser("gen", help="synthesize annotated scene pairs")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pairs", type=int, default=1, help="number of scene pairs")

    p = sub.add_parser("train-seg", help="train the segmentation network")
    common(p)
    p.add_argument("--data", required=True, help="directory of annotated .ply scenes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--val-dir", help="annotated scenes for model selection")
    p.add_argument("--report-dir")

    p = sub.add_parser("train-match", help="train descriptor encoder + matcher")
    common(p)
    p.add_argument("--data", required=True, help="directory of scene-pair subdirectories")
    p.add_argument("--out", required=True, help="checkpoint path (reid bundle)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--early-stop-mf1", type=float,
                   help="stop once training mF1 reaches this value")
    p.add_argument("--no-augment", action="store_true",
                   help="disable per-fruit support augmentation")
    p.add_argument("--val-dir", help="scene pairs for model selection")
    p.add_argument("--report-dir")

    p = sub.add_parser("segment", help="segment one scene into fruit instances")
    common(p)
    p.add_argument("--model", required=True, help="segmentation checkpoint")
    p.add_argument("--input", required=True, help="scene .ply")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--min-points", type=int)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--oracle-offsets", action="store_true",
                   help="cluster ground-truth offsets instead of predictions")

    p = sub.add_parser("match", help="associate fruits across two scans")
    common(p)
    p.add_argument("--prev", required=True, help="previous scan .ply (annotated)")
    p.add_argument("--current", required=True, help="current scan .ply (annotated)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--enc", help="encoder checkpoint (reid bundle)")
    p.add_argument("--matcher", help="matcher checkpoint (may equal --enc)")
    p.add_argument("--baseline", choices=["nn"], help="use the center-distance baseline")
    p.add_argument("--epsilon", type=float, help="baseline distance threshold")
    p.add_argument("--dump-probs", action="store_true")
    p.add_argument("--dump-descriptors", action="store_true")
    p.add_argument("--gt-assoc", help="reference association CSV for scoring")

    p = sub.add_parser("eval", help="score predictions on scene pairs")
    common(p)
    p.add_argument("--pairs", required=True, help="directory of scene-pair subdirectories")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iou-grid", default="0.05:0.30:0.05",
                   help="identity-transfer thresholds (start:stop:step or list)")
    p.add_argument("--pred-dir", help="precomputed predictions mirroring the pair layout")
    p.add_argument("--seg-model", help="segmentation checkpoint to run")
    p.add_argument("--enc", help="encoder checkpoint (reid bundle)")
    p.add_argument("--matcher", help="matcher checkpoint")
    p.add_argument("--baseline", choices=["nn"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--baseline-sweep", help="epsilon grid for the baseline sweep")
    return parser


_HANDLERS = {
    "gen": _cmd_gen,
    "train-seg": _cmd_train_seg,
    "train-match": _cmd_train_match,
    "segment": _cmd_segment,
    "match": _cmd_match,
    "eval": _cmd_eval,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (PlyParseError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
