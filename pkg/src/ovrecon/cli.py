"""Command-line interface.

Exit codes: 0 success, 2 validation/contract error, 3 numeric failure.

Label convention for semantic outputs: ``labels.ovtf`` holds one u32 per
world point; 0 means unlabeled/background and value v >= 1 names the
(v-1)-th entry of the accompanying class table. Mask label maps follow the
same rule per pixel.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import metrics, ovtf, pipeline, scene_io, synthetic
from .errors import EngineError, ValidationError
from .fusion import MaskSet
from .manifest import load_manifest
from .metrics import render_report
from .ovs import (
    FusionModel,
    LevelInputs,
    classify,
    count_visible_points,
    descriptor_from_inputs,
    aggregate_segment_descriptor,
    match_segments,
    segment_point_labels,
    train_fusion,
    TrainConfig,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ovrecon",
        description="Incremental pointmap reconstruction with an "
        "open-vocabulary semantic segmentation head",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for queries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="run the incremental pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictor", choices=["oracle", "external"], default="oracle")
    p.add_argument("--noise", type=float, default=0.0, help="oracle noise sigma (m)")
    p.add_argument("--out", required=True)
    p.add_argument("--exchange-dir", help="watched directory for the external predictor")
    p.add_argument("--exchange-cmd", nargs="+", help="subprocess command for the stream predictor")
    p.add_argument("--window-init", type=int)
    p.add_argument("--window-incremental", type=int)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("segment", help="match 2D masks into 3D segments")
    p.add_argument("--scene", required=True)
    p.add_argument("--masks", required=True, help="directory of labels_<id>.ovtf mask label maps")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="feature bindings for descriptor fusion")
    p.add_argument("--model", help="fusion model directory (default: identity-initialized)")

    p = sub.add_parser("query", help="label segments from text embeddings")
    p.add_argument("--scene", required=True)
    p.add_argument("--segments", help="segment table directory (default: the scene)")
    p.add_argument("--text-emb", required=True)
    p.add_argument("--classes", required=True, help="text file, one class name per line")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-ovs", help="train the descriptor-fusion model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="reconstruction/trajectory/semantic metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default="acc,comp,ate,miou")
    p.add_argument("--align", choices=["sim3", "se3", "none"], default="sim3")
    p.add_argument("--cap", type=float, help="distance cap in meters for acc/comp")
    p.add_argument("--classes", help="class-name table for the per-class report")
    p.add_argument(
        "--class-subset",
        help="label values to score: comma-separated, or a partition file "
        "with one label value per line (category splits)",
    )
    p.add_argument("--csv", help="write per-class rows to this CSV")
    p.add_argument("--out", help="write the report here as well as stdout")

    sub.add_parser("selftest", help="run the built-in oracle and gradient checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        handler = {
            "reconstruct": cmd_reconstruct,
            "segment": cmd_segment,
            "query": cmd_query,
            "train-ovs": cmd_train,
            "evaluate": cmd_evaluate,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(args) or 0
    except EngineError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


# -- reconstruct -----------------------------------------------------------------


def _oracle_from_manifest(man, noise, seed):
    coords, valid, poses = {}, {}, {}
    for frame in man.frames:
        if frame.pointmap is None or frame.pose is None:
            raise ValidationError(
                f"oracle predictor needs pointmap and pose for frame {frame.frame_id}"
            )
        pm = ovtf.read(man.resolve(frame.pointmap)).astype(np.float64)
        coords[frame.frame_id] = pm
        if frame.valid is not None:
            valid[frame.frame_id] = ovtf.read(man.resolve(frame.valid)).astype(bool)
        else:
            valid[frame.frame_id] = np.ones(pm.shape[:2], dtype=bool)
        poses[frame.frame_id] = pipeline.Pose.from_row(frame.pose)
    return pipeline.OraclePointmapPredictor(
        coords, valid, poses, noise_sigma=noise, seed=seed
    )


def cmd_reconstruct(args):
    man = load_manifest(args.manifest)
    cfg_doc = man.config
    cfg = pipeline.WindowConfig(
        init_length=args.window_init or int(cfg_doc.get("window_init", 5)),
        incremental_length=args.window_incremental
        or int(cfg_doc.get("window_incremental", 11)),
        stride=args.stride or cfg_doc.get("stride"),
    )
    predictor = None
    if args.predictor == "oracle":
        predictor = _oracle_from_manifest(man, args.noise, args.seed)
    else:
        if args.exchange_cmd:
            predictor = pipeline.ExternalStreamPredictor(args.exchange_cmd)
        elif args.exchange_dir:
            predictor = pipeline.ExternalDirectoryPredictor(args.exchange_dir)
        else:
            raise ValidationError(
                "external predictor needs --exchange-dir or --exchange-cmd"
            )
    try:
        state = pipeline.run_stream(
            man.frame_ids(), predictor, cfg, intrinsics=man.intrinsics(), seed=args.seed
        )
    finally:
        if hasattr(predictor, "close"):
            predictor.close()
    out = Path(args.out)
    scene_io.save_scene(state, out)
    report = render_report({"reconstruct": state.report})
    (out / "report.txt").write_text(report + "\n")
    print(report)
    return 0


# -- segment ------------------------------------------------------------------------


def _masks_for_keyframes(state, masks_dir):
    masks_dir = Path(masks_dir)
    if not masks_dir.is_dir():
        raise ValidationError(f"mask directory not found: {masks_dir}")
    by_keyframe = {}
    for kf in sorted(state.keyframe_ids):
        path = masks_dir / f"labels_{kf:05d}.ovtf"
        if not path.exists():
            continue
        label_map = ovtf.read(path)
        masks = []
        for value in range(1, int(label_map.max()) + 1 if label_map.size else 1):
            m = label_map == value
            if m.any():
                masks.append(m)
        if masks:
            by_keyframe[kf] = MaskSet(masks)
    if not by_keyframe:
        raise ValidationError(f"no usable mask label maps under {masks_dir}")
    return by_keyframe


def _manifest_feature_lookup(man):
    def lookup(frame_id, mask_id, require_point=True):
        arrays = {}
        for level in ("full", "seg", "oseg"):
            path = man.feature_path(frame_id, mask_id, level, "clip")
            if path is None:
                raise ValidationError(
                    f"manifest lacks clip/{level} features for frame {frame_id} mask {mask_id}"
                )
            arrays[f"clip_{level}"] = ovtf.read(path).astype(np.float64)
        for level in ("full", "seg"):
            path = man.feature_path(frame_id, mask_id, level, "dino")
            if path is None:
                raise ValidationError(
                    f"manifest lacks dino/{level} features for frame {frame_id} mask {mask_id}"
                )
            arrays[f"dino_{level}"] = ovtf.read(path).astype(np.float64)
        point_path = man.feature_path(frame_id, mask_id, "oseg", "point")
        if point_path is not None:
            arrays["point_oseg"] = ovtf.read(point_path).astype(np.float64)
        elif require_point:
            raise ValidationError(
                f"manifest lacks point features for frame {frame_id} mask {mask_id}"
            )
        else:
            arrays["point_oseg"] = None
        return LevelInputs(**arrays)

    return lookup


def cmd_segment(args):
    state = scene_io.load_scene(args.scene)
    masks = _masks_for_keyframes(state, args.masks)
    segments = match_segments(state, masks, iou_threshold=args.iou)

    if args.manifest:
        man = load_manifest(args.manifest)
        lookup = _manifest_feature_lookup(man)
        model = scene_io.load_model(args.model) if args.model else None
        if model is None:
            if not (segments and segments[0].observations):
                raise ValidationError("no segment observations to infer feature dims from")
            probe = lookup(*segments[0].observations[0], require_point=False)
            model = FusionModel(
                clip_dim=probe.clip_full.shape[1],
                dino_dim=probe.dino_full.shape[1],
                point_dim=None if probe.point_oseg is None else probe.point_oseg.shape[1],
                use_point_encoder=probe.point_oseg is not None,
                seed=args.seed,
            )
        for seg in segments:
            for kf_id, mask_id in seg.observations:
                inputs = lookup(kf_id, mask_id, require_point=model.use_point_encoder)
                d = descriptor_from_inputs(model, inputs)
                weight = max(count_visible_points(state, seg, kf_id), 1)
                aggregate_segment_descriptor(seg, d, weight)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_io.save_segments(segments, out)
    summary = {
        "segment": {
            "segments": len(segments),
            "keyframes_with_masks": len(masks),
            "iou_threshold": args.iou,
            "descriptors": "fused" if args.manifest else "none",
        }
    }
    (out / "report.txt").write_text(render_report(summary) + "\n")
    print(render_report(summary))
    return 0


# -- query --------------------------------------------------------------------------


def cmd_query(args):
    state = scene_io.load_scene(args.scene)
    segments = scene_io.load_segments(args.segments or args.scene)
    text = ovtf.read(args.text_emb).astype(np.float64)
    class_names = [
        line.strip()
        for line in Path(args.classes).read_text().splitlines()
        if line.strip()
    ]
    if not class_names:
        raise ValidationError(f"class file {args.classes} names no classes")
    if len(class_names) != text.shape[0]:
        raise ValidationError(
            f"{len(class_names)} class names for {text.shape[0]} text embeddings"
        )
    norms = np.linalg.norm(text, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("text embeddings contain a zero row")
    text = text / norms

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seg in segments:
        desc = seg.descriptor
        if desc is None:
            raise ValidationError(
                f"segment {seg.id} has no descriptor; rerun segment with --manifest"
            )
        idx, scores = classify(desc, text)
        seg.label = idx + 1  # 0 stays reserved for unlabeled points
        rows.append(
            {"segment": seg.id, "class": class_names[idx], "score": float(scores[idx])}
        )
    labels = segment_point_labels(state, segments, background=0)
    scene_io.save_labels(labels, out)
    scene_io.save_segments(segments, out)
    (out / "classes.txt").write_text("\n".join(["unlabeled"] + class_names) + "\n")
    with open(out / "segment_scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["segment", "class", "score"])
        writer.writeheader()
        writer.writerows(rows)
    print(render_report({"query": {"segments": len(segments), "classes": len(class_names)}}))
    return 0


# -- train-ovs -----------------------------------------------------------------------


def cmd_train(args):
    dataset = scene_io.load_dataset(args.dataset)
    model, trace = train_fusion(
        dataset,
        epochs=args.epochs,
        batch_size=args.batch,
        config=TrainConfig(lr=args.lr, seed=args.seed),
    )
    out = Path(args.out)
    scene_io.save_model(model, out)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(trace):
            writer.writerow([i, value])
    print(render_report({"train": {"epochs": len(trace), "final_loss": trace[-1] if trace else None}}))
    return 0


# -- evaluate -----------------------------------------------------------------------


def _load_eval_dir(directory):
    directory = Path(directory)
    if (directory / "meta.yaml").exists():
        state = scene_io.load_scene(directory)
        traj = state.trajectory() if state.keyframes else None
        points = state.world_points()
    else:
        points_path = directory / "points.ovtf"
        if not points_path.exists():
            raise ValidationError(f"{directory} has neither meta.yaml nor points.ovtf")
        points = ovtf.read(points_path).astype(np.float64)
        traj = None
        if (directory / "trajectory.ovtf").exists() and (directory / "keyframes.ovtf").exists():
            rows = ovtf.read(directory / "trajectory.ovtf")
            ids = ovtf.read(directory / "keyframes.ovtf").tolist()
            traj = metrics.Trajectory.from_rows(ids, rows)
    labels = None
    if (directory / "labels.ovtf").exists():
        labels = ovtf.read(directory / "labels.ovtf").astype(np.int64)
    return points, traj, labels


def cmd_evaluate(args):
    wanted = [token.strip() for token in args.metrics.split(",") if token.strip()]
    unknown = set(wanted) - {"acc", "comp", "ate", "miou", "f"}
    if unknown:
        raise ValidationError(f"unknown metric tokens: {sorted(unknown)}")
    pred_pts, pred_traj, pred_labels = _load_eval_dir(args.pred)
    gt_pts, gt_traj, gt_labels = _load_eval_dir(args.gt)

    report = {"alignment": args.align}
    if {"acc", "comp"} & set(wanted):
        if args.align != "none" and pred_pts.shape == gt_pts.shape:
            aligned, sim = metrics.align_corresponding_clouds(pred_pts, gt_pts, args.align)
            report["cloud_alignment"] = {
                "mode": args.align,
                "scale": sim.s,
                "translation": [float(x) for x in sim.t],
            }
        else:
            aligned = pred_pts
            if args.align != "none":
                report["cloud_alignment"] = "skipped (cloud sizes differ)"
        acc, comp = metrics.accuracy_completion(
            aligned, gt_pts, cap_m=args.cap, workers=args.threads
        )
        if "acc" in wanted:
            report["accuracy_cm"] = acc
        if "comp" in wanted:
            report["completion_cm"] = comp

    if "ate" in wanted:
        if pred_traj is None or gt_traj is None:
            raise ValidationError("ate requested but a trajectory is missing")
        report["ate_rmse_cm"] = metrics.ate_rmse(pred_traj, gt_traj, align=args.align)
        report["ate_frames"] = len(gt_traj)

    scores = None
    if "miou" in wanted or "f" in wanted:
        if pred_labels is None or gt_labels is None:
            raise ValidationError("miou requested but labels.ovtf is missing")
        if pred_labels.shape != gt_labels.shape:
            raise ValidationError("label arrays differ in length")
        names = []
        if args.classes:
            names = [
                line.strip()
                for line in Path(args.classes).read_text().splitlines()
                if line.strip()
            ]
        subset = None
        if args.class_subset:
            candidate = Path(args.class_subset)
            if candidate.exists():
                subset = [
                    int(line.strip())
                    for line in candidate.read_text().splitlines()
                    if line.strip()
                ]
            else:
                subset = [int(x) for x in args.class_subset.split(",")]
        anchor = gt_pts[: pred_labels.shape[0]]
        scores = metrics.miou_macc(
            metrics.LabeledCloud(anchor, pred_labels, names),
            metrics.LabeledCloud(anchor, gt_labels, names),
            class_subset=subset,
        )
        if "miou" in wanted:
            report["miou"] = scores.miou
            report["macc"] = scores.macc
        if "f" in wanted:
            fiou, facc = metrics.f_weighted_from_scores(scores)
            report["f_miou"] = fiou
            report["f_macc"] = facc
        report["classes_present"] = len(scores.present())
        report["per_class"] = metrics.per_class_rows(scores)

    text = render_report({"evaluate": report})
    print(text)
    if args.csv and scores is not None:
        metrics.write_class_csv(args.csv, scores)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


# -- selftest -----------------------------------------------------------------------


def cmd_selftest(args):
    from . import tensor_ad as ta
    from . import fusion, geometry, ovs

    rng = np.random.default_rng(args.seed)
    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:  # report, keep going
            checks.append((name, False, str(exc)))

    def attention_oracle_check():
        q = rng.normal(size=(4, 8))
        kv = rng.normal(size=(5, 8))
        got = ta.scaled_cross_attention(ta.tensor(q), ta.tensor(kv)).data
        for i in range(4):
            logits = kv @ q[i] / np.sqrt(8)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            assert np.abs(got[i] - w @ kv).max() < 1e-12

    def gradient_checks():
        gt = rng.normal(size=(4, 3)) + 2.0
        pred = gt + 0.1 * rng.normal(size=(4, 3))
        conf = rng.uniform(0.5, 2.0, size=4)
        cfg = fusion.LossConfig(alpha=0.3)
        rep = ta.finite_diff_check(
            lambda p: fusion.loss_i2p_terms(p, ta.constant(conf), gt, cfg),
            ta.tensor(pred),
            tol=1e-4,
        )
        assert rep.passed, rep
        rep = ta.finite_diff_check(
            lambda p: fusion.loss_l2w_terms(p, ta.constant(conf), gt, cfg),
            ta.tensor(pred),
            tol=1e-4,
        )
        assert rep.passed, rep

    def umeyama_check():
        src = rng.normal(size=(20, 3))
        truth = geometry.Sim3(1.8, geometry.random_rotation(rng), rng.normal(size=3))
        sim = geometry.umeyama_align(src, truth.apply(src))
        assert np.max(np.abs(sim.apply(src) - truth.apply(src))) < 1e-9

    def pnp_check():
        K = geometry.Intrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
        pose = geometry.Pose(geometry.random_rotation(rng), rng.normal(size=3) * 0.3)
        px = np.stack(
            [rng.uniform(10, 310, size=30), rng.uniform(10, 230, size=30)], axis=1
        )
        depths = rng.uniform(0.5, 4.0, size=30)
        world = geometry.unproject(px, depths, K, pose)
        result = geometry.pnp_ransac(world, px, K, seed=args.seed)
        assert geometry.rotation_angle(result.pose.R, pose.R) < 1e-6

    def metrics_check():
        pred = rng.normal(size=(60, 3))
        gt = rng.normal(size=(50, 3))
        acc, comp = metrics.accuracy_completion(pred, gt)
        brute_acc = np.min(np.linalg.norm(pred[:, None] - gt[None], axis=2), axis=1).mean() * 100
        assert abs(acc - brute_acc) < 1e-10

    def ovtf_check():
        blob = ovtf.to_bytes(rng.normal(size=(3, 4)))
        back = ovtf.from_bytes(blob)
        assert ovtf.to_bytes(back) == blob

    def fuse_check():
        model = ovs.FusionModel(8, seed=1)
        inp = ovs.LevelInputs(*(rng.normal(size=(2, 8)) for _ in range(6)))
        d = ovs.fuse_descriptor(model, inp).data
        assert abs(np.linalg.norm(d) - 1.0) < 1e-9

    def pipeline_check():
        scene = synthetic.build_room_scene(n_frames=16, seed=args.seed)
        predictor = pipeline.OraclePointmapPredictor(
            scene.coords, scene.valid, scene.poses
        )
        state = pipeline.run_stream(scene.frame_ids, predictor)
        assert state.total_points > 0 and len(state.keyframes) >= 2

    check("attention matches brute-force oracle", attention_oracle_check)
    check("loss gradients match finite differences", gradient_checks)
    check("similarity alignment recovers exact transforms", umeyama_check)
    check("pose recovery on noiseless correspondences", pnp_check)
    check("metrics match brute force", metrics_check)
    check("tensor file round-trip is byte-exact", ovtf_check)
    check("fused descriptors are unit-normalized", fuse_check)
    check("pipeline registers a synthetic stream", pipeline_check)

    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 3


if __name__ == "__main__":
    sys.exit(main())
