"""Command-line entry: export features, masks, and a manifest for a set of
image frames.

Optional ground truth (for the engine's oracle reconstruction) is read from
a directory holding ``points_<frame>.ovtf``, optional ``valid_<frame>.ovtf``,
``poses.yaml`` ({frame id: 12 pose floats}) and ``intrinsics.yaml``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import ovtf
from .errors import AdapterError
from .extract import Extractor, ExtractorConfig, FrameGroundTruth


def build_parser():
    parser = argparse.ArgumentParser(prog="ovadapter")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="export masks, features, and a manifest")
    p.add_argument("--images", nargs="+", required=True, help="image files, frame order")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="text file with one class name per line")
    p.add_argument("--gt", help="directory with ground-truth pointmaps/poses")
    p.add_argument("--seg-model", default="builtin:blobs")
    p.add_argument("--vl-model", default="builtin:patch-clip")
    p.add_argument("--ssl-model", default="builtin:patch-dino")
    p.add_argument("--point-model", default="builtin:point-stats")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--device", default="cpu")
    return parser


def _load_ground_truth(gt_dir, n_frames):
    gt_dir = Path(gt_dir)
    poses_path = gt_dir / "poses.yaml"
    if not poses_path.exists():
        raise AdapterError(f"{gt_dir} has no poses.yaml")
    with open(poses_path) as fh:
        poses = {int(k): [float(x) for x in v] for k, v in yaml.safe_load(fh).items()}
    out = {}
    for fid in range(n_frames):
        points_path = gt_dir / f"points_{fid:05d}.ovtf"
        if not points_path.exists() or fid not in poses:
            continue
        valid_path = gt_dir / f"valid_{fid:05d}.ovtf"
        out[fid] = FrameGroundTruth(
            pointmap=ovtf.read(points_path),
            pose_row=poses[fid],
            valid=ovtf.read(valid_path).astype(bool) if valid_path.exists() else None,
        )
    intr = None
    intr_path = gt_dir / "intrinsics.yaml"
    if intr_path.exists():
        with open(intr_path) as fh:
            intr = yaml.safe_load(fh)
    return out, intr


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(
            seg_model=args.seg_model,
            vl_model=args.vl_model,
            ssl_model=args.ssl_model,
            point_model=args.point_model,
            device=args.device,
            out_dir=args.out,
            feature_dim=args.feature_dim,
            tokens=args.tokens,
        )
        extractor = Extractor(config)
        class_names = None
        if args.classes:
            class_names = [
                line.strip()
                for line in Path(args.classes).read_text().splitlines()
                if line.strip()
            ]
        ground_truth, intrinsics = ({}, None)
        if args.gt:
            ground_truth, intrinsics = _load_ground_truth(args.gt, len(args.images))
        manifest = extractor.export_scene(
            args.images,
            args.out,
            class_names=class_names,
            ground_truth=ground_truth,
            intrinsics=intrinsics,
        )
        print(f"wrote {manifest}")
        return 0
    except AdapterError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
