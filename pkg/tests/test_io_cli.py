"""Manifest, persistence, and CLI tests (including the external predictor
exchange)."""

import sys
import threading

import numpy as np
import pytest
import yaml

from ovrecon import cli, metrics, ovs, ovtf, pipeline, scene_io, synthetic
from ovrecon.errors import ValidationError
from ovrecon.manifest import load_manifest, save_manifest


@pytest.fixture()
def room_manifest(tmp_path):
    scene = synthetic.build_room_scene(n_frames=20, seed=0)
    path = scene_io.export_synthetic_scene(scene, tmp_path / "scene")
    return scene, path


# -- manifest -----------------------------------------------------------------------


def test_manifest_roundtrip(room_manifest):
    scene, path = room_manifest
    man = load_manifest(path)
    assert man.frame_ids() == scene.frame_ids
    assert man.intrinsics() == scene.intrinsics
    resaved = save_manifest(man, path.parent / "again.yaml")
    again = load_manifest(resaved)
    assert again.frame_ids() == man.frame_ids()
    assert again.classes == man.classes
    assert [f.pose for f in again.frames] == [f.pose for f in man.frames]


def test_manifest_minimal_five_frames(tmp_path):
    for i in range(5):
        (tmp_path / f"img{i}.png").write_bytes(b"stub")
    doc = {"frames": [{"id": i, "image": f"img{i}.png"} for i in range(5)]}
    path = tmp_path / "man.yaml"
    path.write_text(yaml.safe_dump(doc))
    man = load_manifest(path)
    assert len(man.frames) == 5


def test_manifest_duplicate_id_rejected(tmp_path):
    path = tmp_path / "man.yaml"
    path.write_text(yaml.safe_dump({"frames": [{"id": 1}, {"id": 1}]}))
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(path)


def test_manifest_dangling_tensor_rejected(tmp_path):
    doc = {
        "frames": [{"id": 0}],
        "features": [
            {"frame": 0, "mask": 0, "level": "full", "kind": "clip", "path": "gone.ovtf"}
        ],
    }
    path = tmp_path / "man.yaml"
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ValidationError, match="gone.ovtf"):
        load_manifest(path)


def test_manifest_unknown_feature_frame_rejected(tmp_path):
    ovtf.write(tmp_path / "t.ovtf", np.ones(3))
    doc = {
        "frames": [{"id": 0}],
        "features": [
            {"frame": 7, "mask": 0, "level": "full", "kind": "clip", "path": "t.ovtf"}
        ],
    }
    path = tmp_path / "man.yaml"
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ValidationError, match="unknown frame"):
        load_manifest(path)


# -- scene persistence ------------------------------------------------------------------


def test_scene_save_load_roundtrip(tmp_path):
    scene = synthetic.build_room_scene(n_frames=16, seed=1)
    predictor = pipeline.OraclePointmapPredictor(scene.coords, scene.valid, scene.poses)
    state = pipeline.run_stream(scene.frame_ids, predictor, intrinsics=scene.intrinsics)
    scene_io.save_scene(state, tmp_path / "scene")
    back = scene_io.load_scene(tmp_path / "scene")
    np.testing.assert_allclose(back.world_points(), state.world_points(), atol=1e-12)
    assert back.frame_order == state.frame_order
    assert back.keyframe_ids == sorted(state.keyframe_ids)
    for a, b in zip(
        sorted(state.keyframes, key=lambda k: k.frame_id), back.keyframes
    ):
        np.testing.assert_allclose(b.pose.matrix(), a.pose.matrix(), atol=1e-12)
    assert back.intrinsics == state.intrinsics


def test_segments_save_load_roundtrip(tmp_path):
    seg = ovs.Segment3D(0, np.array([3, 5, 9]), [(2, 0), (7, 1)], label=4)
    ovs.aggregate_segment_descriptor(seg, np.array([1.0, 0.0, 0.0, 0.0]), 2.0)
    scene_io.save_segments([seg], tmp_path)
    back = scene_io.load_segments(tmp_path)
    assert len(back) == 1
    np.testing.assert_array_equal(back[0].point_indices, seg.point_indices)
    assert back[0].observations == seg.observations
    assert back[0].label == 4
    np.testing.assert_allclose(
        back[0].descriptor.normalized(), seg.descriptor.normalized(), atol=1e-12
    )


def test_model_save_load_roundtrip(tmp_path):
    model = ovs.FusionModel(8, 6, 4, seed=3)
    scene_io.save_model(model, tmp_path / "model")
    back = scene_io.load_model(tmp_path / "model")
    rng = np.random.default_rng(0)
    inp = ovs.LevelInputs(
        rng.normal(size=(2, 8)),
        rng.normal(size=(2, 8)),
        rng.normal(size=(2, 8)),
        rng.normal(size=(2, 6)),
        rng.normal(size=(2, 6)),
        rng.normal(size=(2, 4)),
    )
    np.testing.assert_array_equal(
        ovs.fuse_descriptor(model, inp).data, ovs.fuse_descriptor(back, inp).data
    )


def test_dataset_save_load_roundtrip(tmp_path):
    ds = synthetic.build_separable_ovs_dataset(n_segments=12, dim=16, seed=2)
    scene_io.save_dataset(ds, tmp_path / "ds")
    back = scene_io.load_dataset(tmp_path / "ds")
    assert len(back) == 12
    assert back.class_names == ds.class_names
    np.testing.assert_array_equal(back.text_embeddings, ds.text_embeddings)
    np.testing.assert_array_equal(back.items[3][0].clip_full, ds.items[3][0].clip_full)
    assert back.items[3][1] == ds.items[3][1]


# -- external predictor exchange -----------------------------------------------------


def _answer_requests_in_dir(exchange_dir, scene, n_windows, stop):
    """Oracle process stand-in: answers request files with oracle tensors."""
    import time as time_mod

    oracle = pipeline.OraclePointmapPredictor(scene.coords, scene.valid, scene.poses)
    answered = 0
    while answered < n_windows and not stop.is_set():
        req = exchange_dir / f"req_{answered:06d}.ovtf"
        if not req.exists():
            time_mod.sleep(0.005)
            continue
        ids = ovtf.read(req).astype(int).tolist()
        kf, frames = ids[0], ids[1:]
        maps = oracle.predict(frames, kf)
        points = np.stack([maps[f].coords for f in frames])
        conf = np.stack([maps[f].confidence for f in frames])
        valid = np.stack([maps[f].valid for f in frames]).astype(np.uint8)
        ovtf.write(exchange_dir / f"res_{answered:06d}_points.ovtf", points)
        ovtf.write(exchange_dir / f"res_{answered:06d}_conf.ovtf", conf)
        ovtf.write(exchange_dir / f"res_{answered:06d}_valid.ovtf", valid)
        (exchange_dir / f"res_{answered:06d}.done").touch()
        answered += 1


def test_external_directory_predictor_roundtrip(tmp_path):
    scene = synthetic.build_room_scene(n_frames=16, seed=4)
    exchange = tmp_path / "exchange"
    exchange.mkdir()
    cfg = pipeline.WindowConfig()
    n_windows = len(pipeline.window_schedule(16, cfg))
    stop = threading.Event()
    worker = threading.Thread(
        target=_answer_requests_in_dir, args=(exchange, scene, n_windows, stop)
    )
    worker.start()
    try:
        predictor = pipeline.ExternalDirectoryPredictor(exchange, timeout=20.0)
        state = pipeline.run_stream(scene.frame_ids, predictor, cfg)
    finally:
        stop.set()
        worker.join(timeout=5)
    oracle_state = pipeline.run_stream(
        scene.frame_ids,
        pipeline.OraclePointmapPredictor(scene.coords, scene.valid, scene.poses),
        cfg,
    )
    np.testing.assert_allclose(
        state.world_points(), oracle_state.world_points(), atol=1e-12
    )


def test_stream_framing_roundtrip():
    import io
    import struct

    buf = io.BytesIO()
    blob = ovtf.to_bytes(np.arange(5, dtype=np.float64))
    pipeline.write_frame(buf, blob)
    buf.seek(0)
    assert pipeline.read_frame(buf) == blob
    buf2 = io.BytesIO(struct.pack("<Q", 10) + b"abc")
    with pytest.raises(EOFError):
        pipeline.read_frame(buf2)


def test_external_stream_predictor_subprocess(tmp_path):
    scene = synthetic.build_room_scene(n_frames=8, seed=5, width=16, height=12)
    scene_dir = tmp_path / "gt"
    scene_io.export_synthetic_scene(scene, scene_dir)
    # a tiny predictor process that answers from the exported ground truth
    script = tmp_path / "predictor.py"
    script.write_text(
        f"""
import sys
import numpy as np
from ovrecon import ovtf, pipeline
from ovrecon.manifest import load_manifest
from ovrecon.geometry import Pose

man = load_manifest(r"{scene_dir / 'scene.yaml'}")
coords, valid, poses = {{}}, {{}}, {{}}
for fr in man.frames:
    coords[fr.frame_id] = ovtf.read(man.resolve(fr.pointmap)).astype(float)
    valid[fr.frame_id] = ovtf.read(man.resolve(fr.valid)).astype(bool)
    poses[fr.frame_id] = Pose.from_row(fr.pose)
oracle = pipeline.OraclePointmapPredictor(coords, valid, poses)
inp, out = sys.stdin.buffer, sys.stdout.buffer
while True:
    try:
        ids = ovtf.from_bytes(pipeline.read_frame(inp)).astype(int).tolist()
    except EOFError:
        break
    kf, frames = ids[0], ids[1:]
    maps = oracle.predict(frames, kf)
    pipeline.write_frame(out, ovtf.to_bytes(np.stack([maps[f].coords for f in frames])))
    pipeline.write_frame(out, ovtf.to_bytes(np.stack([maps[f].confidence for f in frames])))
    pipeline.write_frame(out, ovtf.to_bytes(np.stack([maps[f].valid for f in frames]).astype(np.uint8)))
    out.flush()
"""
    )
    predictor = pipeline.ExternalStreamPredictor([sys.executable, str(script)])
    try:
        state = pipeline.run_stream(scene.frame_ids, predictor)
    finally:
        predictor.close()
    assert state.total_points > 0
    direct = pipeline.run_stream(
        scene.frame_ids,
        pipeline.OraclePointmapPredictor(scene.coords, scene.valid, scene.poses),
    )
    np.testing.assert_allclose(state.world_points(), direct.world_points(), atol=1e-12)


# -- CLI end-to-end ----------------------------------------------------------------------


def test_cli_reconstruct_segment_query_evaluate(tmp_path):
    scene = synthetic.two_box_scene(n_frames=15, seed=0)
    scene_dir = tmp_path / "input"
    manifest_path = scene_io.export_synthetic_scene(scene, scene_dir)
    out_scene = tmp_path / "scene_out"

    rc = cli.main(
        [
            "reconstruct",
            "--manifest",
            str(manifest_path),
            "--predictor",
            "oracle",
            "--noise",
            "0",
            "--out",
            str(out_scene),
        ]
    )
    assert rc == 0
    assert (out_scene / "points.ovtf").exists()
    assert "fps" in (out_scene / "report.txt").read_text()

    # segments from the oracle mask label maps
    seg_out = tmp_path / "segments_out"
    rc = cli.main(
        [
            "segment",
            "--scene",
            str(out_scene),
            "--masks",
            str(scene_dir / "masks"),
            "--iou",
            "0.5",
            "--out",
            str(seg_out),
        ]
    )
    assert rc == 0
    segments = scene_io.load_segments(seg_out)
    assert len(segments) == 2

    # attach synthetic descriptors + labels, then query against text rows
    state = scene_io.load_scene(out_scene)
    text = np.eye(4)[:2]
    for seg, cls in zip(segments, (0, 1)):
        ovs.aggregate_segment_descriptor(seg, text[cls] + 0.01, 1.0)
    scene_io.save_segments(segments, seg_out)
    text_path = tmp_path / "text.ovtf"
    ovtf.write(text_path, text)
    classes_path = tmp_path / "classes.txt"
    classes_path.write_text("box_a\nbox_b\n")
    query_out = tmp_path / "query_out"
    rc = cli.main(
        [
            "query",
            "--scene",
            str(out_scene),
            "--segments",
            str(seg_out),
            "--text-emb",
            str(text_path),
            "--classes",
            str(classes_path),
            "--out",
            str(query_out),
        ]
    )
    assert rc == 0
    labels = scene_io.load_labels(query_out)
    assert labels.shape[0] == state.total_points
    assert set(np.unique(labels)) <= {0, 1, 2}
    assert (query_out / "segment_scores.csv").read_text().startswith("segment,")

    # evaluate needs a gt directory: reuse the reconstruction as its own gt
    gt_dir = tmp_path / "gt_eval"
    gt_dir.mkdir()
    ovtf.write(gt_dir / "points.ovtf", state.world_points())
    ovtf.write(
        gt_dir / "labels.ovtf", scene_io.load_labels(query_out).astype(np.uint32)
    )
    report_path = tmp_path / "report.txt"
    rc = cli.main(
        [
            "evaluate",
            "--pred",
            str(out_scene),
            "--gt",
            str(gt_dir),
            "--metrics",
            "acc,comp",
            "--align",
            "sim3",
            "--out",
            str(report_path),
        ]
    )
    assert rc == 0
    assert "accuracy_cm" in report_path.read_text()


def test_cli_exit_code_on_validation_error(tmp_path):
    rc = cli.main(
        [
            "reconstruct",
            "--manifest",
            str(tmp_path / "missing.yaml"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 2


def test_cli_train_ovs_and_reuse_model(tmp_path):
    ds = synthetic.build_separable_ovs_dataset(n_segments=60, dim=16, seed=0)
    ds_dir = tmp_path / "ds"
    scene_io.save_dataset(ds, ds_dir)
    model_dir = tmp_path / "model"
    rc = cli.main(
        [
            "train-ovs",
            "--dataset",
            str(ds_dir),
            "--epochs",
            "4",
            "--batch",
            "32",
            "--out",
            str(model_dir),
        ]
    )
    assert rc == 0
    trace = (model_dir / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,loss"
    assert len(trace) == 5
    model = scene_io.load_model(model_dir)
    assert ovs.classification_accuracy(model, ds) > 0.5


def test_cli_evaluate_miou_pipeline(tmp_path):
    # identical labels -> perfect scores, exercised through the CLI
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3))
    labels = rng.integers(0, 3, size=40).astype(np.uint32)
    for name in ("pred", "gt"):
        d = tmp_path / name
        d.mkdir()
        ovtf.write(d / "points.ovtf", pts)
        ovtf.write(d / "labels.ovtf", labels)
    out = tmp_path / "rep.txt"
    rc = cli.main(
        [
            "evaluate",
            "--pred",
            str(tmp_path / "pred"),
            "--gt",
            str(tmp_path / "gt"),
            "--metrics",
            "miou,f",
            "--out",
            str(out),
            "--csv",
            str(tmp_path / "per_class.csv"),
        ]
    )
    assert rc == 0
    text = out.read_text()
    assert "miou: 1" in text
    assert "f_miou: 1" in text
    assert (tmp_path / "per_class.csv").exists()


def test_cli_selftest_passes():
    assert cli.main(["selftest"]) == 0
