"""End-to-end smoke tests for the python bindings."""
import json
import math

import numpy as np
import pytest

import _flowdet as fd


def test_fps_deterministic_and_spread():
    pts = np.random.RandomState(0).randn(200, 3)
    a = fd.farthest_point_sample(pts, 16, seed=5)
    b = fd.farthest_point_sample(pts, 16, seed=5)
    assert a == b
    assert len(set(a)) == 16


def test_knn_shapes_and_self_match():
    pts = np.random.RandomState(1).randn(40, 3)
    idx, dists = fd.knn(pts, pts, 3)
    assert idx.shape == (40, 3)
    assert np.array_equal(idx[:, 0], np.arange(40))
    assert np.allclose(dists[:, 0], 0.0)


def test_nn_loss_zero_on_identical_clouds():
    pts = np.random.RandomState(2).randn(30, 3)
    value, grad = fd.nearest_neighbor_loss(pts, pts)
    assert value == 0.0
    assert np.allclose(grad, 0.0)


def test_cycle_loss_gradient_matches_finite_difference():
    rng = np.random.RandomState(3)
    anchors = rng.randn(10, 3)
    recon = anchors + 0.1 * rng.randn(10, 3)
    value, grad = fd.cycle_consistency_loss(anchors, recon)
    eps = 1e-6
    for i in range(3):
        bumped = recon.copy()
        bumped[i, i % 3] += eps
        v2, _ = fd.cycle_consistency_loss(anchors, bumped)
        fd_grad = (v2 - value) / eps
        assert math.isclose(fd_grad, grad[i, i % 3], rel_tol=1e-4, abs_tol=1e-6)


def test_bev_iou_known_overlap():
    a = dict(x=0, y=0, z=0, w=2, l=2, h=2, yaw=0)
    b = dict(x=1, y=0, z=0, w=2, l=2, h=2, yaw=0)
    assert math.isclose(fd.bev_iou(a, b), 1.0 / 3.0, rel_tol=1e-12)


def test_average_precision_perfect_detections():
    gts = [[dict(x=0, y=0, z=0, w=2, l=4, h=1.5, yaw=0.3)]]
    dets = [[dict(**gts[0][0], score=0.9)]]
    r = fd.average_precision(dets, gts, iou_threshold=0.7)
    assert r["ap"] == 1.0
    assert r["tp"] == 1 and r["fp"] == 0 and r["fn"] == 0


def test_generate_scene_flow_consistency():
    gen = json.dumps({"extent": 5.0, "background_points": 100, "object_surface_points": 60})
    s = fd.generate_scene(gen, 11)
    assert s["frame_t"].shape[1] == 3
    assert s["gt_flow"].shape == s["frame_t"].shape
    assert len(s["gt_boxes_t"]) >= 1


def test_kitti_bin_round_trip(tmp_path):
    xyz = np.random.RandomState(4).randn(25, 3)
    refl = np.random.RandomState(5).rand(25)
    path = str(tmp_path / "cloud.bin")
    fd.save_kitti_bin(xyz, refl, path)
    back = fd.load_kitti_bin(path)
    assert back["xyz"].shape == (25, 3)
    assert np.allclose(back["xyz"], xyz, atol=1e-6)
    assert np.allclose(back["reflectance"], refl, atol=1e-6)
    assert (tmp_path / "cloud.bin").stat().st_size == 25 * 16


def test_remove_ground_keeps_index_map():
    xyz = np.array([[0, 0, -0.1], [0, 0, 0.5], [1, 1, 0.0], [2, 2, 1.2]], dtype=float)
    kept, orig = fd.remove_ground(xyz, 0.2)
    assert orig == [1, 3]
    assert np.allclose(kept, xyz[[1, 3]])


def test_pretrain_flow_tiny_run(tmp_path):
    cfg = {
        "stage": "pretrain-flow",
        "dataset": {
            "generator": {"extent": 5.0, "background_points": 150, "object_surface_points": 60},
            "n_scenes": 4,
            "val_fraction": 0.25,
        },
        "model": {
            "backbone": {"n_sample": 32, "n_centroids": 8, "mlp": {"widths": [8, 16]}},
            "flow": {
                "embed_k": 4,
                "embed_mlp": {"widths": [16, 16]},
                "setconv_mlp": {"widths": [16, 16]},
                "upconv_mlp": {"widths": [16, 16]},
                "fc": {"widths": [3], "final_linear": True},
            },
            "detect": {"bev_extent": 6.0, "bev_cells": 8, "conv_channels": 8},
        },
        "optimizer": {"kind": "adam", "lr": 0.003},
        "steps": 3,
        "eval_every": 3,
        "batch_size": 1,
        "seed": 9,
        "out_dir": str(tmp_path / "run"),
    }
    res = fd.pretrain_flow(json.dumps(cfg))
    assert res["final_step"] == 3
    assert not res["diverged"]
    assert (tmp_path / "run" / "flow_metrics.csv").exists()
    assert math.isfinite(res["val_epe"])


def test_bad_config_raises_value_error():
    with pytest.raises(ValueError):
        fd.pretrain_flow(json.dumps({"stage": "nonsense"}))
