#!/usr/bin/env python3
"""
预测头与自适应预测融合测试，附带几种简单融合方式作为对照
"""

import numpy as np
import pytest
from scipy.special import erf

import tensor_kernels as tk
from errors import DataError, ShapeError
from fusion_heads import (Logits, apf_fuse, branch_logits, confidence, fuse_logits, init_fusion_params,
                          init_head_params, prediction_head, read_predictions, write_predictions)
from tensor_kernels import ParamStore, Tensor

DIM, NUM_SEM, NUM_MOV = 8, 6, 2


def make_store(seed=0):
    store = ParamStore(seed=seed)
    init_head_params(store, DIM, NUM_SEM, NUM_MOV)
    init_fusion_params(store, DIM)
    return store


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def overwrite_fusion(point, cluster, clustered_mask):
    """簇内点直接用簇分支结果覆盖"""
    return np.where(clustered_mask[:, None], cluster, point)


def feature_fusion(point_feats, cluster_feats, store):
    """特征相加后走点分支的语义头"""
    return prediction_head(tk.add(point_feats, cluster_feats), store, "point_sem").data


def unweighted_sum(point, cluster):
    return point + cluster


def test_head_zero_input_gives_bias():
    store = make_store()
    out = prediction_head(Tensor(np.zeros((3, DIM))), store, "point_sem")
    np.testing.assert_array_equal(out.data, np.zeros((3, NUM_SEM)))


def test_head_matches_numpy():
    store = make_store(1)
    x = np.random.default_rng(0).normal(size=(5, DIM))
    base = "head/cluster_mov"
    expected = gelu(x @ store[f"{base}/w1"].data + store[f"{base}/b1"].data) @ store[f"{base}/w2"].data
    np.testing.assert_allclose(prediction_head(Tensor(x), store, "cluster_mov").data, expected, atol=1e-12)


def test_branch_heads_do_not_share_weights():
    store = make_store()
    x = Tensor(np.random.default_rng(1).normal(size=(4, DIM)))
    point = branch_logits(x, store, "point")
    cluster = branch_logits(x, store, "cluster")
    assert point.semantic.shape == (4, NUM_SEM) and point.motion.shape == (4, NUM_MOV)
    assert not np.allclose(point.semantic.data, cluster.semantic.data)


def test_confidence_range_and_zero_layer():
    store = make_store()
    rng = np.random.default_rng(2)
    pf, cf = Tensor(rng.normal(size=(6, DIM))), Tensor(rng.normal(size=(6, DIM)))
    scores = confidence(pf, cf, store)
    assert scores.semantic.shape == (6, 1)
    assert ((scores.semantic.data > 0) & (scores.semantic.data < 1)).all()
    assert not np.allclose(scores.semantic.data, scores.motion.data)
    store["apf/sem/w2"].data[:] = 0.0
    np.testing.assert_array_equal(confidence(pf, cf, store).semantic.data, np.full((6, 1), 0.5))
    with pytest.raises(DataError):
        confidence(pf, Tensor(np.zeros((5, DIM))), store)


def test_apf_endpoints_exact():
    rng = np.random.default_rng(3)
    p, pc = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(apf_fuse(p, pc, Tensor(np.zeros((4, 1)))).data, p.data)
    np.testing.assert_array_equal(apf_fuse(p, pc, Tensor(np.ones((4, 1)))).data, pc.data)


def test_apf_midpoint():
    p, pc = Tensor(np.array([[2.0, 0.0]])), Tensor(np.array([[0.0, 2.0]]))
    np.testing.assert_allclose(apf_fuse(p, pc, Tensor(np.array([[0.5]]))).data, [[1.0, 1.0]])


def test_apf_convex_and_preserves_shared_argmax():
    rng = np.random.default_rng(4)
    p, pc = rng.normal(size=(50, 5)), rng.normal(size=(50, 5))
    pc[:, 2] = p[:, 2] = np.maximum(p.max(axis=1), pc.max(axis=1)) + 1.0
    score = rng.random((50, 1))
    fused = apf_fuse(Tensor(p), Tensor(pc), Tensor(score)).data
    assert (fused >= np.minimum(p, pc) - 1e-12).all() and (fused <= np.maximum(p, pc) + 1e-12).all()
    assert (fused.argmax(axis=1) == 2).all()


def test_apf_shape_checks():
    with pytest.raises(ShapeError):
        apf_fuse(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 1))))
    with pytest.raises(ShapeError):
        apf_fuse(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))


def test_fuse_logits_per_task():
    rng = np.random.default_rng(5)
    point = Logits(Tensor(rng.normal(size=(3, NUM_SEM))), Tensor(rng.normal(size=(3, NUM_MOV))))
    cluster = Logits(Tensor(rng.normal(size=(3, NUM_SEM))), Tensor(rng.normal(size=(3, NUM_MOV))), "cluster")
    store = make_store()
    scores = confidence(Tensor(rng.normal(size=(3, DIM))), Tensor(rng.normal(size=(3, DIM))), store)
    fused = fuse_logits(point, cluster, scores)
    s = scores.motion.data
    np.testing.assert_allclose(fused.motion.data, (1 - s) * point.motion.data + s * cluster.motion.data,
                               atol=1e-12)
    sem, mov = fused.labels()
    assert sem.shape == (3,) and mov.shape == (3,)


def test_simple_fusions_relate_to_apf():
    rng = np.random.default_rng(6)
    p, pc = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    half = apf_fuse(Tensor(p), Tensor(pc), Tensor(np.full((10, 1), 0.5))).data
    np.testing.assert_allclose(unweighted_sum(p, pc), 2.0 * half, atol=1e-12)

    mask = np.arange(10) < 4
    hard = apf_fuse(Tensor(p), Tensor(pc), Tensor(mask[:, None].astype(float))).data
    np.testing.assert_array_equal(overwrite_fusion(p, pc, mask), hard)

    store = make_store()
    pf = Tensor(rng.normal(size=(10, DIM)))
    zeros = Tensor(np.zeros((10, DIM)))
    np.testing.assert_array_equal(feature_fusion(pf, zeros, store),
                                  prediction_head(pf, store, "point_sem").data)


def test_prediction_file_round_trip(tmp_path):
    path = tmp_path / "000003.label"
    write_predictions(path, np.array([5, 0, 3]), np.array([1, 0, 0]))
    semantic, motion = read_predictions(path)
    np.testing.assert_array_equal(semantic, [5, 0, 3])
    np.testing.assert_array_equal(motion, [1, 0, 0])
