import numpy as np
import pytest

from graphalign.errors import FusionError
from graphalign.fusion import (ChannelAdapter, FusedBlock, ImageFeatureMap,
                               assemble_neighbor_block, fuse, gather_image_features)
from graphalign.geometry import ProjectedCoords, project
from graphalign.graph import GraphConfig, build_graph
from graphalign.oracles import assemble_oracle, gather_oracle
from graphalign.pipeline import Method, PipelineConfig, run_pipeline
from graphalign.safa import init_params

from conftest import cloud, simple_rig


def proj_of(pixels, n_source=None):
    pixels = np.asarray(pixels, dtype=float)
    m = len(pixels)
    return ProjectedCoords(pixels, np.ones(m), np.arange(m), n_source=n_source or m)


def test_constant_map():
    v = np.array([1.0, -2.0, 3.5])
    fmap = ImageFeatureMap(v[None, None, :])
    got = gather_image_features(fmap, proj_of([[0, 0], [1, 1], [0.5, 0.2]]))
    assert np.array_equal(got, np.tile(v, (3, 1)))


def test_zero_weight_adapter_gives_bias():
    fmap = ImageFeatureMap(np.random.default_rng(0).normal(size=(4, 5, 3)))
    b = np.array([7.0, 8.0])
    got = gather_image_features(fmap, proj_of([[0, 0], [4.9, 3.9], [2, 2]]),
                                ChannelAdapter(np.zeros((3, 2)), b))
    assert np.array_equal(got, np.tile(b, (3, 1)))


def test_gather_direct_index():
    data = np.zeros((16, 16, 2))
    r, c = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    data[:, :, 0] = r * 100 + c
    fmap = ImageFeatureMap(data)
    rng = np.random.default_rng(1)
    pix = rng.uniform(0, 16, size=(50, 2))
    got = gather_image_features(fmap, proj_of(pix))
    assert np.array_equal(got, gather_oracle(fmap, pix))
    assert np.array_equal(got[:, 0], np.floor(pix[:, 1]) * 100 + np.floor(pix[:, 0]))


def test_gather_clamps_closed_edge():
    data = np.arange(12.0).reshape(3, 4, 1)
    got = gather_image_features(ImageFeatureMap(data), proj_of([[4.0, 3.0], [4.0, 0.0]]))
    assert got[:, 0].tolist() == [11.0, 3.0]


def test_adapter_channel_mismatch():
    fmap = ImageFeatureMap(np.zeros((2, 2, 3)))
    with pytest.raises(FusionError):
        gather_image_features(fmap, proj_of([[0, 0]]), ChannelAdapter(np.zeros((4, 2)),
                                                                       np.zeros(2)))


def test_k1_self_identity():
    pts = cloud(np.random.default_rng(2).normal(size=(30, 3)))
    g = build_graph(pts, GraphConfig(k=1, chunk_size=10))
    pc = ProjectedCoords(np.zeros((30, 2)), np.ones(30), np.arange(30), n_source=30)
    gathered = np.random.default_rng(3).normal(size=(30, 4))
    block, mask = assemble_neighbor_block(gathered, g, pc)
    assert mask.all() and np.array_equal(block[:, 0], gathered)


def test_out_of_bounds_neighbor_masked():
    rig = simple_rig(f=1, width=10, height=10)
    # point 1 projects to (20, 0): dropped, yet it neighbors point 0
    pts = cloud([[0.0, 0.0, 1.0], [20.0, 0.0, 1.0], [0.5, 0.5, 1.0]])
    proj = project(pts, rig)
    g = build_graph(pts, GraphConfig(k=3, chunk_size=3))
    gathered = np.ones((len(proj), 2))
    block, mask = assemble_neighbor_block(gathered, g, proj)
    slot = list(g.indices[0]).index(1)
    assert not mask[0, slot] and np.all(block[0, slot] == 0)
    assert not mask[1].any()  # the dropped point's own row
    assert mask[0].sum() == 2


def test_assemble_matches_slot_oracle():
    rng = np.random.default_rng(4)
    pts = cloud(rng.uniform(-5, 5, size=(300, 3)) + [0, 0, 8])
    rig = simple_rig(f=60, cx=30, cy=30, width=60, height=60)
    proj = project(pts, rig)
    assert 0 < len(proj) < 300
    fmap = ImageFeatureMap(rng.normal(size=(60, 60, 5)))
    gathered = gather_image_features(fmap, proj)
    g = build_graph(pts, GraphConfig(k=8, chunk_size=128))
    block, mask = assemble_neighbor_block(gathered, g, proj)
    ob, om = assemble_oracle(gathered, g.indices, g.valid, proj.source_index, 300)
    assert np.array_equal(block, ob) and np.array_equal(mask, om)
    # and each valid slot is a map read at the neighbor's own pixel
    where = {int(s): r for r, s in enumerate(proj.source_index)}
    for i, j in zip(*np.nonzero(mask)):
        x, y = proj.pixel[where[int(g.indices[i, j])]]
        r, c = min(int(y), 59), min(int(x), 59)
        assert np.array_equal(block[i, j], fmap.data[r, c])


def test_fuse_zero_image_block():
    pf = np.random.default_rng(5).normal(size=(6, 3))
    fb = fuse(pf, np.zeros((6, 4, 3)), np.ones((6, 4), dtype=bool))
    assert np.array_equal(fb.data, np.repeat(pf[:, None], 4, axis=1))


def test_fuse_zero_point_features():
    rng = np.random.default_rng(6)
    nb = rng.normal(size=(6, 4, 3))
    mask = rng.random((6, 4)) > 0.3
    fb = fuse(np.zeros((6, 3)), nb, mask)
    assert np.array_equal(fb.data[mask], nb[mask])
    assert np.all(fb.data[~mask] == 0)


def test_fuse_elementwise_oracle():
    rng = np.random.default_rng(7)
    pf, nb, mask = rng.normal(size=(20, 3)), rng.normal(size=(20, 5, 3)), rng.random((20, 5)) > .5
    fb = fuse(pf, nb, mask)
    for i in range(20):
        for j in range(5):
            expect = pf[i] + nb[i, j] if mask[i, j] else pf[i]
            assert np.array_equal(fb.data[i, j], expect)


def test_fuse_linearity():
    rng = np.random.default_rng(8)
    pf, nb, mask = rng.normal(size=(20, 3)), rng.normal(size=(20, 5, 3)), rng.random((20, 5)) > .5
    assert np.array_equal(fuse(2 * pf, 2 * nb, mask).data, 2 * fuse(pf, nb, mask).data)


def test_mask_soundness():
    rng = np.random.default_rng(9)
    pf, nb = rng.normal(size=(10, 4)), rng.normal(size=(10, 6, 4))
    mask = np.ones((10, 6), dtype=bool)
    base = fuse(pf, nb, mask).data
    for i, j in [(0, 0), (3, 5), (9, 2)]:
        m = mask.copy()
        m[i, j] = False
        got = fuse(pf, nb, m).data
        changed = np.any(got != base, axis=2)
        assert changed.sum() == 1 and changed[i, j]
        assert np.array_equal(got[i, j], pf[i])


def test_fuse_shape_mismatch():
    with pytest.raises(FusionError):
        fuse(np.zeros((3, 2)), np.zeros((3, 4, 3)), np.ones((3, 4), dtype=bool))


def test_pipeline_shape_law(small_scene):
    s = small_scene
    for k in (1, 9, 16):
        cfg = PipelineConfig(GraphConfig(k=k, chunk_size=700), init_params(s.points.channels))
        for m in (Method.GRAPH_MAX, Method.GRAPH_SAFA_MAX):
            res = run_pipeline(s.points, s.fmap, s.rig, m, cfg)
            assert isinstance(res.fused, FusedBlock)
            assert res.fused.shape == (len(res.source_index), k, s.points.channels)
            assert res.output.shape == s.points.features.shape
            dropped = np.setdiff1d(np.arange(len(s.points)), res.source_index)
            assert np.array_equal(res.output[dropped], s.points.features[dropped])
