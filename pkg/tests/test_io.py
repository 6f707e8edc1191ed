import struct

import numpy as np
import pytest

from graphalign import io as gio
from graphalign.bench import SweepGrid, evaluate, sweep, time_pipeline
from graphalign.errors import FormatError
from graphalign.fusion import ImageFeatureMap
from graphalign.geometry import PointSet
from graphalign.graph import GraphConfig, NeighborGraph, PadMode, build_graph
from graphalign.oracles import random_rig
from graphalign.pipeline import Method, PipelineConfig
from graphalign.safa import init_params
from graphalign.scene import SceneSpec, generate


def twice(encode, decode, obj):
    first = encode(obj)
    second = encode(decode(first))
    return first, second


@pytest.mark.parametrize("seed", range(3))
def test_points_round_trip(seed):
    rng = np.random.default_rng(seed)
    pts = PointSet(rng.normal(size=(50, 3)), rng.normal(size=(50, 5)), rng.integers(-1, 4, 50))
    a, b = twice(gio.encode_points, gio.decode_points, pts)
    assert a == b
    back = gio.decode_points(a)
    assert np.array_equal(back.labels, pts.labels)
    assert np.allclose(back.coords, pts.coords, atol=1e-6)


def test_points_layout():
    pts = PointSet(np.array([[1.0, 2.0, 3.0]]), np.array([[4.0, 5.0]]), np.array([2]))
    data = gio.encode_points(pts)
    assert data[:4] == b"GAPC" and struct.unpack("<II", data[4:12]) == (1, 2)
    assert np.frombuffer(data[12:], "<f4").tolist() == [1, 2, 3, 4, 5, 2]


def test_feature_map_layout():
    data = gio.encode_feature_map(ImageFeatureMap(np.arange(12.0).reshape(2, 3, 2)))
    assert data[:4] == b"GAFM" and struct.unpack("<III", data[4:16]) == (2, 3, 2)
    assert np.frombuffer(data[16:], "<f4").tolist() == list(range(12))


def test_graph_layout():
    g = NeighborGraph(np.array([[0, 1], [1, 1]]), np.array([[True, True], [True, False]]))
    data = gio.encode_graph(g)
    assert data[:4] == b"GAGR" and struct.unpack("<II", data[4:12]) == (2, 2)
    assert np.frombuffer(data[12:28], "<u4").tolist() == [0, 1, 1, 1]
    assert data[28:] == bytes([1, 1, 1, 0])
    assert gio.decode_graph(data).equals(g)


def test_params_layout():
    p = init_params(4, 2, seed=0)
    data = gio.encode_params(p)
    assert data[:4] == b"GASA" and struct.unpack("<II", data[4:12]) == (4, 2)
    assert len(data) == 12 + 3 * 16 * 4


@pytest.mark.parametrize("codec, good", [
    ("points", gio.encode_points(PointSet(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros(2)))),
    ("feature_map", gio.encode_feature_map(ImageFeatureMap(np.zeros((2, 2, 1))))),
    ("graph", gio.encode_graph(NeighborGraph(np.zeros((2, 1), int), np.ones((2, 1), bool)))),
    ("params", gio.encode_params(init_params(2))),
])
def test_binary_corruption_rejected(codec, good):
    decode = getattr(gio, f"decode_{codec}")
    for bad in (b"XXXX" + good[4:], good[:-1], good + b"\0", good[:6]):
        with pytest.raises(FormatError):
            decode(bad)


def test_calibration_parse_back():
    rng = np.random.default_rng(0)
    rig = random_rig(rng)
    back = gio.parse_calibration(gio.format_calibration(rig))
    assert back.allclose(rig, atol=1e-9)


@pytest.mark.parametrize("mutate", [
    lambda t: "\n".join(line for line in t.splitlines() if not line.startswith("SCALE")),
    lambda t: t.replace("ROTATION: 1.0", "ROTATION: 1.1"),
    lambda t: t + "EXTRA: 1\n",
    lambda t: t.replace("SCALE: 1.0", "SCALE: abc"),
])
def test_calibration_rejects_bad_files(mutate):
    from conftest import simple_rig
    text = gio.format_calibration(simple_rig())
    with pytest.raises(FormatError):
        gio.parse_calibration(mutate(text))


def test_calibration_tolerates_small_orthonormality_error():
    from conftest import simple_rig
    text = gio.format_calibration(simple_rig()).replace("ROTATION: 1.0", "ROTATION: 1.0000001")
    rig = gio.parse_calibration(text)
    assert abs(rig.rotation[0, 0] - 1.0000001) < 1e-15


def test_ground_truth_round_trip():
    labels = np.array([0, 2, 1])
    pixel = np.array([[np.nan, np.nan], [1.5, 2.25], [0.0, 7.0]])
    text = gio.format_ground_truth(labels, pixel)
    assert text.splitlines()[0] == "index,class,px,py"
    assert text.splitlines()[1] == "0,0,,"
    l2, p2 = gio.parse_ground_truth(text)
    assert np.array_equal(l2, labels) and np.array_equal(p2, pixel, equal_nan=True)
    assert gio.format_ground_truth(l2, p2) == text


def test_ground_truth_bad_header():
    with pytest.raises(FormatError):
        gio.parse_ground_truth("i,c,x,y\n")


def test_report_round_trip(small_scene):
    s = small_scene
    cfg = PipelineConfig(GraphConfig(9, 700), init_params(12, 2, seed=0))
    rep = evaluate(s, s.rig, Method.GRAPH_SAFA_MAX, cfg)
    rep.timing_ms["graph_safa_max"] = time_pipeline(s, s.rig, Method.GRAPH_SAFA_MAX, cfg, 3)
    rep.config = {"k": "9", "chunk": "700"}
    a = gio.format_report(rep)
    assert a.startswith("report_version: 1\n")
    back = gio.parse_report(a)
    assert gio.format_report(back) == a
    assert back.buckets == rep.buckets
    assert "[timing]" not in gio.format_report(rep, include_timing=False)


def test_report_rejects_wrong_version():
    with pytest.raises(FormatError):
        gio.parse_report("report_version: 2\n")


def test_sweep_csv_round_trip(small_scene):
    rows = sweep([small_scene], [small_scene.rig], SweepGrid((9,), (700,), (1,)), repetitions=3)
    text = gio.format_sweep_csv(rows, {"seed": "3", "k": "9"})
    back = gio.parse_sweep_csv(text)
    assert gio.format_sweep_csv(back, gio.sweep_csv_config(text)) == text
    assert gio.sweep_csv_config(text) == {"k": "9", "seed": "3"}
    assert len(back) == 9


def test_scene_files_round_trip_byte_stable():
    s = generate(SceneSpec(seed=2))
    for enc, dec, obj in [(gio.encode_points, gio.decode_points, s.points),
                          (gio.encode_feature_map, gio.decode_feature_map, s.fmap)]:
        a, b = twice(enc, dec, obj)
        assert a == b
    g = build_graph(s.points, GraphConfig(16, 1000, PadMode.LITERAL_ZERO))
    assert twice(gio.encode_graph, gio.decode_graph, g)[0] == \
        twice(gio.encode_graph, gio.decode_graph, g)[1]
