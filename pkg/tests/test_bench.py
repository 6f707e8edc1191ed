import numpy as np
import pytest

from graphalign.bench import (BUCKETS, FAR, REFERENCE_CHUNKS, REFERENCE_HEADS, REFERENCE_K, AlignmentReport,
                              BucketMetrics, SweepGrid, bucket_of, complexity_estimate,
                              complexity_ratio, cosine_to_target, evaluate, predicted_class,
                              sweep, time_pipeline)
from graphalign.errors import BenchError, InvalidInputError
from graphalign.graph import GraphConfig, build_graph
from graphalign.pipeline import Method, PipelineConfig
from graphalign.safa import init_params
from graphalign.scene import PerturbationSpec, SceneSpec, generate, perturb

from conftest import NOISY, cloud


def test_complexity_ratio_reference_numbers():
    assert abs(complexity_ratio(1272, 375, 36) - 368.06) <= 0.01


def test_complexity_ratio_unit():
    assert complexity_ratio(49, 1, 7) == 1.0


def test_complexity_ratio_random_triples():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, h, k = rng.integers(1, 5000), rng.integers(1, 5000), rng.integers(1, 100)
        assert complexity_ratio(w, h, k) == pytest.approx(w * h / (k * k), rel=1e-15)


@pytest.mark.parametrize("args", [(0, 1, 1), (1, -1, 1), (1, 1, 0)])
def test_complexity_ratio_rejects_non_positive(args):
    with pytest.raises(BenchError):
        complexity_ratio(*args)


def test_complexity_estimate_fields():
    est = complexity_estimate(100, 16, 12, 320, 96)
    assert est["safa_macs"] == 2 * 100 * 16 * 16 * 12
    assert est["cross_attention_macs"] == 2 * 100 * 320 * 96 * 12
    assert est["cross_attention_macs"] / est["safa_macs"] == pytest.approx(est["ratio"])


def test_predicted_class_threshold():
    c = np.array([[0.9, 0.1, 0.0, 5.0], [0.2, 0.49, 0.1, 0.0], [0.0, 0.5, 0.6, 0.0]])
    assert predicted_class(c, 3).tolist() == [1, 0, 3]


def test_cosine_zero_vector_scores_zero():
    got = cosine_to_target(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [2.0, 2.0]]))
    assert got[0] == 0.0 and got[1] == pytest.approx(1.0)


def test_bucket_edges():
    assert bucket_of(np.array([0.0, 19.99, 20.0, 39.9, 40.0, 1e6])).tolist() == [0, 0, 1, 1, 2, 2]


def _clean_cfg(scene, k=16, chunk=1000):
    return PipelineConfig(GraphConfig(k, chunk), init_params(scene.points.channels, 1, seed=0))


@pytest.fixture(scope="module")
def clean_scene():
    return generate(SceneSpec(seed=21))


def test_clean_projection_only_every_bucket(clean_scene):
    s = clean_scene
    rep = evaluate(s, s.rig, Method.PROJECTION_ONLY, _clean_cfg(s))
    for b in rep.buckets:
        if b.n_labeled:
            assert b.accuracy >= 0.99, b
            assert b.background_accuracy >= 0.99 or b.n == b.n_labeled
    assert rep.check_invariants() == []


def test_surviving_count_same_across_methods(clean_scene):
    s = clean_scene
    counts = {m: evaluate(s, s.rig, m, _clean_cfg(s)).surviving[m.value] for m in Method}
    assert len(set(counts.values())) == 1


def test_bucket_partition(clean_scene):
    s = clean_scene
    rep = evaluate(s, s.rig, Method.GRAPH_MAX, _clean_cfg(s))
    assert [b.bucket for b in rep.buckets] == [name for name, _, _ in BUCKETS]
    assert sum(b.n for b in rep.buckets) == rep.surviving["graph_max"]


def test_mac_fidelity(clean_scene):
    s = clean_scene
    rep = evaluate(s, s.rig, Method.GRAPH_SAFA_MAX, _clean_cfg(s, k=9))
    assert rep.complexity["safa_macs"] == rep.complexity["instrumented_safa_macs"]


def test_missing_params_rejected(clean_scene):
    s = clean_scene
    with pytest.raises(InvalidInputError):
        evaluate(s, s.rig, Method.GRAPH_SAFA_MAX, PipelineConfig(GraphConfig()))


def test_reproducible_accuracies():
    a, b = generate(SceneSpec(seed=22)), generate(SceneSpec(seed=22))
    ra = perturb(a.rig, PerturbationSpec(**NOISY, seed=5))
    rb = perturb(b.rig, PerturbationSpec(**NOISY, seed=5))
    for m in Method:
        x, y = evaluate(a, ra, m, _clean_cfg(a)), evaluate(b, rb, m, _clean_cfg(b))
        assert x.buckets == y.buckets


def test_noisy_scene_safa_beats_projection_far(trained_params):
    s = generate(SceneSpec(seed=0))
    rig = perturb(s.rig, PerturbationSpec(**NOISY, seed=1000))
    cfg = PipelineConfig(GraphConfig(16, 1000), trained_params)
    safa = evaluate(s, rig, Method.GRAPH_SAFA_MAX, cfg).get(Method.GRAPH_SAFA_MAX, FAR)
    proj = evaluate(s, rig, Method.PROJECTION_ONLY, cfg).get(Method.PROJECTION_ONLY, FAR)
    assert safa.accuracy >= proj.accuracy


def test_invariant_checker_flags_problems():
    rep = AlignmentReport(buckets=[BucketMetrics("graph_max", "0-20m", 1.5, 0.0, 3, 4)],
                          surviving={"graph_max": 5}, complexity={"ratio": 0.0})
    problems = rep.check_invariants()
    assert len(problems) == 4


def test_time_pipeline_needs_three_repetitions(small_scene):
    with pytest.raises(BenchError):
        time_pipeline(small_scene, small_scene.rig, Method.GRAPH_MAX, _clean_cfg(small_scene), 2)


def test_time_pipeline_stage_subset(small_scene):
    s = small_scene
    cfg = _clean_cfg(s)
    tg = time_pipeline(s, s.rig, Method.GRAPH_MAX, cfg, 5)
    ts = time_pipeline(s, s.rig, Method.GRAPH_SAFA_MAX, cfg, 5)
    assert tg["attention"]["median_ms"] == 0.0
    assert ts["attention"]["median_ms"] > 0.0
    assert tg["total"]["median_ms"] <= ts["total"]["median_ms"]
    for stage in tg.values():
        assert stage["min_ms"] <= stage["median_ms"] <= stage["max_ms"]


@pytest.mark.slow
def test_hundred_thousand_point_graph_completes():
    import time
    pts = cloud(np.random.default_rng(0).uniform(0, 100, size=(100_000, 3)))
    t0 = time.perf_counter()
    g = build_graph(pts, GraphConfig(16, 1000), workers=4)
    elapsed = time.perf_counter() - t0
    assert g.indices.shape == (100_000, 16) and g.valid.all()
    print(f"build_graph N=100000 K=16 chunk=1000: {elapsed * 1e3:.0f} ms")


def test_single_cell_sweep(small_scene):
    rows = sweep([small_scene], [small_scene.rig], SweepGrid((16,), (1000,), (1,), ("graph_max",)),
                 repetitions=None)
    # one grid cell, reported as one row per distance bucket
    assert len(rows) == len(BUCKETS)
    assert {r["method"] for r in rows} == {"graph_max"}


def test_empty_grid_rejected():
    with pytest.raises(BenchError):
        SweepGrid(k=())


def test_attention_time_grows_with_k(small_scene):
    s = small_scene
    t = {}
    for k in (9, 36):
        t[k] = time_pipeline(s, s.rig, Method.GRAPH_SAFA_MAX, _clean_cfg(s, k=k), 3)
    assert t[9]["attention"]["median_ms"] <= t[36]["attention"]["median_ms"]


def test_sweep_workers_do_not_change_rows(small_scene):
    grid = SweepGrid((9, 16), (500,), (1, 2))
    a = sweep([small_scene], [small_scene.rig], grid, repetitions=None, workers=1)
    b = sweep([small_scene], [small_scene.rig], grid, repetitions=None, workers=4)
    assert a == b


@pytest.mark.slow
def test_reference_grid_satisfies_invariants():
    spec = SceneSpec(seed=30, points_per_object=400, ground_points=2500)
    scene = generate(spec)
    rig = perturb(scene.rig, PerturbationSpec(**NOISY, seed=30))
    grid = SweepGrid(REFERENCE_K, REFERENCE_CHUNKS, REFERENCE_HEADS)
    rows = sweep([scene], [rig], grid, repetitions=None, workers=4)
    assert len(rows) == len(grid.cells()) * len(BUCKETS)
    per_cell = {}
    for r in rows:
        assert 0.0 <= r["accuracy"] <= 1.0
        assert 0.0 <= r["background_accuracy"] <= 1.0
        assert 0 <= r["n_labeled"] <= r["n"]
        key = (r["method"], r["K"], r["chunk"], r["H"])
        per_cell[key] = per_cell.get(key, 0) + r["n"]
    assert len(set(per_cell.values())) == 1  # same surviving N in every cell
