"""Slow, loop-based reference implementations used to cross-check the fast paths.

Nothing here shares code with the implementations it checks beyond the data
types; each oracle is written the most direct way available.
"""

from __future__ import annotations

import math

import numpy as np

from .fusion import FusedBlock, ImageFeatureMap, assemble_neighbor_block, fuse, \
    gather_image_features
from .geometry import CalibrationRig, PointSet, ProjectedCoords, project
from .graph import GraphConfig, build_graph, chunked_bruteforce
from .safa import AttentionMode, AttentionParams, init_params, max_select, self_attention


def project_oracle(points: PointSet, rig: CalibrationRig):
    """3x4 matrix multiply, divide by the third coordinate, keep in-bounds rows."""
    p = rig.projection_matrix()
    pixels, depths, index = [], [], []
    for i, xyz in enumerate(points.coords):
        hom = p @ np.append(xyz, 1.0)
        if hom[2] <= 0:
            continue
        u, v = hom[0] / hom[2], hom[1] / hom[2]
        if 0 <= u <= rig.image_width and 0 <= v <= rig.image_height:
            pixels.append((u, v))
            depths.append(hom[2])
            index.append(i)
    return np.array(pixels).reshape(-1, 2), np.array(depths), np.array(index, dtype=np.int64)


def gather_oracle(fmap: ImageFeatureMap, pixels: np.ndarray) -> np.ndarray:
    out = np.zeros((len(pixels), fmap.channels))
    for i, (x, y) in enumerate(pixels):
        col = min(int(math.floor(x)), fmap.width - 1)
        row = min(int(math.floor(y)), fmap.height - 1)
        out[i] = fmap.data[row, col]
    return out


def assemble_oracle(gathered, indices, valid, source_index, n):
    k, c = indices.shape[1], gathered.shape[1]
    block = np.zeros((n, k, c))
    mask = np.zeros((n, k), dtype=bool)
    where = {int(s): r for r, s in enumerate(source_index)}
    for i in range(n):
        if i not in where:
            continue
        for j in range(k):
            nb = int(indices[i, j])
            if valid[i, j] and nb in where:
                block[i, j] = gathered[where[nb]]
                mask[i, j] = True
    return block, mask


def attention_reference(block: FusedBlock, params: AttentionParams,
                        mode=AttentionMode.LITERAL) -> tuple[np.ndarray, np.ndarray]:
    """Per-point, per-head attention with explicit loops and no reshaping."""
    mode = AttentionMode(mode)
    f, valid = block.data, block.valid
    n, k, c = f.shape
    h = params.heads
    d = c // h
    out = np.zeros_like(f)
    weights = np.zeros((n, h, k, k))
    for i in range(n):
        if not valid[i].any():
            out[i] = f[i]
            continue
        q = f[i] @ params.w_q
        kk = f[i] @ params.w_k
        v = f[i] @ params.w_v
        for head in range(h):
            cols = slice(head * d, (head + 1) * d)
            for a in range(k):
                logits = []
                for b in range(k):
                    s = sum(q[a, cols][t] * kk[b, cols][t] for t in range(d))
                    if mode is AttentionMode.STANDARD:
                        s /= math.sqrt(d)
                    logits.append(s)
                live = [b for b in range(k) if valid[i, b]]
                top = max(logits[b] for b in live)
                ex = {b: math.exp(logits[b] - top) for b in live}
                z = sum(ex.values())
                for b in live:
                    weights[i, head, a, b] = ex[b] / z
                src = v if mode is AttentionMode.STANDARD else f[i]
                for b in live:
                    out[i, a, cols] += weights[i, head, a, b] * src[b, cols]
    return out, weights


def max_oracle(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n, k, c = features.shape
    out = np.zeros((n, c))
    for i in range(n):
        live = [j for j in range(k) if mask[i, j]]
        if not live:
            out[i] = features[i, 0]
            continue
        for ch in range(c):
            out[i, ch] = max(features[i, j, ch] for j in live)
    return out


def random_rig(rng: np.random.Generator, width: int = 640, height: int = 480) -> CalibrationRig:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    f = rng.uniform(300, 900)
    k = np.array([[f, 0, rng.uniform(0, width)], [0, f * rng.uniform(0.9, 1.1),
                                                  rng.uniform(0, height)], [0, 0, 1]])
    return CalibrationRig(k, rot, rng.normal(size=3), rng.uniform(0.25, 1.0), width, height,
                          ortho_tol=1e-9)


def run_oracle_checks(seed: int = 0, workers: int = 1) -> list[tuple[str, bool, str]]:
    """Compare every fast path against its oracle on seeded random inputs."""
    rng = np.random.default_rng(seed)
    results = []

    rig = random_rig(rng)
    pts = PointSet(rng.normal(size=(400, 3)) * 5 + rig.rotation.T @ np.array([0, 0, 10.0]),
                   np.zeros((400, 1)), np.zeros(400))
    proj = project(pts, rig)
    px, dp, idx = project_oracle(pts, rig)
    ok = (np.array_equal(proj.source_index, idx) and np.allclose(proj.pixel, px, atol=1e-9, rtol=0)
          and np.allclose(proj.depth, dp, atol=1e-9, rtol=0))
    results.append(("projection vs 3x4 matrix", ok, f"{len(idx)} surviving of 400"))

    coords = rng.uniform(0, 50, size=(2500, 3))
    cloud = PointSet(coords, rng.normal(size=(2500, 4)), np.zeros(2500))
    cfg = GraphConfig(k=16, chunk_size=1000)
    ok = build_graph(cloud, cfg, workers=workers).equals(chunked_bruteforce(cloud, cfg))
    results.append(("chunked knn vs brute force", ok, "N=2500 K=16 chunk=1000"))

    fmap = ImageFeatureMap(rng.normal(size=(24, 32, 4)))
    pixels = np.column_stack([rng.uniform(0, 32, 60), rng.uniform(0, 24, 60)])
    pixels[:3] = [[32, 24], [0, 0], [31.999, 23.5]]
    pc = ProjectedCoords(pixels, np.ones(60), np.arange(60), n_source=60)
    ok = np.array_equal(gather_image_features(fmap, pc), gather_oracle(fmap, pixels))
    results.append(("feature gather vs direct index", ok, "60 pixels incl. edges"))

    sub = PointSet(coords[:300], rng.normal(size=(300, 4)), np.zeros(300))
    g = build_graph(sub, GraphConfig(k=8, chunk_size=100))
    keep = np.sort(rng.choice(300, size=220, replace=False))
    pc = ProjectedCoords(np.zeros((220, 2)), np.ones(220), keep, n_source=300)
    gathered = rng.normal(size=(220, 4))
    block, mask = assemble_neighbor_block(gathered, g, pc)
    ob, om = assemble_oracle(gathered, g.indices, g.valid, keep, 300)
    ok = np.array_equal(block, ob) and np.array_equal(mask, om)
    results.append(("neighbor block vs slot lookup", ok, "300 points, 80 dropped"))

    worst = 0.0
    for mode in AttentionMode:
        for trial in range(10):
            n, k, heads = 6, int(rng.integers(1, 6)), int(rng.choice([1, 2, 4]))
            c = 4 * heads if heads > 1 else 4
            fb = FusedBlock(rng.normal(size=(n, k, c)), rng.random((n, k)) > 0.25)
            params = init_params(c, heads, seed=trial)
            got = self_attention(fb, params, mode)
            ref, w = attention_reference(fb, params, mode)
            worst = max(worst, float(np.max(np.abs(got.features - ref))),
                        float(np.max(np.abs(got.weights - w))))
    results.append(("attention vs loop reference", worst < 1e-9, f"max abs err {worst:.2e}"))

    feats = rng.normal(size=(50, 8, 16))
    m = rng.random((50, 8)) > 0.4
    ok = np.array_equal(max_select(feats, m), max_oracle(feats, m))
    results.append(("masked max vs elementwise", ok, "50 x 8 x 16"))

    pf = rng.normal(size=(40, 4))
    nb = rng.normal(size=(40, 5, 4))
    m = rng.random((40, 5)) > 0.3
    fused = fuse(pf, nb, m)
    ref = np.repeat(pf[:, None], 5, axis=1) + np.where(m[:, :, None], nb, 0.0)
    results.append(("fusion vs elementwise", np.array_equal(fused.data, ref), "40 x 5 x 4"))
    return results
