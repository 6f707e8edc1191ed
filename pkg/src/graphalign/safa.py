"""Self-attention over each point's K fused neighbor slots, then channelwise max."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AttentionError, TrainingDivergedError
from .fusion import FusedBlock

# points per attention slab; bounds the N x H x K x K score tensor
POINT_BLOCK = 4096


class AttentionMode(str, enum.Enum):
    LITERAL = "literal"  # softmax(Q K^T) applied to the fused slice, no scaling
    STANDARD = "standard"  # softmax(Q K^T / sqrt(d)) applied to V


@dataclass
class Diagnostics:
    bypassed_rows: int = 0
    empty_max_rows: int = 0


@dataclass(frozen=True, eq=False)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int = 1

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.w_q, self.w_k, self.w_v)]
        c = mats[0].shape[0]
        for m in mats:
            if m.shape != (c, c):
                raise AttentionError(f"weight matrices must all be {c} x {c}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise AttentionError("attention weights have non-finite entries")
        if self.heads < 1 or c % self.heads:
            raise AttentionError(f"heads={self.heads} must divide channels={c}")
        object.__setattr__(self, "w_q", mats[0])
        object.__setattr__(self, "w_k", mats[1])
        object.__setattr__(self, "w_v", mats[2])

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def stacked(self) -> np.ndarray:
        return np.stack([self.w_q, self.w_k, self.w_v])

    @classmethod
    def from_stacked(cls, w: np.ndarray, heads: int) -> AttentionParams:
        return cls(w[0], w[1], w[2], heads)


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    features: np.ndarray  # N x K x C
    weights: np.ndarray | None  # N x H x K x K
    attention_macs: int = 0  # score and weighting products, 2 N K^2 C
    projection_macs: int = 0  # Q/K(/V) projections
    bypassed: int = 0


def attention_mac_count(n: int, k: int, c: int) -> int:
    """Multiply-accumulates in the score (Q K^T) and weighting (Att X) products."""
    return 2 * n * k * k * c


def softmax_masked(scores: np.ndarray, col_valid: np.ndarray) -> np.ndarray:
    """Row softmax with invalid columns forced to exactly zero weight.

    ``col_valid`` broadcasts against ``scores``; rows without any valid column
    come back all zero.
    """
    s = np.where(col_valid, scores, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(s - top)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def _attend(f: np.ndarray, valid: np.ndarray, params: AttentionParams, mode: AttentionMode):
    n, k, c = f.shape
    h = params.heads
    d = c // h

    def heads(x):
        return x.reshape(n, k, h, d).transpose(0, 2, 1, 3)

    q = heads(f @ params.w_q)
    kt = heads(f @ params.w_k)
    scores = q @ kt.transpose(0, 1, 3, 2)
    if mode is AttentionMode.STANDARD:
        scores = scores / math.sqrt(d)
        x = heads(f @ params.w_v)
    else:
        x = heads(f)
    att = softmax_masked(scores, valid[:, None, None, :])
    out = (att @ x).transpose(0, 2, 1, 3).reshape(n, k, c)
    return out, att


def self_attention(block: FusedBlock, params: AttentionParams, mode=AttentionMode.LITERAL,
                   workers: int = 1, keep_weights: bool = True,
                   diag: Diagnostics | None = None) -> AttentionOutput:
    mode = AttentionMode(mode)
    f, valid = block.data, block.valid
    if f.ndim != 3 or f.shape[1] < 1:
        raise AttentionError(f"fused block must be N x K x C with K >= 1, got {f.shape}")
    n, k, c = f.shape
    if c != params.channels:
        raise AttentionError(f"block has {c} channels, params expect {params.channels}")

    slabs = [slice(s, min(s + POINT_BLOCK, n)) for s in range(0, n, POINT_BLOCK)]

    def run(sl):
        return _attend(f[sl], valid[sl], params, mode)

    if workers > 1 and len(slabs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, slabs))
    else:
        parts = [run(sl) for sl in slabs]

    out = np.concatenate([p[0] for p in parts]) if parts else np.zeros_like(f)
    weights = None
    if keep_weights:
        weights = (np.concatenate([p[1] for p in parts]) if parts
                   else np.zeros((0, params.heads, k, k)))
    empty = ~valid.any(axis=1)
    n_empty = int(empty.sum())
    if n_empty:
        out[empty] = f[empty]
        if diag is not None:
            diag.bypassed_rows += n_empty
    n_proj = 3 if mode is AttentionMode.STANDARD else 2
    return AttentionOutput(
        features=out,
        weights=weights,
        attention_macs=attention_mac_count(n, k, c),
        projection_macs=n_proj * n * k * c * c,
        bypassed=n_empty,
    )


def max_select(features, mask: np.ndarray, diag: Diagnostics | None = None) -> np.ndarray:
    """Channelwise max over valid slots; rows with no valid slot return slot 0."""
    if isinstance(features, AttentionOutput):
        features = features.features
    if features.shape[:2] != mask.shape:
        raise AttentionError(f"mask {mask.shape} does not match features {features.shape}")
    if features.shape[0] == 0:
        return np.zeros((0, features.shape[2]))
    out = np.where(mask[:, :, None], features, -np.inf).max(axis=1)
    empty = ~mask.any(axis=1)
    if empty.any():
        out[empty] = features[empty, 0]
        if diag is not None:
            diag.empty_max_rows += int(empty.sum())
    return out


def init_params(channels: int, heads: int = 1, seed: int = 0) -> AttentionParams:
    if channels < 1 or heads < 1 or channels % heads:
        raise AttentionError(f"heads={heads} must divide channels={channels}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(channels)
    w = rng.uniform(-bound, bound, size=(3, channels, channels))
    return AttentionParams.from_stacked(w, heads)


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """Fused block plus what the image contribution should have been per point."""

    block: FusedBlock
    point_features: np.ndarray  # N x C
    target: np.ndarray  # N x C


def selector_output(example: TrainingExample, params: AttentionParams,
                    mode=AttentionMode.LITERAL) -> np.ndarray:
    """Image contribution after attention and max: max_select(...) minus the point feature."""
    att = self_attention(example.block, params, mode, keep_weights=False)
    return max_select(att.features, example.block.valid) - example.point_features


def selector_loss(examples, params: AttentionParams, mode=AttentionMode.LITERAL) -> float:
    """Mean over points of the squared error norm between selected and target contribution."""
    total, count = 0.0, 0
    for ex in examples:
        diff = selector_output(ex, params, mode) - ex.target
        total += float(np.sum(diff * diff))
        count += diff.shape[0]
    return total / max(count, 1)


def batched_selector_loss(examples, weights: np.ndarray, heads: int,
                          mode=AttentionMode.LITERAL, batch: int = 16) -> np.ndarray:
    """selector_loss for a stack of P parameter sets (P x 3 x C x C) at once."""
    mode = AttentionMode(mode)
    p_total, _, c, _ = weights.shape
    d = c // heads
    totals = np.zeros(p_total)
    count = 0
    for ex in examples:
        f, valid = ex.block.data, ex.block.valid
        n, k, _ = f.shape
        count += n
        col_valid = valid[None, :, None, None, :]
        empty = ~valid.any(axis=1)

        def heads_of(x):
            return x.reshape(x.shape[0], n, k, heads, d).transpose(0, 1, 3, 2, 4)

        for s in range(0, p_total, batch):
            w = weights[s:s + batch]
            q = heads_of(f[None] @ w[:, None, 0])
            kt = heads_of(f[None] @ w[:, None, 1])
            scores = q @ kt.swapaxes(-1, -2)
            if mode is AttentionMode.STANDARD:
                scores = scores / math.sqrt(d)
                x = heads_of(f[None] @ w[:, None, 2])
            else:
                x = heads_of(f[None])
            att = softmax_masked(scores, col_valid)
            out = (att @ x).transpose(0, 1, 3, 2, 4).reshape(-1, n, k, c)
            out[:, empty] = f[empty]
            sel = np.where(valid[None, :, :, None], out, -np.inf).max(axis=2)
            sel[:, empty] = f[empty, 0]
            diff = sel - ex.point_features - ex.target
            totals[s:s + batch] += np.sum(diff * diff, axis=(1, 2))
    return totals / max(count, 1)


@dataclass
class TrainResult:
    params: AttentionParams
    losses: list[float] = field(default_factory=list)


def fd_gradient(examples, params: AttentionParams, mode=AttentionMode.LITERAL,
                eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of selector_loss w.r.t. [w_q, w_k, w_v].

    All +/- probes are evaluated as one batch; each gradient entry only ever
    combines its own two probes, so the result is order independent.
    """
    mode = AttentionMode(mode)
    w = params.stacked()
    # the literal path never reads w_v, so its gradient is identically zero
    n_mats = 2 if mode is AttentionMode.LITERAL else 3
    entries = [(m, a, b) for m in range(n_mats) for a in range(w.shape[1])
               for b in range(w.shape[2])]
    probes = np.repeat(w[None], 2 * len(entries), axis=0)
    for i, (m, a, b) in enumerate(entries):
        probes[2 * i, m, a, b] += eps
        probes[2 * i + 1, m, a, b] -= eps
    losses = batched_selector_loss(examples, probes, params.heads, mode)
    grad = np.zeros_like(w)
    for i, (m, a, b) in enumerate(entries):
        grad[m, a, b] = (losses[2 * i] - losses[2 * i + 1]) / (2 * eps)
    return grad


def analytic_gradient(examples, params: AttentionParams,
                      mode=AttentionMode.LITERAL) -> np.ndarray:
    """Backpropagated gradient of selector_loss w.r.t. [w_q, w_k, w_v].

    The max takes the first maximal slot per channel; the gradient is exact
    away from ties.
    """
    mode = AttentionMode(mode)
    c, h = params.channels, params.heads
    d = c // h
    scale = 1.0 / math.sqrt(d) if mode is AttentionMode.STANDARD else 1.0
    grad = np.zeros((3, c, c))
    count = sum(ex.block.data.shape[0] for ex in examples)
    for ex in examples:
        f, valid = ex.block.data, ex.block.valid
        n, k, _ = f.shape
        if n == 0:
            continue

        def split(x):
            return x.reshape(n, k, h, d).transpose(0, 2, 1, 3)

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(n, k, c)

        q, kt = split(f @ params.w_q), split(f @ params.w_k)
        x = split(f @ params.w_v) if mode is AttentionMode.STANDARD else split(f)
        att = softmax_masked(scale * (q @ kt.swapaxes(-1, -2)), valid[:, None, None, :])
        out = merge(att @ x)
        empty = ~valid.any(axis=1)
        out[empty] = f[empty]

        masked = np.where(valid[:, :, None], out, -np.inf)
        arg = masked.argmax(axis=1)  # N x C
        sel = np.take_along_axis(out, arg[:, None, :], axis=1)[:, 0]
        sel[empty] = f[empty, 0]
        d_sel = 2.0 * (sel - ex.point_features - ex.target) / max(count, 1)
        d_sel[empty] = 0.0

        d_out = np.zeros_like(out)
        np.put_along_axis(d_out, arg[:, None, :], d_sel[:, None, :], axis=1)
        d_outh = split(d_out)
        d_att = d_outh @ x.swapaxes(-1, -2)
        d_scores = att * (d_att - np.sum(d_att * att, axis=-1, keepdims=True)) * scale
        d_q = merge(d_scores @ kt)
        d_k = merge(d_scores.swapaxes(-1, -2) @ q)
        grad[0] += np.einsum("nka,nkb->ab", f, d_q)
        grad[1] += np.einsum("nka,nkb->ab", f, d_k)
        if mode is AttentionMode.STANDARD:
            d_v = merge(att.swapaxes(-1, -2) @ d_outh)
            grad[2] += np.einsum("nka,nkb->ab", f, d_v)
    return grad


def train_selector(examples, params: AttentionParams, steps: int, learning_rate: float,
                   mode=AttentionMode.LITERAL, eps: float = 1e-5,
                   gradient: str = "fd") -> TrainResult:
    """Plain gradient descent on selector_loss.

    ``gradient="fd"`` uses central finite differences; ``"analytic"`` uses the
    backpropagated gradient, which is checked against finite differences in the
    test suite. ``losses`` holds the loss before every step followed by the
    final loss.
    """
    examples = list(examples)
    if steps < 0:
        raise AttentionError("steps must be non-negative")
    if gradient not in ("fd", "analytic"):
        raise AttentionError(f"unknown gradient method {gradient!r}")
    result = TrainResult(params)
    loss = selector_loss(examples, params, mode)
    result.losses.append(loss)
    for step in range(steps):
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {step}")
        if learning_rate == 0:
            result.losses.append(loss)
            continue
        if gradient == "fd":
            grad = fd_gradient(examples, result.params, mode, eps)
        else:
            grad = analytic_gradient(examples, result.params, mode)
        w = result.params.stacked() - learning_rate * grad
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(f"parameters became non-finite at step {step}")
        result.params = AttentionParams.from_stacked(w, params.heads)
        loss = selector_loss(examples, result.params, mode)
        result.losses.append(loss)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"final loss is {loss}")
    return result


def toy_task(n: int = 64, k: int = 8, c: int = 8, seed: int = 0,
             drop: float = 0.2) -> list[TrainingExample]:
    """Small selection problem: one of each point's K slots carries its target.

    Targets are one-hot vectors; the other slots hold Gaussian clutter and a
    random subset of them is masked out. The correct slot is always valid.
    """
    rng = np.random.default_rng(seed)
    point = rng.normal(0.0, 0.3, size=(n, c))
    target = np.eye(c)[rng.integers(0, c, size=n)]
    image = rng.normal(0.0, 0.5, size=(n, k, c))
    hit = rng.integers(0, k, size=n)
    image[np.arange(n), hit] = target
    valid = rng.random((n, k)) >= drop
    valid[np.arange(n), hit] = True
    image[~valid] = 0.0
    data = point[:, None, :] + image
    return [TrainingExample(FusedBlock(data, valid), point, target)]
