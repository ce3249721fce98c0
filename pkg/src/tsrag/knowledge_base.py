"""Segment knowledge base: sliding-window slicing, K-means, representative pick.

Build pipeline: every training series is cut into windows of length
``window_length`` every ``step`` points, each window is z-normalized, the
pool is clustered with Lloyd's K-means under Euclidean distance, and the
member nearest each centroid is kept. The KB file is line-oriented JSON:
a header line, then one segment per line.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Frequency, Series, znormalize
from .errors import DataError, KBFormatError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
INIT_METHODS = ("random", "kmeans++")

# Upper bound on the size of one block of the distance tensor.
_DIST_BLOCK = 1 << 22


@dataclass(frozen=True)
class Segment:
    kb_id: int
    source_series_id: str
    start_offset: int
    context: tuple[float, ...]
    continuation: tuple[float, ...]
    norm_mean: float
    norm_std: float

    def context_array(self) -> np.ndarray:
        return np.asarray(self.context, dtype=np.float64)


@dataclass(frozen=True)
class BuildMeta:
    k: int
    seed: int
    iterations_run: int
    corpus_fingerprint: str
    init: str = "random"


@dataclass(frozen=True)
class KnowledgeBase:
    frequency: Frequency
    window_length: int
    step: int
    horizon: int
    entries: tuple[Segment, ...]
    build_meta: BuildMeta

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for seg in self.entries:
            if len(seg.context) != self.window_length:
                raise DataError(f"segment {seg.kb_id} has context length {len(seg.context)}, "
                                f"expected {self.window_length}")
            if len(seg.continuation) not in (0, self.horizon):
                raise DataError(f"segment {seg.kb_id} has continuation length "
                                f"{len(seg.continuation)}, expected 0 or {self.horizon}")

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, kb_id: int) -> Segment:
        for seg in self.entries:
            if seg.kb_id == kb_id:
                return seg
        raise KeyError(kb_id)

    def with_segments(self, segments: Iterable[Segment]) -> KnowledgeBase:
        """Copy of this KB with ``segments`` appended under fresh kb_ids."""
        next_id = max((s.kb_id for s in self.entries), default=-1) + 1
        added = [replace(s, kb_id=next_id + i) for i, s in enumerate(segments)]
        return replace(self, entries=self.entries + tuple(added))


@dataclass
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    sse: float
    iterations_run: int
    sse_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class KBConfig:
    window_length: int
    step: int
    horizon: int
    k: int | None = None
    seed: int = 0
    max_iter: int = 100
    init: str = "random"

    @classmethod
    def for_frequency(cls, config, **overrides) -> KBConfig:
        """Defaults: window = input length, step = horizon = prediction length."""
        params = dict(window_length=config.input_length, step=config.horizon,
                      horizon=config.horizon)
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)


def slice_count(n: int, window: int, step: int) -> int:
    return (n - window) // step + 1


def slice_series(series: Series, window: int, step: int, horizon: int = 0,
                 first_id: int = 0) -> list[Segment]:
    """Cut ``series`` into z-normalized windows at offsets 0, step, 2*step, ...

    A window gets a continuation (the raw ``horizon`` points that follow it)
    only when the series is long enough to supply all of them.
    """
    n = len(series)
    if window < 1:
        raise DataError("window length must be positive")
    if step < 1:
        raise DataError("step must be at least 1")
    if horizon < 0:
        raise DataError("horizon must be non-negative")
    if window > n:
        raise DataError(f"series too short: {series.id!r} has {n} points, window is {window}")
    values = series.values
    out = []
    for idx, offset in enumerate(range(0, n - window + 1, step)):
        ctx, mean, std = znormalize(values[offset:offset + window])
        end = offset + window
        cont = values[end:end + horizon] if horizon and end + horizon <= n else ()
        out.append(Segment(kb_id=first_id + idx, source_series_id=series.id,
                           start_offset=offset, context=tuple(ctx.tolist()),
                           continuation=tuple(cont), norm_mean=mean, norm_std=std))
    return out


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    n, dim = points.shape
    k = centroids.shape[0]
    out = np.empty((n, k))
    rows = max(1, _DIST_BLOCK // max(1, k * dim))
    for start in range(0, n, rows):
        block = points[start:start + rows]
        diff = block[:, None, :] - centroids[None, :, :]
        out[start:start + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _init_random(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(points.shape[0], size=k, replace=False)
    return points[np.sort(idx)].copy()


def _init_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_distances(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def kmeans_cluster(segments: Sequence[Segment] | np.ndarray, k: int, seed: int = 0,
                   max_iter: int = 100, init: str = "random") -> Clustering:
    """Lloyd's K-means over segment contexts.

    Centroids start as ``k`` distinct pool members drawn with ``seed``
    (or by k-means++ seeding). Each round assigns every point to its
    nearest centroid (lowest index on ties), then moves each centroid to the
    mean of its members; a centroid that loses all members stays put.
    Stops when an assignment repeats or after ``max_iter`` updates.
    ``sse_history`` holds the SSE after every assignment step.
    """
    if isinstance(segments, np.ndarray):
        points = np.asarray(segments, dtype=np.float64)
    else:
        lengths = {len(s.context) for s in segments}
        if len(lengths) > 1:
            raise DataError("segments have differing context lengths")
        points = np.array([s.context for s in segments], dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    n = points.shape[0]
    if k < 1:
        raise DataError("k must be at least 1")
    if k > n:
        raise DataError(f"k={k} exceeds the number of segments ({n})")
    if max_iter < 1:
        raise DataError("max_iter must be positive")
    if init not in INIT_METHODS:
        raise DataError(f"unknown init {init!r}")

    rng = np.random.default_rng(seed)
    centroids = _init_random(points, k, rng) if init == "random" else _init_plusplus(points, k, rng)

    dist = _sq_distances(points, centroids)
    labels = np.argmin(dist, axis=1)
    history = [float(dist[np.arange(n), labels].sum())]
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
        dist = _sq_distances(points, centroids)
        new_labels = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return Clustering(assignments=labels, centroids=centroids, sse=history[-1],
                      iterations_run=iterations, sse_history=history)


def select_representatives(segments: Sequence[Segment], clustering: Clustering) -> list[Segment]:
    """Member nearest its centroid for each non-empty cluster, in cluster order.

    Distance ties go to the smaller ``kb_id``.
    """
    points = np.array([s.context for s in segments], dtype=np.float64)
    labels = clustering.assignments
    out = []
    for c in range(clustering.centroids.shape[0]):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        diff = points[members] - clustering.centroids[c]
        d = np.einsum("ij,ij->i", diff, diff)
        best = min(members[d == d.min()], key=lambda i: segments[i].kb_id)
        out.append(segments[best])
    return out


def corpus_fingerprint(corpus: Sequence[Series]) -> str:
    h = hashlib.sha256()
    for s in corpus:
        h.update(s.id.encode())
        h.update(b"\0")
        h.update(np.asarray(s.values, dtype="<f8").tobytes())
        h.update(b"\1")
    return h.hexdigest()


def default_k(pool_size: int) -> int:
    return min(pool_size, math.ceil(pool_size / 10))


def build_kb(corpus: Sequence[Series], config: KBConfig) -> KnowledgeBase:
    """Slice, cluster and keep one representative per non-empty cluster."""
    if not corpus:
        raise DataError("corpus is empty")
    freqs = {s.frequency for s in corpus}
    if len(freqs) > 1:
        raise DataError(f"corpus mixes frequencies: {sorted(f.value for f in freqs)}")
    pool: list[Segment] = []
    skipped = 0
    for series in corpus:
        if len(series) < config.window_length:
            skipped += 1
            continue
        pool.extend(slice_series(series, config.window_length, config.step,
                                 config.horizon, first_id=len(pool)))
    if skipped:
        log.warning("skipped %d series shorter than window length %d",
                    skipped, config.window_length)
    if not pool:
        raise DataError("empty segment pool: every series is shorter than the window")
    k = config.k if config.k is not None else default_k(len(pool))
    clustering = kmeans_cluster(pool, k, seed=config.seed, max_iter=config.max_iter,
                                init=config.init)
    reps = select_representatives(pool, clustering)
    if len(reps) < k:
        log.warning("%d of %d clusters ended empty and were dropped", k - len(reps), k)
    entries = tuple(replace(s, kb_id=i) for i, s in enumerate(reps))
    meta = BuildMeta(k=k, seed=config.seed, iterations_run=clustering.iterations_run,
                     corpus_fingerprint=corpus_fingerprint(corpus), init=config.init)
    return KnowledgeBase(frequency=next(iter(freqs)), window_length=config.window_length,
                         step=config.step, horizon=config.horizon, entries=entries,
                         build_meta=meta)


# --- file format -----------------------------------------------------------

_HEADER_FIELDS = ("format_version", "frequency", "window_length", "step", "horizon", "k",
                  "seed", "iterations_run", "corpus_fingerprint", "init", "entries")
_SEGMENT_FIELDS = ("kb_id", "source", "offset", "mean", "std", "context", "continuation")


def _dumps(obj) -> str:
    # json emits floats via repr(), the shortest string that round-trips.
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dump_kb(kb: KnowledgeBase) -> str:
    meta = kb.build_meta
    header = {
        "format_version": FORMAT_VERSION,
        "frequency": kb.frequency.value,
        "window_length": kb.window_length,
        "step": kb.step,
        "horizon": kb.horizon,
        "k": meta.k,
        "seed": meta.seed,
        "iterations_run": meta.iterations_run,
        "corpus_fingerprint": meta.corpus_fingerprint,
        "init": meta.init,
        "entries": len(kb.entries),
    }
    lines = [_dumps(header)]
    for s in kb.entries:
        lines.append(_dumps({
            "kb_id": s.kb_id, "source": s.source_series_id, "offset": s.start_offset,
            "mean": s.norm_mean, "std": s.norm_std,
            "context": list(s.context), "continuation": list(s.continuation),
        }))
    return "\n".join(lines) + "\n"


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    Path(path).write_text(dump_kb(kb), encoding="utf-8")


def _require(doc: dict, name: str, kind, line: int):
    if name not in doc:
        raise KBFormatError("missing field", line=line, field=name)
    value = doc[name]
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if not ok:
        raise KBFormatError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}",
                            line=line, field=name)
    return value


def _number_list(doc: dict, name: str, line: int) -> tuple[float, ...]:
    values = _require(doc, name, list, line)
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise KBFormatError(f"non-numeric or non-finite value {v!r}", line=line, field=name)
        out.append(float(v))
    return tuple(out)


def _parse_line(text: str, line: int) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KBFormatError(f"invalid JSON ({exc.msg})", line=line) from None
    if not isinstance(doc, dict):
        raise KBFormatError("expected a JSON object", line=line)
    return doc


def parse_kb(text: str) -> KnowledgeBase:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise KBFormatError("empty file", line=1)
    header = _parse_line(lines[0], 1)
    version = _require(header, "format_version", int, 1)
    if version != FORMAT_VERSION:
        raise KBFormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}",
                            line=1, field="format_version")
    try:
        frequency = Frequency.parse(_require(header, "frequency", str, 1))
    except DataError as exc:
        raise KBFormatError(str(exc), line=1, field="frequency") from None
    L = _require(header, "window_length", int, 1)
    step = _require(header, "step", int, 1)
    horizon = _require(header, "horizon", int, 1)
    meta = BuildMeta(k=_require(header, "k", int, 1), seed=_require(header, "seed", int, 1),
                     iterations_run=_require(header, "iterations_run", int, 1),
                     corpus_fingerprint=_require(header, "corpus_fingerprint", str, 1),
                     init=_require(header, "init", str, 1))
    expected = _require(header, "entries", int, 1)

    entries = []
    seen_ids = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        doc = _parse_line(raw, lineno)
        context = _number_list(doc, "context", lineno)
        if len(context) != L:
            raise KBFormatError(f"context has {len(context)} values, header window_length is {L}",
                                line=lineno, field="context")
        continuation = _number_list(doc, "continuation", lineno)
        if len(continuation) not in (0, horizon):
            raise KBFormatError(f"continuation has {len(continuation)} values, expected 0 "
                                f"or {horizon}", line=lineno, field="continuation")
        kb_id = _require(doc, "kb_id", int, lineno)
        if kb_id in seen_ids:
            raise KBFormatError(f"duplicate kb_id {kb_id}", line=lineno, field="kb_id")
        seen_ids.add(kb_id)
        entries.append(Segment(
            kb_id=kb_id, source_series_id=_require(doc, "source", str, lineno),
            start_offset=_require(doc, "offset", int, lineno), context=context,
            continuation=continuation, norm_mean=float(_require(doc, "mean", (int, float), lineno)),
            norm_std=float(_require(doc, "std", (int, float), lineno))))
    if len(entries) != expected:
        raise KBFormatError(f"truncated file: header declares {expected} entries, "
                            f"found {len(entries)}", line=len(lines) + 1)
    return KnowledgeBase(frequency=frequency, window_length=L, step=step, horizon=horizon,
                         entries=tuple(entries), build_meta=meta)


def load_kb(path: str | Path) -> KnowledgeBase:
    return parse_kb(Path(path).read_text(encoding="utf-8"))
