"""Synthesis of incomplete vessel labels by erasing thin segments.

Pipeline: thin the binary label to a 1-pixel skeleton (Zhang-Suen), trace
the skeleton into polyline segments split at junctions, find the smallest
stroke width t whose redrawn polylines cover the vessel mask, score each
segment by the fraction of its width-t band occupied by vessel pixels,
then keep the thickest top fraction r of segments (plus a seeded random
share of the thin remainder) and intersect the redrawn kept set with the
original label.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import cv2
import numpy as np

log = logging.getLogger(__name__)

COVER_TARGET = 0.995
MAX_COVER_WIDTH = 15


class ErasureParameterError(ValueError):
    """Invalid erasure configuration."""


@dataclass
class VesselSegment:
    """One traced centerline polyline with its thickness score."""

    id: int
    points: np.ndarray  # N x 2 integer (row, col) pixel coordinates
    thickness: float = 0.0


@dataclass
class VesselGraph:
    """Polyline decomposition of a vessel mask's skeleton."""

    segments: list[VesselSegment]
    source_shape: tuple[int, int]
    cover_width: int = 1
    cover_met: bool = True


@dataclass
class ErasureConfig:
    ratio: float
    thin_keep_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ErasureParameterError(f"ratio must be in [0,1], got {self.ratio}")
        if not 0.0 <= self.thin_keep_fraction <= 1.0:
            raise ErasureParameterError(
                f"thin_keep_fraction must be in [0,1], got {self.thin_keep_fraction}"
            )


@dataclass
class ErasedLabel:
    """Result of erasing thin segments from a label at ratio r."""

    mask: np.ndarray  # H x W uint8 in {0,1}
    config: ErasureConfig
    cover_width: int
    kept_ids: list[int] = field(default_factory=list)
    erased_ids: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Zhang-Suen thinning


def _neighbor_counts(img: np.ndarray) -> tuple[np.ndarray, ...]:
    """Return the 8 neighbor planes P2..P9 (clockwise from north) of a padded image."""
    p = np.pad(img, 1)
    p2 = p[:-2, 1:-1]
    p3 = p[:-2, 2:]
    p4 = p[1:-1, 2:]
    p5 = p[2:, 2:]
    p6 = p[2:, 1:-1]
    p7 = p[2:, :-2]
    p8 = p[1:-1, :-2]
    p9 = p[:-2, :-2]
    return p2, p3, p4, p5, p6, p7, p8, p9


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a 1-pixel-wide skeleton.

    Skeleton pixels are a subset of mask pixels and the number of
    8-connected components is preserved (components that the thinning
    would delete entirely, e.g. isolated 2x2 blobs, keep one pixel).
    """
    img = (np.asarray(mask) > 0).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            p2, p3, p4, p5, p6, p7, p8, p9 = _neighbor_counts(img)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
            a = np.zeros_like(b)
            for k in range(8):
                a += (ring[k] == 0) & (ring[k + 1] == 1)
            if step == 0:
                c1 = p2 * p4 * p6 == 0
                c2 = p4 * p6 * p8 == 0
            else:
                c1 = p2 * p4 * p8 == 0
                c2 = p2 * p6 * p8 == 0
            remove = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if remove.any():
                img[remove] = 0
                changed = True
        if not changed:
            break

    # Restore one pixel for any component the thinning wiped out.
    n_in, lab_in = cv2.connectedComponents((mask > 0).astype(np.uint8), connectivity=8)
    for comp in range(1, n_in):
        where = lab_in == comp
        if not img[where].any():
            r, c = np.argwhere(where)[0]
            img[r, c] = 1
    return img


# ---------------------------------------------------------------------------
# Polyline tracing

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def trace_polylines(skeleton: np.ndarray) -> list[VesselSegment]:
    """Trace a 1-pixel skeleton into polyline segments split at junctions.

    Junction pixels (>= 3 skeleton neighbors) terminate segments and
    belong to every incident segment.  Every skeleton pixel is covered by
    at least one returned polyline; isolated pixels become single-point
    segments and pure cycles a single closed polyline.
    """
    skel = np.asarray(skeleton) > 0
    pixels = set(map(tuple, np.argwhere(skel)))
    if not pixels:
        return []

    def nbrs(p):
        out = []
        for dr, dc in _OFFSETS:
            q = (p[0] + dr, p[1] + dc)
            if q not in pixels:
                continue
            # Prune diagonal links already mediated by an orthogonal pixel;
            # otherwise junction clusters inflate every neighbor's degree.
            if dr and dc and ((p[0], q[1]) in pixels or (q[0], p[1]) in pixels):
                continue
            out.append(q)
        return out

    degree = {p: len(nbrs(p)) for p in pixels}
    nodes = [p for p in sorted(pixels) if degree[p] != 2]

    segments: list[list[tuple[int, int]]] = []
    visited_edges: set[frozenset] = set()

    def walk(start, first):
        path = [start, first]
        visited_edges.add(frozenset((start, first)))
        prev, cur = start, first
        while degree[cur] == 2:
            nxt = [q for q in nbrs(cur) if q != prev]
            # Prefer the unvisited continuation; tiny pixel triangles can
            # otherwise bounce between two mutually adjacent neighbors.
            nxt = [q for q in nxt if frozenset((cur, q)) not in visited_edges]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            path.append(cur)
            visited_edges.add(frozenset((prev, cur)))
        return path

    for node in nodes:
        if degree[node] == 0:
            segments.append([node])
            continue
        for nb in sorted(nbrs(node)):
            if frozenset((node, nb)) in visited_edges:
                continue
            segments.append(walk(node, nb))

    # Remaining untouched degree-2 pixels are closed cycles (the walk
    # returns to its start) or chain remnants left by the bounce filter.
    touched = {p for seg in segments for p in seg}
    for p in sorted(pixels - touched):
        if p in touched:
            continue
        path = walk(p, sorted(nbrs(p))[0])
        back = [q for q in nbrs(p) if frozenset((p, q)) not in visited_edges]
        if back:
            path = list(reversed(walk(p, back[0]))) + path[1:]
        segments.append(path)
        touched.update(path)

    return [
        VesselSegment(id=i, points=np.asarray(seg, dtype=np.int32))
        for i, seg in enumerate(segments)
    ]


# ---------------------------------------------------------------------------
# Width-t drawing, cover width, thickness


def draw_segments(
    segments: list[VesselSegment], shape: tuple[int, int], width: int
) -> np.ndarray:
    """Rasterize polylines at the given stroke width onto a blank canvas."""
    canvas = np.zeros(shape, dtype=np.uint8)
    for seg in segments:
        pts = seg.points[:, ::-1].reshape(-1, 1, 2)  # cv2 wants (x, y)
        if len(seg.points) == 1:
            cv2.circle(canvas, tuple(pts[0, 0]), max(width // 2, 0), 1, thickness=-1)
            canvas[seg.points[0, 0], seg.points[0, 1]] = 1
        else:
            cv2.polylines(canvas, [pts], isClosed=False, color=1, thickness=width)
    return canvas


def coverage(mask: np.ndarray, drawn: np.ndarray) -> float:
    fg = int((mask > 0).sum())
    if fg == 0:
        return 1.0
    return int(((mask > 0) & (drawn > 0)).sum()) / fg


def min_cover_width(
    mask: np.ndarray,
    segments: list[VesselSegment],
    cover_target: float = COVER_TARGET,
    t_max: int = MAX_COVER_WIDTH,
) -> tuple[int, bool]:
    """Smallest width t whose drawn polylines cover ``cover_target`` of the mask.

    Returns (t, target_met); if no width up to ``t_max`` reaches the
    target, returns (t_max, False) and logs a warning.
    """
    shape = mask.shape
    for t in range(1, t_max + 1):
        if coverage(mask, draw_segments(segments, shape, t)) >= cover_target:
            return t, True
    log.warning("cover target %.3f unreachable at t_max=%d", cover_target, t_max)
    return t_max, False


def measure_thickness(segment: VesselSegment, mask: np.ndarray, t: int) -> float:
    """Fraction of the segment's width-t drawn band occupied by vessel pixels."""
    band = draw_segments([segment], mask.shape, t) > 0
    area = int(band.sum())
    if area == 0:
        return 0.0
    return int((band & (mask > 0)).sum()) / area


def build_vessel_graph(label: np.ndarray) -> VesselGraph:
    """Skeletonize, trace, pick the cover width, and score every segment."""
    skel = skeletonize(label)
    segments = trace_polylines(skel)
    t, met = min_cover_width(label, segments)
    for seg in segments:
        seg.thickness = measure_thickness(seg, label, t)
    return VesselGraph(
        segments=segments, source_shape=tuple(label.shape), cover_width=t, cover_met=met
    )


# ---------------------------------------------------------------------------
# Erasure


def _rng_for(cfg: ErasureConfig, sample_id: str) -> np.random.Generator:
    # Per-sample stream: reproducible regardless of iteration order.
    return np.random.default_rng([cfg.seed, zlib.crc32(sample_id.encode("utf-8"))])


def select_segments(
    graph: VesselGraph, cfg: ErasureConfig, sample_id: str = ""
) -> tuple[list[int], list[int]]:
    """Partition segment ids into (kept, erased) for the given config.

    Keeps the ceil(r*M) thickest segments (ties broken by ascending id)
    plus a seeded random ``thin_keep_fraction`` of the remainder.
    """
    order = sorted(graph.segments, key=lambda s: (-s.thickness, s.id))
    m = len(order)
    n_thick = int(np.ceil(cfg.ratio * m))
    kept = [s.id for s in order[:n_thick]]
    thin = sorted(s.id for s in order[n_thick:])
    if thin and cfg.thin_keep_fraction > 0:
        n_extra = int(round(cfg.thin_keep_fraction * len(thin)))
        rng = _rng_for(cfg, sample_id)
        extra = rng.choice(thin, size=n_extra, replace=False)
        kept.extend(int(i) for i in extra)
    kept_set = set(kept)
    erased = [s.id for s in graph.segments if s.id not in kept_set]
    return sorted(kept_set), sorted(erased)


def erase_from_graph(
    label: np.ndarray, graph: VesselGraph, cfg: ErasureConfig, sample_id: str = ""
) -> ErasedLabel:
    """Erase thin segments of ``label`` using a pre-built graph."""
    kept, erased = select_segments(graph, cfg, sample_id)
    if not erased:
        # All segments kept: the label is reproduced exactly (the redrawn
        # cover only guarantees >= COVER_TARGET, not every pixel).
        mask = (label > 0).astype(np.uint8)
    else:
        by_id = {s.id: s for s in graph.segments}
        drawn = draw_segments([by_id[i] for i in kept], graph.source_shape, graph.cover_width)
        mask = ((drawn > 0) & (label > 0)).astype(np.uint8)
    return ErasedLabel(
        mask=mask, config=cfg, cover_width=graph.cover_width, kept_ids=kept, erased_ids=erased
    )


def erase_labels(label: np.ndarray, cfg: ErasureConfig, sample_id: str = "") -> ErasedLabel:
    """Synthesize an incomplete label from a complete one at ratio ``cfg.ratio``."""
    graph = build_vessel_graph((label > 0).astype(np.uint8))
    return erase_from_graph(label, graph, cfg, sample_id)
