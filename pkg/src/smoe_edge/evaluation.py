"""Boundary benchmarking: thinning, tolerance matching, threshold sweeps and
the ODS / OIS / AP summary, plus the classical Canny and Sobel baselines.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError
from .guidance import sobel_gradients, sobel_magnitude

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class BinaryBoundaryMap:
    values: np.ndarray  # H x W bool
    provenance: tuple = ("", 0.0)  # (method, threshold)


def _values(m) -> np.ndarray:
    v = m.values if isinstance(m, BinaryBoundaryMap) else m
    return np.asarray(v, dtype=bool)


def default_tolerance(shape: tuple) -> float:
    """Matching radius: 0.0075 of the image diagonal (community constant)."""
    h, w = shape
    return 0.0075 * float(np.hypot(h, w))


def default_thresholds(n: int = 33) -> np.ndarray:
    """n thresholds evenly spaced in the open interval (0,1)."""
    return np.arange(1, n + 1) / (n + 1)


# ---------------------------------------------------------------------------
# thinning
# ---------------------------------------------------------------------------

def _neighbor_ring(a: np.ndarray):
    """The 8 neighbor planes in circular order N, NE, E, SE, S, SW, W, NW."""
    p = np.pad(a, 1)
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def _yokoi8(ring) -> np.ndarray:
    """Number of 8-connected foreground components in the punctured 3x3
    neighborhood (Yokoi count). A pixel is 8-simple exactly when this is 1;
    unlike the circular crossing number it honors the diagonal adjacency
    between 4-neighbors (e.g. S and W)."""
    bg = [~plane for plane in ring]
    c = np.zeros(ring[0].shape, dtype=np.int8)
    for k in (0, 2, 4, 6):
        c += bg[k] & ~(bg[(k + 1) % 8] & bg[(k + 2) % 8])
    return c


def thin(binary) -> BinaryBoundaryMap:
    """Iterative directional boundary peeling, to fixpoint.

    Each cycle peels north-, south-, east- then west-border pixels that are
    8-simple and not line ends (at least two neighbors). Idempotent;
    one-pixel-wide strokes survive unchanged.
    """
    src = binary
    a = _values(binary).copy()
    while True:
        changed = False
        for border_index in (0, 4, 2, 6):  # N, S, E, W planes of the ring
            ring = _neighbor_ring(a)
            count = np.zeros(a.shape, dtype=np.int8)
            for plane in ring:
                count += plane
            peel = a & ~ring[border_index] & (count >= 2) & (_yokoi8(ring) == 1)
            if peel.any():
                a[peel] = False
                changed = True
        if not changed:
            break
    prov = src.provenance if isinstance(src, BinaryBoundaryMap) else ("thin", 0.0)
    return BinaryBoundaryMap(a, prov)


# ---------------------------------------------------------------------------
# correspondence
# ---------------------------------------------------------------------------

def _match_masks(pred: np.ndarray, gt: np.ndarray, tol_px: float):
    """One-to-one matching of boundary pixels within `tol_px`, at maximum
    cardinality.

    A greedy seed takes candidate pairs in (squared distance, pred row-major
    index, gt index) order; augmenting-path passes then repair the cases
    where a nearest-first choice blocks a larger pairing, so the matched
    count always equals the exact bipartite optimum. Fully deterministic.
    Returns boolean masks over the pred / gt pixel lists.
    """
    p_idx = np.argwhere(pred)
    g_idx = np.argwhere(gt)
    n_p, n_g = len(p_idx), len(g_idx)
    if n_p == 0 or n_g == 0:
        return p_idx, g_idx, np.zeros(n_p, dtype=bool), np.zeros(n_g, dtype=bool)

    tol2 = tol_px * tol_px
    tree = cKDTree(g_idx)
    neighbors = tree.query_ball_point(p_idx, r=tol_px + 1e-12)
    adj: list[list[int]] = [[] for _ in range(n_p)]
    pairs = []
    for pi, cand in enumerate(neighbors):
        for gi in cand:
            d = p_idx[pi] - g_idx[gi]
            d2 = int(d[0]) ** 2 + int(d[1]) ** 2  # exact integer metric, stable ties
            if d2 <= tol2:
                pairs.append((d2, pi, gi))
    pairs.sort()

    match_p = np.full(n_p, -1, dtype=np.int64)  # pred -> gt
    match_g = np.full(n_g, -1, dtype=np.int64)  # gt -> pred
    for d2, pi, gi in pairs:
        if match_p[pi] < 0 and match_g[gi] < 0:
            match_p[pi] = gi
            match_g[gi] = pi
    for _, pi, gi in pairs:
        adj[pi].append(gi)

    # Alternating BFS from each still-unmatched prediction.
    for start in range(n_p):
        if match_p[start] >= 0:
            continue
        via_pred = {}
        queue = [start]
        free_gt = -1
        while queue and free_gt < 0:
            nxt = []
            for pi in queue:
                for gi in adj[pi]:
                    if gi in via_pred:
                        continue
                    via_pred[gi] = pi
                    if match_g[gi] < 0:
                        free_gt = gi
                        break
                    nxt.append(match_g[gi])
                if free_gt >= 0:
                    break
            queue = nxt
        if free_gt >= 0:
            gi = free_gt
            while True:
                pi = via_pred[gi]
                prev_gi = match_p[pi]
                match_p[pi] = gi
                match_g[gi] = pi
                if prev_gi < 0:
                    break
                gi = prev_gi

    return p_idx, g_idx, match_p >= 0, match_g >= 0


def match_boundaries(pred, gt, tol_px: float) -> tuple[int, int, int]:
    """(tp, fp, fn) between two thinned binary maps."""
    pred_v, gt_v = _values(pred), _values(gt)
    if pred_v.shape != gt_v.shape:
        raise ShapeError(f"match_boundaries: {pred_v.shape} vs {gt_v.shape}")
    if tol_px <= 0:
        raise ValueError(f"match_boundaries: tolerance must be positive, got {tol_px}")
    _, _, p_matched, g_matched = _match_masks(pred_v, gt_v, tol_px)
    tp = int(p_matched.sum())
    return tp, int((~p_matched).sum()), int((~g_matched).sum())


# ---------------------------------------------------------------------------
# threshold sweeps
# ---------------------------------------------------------------------------

@dataclass
class ThresholdCounts:
    threshold: float
    matched_pred: int   # predicted pixels matched by at least one annotator
    total_pred: int
    matched_gt: int     # gt pixels matched, summed over annotators
    total_gt: int

    def precision(self) -> float:
        return self.matched_pred / self.total_pred if self.total_pred else 0.0

    def recall(self) -> float:
        return self.matched_gt / self.total_gt if self.total_gt else 0.0

    def f_score(self) -> float:
        p, r = self.precision(), self.recall()
        return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


def _counts_for_binary(pred_bin: np.ndarray, gts: list[np.ndarray],
                       tol_px: float, threshold: float) -> ThresholdCounts:
    pred_thin = thin(pred_bin).values
    total_pred = int(pred_thin.sum())
    matched_any = np.zeros(total_pred, dtype=bool)
    matched_gt = 0
    total_gt = 0
    for g in gts:
        _, _, p_matched, g_matched = _match_masks(pred_thin, g, tol_px)
        matched_any |= p_matched
        matched_gt += int(g_matched.sum())
        total_gt += int(g.sum())
    return ThresholdCounts(threshold=float(threshold),
                           matched_pred=int(matched_any.sum()), total_pred=total_pred,
                           matched_gt=matched_gt, total_gt=total_gt)


def sweep_binary_maps(map_provider, gts, thresholds, tol_px: float | None = None) -> list[ThresholdCounts]:
    """Generic sweep: `map_provider(t)` yields the binary map at threshold t."""
    gts = [_values(g) for g in gts]
    if not gts:
        raise ValueError("sweep needs at least one annotator map")
    if tol_px is None:
        tol_px = default_tolerance(gts[0].shape)
    return [_counts_for_binary(_values(map_provider(t)), gts, tol_px, t) for t in thresholds]


def pr_sweep(prob_map: np.ndarray, gts, thresholds, tol_px: float | None = None) -> list[ThresholdCounts]:
    """Binarize/thin the probability map at each threshold and match against
    every annotator: recall counts are summed per annotator, a predicted
    pixel is a false positive only when no annotator matches it."""
    prob = np.asarray(prob_map, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(thresholds) and (np.any(np.diff(thresholds) <= 0) or thresholds[0] <= 0 or thresholds[-1] >= 1):
        raise ValueError("thresholds must be strictly increasing within (0,1)")
    return sweep_binary_maps(lambda t: prob >= t, gts, thresholds, tol_px)


# ---------------------------------------------------------------------------
# dataset summary
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    thresholds: list[float]
    rows: list[dict]              # per-threshold aggregate counts and P/R/F
    per_image: list[dict]         # best threshold / F per image
    ods_f: float
    ods_threshold: float
    ois_f: float
    ap: float

    def to_json(self) -> str:
        return json.dumps({
            "thresholds": self.thresholds,
            "per_threshold": self.rows,
            "per_image": self.per_image,
            "ods_f": self.ods_f,
            "ods_threshold": self.ods_threshold,
            "ois_f": self.ois_f,
            "ap": self.ap,
        }, indent=2)

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall,f"]
        for row in self.rows:
            lines.append(f"{row['threshold']:.10g},{row['precision']:.10g},"
                         f"{row['recall']:.10g},{row['f']:.10g}")
        return "\n".join(lines) + "\n"


def _prf(matched_pred, total_pred, matched_gt, total_gt):
    p = matched_pred / total_pred if total_pred else 0.0
    r = matched_gt / total_gt if total_gt else 0.0
    f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


def summarize(per_image_sweeps: list[list[ThresholdCounts]],
              image_ids: list[str] | None = None) -> EvalReport:
    """Aggregate per-image sweeps into ODS / OIS / AP.

    ODS picks one global threshold on pooled counts; OIS pools each image's
    own best-F threshold; AP integrates precision over recall (trapezoid,
    recall-sorted, extended to recall 0 at constant precision).
    """
    if not per_image_sweeps:
        raise ValueError("summarize needs at least one image sweep")
    n_thresh = len(per_image_sweeps[0])
    if any(len(s) != n_thresh for s in per_image_sweeps):
        raise ValueError("all sweeps must share the same threshold list")
    thresholds = [c.threshold for c in per_image_sweeps[0]]
    ids = image_ids or [f"image{i}" for i in range(len(per_image_sweeps))]

    rows = []
    for k in range(n_thresh):
        mp = sum(s[k].matched_pred for s in per_image_sweeps)
        tp_ = sum(s[k].total_pred for s in per_image_sweeps)
        mg = sum(s[k].matched_gt for s in per_image_sweeps)
        tg = sum(s[k].total_gt for s in per_image_sweeps)
        p, r, f = _prf(mp, tp_, mg, tg)
        rows.append({"threshold": thresholds[k], "tp": mp, "fp": tp_ - mp, "fn": tg - mg,
                     "matched_gt": mg, "total_pred": tp_, "total_gt": tg,
                     "precision": p, "recall": r, "f": f})

    best_k = int(np.argmax([row["f"] for row in rows]))
    ods_f = rows[best_k]["f"]

    per_image = []
    ois_counts = np.zeros(4, dtype=np.int64)  # matched_pred, total_pred, matched_gt, total_gt
    for sweep, image_id in zip(per_image_sweeps, ids):
        fs = [c.f_score() for c in sweep]
        kb = int(np.argmax(fs))
        c = sweep[kb]
        ois_counts += (c.matched_pred, c.total_pred, c.matched_gt, c.total_gt)
        per_image.append({"id": image_id, "best_threshold": thresholds[kb], "best_f": fs[kb]})
    _, _, ois_f = _prf(*ois_counts)

    pts = sorted(zip((row["recall"] for row in rows), (row["precision"] for row in rows)))
    recalls = [p[0] for p in pts]
    precisions = [p[1] for p in pts]
    if recalls and recalls[0] > 0.0:
        recalls.insert(0, 0.0)
        precisions.insert(0, precisions[0])
    ap = float(np.trapezoid(precisions, recalls)) if len(recalls) > 1 else 0.0

    return EvalReport(thresholds=thresholds, rows=rows, per_image=per_image,
                      ods_f=ods_f, ods_threshold=thresholds[best_k], ois_f=ois_f, ap=ap)


def thread_count() -> int:
    """Worker cap from SMOE_THREADS (unset or 0 means auto)."""
    raw = os.environ.get("SMOE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else min(8, os.cpu_count() or 1)


def evaluate_dataset(prob_maps: list[np.ndarray], gt_lists: list[list[np.ndarray]],
                     thresholds, image_ids: list[str] | None = None,
                     tol_px: float | None = None) -> EvalReport:
    """Sweep every image (in parallel when allowed) and summarize.

    Aggregation is a commutative sum, so results do not depend on the
    thread schedule.
    """
    workers = min(thread_count(), len(prob_maps)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sweeps = list(pool.map(lambda args: pr_sweep(args[0], args[1], thresholds, tol_px),
                                   zip(prob_maps, gt_lists)))
    else:
        sweeps = [pr_sweep(p, g, thresholds, tol_px) for p, g in zip(prob_maps, gt_lists)]
    return summarize(sweeps, image_ids)


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------

def canny(image: np.ndarray, sigma: float = 1.0, low: float = 0.1,
          high: float = 0.3) -> BinaryBoundaryMap:
    """Gaussian blur, Sobel gradients, direction-quantized non-maximum
    suppression, then hysteresis (strong seeds grow through weak, 8-connected).

    Thresholds apply to the max-normalized gradient magnitude. Plateau ties
    in the suppression step break toward the pixel farthest along the
    gradient direction, so a clean step yields a single-pixel line.
    """
    if not (0.0 < low < high <= 1.0):
        raise ValueError(f"canny: need 0 < low < high <= 1, got low={low} high={high}")
    img = np.asarray(image, dtype=np.float64)
    blurred = ndimage.gaussian_filter(img, sigma, truncate=3.0, mode="nearest") if sigma > 0 else img
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak < 1e-12:
        return BinaryBoundaryMap(np.zeros(img.shape, dtype=bool), ("canny", high))
    mag = mag / peak

    padded = np.pad(mag, 1)
    shift = {
        "n": padded[:-2, 1:-1], "s": padded[2:, 1:-1],
        "e": padded[1:-1, 2:], "w": padded[1:-1, :-2],
        "ne": padded[:-2, 2:], "sw": padded[2:, :-2],
        "nw": padded[:-2, :-2], "se": padded[2:, 2:],
    }
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    ahead = np.where(sector == 0, np.where(gx > 0, shift["e"], shift["w"]),
            np.where(sector == 1, np.where(gx > 0, shift["se"], shift["nw"]),
            np.where(sector == 2, np.where(gy > 0, shift["s"], shift["n"]),
                     np.where(gy > 0, shift["sw"], shift["ne"]))))
    behind = np.where(sector == 0, np.where(gx > 0, shift["w"], shift["e"]),
             np.where(sector == 1, np.where(gx > 0, shift["nw"], shift["se"]),
             np.where(sector == 2, np.where(gy > 0, shift["n"], shift["s"]),
                      np.where(gy > 0, shift["ne"], shift["sw"]))))
    nms = np.where((mag > ahead) & (mag >= behind), mag, 0.0)

    strong = nms >= high
    weak = nms >= low
    labels, _ = ndimage.label(weak, structure=EIGHT_CONNECTED)
    keep_ids = np.unique(labels[strong])
    keep_ids = keep_ids[keep_ids > 0]
    out = np.isin(labels, keep_ids)
    return BinaryBoundaryMap(out, ("canny", high))


def sobel_baseline(image: np.ndarray, threshold: float) -> BinaryBoundaryMap:
    """Thresholded, thinned Sobel magnitude."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"sobel_baseline: threshold must be in (0,1), got {threshold}")
    mag = sobel_magnitude(image).values
    thinned = thin(mag >= threshold)
    return BinaryBoundaryMap(thinned.values, ("sobel", threshold))


def canny_sweep(image: np.ndarray, gts, thresholds, sigma: float = 1.0,
                low_ratio: float = 0.4, tol_px: float | None = None) -> list[ThresholdCounts]:
    """Benchmark sweep for Canny: each threshold t is the hysteresis high
    threshold with low = low_ratio * t."""
    return sweep_binary_maps(
        lambda t: canny(image, sigma=sigma, low=low_ratio * t, high=t).values,
        gts, thresholds, tol_px)
