"""Region-overlap scoring, error taxonomy, threshold sweeps and proposal statistics.

``alpha_our`` scores the detections above a threshold against the ground-truth
smoke mask: mask pixels covered by each box, summed over boxes, divided by the
summed box areas. Pixels belong to a box when their centre lies inside it.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import boxes as bx
from .kernels import box_pixel_counts, pixel_span

MISSING = "missing"
CONFUSION = "confusion"
CORRECT = "correct"
ERROR_CLASSES = (CORRECT, CONFUSION, MISSING)

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))

SWEEP_FIELDS = ("threshold", "mean_alpha_our", "missing_rate", "confusion_rate", "n_images_scored")
SUMMARY_FIELDS = ("peak_alpha_our", "argmax_threshold", "peak_alpha_our_all_images")


def _as_boxes(boxes):
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def box_mask_counts(boxes, mask):
    """(n, 2) int64: pixel area of each box and mask pixels inside it."""
    mask = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    return box_pixel_counts(_as_boxes(boxes), mask)


def alpha_our(boxes, mask, union=False):
    """``sum_i |mask & B_i| / sum_i |B_i|`` in pixels.

    ``union=True`` counts each pixel once across overlapping boxes instead.
    Boxes covering no pixel centre contribute nothing; if no box covers any
    pixel the value is 0.
    """
    boxes = _as_boxes(boxes)
    if len(boxes) == 0:
        raise ValueError("alpha_our is undefined without detections; classify the image as missing")
    mask = np.asarray(mask) != 0
    if union:
        h, w = mask.shape
        cover = np.zeros((h, w), dtype=bool)
        for x0, y0, x1, y1 in boxes:
            r0, r1 = pixel_span(y0, y1, h)
            c0, c1 = pixel_span(x0, x1, w)
            if r1 >= r0 and c1 >= c0:
                cover[r0:r1 + 1, c0:c1 + 1] = True
        area = int(cover.sum())
        return float((cover & mask).sum()) / area if area else 0.0
    counts = box_mask_counts(boxes, mask)
    area = int(counts[:, 0].sum())
    return float(counts[:, 1].sum()) / area if area else 0.0


def classify_image(boxes, mask):
    """missing (no boxes), confusion (some box has no mask pixel), else correct."""
    boxes = _as_boxes(boxes)
    if len(boxes) == 0:
        return MISSING
    counts = box_mask_counts(boxes, mask)
    if np.any(counts[:, 1] == 0):
        return CONFUSION
    return CORRECT


@dataclass
class ImageResult:
    n: int
    alpha: float  # nan when n == 0
    error: str


@dataclass
class EvalReport:
    threshold: float
    images: list = field(default_factory=list)

    @property
    def n_images(self):
        return len(self.images)

    @property
    def n_scored(self):
        return sum(1 for r in self.images if r.n > 0)

    @property
    def mean_alpha(self):
        """Mean over images with at least one detection (nan if none)."""
        vals = [r.alpha for r in self.images if r.n > 0]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_alpha_all(self):
        """Mean over all images, missing images counting 0."""
        if not self.images:
            return float("nan")
        return float(np.mean([r.alpha if r.n > 0 else 0.0 for r in self.images]))

    def rate(self, error):
        if not self.images:
            return 0.0
        return sum(1 for r in self.images if r.error == error) / len(self.images)

    @property
    def missing_rate(self):
        return self.rate(MISSING)

    @property
    def confusion_rate(self):
        return self.rate(CONFUSION)


def evaluate_detections(detections, masks, threshold, union=False):
    """``detections``: per image, boxes already filtered to the threshold."""
    report = EvalReport(threshold=float(threshold))
    for boxes, mask in zip(detections, masks):
        boxes = _as_boxes(boxes)
        if len(boxes) == 0:
            report.images.append(ImageResult(0, float("nan"), MISSING))
            continue
        report.images.append(ImageResult(len(boxes), alpha_our(boxes, mask, union), classify_image(boxes, mask)))
    return report


@dataclass
class SweepCurve:
    thresholds: tuple
    reports: list

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if len(t) == 0 or np.any(np.diff(t) <= 0):
            raise ValueError("sweep thresholds must be non-empty and strictly increasing")

    @property
    def mean_alpha(self):
        return np.array([r.mean_alpha for r in self.reports])

    @property
    def missing_rate(self):
        return np.array([r.missing_rate for r in self.reports])

    @property
    def confusion_rate(self):
        return np.array([r.confusion_rate for r in self.reports])

    def peak(self):
        """(peak mean alpha_our, its threshold); first maximum wins; (nan, nan) if nothing scored."""
        vals = self.mean_alpha
        if np.all(np.isnan(vals)):
            return float("nan"), float("nan")
        i = int(np.nanargmax(vals))
        return float(vals[i]), float(self.thresholds[i])

    def peak_all_images(self):
        vals = np.array([r.mean_alpha_all for r in self.reports])
        return float(np.nanmax(vals)) if not np.all(np.isnan(vals)) else float("nan")


def sweep_candidates(candidates, masks, grid=DEFAULT_GRID, nms_iou=0.45, union=False):
    """Sweep over precomputed per-image ``(boxes, scores)`` sorted by score.

    NMS runs once per image at the lowest threshold; greedy NMS keeps the same
    boxes among the survivors of any higher threshold, so each threshold only
    filters that list.
    """
    grid = tuple(float(t) for t in grid)
    if not len(masks):
        raise ValueError("threshold sweep needs a non-empty test set")
    lowest = min(grid)
    kept = []
    for boxes, scores in candidates:
        live = scores > lowest
        b, s = boxes[live], scores[live]
        keep = bx.nms(b, s, nms_iou)
        kept.append((b[keep], s[keep]))
    reports = []
    for t in grid:
        dets = [b[s > t] for b, s in kept]
        reports.append(evaluate_detections(dets, masks, t, union))
    return SweepCurve(grid, reports)


def threshold_sweep(model, scenes, grid=DEFAULT_GRID, union=False, batch_size=32):
    scenes = list(scenes)
    if not scenes:
        raise ValueError("threshold sweep needs a non-empty test set")
    candidates = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        candidates.extend(model.candidates(np.stack([s.image for s in chunk])))
    return sweep_candidates(candidates, [s.mask for s in scenes], grid, model.config.nms_iou, union)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def format_float(v):
    """Fixed six-decimal rendering used by every report CSV."""
    return "nan" if v != v else f"{v:.6f}"


def sweep_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for t, r in zip(curve.thresholds, curve.reports):
        w.writerow([f"{t:.2f}", format_float(r.mean_alpha), format_float(r.missing_rate),
                    format_float(r.confusion_rate), r.n_scored])
    return buf.getvalue()


def summary_csv(curve):
    peak, arg = curve.peak()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    w.writerow([format_float(peak), "nan" if arg != arg else f"{arg:.2f}", format_float(curve.peak_all_images())])
    return buf.getvalue()


def write_report(curve, sweep_path, summary_path):
    for path, text in ((sweep_path, sweep_csv(curve)), (summary_path, summary_csv(curve))):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# proposal statistics from a training log
# ---------------------------------------------------------------------------


class LogFormatError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


STAT_COLUMNS = ("N_pos_source", "N_pos_target", "feat_norm_source", "feat_norm_target")


@dataclass
class ProposalStats:
    step: np.ndarray
    n_pos_source: np.ndarray
    n_pos_target: np.ndarray
    feat_norm_source: np.ndarray
    feat_norm_target: np.ndarray

    @property
    def balance(self):
        """N_pos target / N_pos source per step (nan where the source count is 0)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.n_pos_source > 0, self.n_pos_target / np.maximum(self.n_pos_source, 1), np.nan)

    def __len__(self):
        return len(self.step)


def proposal_stats(lines):
    """Parse a training log (path, file object or iterable of lines)."""
    if isinstance(lines, (str, bytes)) or hasattr(lines, "__fspath__"):
        with open(lines, encoding="utf-8") as fh:
            return proposal_stats(fh.read().splitlines())
    reader = csv.reader(lines)
    header = next(reader, None)
    cols = {k: [] for k in ("step",) + STAT_COLUMNS}
    if header is None:
        return ProposalStats(*(np.zeros(0) for _ in cols))
    missing = [c for c in cols if c not in header]
    if missing:
        raise LogFormatError(1, f"header lacks column(s) {missing}")
    index = {c: header.index(c) for c in cols}
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise LogFormatError(line_no, f"expected {len(header)} fields, got {len(row)}")
        for c, i in index.items():
            try:
                v = float(row[i])
            except ValueError:
                raise LogFormatError(line_no, f"column {c}: not a number: {row[i]!r}") from None
            if not np.isfinite(v):
                raise LogFormatError(line_no, f"column {c}: non-finite value")
            cols[c].append(v)
    return ProposalStats(
        step=np.array(cols["step"], dtype=np.int64),
        n_pos_source=np.array(cols["N_pos_source"]),
        n_pos_target=np.array(cols["N_pos_target"]),
        feat_norm_source=np.array(cols["feat_norm_source"]),
        feat_norm_target=np.array(cols["feat_norm_target"]),
    )


def stats_csv(stats):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "N_pos_source", "N_pos_target", "balance", "feat_norm_source", "feat_norm_target"))
    for i in range(len(stats)):
        w.writerow([int(stats.step[i]), int(stats.n_pos_source[i]), int(stats.n_pos_target[i]),
                    format_float(float(stats.balance[i])), format_float(float(stats.feat_norm_source[i])),
                    format_float(float(stats.feat_norm_target[i]))])
    return buf.getvalue()


def alpha_zero(box, gt):
    """Plain IoU between a prediction and a ground-truth box."""
    return bx.iou(box, gt)
