"""Detection metrics: event-aware confusion counts, rates, AUC, adjusted MTTD.

Counting is mixed-granularity by design: detections and misses (TP/FN) are
counted per incident event, false alarms and true negatives (FP/TN) per
window, since a false-alarm rate is only meaningful against the population
of truly-normal windows.  A detected incident contributes its actual delay
to the adjusted mean time-to-detect; a missed incident is penalised with
its full duration.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import IncidentRecord
from .errors import InvalidInputError
from .ocsvm import INCIDENT, NORMAL

METRICS_HEADER = ["run_id", "model", "acc", "f1", "dr", "far", "auc", "ad_mttd", "passed_far_filter"]


@dataclass(frozen=True)
class PredictionSeries:
    """Scored and flagged test windows of one node."""

    node_id: str
    end_indices: np.ndarray
    scores: np.ndarray          # anomaly scores, larger = more incident-like
    flags: np.ndarray           # boolean incident predictions

    def __post_init__(self):
        ends = np.asarray(self.end_indices, dtype=int)
        scores = np.asarray(self.scores, dtype=float)
        flags = np.asarray(self.flags, dtype=bool)
        if not (ends.shape == scores.shape == flags.shape) or ends.ndim != 1:
            raise InvalidInputError("prediction columns must be equal-length 1-D")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("scores must be finite")
        if len(np.unique(ends)) != len(ends):
            raise InvalidInputError(f"node {self.node_id}: duplicate window ends")
        object.__setattr__(self, "end_indices", ends)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "flags", flags)


@dataclass(frozen=True)
class ConfusionCounts:
    """TP/FN at incident-event level, FP/TN at window level."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidInputError("confusion counts must be non-negative")

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class BasicMetrics:
    acc: float
    f1: float
    dr: float
    far: float
    degenerate: bool = False


@dataclass(frozen=True)
class MetricsReport:
    """One experiment run's headline numbers."""

    acc: float
    f1: float
    dr: float
    far: float
    auc: float
    ad_mttd: float
    passed_far_filter: bool


def match_events(preds: PredictionSeries, incidents):
    """Match flagged windows to incident events on one node's timeline.

    An incident counts as detected iff at least one flagged window ends
    inside ``[start, start + duration)``; its detection time is the earliest
    such end.  Flagged windows outside every interval are false positives;
    unflagged truly-normal windows are true negatives.

    Returns ``(ConfusionCounts, detection_times)`` with one entry per
    incident (the window end index, or None when missed), aligned with the
    input incident order.
    """
    for inc in incidents:
        if inc.node_id != preds.node_id:
            raise InvalidInputError(
                f"incident for node {inc.node_id} does not match predictions for {preds.node_id}"
            )
    ends = preds.end_indices
    flags = preds.flags
    in_any = np.zeros(ends.shape[0], dtype=bool)
    detections = []
    tp = 0
    for inc in incidents:
        inside = (ends >= inc.start_index) & (ends < inc.end_index)
        in_any |= inside
        hit = inside & flags
        if hit.any():
            detections.append(int(ends[hit].min()))
            tp += 1
        else:
            detections.append(None)
    normal_windows = ~in_any
    fp = int((flags & normal_windows).sum())
    tn = int((~flags & normal_windows).sum())
    fn = len(incidents) - tp
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn), detections


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    """ACC, F1, DR, FAR with the 0/0 -> 0 convention (flagged degenerate)."""
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    dr = ratio(c.tp, c.tp + c.fn)
    far = ratio(c.fp, c.fp + c.tn)
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    acc = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn)
    return BasicMetrics(acc=acc, f1=f1, dr=dr, far=far, degenerate=degenerate)


def auc(scores, labels) -> tuple[float, bool]:
    """Mann-Whitney rank AUC with ties counted one half.

    ``labels`` are window labels (incident = positive).  Returns
    ``(value, degenerate)``; degenerate inputs (single-class) yield 0.5.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=object)
    pos = labels == INCIDENT
    n_pos = int(pos.sum())
    n_neg = scores.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    ranks = rankdata(scores)
    r_pos = ranks[pos].sum()
    value = (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return float(value), False


def adjusted_mttd(detection_times, incidents) -> float:
    """Mean detection delay in timesteps, missed incidents penalised by duration."""
    if len(incidents) == 0:
        raise InvalidInputError("adjusted MTTD is undefined without incidents")
    if len(detection_times) != len(incidents):
        raise InvalidInputError("one detection entry per incident required")
    total = 0.0
    for det, inc in zip(detection_times, incidents):
        if det is None:
            total += inc.duration
        else:
            delay = det - inc.start_index
            if delay < 0 or delay >= inc.duration:
                raise InvalidInputError(
                    f"detection at {det} outside incident [{inc.start_index}, {inc.end_index})"
                )
            total += delay
    return total / len(incidents)


def far_threshold(scores, labels, cap: float = 0.10) -> float:
    """Lowest anomaly-score threshold whose flags keep FAR <= cap.

    Flags are ``score >= threshold``.  Candidate thresholds are the observed
    scores; if even flagging nothing violates the cap (impossible for
    cap >= 0), returns +inf with a warning.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=object)
    normal_scores = np.sort(scores[labels == NORMAL])
    n_norm = normal_scores.shape[0]
    for t in np.unique(scores):
        flagged = n_norm - np.searchsorted(normal_scores, t, side="left")
        far = flagged / n_norm if n_norm else 0.0
        if far <= cap:
            return float(t)
    warnings.warn("no finite threshold satisfies the FAR cap; flagging nothing", stacklevel=2)
    return float(np.inf)


def write_metrics_csv(path, rows) -> None:
    """Write ``(run_id, model, MetricsReport)`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for run_id, model, rep in rows:
            writer.writerow(
                [run_id, model]
                + [repr(float(v)) for v in (rep.acc, rep.f1, rep.dr, rep.far, rep.auc, rep.ad_mttd)]
                + ["true" if rep.passed_far_filter else "false"]
            )


def read_metrics_csv(path):
    """Parse a file written by :func:`write_metrics_csv`."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise InvalidInputError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        for row in reader:
            if not row:
                continue
            rep = MetricsReport(
                acc=float(row[2]), f1=float(row[3]), dr=float(row[4]), far=float(row[5]),
                auc=float(row[6]), ad_mttd=float(row[7]), passed_far_filter=row[8] == "true",
            )
            rows.append((row[0], row[1], rep))
    return rows
