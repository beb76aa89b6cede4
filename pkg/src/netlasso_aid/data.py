"""Per-region loop-detector series, incident injection, windowing, and splits.

The model input is the upstream-minus-downstream occupancy difference,
windowed into fixed-length feature vectors (default 4 steps of 5 minutes).
The synthetic generator plants cluster structure through per-cluster
occupancy-difference biases: all biases are negative (the downstream section
runs hotter in normal traffic), so the incident signature (+delta upstream,
-delta downstream, i.e. +2*delta on the difference) moves windows into the
anomaly tail of the linear one-class models.  Well-separated cluster biases
are what make a single global boundary conceal incidents on deep-bias
regions while per-cluster models catch them.
"""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, QuotaError
from .ocsvm import INCIDENT, NORMAL

SERIES_HEADER = ["node_id", "timestamp", "occ_up", "occ_down"]
INCIDENT_HEADER = ["node_id", "start_timestamp", "duration_steps"]

_EPOCH = _dt.datetime(2016, 1, 1)


@dataclass(frozen=True)
class TrafficSeries:
    """Occupancy fractions of one region's upstream/downstream detectors."""

    node_id: str
    occ_up: np.ndarray
    occ_down: np.ndarray
    timestep_minutes: int = 5

    def __post_init__(self):
        up = np.asarray(self.occ_up, dtype=float)
        down = np.asarray(self.occ_down, dtype=float)
        if up.shape != down.shape or up.ndim != 1:
            raise InvalidInputError(f"node {self.node_id}: occupancy arrays must be equal-length 1-D")
        for name, arr in (("occ_up", up), ("occ_down", down)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"node {self.node_id}: {name} contains non-finite values")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise InvalidInputError(f"node {self.node_id}: {name} outside [0, 1]")
        if self.timestep_minutes < 1:
            raise InvalidInputError("timestep_minutes must be >= 1")
        object.__setattr__(self, "occ_up", up)
        object.__setattr__(self, "occ_down", down)

    def __len__(self):
        return self.occ_up.shape[0]


@dataclass(frozen=True)
class IncidentRecord:
    """One labelled incident: start timestep and duration in timesteps."""

    node_id: str
    start_index: int
    duration: int

    def __post_init__(self):
        if self.duration < 1:
            raise InvalidInputError(f"node {self.node_id}: incident duration must be >= 1")
        if self.start_index < 0:
            raise InvalidInputError(f"node {self.node_id}: incident start must be >= 0")

    @property
    def end_index(self) -> int:
        """Exclusive end of the interval [start, start + duration)."""
        return self.start_index + self.duration

    def covers(self, t: int) -> bool:
        return self.start_index <= t < self.end_index


def check_incidents(incidents: Sequence[IncidentRecord], series_len: dict | None = None):
    """Validate per-node bounds and pairwise non-overlap."""
    by_node = {}
    for inc in incidents:
        by_node.setdefault(inc.node_id, []).append(inc)
    for nid, incs in by_node.items():
        incs.sort(key=lambda i: i.start_index)
        for a, b in zip(incs, incs[1:]):
            if b.start_index < a.end_index:
                raise InvalidInputError(
                    f"node {nid}: overlapping incidents at {a.start_index} and {b.start_index}"
                )
        if series_len is not None:
            top = series_len.get(nid)
            if top is None:
                raise InvalidInputError(f"incident references unknown node {nid}")
            if incs[-1].end_index > top:
                raise InvalidInputError(f"node {nid}: incident exceeds series length {top}")


@dataclass(frozen=True)
class Dataset:
    """Labelled feature windows, stored columnar for the whole split."""

    node_ids: np.ndarray       # str per window
    end_indices: np.ndarray    # int per window
    X: np.ndarray              # (n_windows, width)
    labels: np.ndarray         # NORMAL / INCIDENT per window
    provenance: str            # "train" or "test"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.X.shape[0]
        if not (len(self.node_ids) == len(self.end_indices) == len(self.labels) == n):
            raise InvalidInputError("dataset columns must have equal length")
        if self.provenance not in ("train", "test"):
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.X.shape[0]

    def for_node(self, node_id: str):
        """(end_indices, X, labels) restricted to one node."""
        mask = self.node_ids == node_id
        return self.end_indices[mask], self.X[mask], self.labels[mask]

    def key_set(self):
        return {(nid, int(e)) for nid, e in zip(self.node_ids, self.end_indices)}


@dataclass(frozen=True)
class ClusterProfile:
    """Daily occupancy shape and difference bias of one region archetype."""

    diff_bias: float = -0.10            # mean up-minus-down occupancy offset
    base_occ: float = 0.30
    amp_morning: float = 0.22
    amp_evening: float = 0.18
    node_bias_step: float = 0.004       # deterministic per-node jitter inside the cluster
    confounder_scale: float = 1.0       # multiplies the global confounder rate
    noise_scale: float = 1.0            # multiplies the global noise level

    def __post_init__(self):
        if not (0.0 <= self.base_occ <= 1.0):
            raise InvalidInputError("base_occ must be in [0, 1]")
        if self.confounder_scale < 0.0 or self.noise_scale < 0.0:
            raise InvalidInputError("per-cluster scales must be >= 0")


DEFAULT_CLUSTER_PROFILES = (
    ClusterProfile(diff_bias=-0.02),
    ClusterProfile(diff_bias=-0.10),
    ClusterProfile(diff_bias=-0.22),
)


@dataclass(frozen=True)
class GeneratorConfig:
    """Deterministic synthetic-scenario settings."""

    n_nodes: int = 24
    cluster_profiles: tuple = DEFAULT_CLUSTER_PROFILES
    cluster_of_node: tuple | None = None      # default: contiguous blocks
    train_days: int = 10
    test_days: int = 2
    records_per_day: int = 264
    timestep_minutes: int = 5
    noise_std: float = 0.03
    incident_rate: float = 0.8                # per node per test day
    incident_delta: float = 0.08
    duration_range: tuple = (4, 8)            # inclusive, in timesteps
    confounder_rate: float = 0.5              # per node per day
    confounder_magnitude: float = 0.10
    confounder_len_range: tuple = (1, 2)
    window: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise InvalidInputError("n_nodes must be >= 1")
        if not self.cluster_profiles:
            raise InvalidInputError("need at least one cluster profile")
        if self.cluster_of_node is not None:
            assignment = tuple(int(c) for c in self.cluster_of_node)
            if len(assignment) != self.n_nodes:
                raise InvalidInputError("cluster_of_node must assign every node")
            if any(c < 0 or c >= len(self.cluster_profiles) for c in assignment):
                raise InvalidInputError("cluster_of_node references unknown profile")
            object.__setattr__(self, "cluster_of_node", assignment)
        for name in ("incident_rate", "confounder_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must be in [0, 1], got {v}")
        if not (self.incident_delta > 0.0):
            raise InvalidInputError("incident_delta must be > 0")
        lo, hi = self.duration_range
        if not (1 <= lo <= hi):
            raise InvalidInputError("bad duration_range")
        if hi > self.records_per_day:
            raise InvalidInputError(
                f"incident duration up to {hi} exceeds one day of {self.records_per_day} records"
            )
        if self.train_days < 1 or self.test_days < 0:
            raise InvalidInputError("train_days must be >= 1 and test_days >= 0")
        if self.window < 1:
            raise InvalidInputError("window must be >= 1")
        if self.noise_std < 0.0:
            raise InvalidInputError("noise_std must be >= 0")

    @property
    def days(self) -> int:
        return self.train_days + self.test_days

    @property
    def train_end_index(self) -> int:
        return self.train_days * self.records_per_day

    def assignment(self) -> tuple:
        if self.cluster_of_node is not None:
            return self.cluster_of_node
        n_clusters = len(self.cluster_profiles)
        block = int(np.ceil(self.n_nodes / n_clusters))
        return tuple(min(i // block, n_clusters - 1) for i in range(self.n_nodes))

    def node_ids(self) -> list:
        width = max(2, len(str(self.n_nodes)))
        return [f"{i + 1:0{width}d}" for i in range(self.n_nodes)]


def node_bias(cfg: GeneratorConfig, node_index: int) -> float:
    """Mean occupancy-difference offset of one node (cluster bias + jitter)."""
    assignment = cfg.assignment()
    c = assignment[node_index]
    members = [i for i, a in enumerate(assignment) if a == c]
    pos = members.index(node_index)
    prof = cfg.cluster_profiles[c]
    return prof.diff_bias + (pos - (len(members) - 1) / 2.0) * prof.node_bias_step


def _daily_baseline(prof: ClusterProfile, rpd: int) -> np.ndarray:
    t = np.arange(rpd) / rpd
    morning = prof.amp_morning * np.exp(-0.5 * ((t - 8.0 / 24.0) / (1.5 / 24.0)) ** 2)
    evening = prof.amp_evening * np.exp(-0.5 * ((t - 17.5 / 24.0) / (1.8 / 24.0)) ** 2)
    return prof.base_occ + morning + evening


def incident_ramp(duration: int) -> np.ndarray:
    """Rise/plateau/fall profile peaking at exactly 1."""
    r = max(1, duration // 3)
    i = np.arange(duration)
    return np.minimum(np.minimum(i + 1, duration - i), r) / r


def generate_synthetic(cfg: GeneratorConfig):
    """Build per-node series and incident lists; pure function of ``cfg``.

    Incidents are placed only in test-designated days.  Confounder pulses
    (brief incident-like bumps of the occupancy difference) occur in all
    days at ``confounder_rate`` and stay unlabelled.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_nodes)
    assignment = cfg.assignment()
    ids = cfg.node_ids()
    rpd = cfg.records_per_day
    total = cfg.days * rpd
    series = []
    incidents = []
    lo_d, hi_d = cfg.duration_range
    lo_c, hi_c = cfg.confounder_len_range
    for i, nid in enumerate(ids):
        rng = np.random.default_rng(seeds[i])
        prof = cfg.cluster_profiles[assignment[i]]
        base = np.tile(_daily_baseline(prof, rpd), cfg.days)
        bias = node_bias(cfg, i)
        sigma = cfg.noise_std * prof.noise_scale
        up = base + rng.normal(0.0, sigma, total)
        down = base - bias + rng.normal(0.0, sigma, total)
        conf_rate = min(1.0, cfg.confounder_rate * prof.confounder_scale)
        for day in range(cfg.days):
            day0 = day * rpd
            if rng.random() < conf_rate:
                length = int(rng.integers(lo_c, hi_c + 1))
                start = day0 + int(rng.integers(0, rpd - length + 1))
                up[start : start + length] += cfg.confounder_magnitude
            if day >= cfg.train_days and rng.random() < cfg.incident_rate:
                dur = int(rng.integers(lo_d, hi_d + 1))
                start = day0 + int(rng.integers(0, rpd - dur + 1))
                bump = cfg.incident_delta * incident_ramp(dur)
                up[start : start + dur] += bump
                down[start : start + dur] -= bump
                incidents.append(IncidentRecord(nid, start, dur))
        series.append(
            TrafficSeries(nid, np.clip(up, 0.0, 1.0), np.clip(down, 0.0, 1.0), cfg.timestep_minutes)
        )
    check_incidents(incidents, {s.node_id: len(s) for s in series})
    return series, incidents


def occupancy_difference(s: TrafficSeries) -> np.ndarray:
    """Elementwise upstream minus downstream occupancy, in [-1, 1]."""
    return s.occ_up - s.occ_down


def windowize(diff: np.ndarray, width: int = 4, incidents: Sequence[IncidentRecord] = ()):
    """Stride-1 sliding windows with end-of-window incident labels.

    Returns ``(end_indices, X, labels)``; a window is labelled incident iff
    its last timestep lies inside an incident interval.
    """
    diff = np.asarray(diff, dtype=float)
    if width < 1:
        raise InvalidInputError("width must be >= 1")
    if diff.shape[0] < width:
        raise InvalidInputError(f"series of length {diff.shape[0]} shorter than window {width}")
    X = sliding_window_view(diff, width).copy()
    ends = np.arange(width - 1, diff.shape[0])
    labels = np.full(ends.shape[0], NORMAL, dtype=object)
    for inc in incidents:
        inside = (ends >= inc.start_index) & (ends < inc.end_index)
        labels[inside] = INCIDENT
    return ends, X, labels


@dataclass(frozen=True)
class SplitSpec:
    """Train/test split quotas following the evaluation protocol."""

    train_end_index: int
    test_total: int = 1200
    incident_fraction: float = 0.05
    seed: int = 0
    train_records_target_per_node: int = 2640

    def __post_init__(self):
        if self.train_end_index < 1:
            raise InvalidInputError("train_end_index must be >= 1")
        if not (0.0 < self.incident_fraction < 1.0):
            raise InvalidInputError("incident_fraction must be in (0, 1)")
        if self.test_total < 1:
            raise InvalidInputError("test_total must be >= 1")


def _window_span_overlaps(end: int, width: int, incs: Sequence[IncidentRecord]) -> bool:
    start = end - width + 1
    return any(inc.start_index <= end and start < inc.end_index for inc in incs)


def make_splits(windows_by_node: dict, incidents: Sequence[IncidentRecord], spec: SplitSpec):
    """Assemble the train and test datasets.

    ``windows_by_node`` maps node_id to ``(end_indices, X, labels)`` from
    :func:`windowize` (node order is preserved in the output).  Train takes
    every clean window ending before ``train_end_index``; test mixes
    incident and unseen-normal windows to the configured global quota.
    Whole incidents are sampled in random order until the incident quota is
    met (the last one is trimmed from its tail if needed), so sampled
    incidents remain detectable from their earliest windows.
    """
    rng = np.random.default_rng(spec.seed)
    node_order = list(windows_by_node)
    incs_by_node = {nid: [] for nid in node_order}
    for inc in incidents:
        if inc.node_id in incs_by_node:
            incs_by_node[inc.node_id].append(inc)

    width = next(iter(windows_by_node.values()))[1].shape[1]
    n_inc_quota = int(round(spec.test_total * spec.incident_fraction))
    n_norm_quota = spec.test_total - n_inc_quota

    tr_cols = {"nid": [], "end": [], "X": [], "lab": []}
    te_cols = {"nid": [], "end": [], "X": [], "lab": []}
    train_counts = {}
    norm_pool = {}
    for nid in node_order:
        ends, X, labels = windows_by_node[nid]
        incs = incs_by_node[nid]
        contaminated = np.array([_window_span_overlaps(int(e), width, incs) for e in ends])
        is_inc = labels == INCIDENT
        train_mask = (ends < spec.train_end_index) & ~is_inc & ~contaminated
        tr_cols["nid"].append(np.full(train_mask.sum(), nid, dtype=object))
        tr_cols["end"].append(ends[train_mask])
        tr_cols["X"].append(X[train_mask])
        tr_cols["lab"].append(labels[train_mask])
        train_counts[nid] = int(train_mask.sum())
        norm_pool[nid] = np.flatnonzero((ends >= spec.train_end_index) & ~is_inc & ~contaminated)

    # per-node normal quotas, as even as possible in node order
    m = len(node_order)
    base, extra = divmod(n_norm_quota, m)
    quotas = {nid: base + (1 if i < extra else 0) for i, nid in enumerate(node_order)}
    deficits = {
        nid: quotas[nid] - norm_pool[nid].size
        for nid in node_order
        if norm_pool[nid].size < quotas[nid]
    }
    if deficits:
        raise QuotaError(
            "not enough unseen normal test windows; per-node deficits: "
            + ", ".join(f"{nid}:{d}" for nid, d in deficits.items())
        )

    # incident windows grouped per incident event
    events = []
    for nid in node_order:
        ends, X, labels = windows_by_node[nid]
        for inc in sorted(incs_by_node[nid], key=lambda r: r.start_index):
            idx = np.flatnonzero(
                (ends >= inc.start_index) & (ends < inc.end_index) & (ends >= spec.train_end_index)
            )
            if idx.size:
                events.append((inc, nid, idx))
    available = sum(idx.size for _inc, _nid, idx in events)
    if available < n_inc_quota:
        raise QuotaError(
            f"not enough incident test windows: need {n_inc_quota}, have {available}"
        )
    order = rng.permutation(len(events))
    picked = []
    sampled_incidents = []
    count = 0
    for ei in order:
        if count >= n_inc_quota:
            break
        inc, nid, idx = events[ei]
        take = idx[: n_inc_quota - count]
        picked.append((nid, take))
        sampled_incidents.append(inc)
        count += take.size

    for nid in node_order:
        pool = norm_pool[nid]
        sel = np.sort(rng.choice(pool, size=quotas[nid], replace=False))
        inc_sel = np.concatenate([take for n2, take in picked if n2 == nid] or [np.array([], dtype=int)])
        both = np.concatenate([sel, np.sort(inc_sel)]).astype(int)
        ends, X, labels = windows_by_node[nid]
        te_cols["nid"].append(np.full(both.size, nid, dtype=object))
        te_cols["end"].append(ends[both])
        te_cols["X"].append(X[both])
        te_cols["lab"].append(labels[both])

    sampled_incidents.sort(key=lambda r: (r.node_id, r.start_index))
    meta = {
        "train_records_target_per_node": spec.train_records_target_per_node,
        "train_records_actual": train_counts,
        "incidents": tuple(sampled_incidents),
        "test_quota": (n_inc_quota, n_norm_quota),
    }
    train = Dataset(
        np.concatenate(tr_cols["nid"]), np.concatenate(tr_cols["end"]),
        np.vstack(tr_cols["X"]), np.concatenate(tr_cols["lab"]),
        "train", {"train_records_actual": train_counts},
    )
    test = Dataset(
        np.concatenate(te_cols["nid"]), np.concatenate(te_cols["end"]),
        np.vstack(te_cols["X"]), np.concatenate(te_cols["lab"]),
        "test", meta,
    )
    return train, test


# -- CSV interfaces -----------------------------------------------------------


def _ts(index: int, step_minutes: int) -> str:
    return (_EPOCH + _dt.timedelta(minutes=index * step_minutes)).isoformat()


def _parse_ts(text: str, path: str, lineno: int) -> _dt.datetime:
    try:
        return _dt.datetime.fromisoformat(text)
    except ValueError as err:
        raise InvalidInputError(f"{path}:{lineno}: bad timestamp {text!r}") from err


def write_series_csv(path, series: Sequence[TrafficSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SERIES_HEADER)
        for s in series:
            for t in range(len(s)):
                writer.writerow(
                    [s.node_id, _ts(t, s.timestep_minutes), repr(float(s.occ_up[t])), repr(float(s.occ_down[t]))]
                )


def write_incidents_csv(path, incidents: Sequence[IncidentRecord], step_minutes: int = 5) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INCIDENT_HEADER)
        for inc in incidents:
            writer.writerow([inc.node_id, _ts(inc.start_index, step_minutes), inc.duration])


def load_csv(series_path, incidents_path=None, timestep_minutes: int = 5):
    """Parse and validate series (and optionally incident) CSV files.

    Occupancy values must be finite and inside [0, 1]; violations are
    reported with their file and line number.  Returns
    ``(list of TrafficSeries, list of IncidentRecord)``.
    """
    rows_by_node: dict = {}
    order = []
    with open(series_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SERIES_HEADER:
            raise InvalidInputError(
                f"{series_path}: expected header {','.join(SERIES_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InvalidInputError(f"{series_path}:{lineno}: expected 4 columns")
            nid = row[0]
            ts = _parse_ts(row[1], str(series_path), lineno)
            try:
                up, down = float(row[2]), float(row[3])
            except ValueError as err:
                raise InvalidInputError(f"{series_path}:{lineno}: {err}") from err
            if not (np.isfinite(up) and np.isfinite(down)):
                raise InvalidInputError(f"{series_path}:{lineno}: non-finite occupancy")
            if not (0.0 <= up <= 1.0 and 0.0 <= down <= 1.0):
                raise InvalidInputError(f"{series_path}:{lineno}: occupancy outside [0, 1]")
            if nid not in rows_by_node:
                rows_by_node[nid] = []
                order.append(nid)
            rows_by_node[nid].append((ts, up, down))

    series = []
    start_ts = {}
    for nid in order:
        rows = rows_by_node[nid]
        step = _dt.timedelta(minutes=timestep_minutes)
        for a, b in zip(rows, rows[1:]):
            if b[0] - a[0] != step:
                raise InvalidInputError(
                    f"{series_path}: node {nid}: timestamps not on a {timestep_minutes}-minute cadence"
                )
        start_ts[nid] = rows[0][0]
        series.append(
            TrafficSeries(
                nid,
                np.array([r[1] for r in rows]),
                np.array([r[2] for r in rows]),
                timestep_minutes,
            )
        )

    incidents = []
    if incidents_path is not None:
        with open(incidents_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != INCIDENT_HEADER:
                raise InvalidInputError(
                    f"{incidents_path}: expected header {','.join(INCIDENT_HEADER)}, got {header}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                nid = row[0]
                if nid not in start_ts:
                    raise InvalidInputError(
                        f"{incidents_path}:{lineno}: incident for unknown node {nid}"
                    )
                ts = _parse_ts(row[1], str(incidents_path), lineno)
                offset = (ts - start_ts[nid]).total_seconds() / 60.0
                idx = offset / timestep_minutes
                if idx != int(idx) or idx < 0:
                    raise InvalidInputError(
                        f"{incidents_path}:{lineno}: start not aligned to the series cadence"
                    )
                incidents.append(IncidentRecord(nid, int(idx), int(row[2])))
        check_incidents(incidents, {s.node_id: len(s) for s in series})
    return series, incidents


def dataset_header(width: int) -> list:
    return ["node_id", "end_index"] + [f"f{i + 1}" for i in range(width)] + ["label"]


def write_dataset_csv(path, ds: Dataset) -> None:
    width = ds.X.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset_header(width))
        for i in range(len(ds)):
            writer.writerow(
                [ds.node_ids[i], int(ds.end_indices[i])]
                + [repr(float(v)) for v in ds.X[i]]
                + [ds.labels[i]]
            )


def read_dataset_csv(path, provenance: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4 or header[:2] != ["node_id", "end_index"] or header[-1] != "label":
            raise InvalidInputError(f"{path}: malformed dataset header {header}")
        width = len(header) - 3
        nids, ends, X, labels = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 3:
                raise InvalidInputError(f"{path}:{lineno}: expected {width + 3} columns")
            if row[-1] not in (NORMAL, INCIDENT):
                raise InvalidInputError(f"{path}:{lineno}: unknown label {row[-1]!r}")
            nids.append(row[0])
            ends.append(int(row[1]))
            X.append([float(v) for v in row[2:-1]])
            labels.append(row[-1])
    return Dataset(
        np.array(nids, dtype=object),
        np.array(ends, dtype=int),
        np.array(X, dtype=float) if X else np.empty((0, width)),
        np.array(labels, dtype=object),
        provenance,
    )
