"""Coupling-graph construction: road adjacency fused with geometric similarity.

The initial graph follows the road network; additional edges connect region
pairs whose geometric profiles (location class, sub-streets, adjacent-road
configuration, lane count) match above a threshold.  Road-only and geo-only
variants support the graph-design ablation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InvalidInputError

ORIGIN_ROAD = "road"
ORIGIN_GEO = "geo"

LOCATION_CLASSES = ("cbd", "urban", "suburban", "rural")
ADJACENT_CONFIGS = ("merge", "diverge", "plain", "intersection")

#: attribute weights of the similarity score and the default match threshold
SIM_WEIGHTS = {"location_class": 0.4, "has_sub_streets": 0.2, "adjacent_config": 0.3, "lane_count": 0.1}
DEFAULT_TAU = 0.6


@dataclass(frozen=True)
class RegionProfile:
    """Static description of one traffic region."""

    node_id: object
    lat: float
    lon: float
    location_class: str
    has_sub_streets: bool
    adjacent_config: str
    lane_count: int

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise InvalidInputError(f"node {self.node_id}: coordinates out of range")
        if self.location_class not in LOCATION_CLASSES:
            raise InvalidInputError(
                f"node {self.node_id}: unknown location_class {self.location_class!r}"
            )
        if self.adjacent_config not in ADJACENT_CONFIGS:
            raise InvalidInputError(
                f"node {self.node_id}: unknown adjacent_config {self.adjacent_config!r}"
            )
        if self.lane_count < 1:
            raise InvalidInputError(f"node {self.node_id}: lane_count must be >= 1")


@dataclass(frozen=True)
class FusedGraph:
    """Node ids plus undirected weighted edges tagged with their origin."""

    node_ids: tuple
    edges: tuple  # of (j, k, weight, origin), j/k in node order

    def edge_pairs(self):
        return {(j, k) for j, k, _w, _o in self.edges}

    def as_problem_edges(self):
        """Edge list in the (j, k, a_jk) form the solver graph expects."""
        return [(j, k, w) for j, k, w, _origin in self.edges]


def _ordered(j, k):
    try:
        return (j, k) if j <= k else (k, j)
    except TypeError:
        return (j, k) if str(j) <= str(k) else (k, j)


def build_road_graph(node_ids: Sequence, adjacency: Iterable[tuple], weight: float = 1.0) -> FusedGraph:
    """Edges from physical road adjacency; duplicates collapse to one edge."""
    ids = tuple(node_ids)
    id_set = set(ids)
    if len(id_set) != len(ids):
        raise InvalidInputError("duplicate node ids")
    seen = {}
    for j, k in adjacency:
        if j not in id_set or k not in id_set:
            raise InvalidInputError(f"adjacency references unknown node ({j}, {k})")
        if j == k:
            raise InvalidInputError(f"self-loop at node {j}")
        key = _ordered(j, k)
        seen[key] = (key[0], key[1], float(weight), ORIGIN_ROAD)
    edges = tuple(seen[key] for key in sorted(seen, key=lambda e: (str(e[0]), str(e[1]))))
    return FusedGraph(ids, edges)


def geo_similarity(p: RegionProfile, q: RegionProfile) -> float:
    """Weighted attribute-match score in [0, 1]; symmetric by construction.

    Summed in tenths so that exact attribute agreement scores exactly 1.0.
    """
    tenths = 0
    if p.location_class == q.location_class:
        tenths += 4
    if p.has_sub_streets == q.has_sub_streets:
        tenths += 2
    if p.adjacent_config == q.adjacent_config:
        tenths += 3
    if abs(p.lane_count - q.lane_count) <= 1:
        tenths += 1
    return tenths / 10.0


def build_geo_graph(profiles: Sequence[RegionProfile], tau: float = DEFAULT_TAU, weight: float = 1.0) -> FusedGraph:
    """Edges between every profile pair with similarity >= tau."""
    ids = tuple(p.node_id for p in profiles)
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate node ids in profiles")
    edges = []
    for i, p in enumerate(profiles):
        for q in profiles[i + 1 :]:
            if geo_similarity(p, q) >= tau:
                j, k = _ordered(p.node_id, q.node_id)
                edges.append((j, k, float(weight), ORIGIN_GEO))
    edges.sort(key=lambda e: (str(e[0]), str(e[1])))
    return FusedGraph(ids, tuple(edges))


def fuse_graph(
    road: FusedGraph,
    profiles: Sequence[RegionProfile],
    tau: float = DEFAULT_TAU,
    geo_weight: float = 1.0,
) -> FusedGraph:
    """Union of road edges and similarity edges; road wins the origin label."""
    profile_ids = {p.node_id for p in profiles}
    missing = [nid for nid in road.node_ids if nid not in profile_ids]
    if missing:
        raise InvalidInputError(f"profiles missing for nodes: {missing}")
    merged = {(_ordered(j, k)): (j, k, w, o) for j, k, w, o in road.edges}
    geo = build_geo_graph(profiles, tau, geo_weight)
    for j, k, w, o in geo.edges:
        merged.setdefault(_ordered(j, k), (j, k, w, o))
    edges = tuple(merged[key] for key in sorted(merged, key=lambda e: (str(e[0]), str(e[1]))))
    return FusedGraph(road.node_ids, edges)


def ablation_variant(
    kind: str,
    node_ids: Sequence,
    adjacency: Iterable[tuple],
    profiles: Sequence[RegionProfile],
    tau: float = DEFAULT_TAU,
) -> FusedGraph:
    """Build the road-only, geo-only, or fused coupling graph."""
    if kind == "road":
        return build_road_graph(node_ids, adjacency)
    if kind == "geo":
        if {p.node_id for p in profiles} != set(node_ids):
            raise InvalidInputError("profiles must cover exactly the given node_ids")
        geo = build_geo_graph(profiles, tau)
        return FusedGraph(tuple(node_ids), geo.edges)
    if kind == "fused":
        return fuse_graph(build_road_graph(node_ids, adjacency), profiles, tau)
    raise InvalidInputError(f"unknown graph variant {kind!r}; expected road|geo|fused")


# -- CSV interfaces -----------------------------------------------------------

PROFILE_HEADER = ["node_id", "lat", "lon", "location_class", "has_sub_streets", "adjacent_config", "lane_count"]
ADJACENCY_HEADER = ["from", "to"]
GRAPH_HEADER = ["from", "to", "weight", "origin"]


def _check_header(got, want, path):
    if got != want:
        raise InvalidInputError(f"{path}: expected header {','.join(want)}, got {got}")


def read_profiles_csv(path) -> list[RegionProfile]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, PROFILE_HEADER, path)
        profiles = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                profiles.append(
                    RegionProfile(
                        node_id=row[0],
                        lat=float(row[1]),
                        lon=float(row[2]),
                        location_class=row[3],
                        has_sub_streets=row[4].strip().lower() in ("1", "true", "yes"),
                        adjacent_config=row[5],
                        lane_count=int(row[6]),
                    )
                )
            except (IndexError, ValueError) as err:
                raise InvalidInputError(f"{path}:{lineno}: {err}") from err
    return profiles


def write_profiles_csv(path, profiles: Sequence[RegionProfile]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROFILE_HEADER)
        for p in profiles:
            writer.writerow(
                [p.node_id, repr(p.lat), repr(p.lon), p.location_class,
                 "true" if p.has_sub_streets else "false", p.adjacent_config, p.lane_count]
            )


def read_adjacency_csv(path) -> list[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, ADJACENCY_HEADER, path)
        return [(row[0], row[1]) for row in reader if row]


def write_adjacency_csv(path, adjacency: Iterable[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ADJACENCY_HEADER)
        for j, k in adjacency:
            writer.writerow([j, k])


def write_graph_csv(path, graph: FusedGraph) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GRAPH_HEADER)
        for j, k, w, origin in graph.edges:
            writer.writerow([j, k, repr(w), origin])


def read_graph_csv(path, node_ids: Sequence) -> FusedGraph:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, GRAPH_HEADER, path)
        edges = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[3] not in (ORIGIN_ROAD, ORIGIN_GEO):
                raise InvalidInputError(f"{path}:{lineno}: unknown origin {row[3]!r}")
            edges.append((row[0], row[1], float(row[2]), row[3]))
    return FusedGraph(tuple(node_ids), tuple(edges))
