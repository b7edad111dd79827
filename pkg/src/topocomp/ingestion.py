"""Topology and traffic ingestion: SNDlib XML, routing, CSV series, windowing.

Supported SNDlib XML subset (namespaces are ignored)::

    <network>
      <meta><time>2004-03-01T00:00</time><granularity>5min</granularity></meta>   (optional)
      <networkStructure>
        <nodes><node id="A"/> ...</nodes>
        <links><link id="A_B"><source>A</source><target>B</target></link> ...</links>
      </networkStructure>
      <demands time="...">                                        (zero or more blocks)
        <demand id="A_B"><source>A</source><target>B</target><demandValue>1.5</demandValue></demand>
      </demands>
    </network>

Links are directed unless ``undirected=True``, in which case every ``<link>``
yields two arcs (source->target then target->source). Further files passed
to :func:`parse_topology_and_demands` may omit ``<networkStructure>``; each
``<demands>`` block is one interval. Blocks are ordered by their timestamp
(the ``time`` attribute or ``<meta><time>``), ties and untimed blocks keeping
file order.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetTooSmallError, ParseError, ValidationError

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class NetworkTopology:
    """Nodes plus directed links; a link's id is its position in ``links``."""

    nodes: tuple[str, ...]
    links: tuple[tuple[str, str], ...]
    link_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple((str(s), str(t)) for s, t in self.links))
        names = tuple(self.link_names) or tuple(f"{s}_{t}" for s, t in self.links)
        object.__setattr__(self, "link_names", names)
        if len(set(self.nodes)) != len(self.nodes):
            raise ValidationError("duplicate node identifiers")
        if len(names) != len(self.links):
            raise ValidationError("link_names and links differ in length")
        known = set(self.nodes)
        seen = set()
        for i, (s, t) in enumerate(self.links):
            if s not in known or t not in known:
                raise ValidationError(f"link {names[i]!r} references unknown node")
            if s == t:
                raise ValidationError(f"link {names[i]!r} is a self-loop")
            if (s, t) in seen:
                raise ValidationError(f"duplicate link {s}->{t}")
            seen.add((s, t))

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def node_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.nodes)}

    def link_array(self) -> np.ndarray:
        """Links as an (N, 2) array of node indices."""
        idx = self.node_index
        return np.array([[idx[s], idx[t]] for s, t in self.links], dtype=np.intp).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "links": [list(l) for l in self.links],
            "link_names": list(self.link_names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkTopology":
        return cls(tuple(data["nodes"]), tuple(tuple(l) for l in data["links"]), tuple(data["link_names"]))


@dataclass
class DemandSeries:
    """Time-ordered origin-destination matrices, ``matrices[t, s, d]``."""

    nodes: tuple[str, ...]
    matrices: np.ndarray
    times: list[str | None] = field(default_factory=list)


@dataclass
class LinkSeries:
    """Per-link traffic: ``values[link, interval]`` with a missing-value mask."""

    values: np.ndarray
    mask: np.ndarray
    link_names: tuple[str, ...]
    interval_seconds: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.link_names = tuple(self.link_names)
        if self.values.ndim != 2 or self.mask.shape != self.values.shape:
            raise ValidationError("values and mask must be matching 2-d arrays")
        if len(self.link_names) != self.values.shape[0]:
            raise ValidationError(
                f"{len(self.link_names)} link names for {self.values.shape[0]} rows"
            )

    @property
    def n_links(self) -> int:
        return self.values.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# SNDlib XML


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _child(elem, name):
    for c in elem:
        if _local(c.tag) == name:
            return c
    return None


def _children(elem, name):
    return [c for c in elem if _local(c.tag) == name]


def _text(elem, name, where) -> str:
    c = _child(elem, name)
    if c is None or c.text is None or not c.text.strip():
        raise ParseError(f"{where}: <{_local(elem.tag)}> lacks <{name}>")
    return c.text.strip()


def _read_xml(path) -> ET.Element:
    try:
        return ET.parse(path).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"{path}: malformed XML at line {line}, column {col}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc


def _parse_structure(root, where, undirected):
    struct = _child(root, "networkStructure")
    if struct is None:
        return None
    nodes_el = _child(struct, "nodes")
    links_el = _child(struct, "links")
    if nodes_el is None or links_el is None:
        raise ParseError(f"{where}: <networkStructure> needs <nodes> and <links>")
    nodes = []
    for n in _children(nodes_el, "node"):
        nid = n.get("id")
        if not nid:
            raise ParseError(f"{where}: <node> without id attribute")
        nodes.append(nid)
    links, names = [], []
    for l in _children(links_el, "link"):
        lid = l.get("id") or ""
        s = _text(l, "source", f"{where}: link {lid!r}")
        t = _text(l, "target", f"{where}: link {lid!r}")
        links.append((s, t))
        names.append(lid or f"{s}_{t}")
        if undirected:
            links.append((t, s))
            names.append(f"{lid or f'{s}_{t}'}~rev")
    try:
        return NetworkTopology(tuple(nodes), tuple(links), tuple(names))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _parse_demand_blocks(root, where, node_index):
    meta = _child(root, "meta")
    default_time = None
    if meta is not None and _child(meta, "time") is not None:
        default_time = (_child(meta, "time").text or "").strip() or None
    n = len(node_index)
    blocks = []
    for block in _children(root, "demands"):
        mat = np.zeros((n, n))
        for dem in _children(block, "demand"):
            did = dem.get("id", "")
            s = _text(dem, "source", f"{where}: demand {did!r}")
            t = _text(dem, "target", f"{where}: demand {did!r}")
            for end in (s, t):
                if end not in node_index:
                    raise ValidationError(f"{where}: demand {did!r} references unknown node {end!r}")
            raw = _text(dem, "demandValue", f"{where}: demand {did!r}")
            try:
                value = float(raw)
            except ValueError as exc:
                raise ParseError(f"{where}: demand {did!r} has non-numeric value {raw!r}") from exc
            mat[node_index[s], node_index[t]] += value
        blocks.append((block.get("time") or default_time, mat))
    return blocks


def parse_topology_and_demands(paths, undirected: bool = False):
    """Read a topology and its demand intervals from one or more SNDlib XML files.

    The first file holding ``<networkStructure>`` defines the topology.
    Returns ``(NetworkTopology, DemandSeries)``.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    roots = [(str(p), _read_xml(p)) for p in paths]
    topology = None
    for where, root in roots:
        topology = _parse_structure(root, where, undirected)
        if topology is not None:
            break
    if topology is None:
        raise ParseError("no <networkStructure> found in " + ", ".join(str(p) for p in paths))
    index = topology.node_index
    blocks = []
    for where, root in roots:
        blocks.extend(_parse_demand_blocks(root, where, index))
    order = sorted(range(len(blocks)), key=lambda i: (blocks[i][0] is None, blocks[i][0] or "", i))
    n = len(topology.nodes)
    mats = np.stack([blocks[i][1] for i in order]) if blocks else np.zeros((0, n, n))
    return topology, DemandSeries(topology.nodes, mats, [blocks[i][0] for i in order])


def write_sndlib(path, topology: NetworkTopology, demands: DemandSeries | None = None) -> None:
    """Write ``topology`` (and optionally demand blocks) in the supported subset."""
    root = ET.Element("network", {"version": "1.0"})
    struct = ET.SubElement(root, "networkStructure")
    nodes_el = ET.SubElement(struct, "nodes")
    for n in topology.nodes:
        ET.SubElement(nodes_el, "node", {"id": n})
    links_el = ET.SubElement(struct, "links")
    for name, (s, t) in zip(topology.link_names, topology.links):
        l = ET.SubElement(links_el, "link", {"id": name})
        ET.SubElement(l, "source").text = s
        ET.SubElement(l, "target").text = t
    if demands is not None:
        for k, mat in enumerate(demands.matrices):
            attrs = {}
            if demands.times and demands.times[k]:
                attrs["time"] = demands.times[k]
            block = ET.SubElement(root, "demands", attrs)
            for i, j in zip(*np.nonzero(mat)):
                d = ET.SubElement(block, "demand", {"id": f"{topology.nodes[i]}_{topology.nodes[j]}"})
                ET.SubElement(d, "source").text = topology.nodes[i]
                ET.SubElement(d, "target").text = topology.nodes[j]
                ET.SubElement(d, "demandValue").text = repr(float(mat[i, j]))
    ET.indent(root)
    _atomic_write(path, ET.tostring(root, encoding="unicode").encode() + b"\n")


# ---------------------------------------------------------------------------
# routing


def shortest_paths(topology: NetworkTopology) -> dict[tuple[int, int], list[int] | None]:
    """Hop-count shortest path between every ordered node pair, as link ids.

    Among equal-length paths the one whose node-index sequence is
    lexicographically smallest wins (node index = position in
    ``topology.nodes``). Unreachable pairs map to ``None``.
    """
    n = len(topology.nodes)
    arcs = topology.link_array()
    out_adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    in_adj: list[list[int]] = [[] for _ in range(n)]
    for lid, (s, t) in enumerate(arcs):
        out_adj[s].append((int(t), lid))
        in_adj[t].append(int(s))
    for lst in out_adj:
        lst.sort()

    routes: dict[tuple[int, int], list[int] | None] = {}
    for dst in range(n):
        dist = [-1] * n
        dist[dst] = 0
        queue = deque([dst])
        while queue:
            u = queue.popleft()
            for w in in_adj[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        for src in range(n):
            if src == dst:
                routes[(src, dst)] = []
                continue
            if dist[src] < 0:
                routes[(src, dst)] = None
                continue
            path, u = [], src
            while u != dst:
                nxt, lid = next((v, l) for v, l in out_adj[u] if dist[v] == dist[u] - 1)
                path.append(lid)
                u = nxt
            routes[(src, dst)] = path
    return routes


def routing_matrix(topology: NetworkTopology, routes=None) -> np.ndarray:
    """(N links) x (n*n OD pairs) 0/1 matrix; unreachable pairs get zero columns."""
    n = len(topology.nodes)
    routes = routes if routes is not None else shortest_paths(topology)
    mat = np.zeros((topology.n_links, n * n))
    for (s, t), path in routes.items():
        if path:
            mat[path, s * n + t] = 1.0
    return mat


def route_demands(topology: NetworkTopology, demands) -> LinkSeries:
    """Per-interval link loads from single-path shortest-hop routing of every demand."""
    mats = demands.matrices if isinstance(demands, DemandSeries) else np.asarray(demands, dtype=np.float64)
    if mats.ndim == 2:
        mats = mats[None]
    n = len(topology.nodes)
    if mats.shape[1:] != (n, n):
        raise ValidationError(f"demand matrices have shape {mats.shape[1:]}, topology has {n} nodes")
    routes = shortest_paths(topology)
    stuck = [
        f"{topology.nodes[s]}->{topology.nodes[t]}"
        for (s, t), path in sorted(routes.items())
        if path is None and np.any(mats[:, s, t] != 0)
    ]
    if stuck:
        raise ValidationError("no route for demand pair(s): " + ", ".join(stuck))
    loads = routing_matrix(topology, routes) @ mats.reshape(len(mats), n * n).T
    return LinkSeries(loads, np.zeros_like(loads, dtype=bool), topology.link_names)


# ---------------------------------------------------------------------------
# CSV link series


def load_csv_series(path, interval_seconds: float | None = None) -> LinkSeries:
    """Read a CSV whose header names the links and whose rows are intervals."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    n = len(header)
    values = np.zeros((n, len(rows) - 1))
    mask = np.zeros((n, len(rows) - 1), dtype=bool)
    for r, row in enumerate(rows[1:]):
        if len(row) != n:
            raise ParseError(f"{path}: row {r + 2} has {len(row)} cells, header has {n}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if not cell:
                mask[c, r] = True
                values[c, r] = np.nan
                continue
            try:
                values[c, r] = float(cell)
            except ValueError as exc:
                raise ParseError(f"{path}: row {r + 2}, column {c + 1}: bad number {cell!r}") from exc
    return LinkSeries(values, mask, tuple(header), interval_seconds)


def write_csv_series(path, series: LinkSeries) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(series.link_names)
    for t in range(series.n_intervals):
        writer.writerow(
            "" if series.mask[i, t] else repr(float(series.values[i, t])) for i in range(series.n_links)
        )
    _atomic_write(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# windowing, normalization and split


@dataclass
class TrafficDataset:
    """Clean windows of shape (M, N, d) with split tags and min-max constants."""

    windows: np.ndarray
    starts: np.ndarray
    splits: np.ndarray
    norm_min: float
    norm_max: float
    d: int
    seed: int
    link_names: tuple[str, ...]
    topology: NetworkTopology | None = None
    interval_seconds: float | None = None

    @property
    def n_links(self) -> int:
        return self.windows.shape[1]

    @property
    def scale(self) -> float:
        span = self.norm_max - self.norm_min
        return span if span > 0 else 1.0

    def normalize(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.norm_min) / self.scale

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.scale + self.norm_min

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def subsignals(self, split: str) -> np.ndarray:
        """Normalized windows of one split, in ascending window order."""
        return self.normalize(self.windows[self.indices(split)])

    def split_sizes(self) -> dict[str, int]:
        return {s: int(np.sum(self.splits == s)) for s in SPLITS}


def split_counts(m: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_FRACTIONS[0] * m))
    n_val = int(round(SPLIT_FRACTIONS[1] * m))
    return n_train, n_val, m - n_train - n_val


def window_and_split(series: LinkSeries, d: int, seed: int, topology: NetworkTopology | None = None) -> TrafficDataset:
    """Cut non-overlapping windows of length ``d``, drop dirty ones, split 60/20/20.

    Min-max constants come from the training windows only.
    """
    if d < 1:
        raise ValidationError(f"window length must be >= 1, got {d}")
    if series.n_intervals < d:
        raise ValidationError(f"series has {series.n_intervals} intervals, fewer than d={d}")
    n_win = series.n_intervals // d
    usable = n_win * d
    vals = series.values[:, :usable].reshape(series.n_links, n_win, d).transpose(1, 0, 2)
    dirty = series.mask[:, :usable].reshape(series.n_links, n_win, d).any(axis=(0, 2))
    dirty |= ~np.isfinite(vals).all(axis=(1, 2))
    keep = np.flatnonzero(~dirty)
    m = len(keep)
    if m < 5:
        raise DatasetTooSmallError(f"only {m} clean windows of length {d}; at least 5 are needed")
    n_train, n_val, _ = split_counts(m)
    perm = np.random.default_rng(seed).permutation(m)
    tags = np.empty(m, dtype="<U5")
    tags[perm[:n_train]] = "train"
    tags[perm[n_train : n_train + n_val]] = "val"
    tags[perm[n_train + n_val :]] = "test"
    windows = np.ascontiguousarray(vals[keep])
    train = windows[tags == "train"]
    return TrafficDataset(
        windows=windows,
        starts=keep * d,
        splits=tags,
        norm_min=float(train.min()),
        norm_max=float(train.max()),
        d=d,
        seed=seed,
        link_names=series.link_names,
        topology=topology,
        interval_seconds=series.interval_seconds,
    )


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: TrafficDataset, out_dir) -> Path:
    """Write ``manifest.json`` and ``windows.npy`` (raw, un-normalized values)."""
    out_dir = Path(out_dir)
    buf = io.BytesIO()
    np.save(buf, dataset.windows.astype(np.float64), allow_pickle=False)
    _atomic_write(out_dir / "windows.npy", buf.getvalue())
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "d": dataset.d,
        "n_links": dataset.n_links,
        "n_subsignals": int(len(dataset.windows)),
        "split_sizes": dataset.split_sizes(),
        "normalization": {"min": dataset.norm_min, "max": dataset.norm_max},
        "interval_seconds": dataset.interval_seconds,
        "link_names": list(dataset.link_names),
        "topology": dataset.topology.to_dict() if dataset.topology else None,
        "windows": [
            {"start": int(s), "split": str(t)} for s, t in zip(dataset.starts, dataset.splits)
        ],
    }
    path = out_dir / "manifest.json"
    _atomic_write(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_dataset(path) -> TrafficDataset:
    """Load a dataset from its directory or its ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    windows = np.load(path.parent / "windows.npy", allow_pickle=False)
    entries = manifest["windows"]
    if len(entries) != len(windows):
        raise ValidationError(f"{path}: manifest lists {len(entries)} windows, array has {len(windows)}")
    topo = manifest.get("topology")
    return TrafficDataset(
        windows=windows,
        starts=np.array([e["start"] for e in entries], dtype=np.int64),
        splits=np.array([e["split"] for e in entries], dtype="<U5"),
        norm_min=float(manifest["normalization"]["min"]),
        norm_max=float(manifest["normalization"]["max"]),
        d=int(manifest["d"]),
        seed=int(manifest["seed"]),
        link_names=tuple(manifest["link_names"]),
        topology=NetworkTopology.from_dict(topo) if topo else None,
        interval_seconds=manifest.get("interval_seconds"),
    )


__all__ = [
    "NetworkTopology",
    "DemandSeries",
    "LinkSeries",
    "TrafficDataset",
    "parse_topology_and_demands",
    "write_sndlib",
    "shortest_paths",
    "routing_matrix",
    "route_demands",
    "load_csv_series",
    "write_csv_series",
    "window_and_split",
    "split_counts",
    "save_dataset",
    "load_dataset",
]
