"""Dataset bundles on disk and the synthetic traffic generator.

A bundle is a directory of plain text files:

* ``meta.txt``  - key=value lines: interval_minutes, start_time (ISO-8601),
  layout (graph|grid), rows/cols for grids, channels;
* ``nodes.csv`` - node_id (plus row,col for grids);
* ``edges.csv`` - src,dst,cost;
* ``flow.csv``  - step,node_id,c0[,c1...] with NaN spelled ``nan``.

Values round-trip bitwise (floats are written with repr).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import DataError
from .graph import RoadNetwork
from .rng import make_rng
from .series import TrafficTensor

META_NAME = "meta.txt"
NODES_NAME = "nodes.csv"
EDGES_NAME = "edges.csv"
FLOW_NAME = "flow.csv"


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_bundle(directory: str, net: RoadNetwork, series: TrafficTensor) -> None:
    """Write a dataset bundle; each file lands atomically."""
    if net.node_count != series.num_nodes:
        raise DataError(
            f"network has {net.node_count} nodes, series has {series.num_nodes}")
    os.makedirs(directory, exist_ok=True)

    meta = [f"interval_minutes={series.interval_minutes}",
            f"start_time={series.start_timestamp.isoformat()}",
            f"layout={net.layout}"]
    if net.layout == "grid":
        meta += [f"rows={net.rows}", f"cols={net.cols}"]
    meta.append(f"channels={series.num_channels}")
    _atomic_write(os.path.join(directory, META_NAME), "\n".join(meta) + "\n")

    if net.layout == "grid":
        lines = ["node_id,row,col"]
        for i in range(net.node_count):
            lines.append(f"{i},{i // net.cols},{i % net.cols}")
    else:
        lines = ["node_id"] + [str(i) for i in range(net.node_count)]
    _atomic_write(os.path.join(directory, NODES_NAME), "\n".join(lines) + "\n")

    lines = ["src,dst,cost"]
    for s, d, cost in net.edges:
        lines.append(f"{s},{d},{cost!r}")
    _atomic_write(os.path.join(directory, EDGES_NAME), "\n".join(lines) + "\n")

    c = series.num_channels
    header = "step,node_id," + ",".join(f"c{i}" for i in range(c))
    rows = [header]
    for step in range(series.num_steps):
        for node in range(series.num_nodes):
            vals = ",".join(repr(float(v)) for v in series.values[step, node])
            rows.append(f"{step},{node},{vals}")
    _atomic_write(os.path.join(directory, FLOW_NAME), "\n".join(rows) + "\n")


def _read_meta(path: str) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    for key in ("interval_minutes", "start_time", "layout", "channels"):
        if key not in meta:
            raise DataError(f"{path}: missing {key!r}")
    return meta


def read_bundle(directory: str) -> tuple[RoadNetwork, TrafficTensor]:
    """Read and validate a bundle; errors carry the offending line number."""
    meta = _read_meta(os.path.join(directory, META_NAME))
    layout = meta["layout"]
    interval = int(meta["interval_minutes"])
    channels = int(meta["channels"])
    start = datetime.fromisoformat(meta["start_time"])

    nodes_path = os.path.join(directory, NODES_NAME)
    node_ids = []
    with open(nodes_path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("node_id"):
            raise DataError(f"{nodes_path}:1: bad header {header.strip()!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                node_ids.append(int(line.split(",")[0]))
            except ValueError as exc:
                raise DataError(f"{nodes_path}:{lineno}: bad node id") from exc
    n = len(node_ids)
    if sorted(node_ids) != list(range(n)):
        raise DataError(f"{nodes_path}: node ids must be exactly 0..{n - 1}")

    edges_path = os.path.join(directory, EDGES_NAME)
    edges = []
    with open(edges_path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{edges_path}:{lineno}: expected src,dst,cost")
            try:
                s, d, cost = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise DataError(f"{edges_path}:{lineno}: bad edge row") from exc
            if not (0 <= s < n and 0 <= d < n):
                raise DataError(
                    f"{edges_path}:{lineno}: edge ({s},{d}) references unknown node")
            edges.append((s, d, cost))

    flow_path = os.path.join(directory, FLOW_NAME)
    rows = []
    max_step = -1
    with open(flow_path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 + channels:
                raise DataError(
                    f"{flow_path}:{lineno}: expected {2 + channels} fields, "
                    f"got {len(parts)}")
            try:
                step, node = int(parts[0]), int(parts[1])
                vals = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise DataError(f"{flow_path}:{lineno}: bad flow row") from exc
            if not 0 <= node < n:
                raise DataError(
                    f"{flow_path}:{lineno}: unknown node {node}")
            if step < 0:
                raise DataError(f"{flow_path}:{lineno}: negative step {step}")
            rows.append((lineno, step, node, vals))
            max_step = max(max_step, step)
    if max_step < 0:
        raise DataError(f"{flow_path}: no flow rows")

    seen_steps = {step for _, step, _, _ in rows}
    missing = set(range(max_step + 1)) - seen_steps
    if missing:
        raise DataError(
            f"{flow_path}: steps are not contiguous from 0; missing {min(missing)}")

    values = np.full((max_step + 1, n, channels), np.nan)
    filled = np.zeros((max_step + 1, n), dtype=bool)
    for lineno, step, node, vals in rows:
        if filled[step, node]:
            raise DataError(
                f"{flow_path}:{lineno}: duplicate entry for step {step}, node {node}")
        filled[step, node] = True
        values[step, node] = vals

    kwargs = {}
    if layout == "grid":
        if "rows" not in meta or "cols" not in meta:
            raise DataError(f"{directory}: grid bundle needs rows and cols")
        kwargs = {"rows": int(meta["rows"]), "cols": int(meta["cols"])}
    net = RoadNetwork(node_count=n, edges=edges, layout=layout, **kwargs)
    series = TrafficTensor(values=values, interval_minutes=interval,
                           start_timestamp=start)
    return net, series


# ---------------------------------------------------------------------------
# synthetic traffic
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs of the synthetic generator; everything is pinned by ``seed``."""

    n_nodes: int = 12
    days: int = 3
    interval_minutes: int = 5
    base_amplitude: float = 100.0
    noise_sigma: float = 4.0
    event_rate: float = 0.01      # Poisson events per node per step
    event_magnitude: float = 60.0
    delay_steps: int = 3          # congestion reaches neighbors this much later
    seed: int = 0
    start_time: str = "2018-01-01T00:00"

    def __post_init__(self):
        if min(self.n_nodes, self.days, self.interval_minutes) < 1:
            raise DataError("n_nodes, days, interval_minutes must be >= 1")
        if self.delay_steps < 1:
            raise DataError(f"delay_steps must be >= 1, got {self.delay_steps}")
        if (self.base_amplitude <= 0 or self.noise_sigma < 0
                or self.event_rate < 0 or self.event_magnitude < 0):
            raise DataError("amplitudes and rates must be nonnegative")


PROPAGATION_FACTOR = 0.6


def _diurnal_profile(spec: SyntheticSpec) -> np.ndarray:
    """Double-peak daily curve over the minute slots of one day."""
    spd = 1440 // spec.interval_minutes
    minutes = np.arange(spd) * spec.interval_minutes

    def bump(center_min, width_min):
        return np.exp(-0.5 * ((minutes - center_min) / width_min) ** 2)

    shape = 0.25 + bump(8 * 60, 75) + 0.85 * bump(17.5 * 60, 90)
    return spec.base_amplitude * shape


def gen_synthetic(spec: SyntheticSpec) -> tuple[RoadNetwork, TrafficTensor]:
    """Path-graph traffic with diurnal peaks, noise, and delayed congestion.

    Each Poisson event at a node reappears at that node's neighbors
    ``delay_steps`` later at 0.6x magnitude, which is what gives a
    delay-aware model something to find.
    """
    rng = make_rng(spec.seed)
    n = spec.n_nodes
    spd = 1440 // spec.interval_minutes
    t = spec.days * spd

    net = RoadNetwork(node_count=n,
                      edges=[(i, i + 1, 1.0) for i in range(n - 1)])
    flow = np.tile(_diurnal_profile(spec), spec.days)[:, None] * np.ones((t, n))

    events = rng.poisson(spec.event_rate, size=(t, n)).astype(np.float64)
    flow += events * spec.event_magnitude
    echo = np.zeros_like(flow)
    delayed = events[:t - spec.delay_steps] * spec.event_magnitude * PROPAGATION_FACTOR
    for i in range(n):
        for j in (i - 1, i + 1):
            if 0 <= j < n:
                echo[spec.delay_steps:, j] += delayed[:, i]
    flow += echo

    if spec.noise_sigma > 0:
        flow += rng.normal(0.0, spec.noise_sigma, size=(t, n))
    flow = np.maximum(flow, 0.0)

    series = TrafficTensor(values=flow[:, :, None],
                           interval_minutes=spec.interval_minutes,
                           start_timestamp=datetime.fromisoformat(spec.start_time))
    return net, series
