"""Deterministic synthetic BEV world.

Rectangular agents follow closed-form constant-speed / constant-yaw-rate
motion programs on a square grid with the ego fixed at the centre.  The
world produces asynchronous multi-rate sensor streams (a crisp lidar-like
occupancy grid and a blurred, attenuated, partially occluded camera-like
grid) and exact continuous-time ground truth: per-cell instance ids and flow
vectors at any queried timestamp.  Everything is a pure function of
(scenario, seed).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from streambev.autodiff import GridTensor
from streambev.pgm import read_pgm, write_pgm
from streambev.predictor import StampedObservation

__all__ = [
    "MotionSegment",
    "AgentSpec",
    "SensorSpec",
    "Scenario",
    "InstanceFrame",
    "agent_pose",
    "render_ground_truth",
    "sense",
    "emit_streams",
    "scenario_to_json",
    "scenario_from_json",
    "load_scenario",
    "save_scenario",
    "write_stream_dump",
    "read_stream_dump",
    "make_reference_suite",
    "DEFAULT_LABEL_INTERVAL_S",
]

MICROSECONDS = 1_000_000
DEFAULT_LABEL_INTERVAL_S = 0.5

# fixed 5x5 blur used by the camera-like sensor
_BLUR = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
_BLUR_KERNEL = np.outer(_BLUR, _BLUR) / np.outer(_BLUR, _BLUR).sum()

# camera values are quantised to 255ths at the source, so PGM dumps are lossless
_QUANT = 255.0


@dataclass(frozen=True)
class MotionSegment:
    duration_s: float
    speed: float
    yaw_rate: float


@dataclass(frozen=True)
class AgentSpec:
    id: int
    length: float
    width: float
    x: float
    y: float
    yaw: float
    speed: float
    yaw_rate: float = 0.0
    program: tuple[MotionSegment, ...] | None = None


@dataclass(frozen=True)
class SensorSpec:
    modality: str
    rate_hz: float
    phase_s: float = 0.0
    noise: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    extent_m: float
    resolution_m: float
    duration_s: float
    seed: int
    agents: tuple[AgentSpec, ...]
    sensors: tuple[SensorSpec, ...]

    def __post_init__(self):
        cells = self.extent_m / self.resolution_m
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError(
                f"extent {self.extent_m} m is not divisible by resolution {self.resolution_m} m"
            )
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise ValueError(f"agent ids must be unique and positive, got {ids}")
        for s in self.sensors:
            if s.rate_hz <= 0:
                raise ValueError(f"sensor {s.modality!r} rate must be positive, got {s.rate_hz}")

    @property
    def grid_cells(self) -> int:
        return round(self.extent_m / self.resolution_m)


@dataclass
class InstanceFrame:
    """Ground truth at one timestamp: instance-id grid and per-cell flow.

    ``flow[0]`` is the row displacement and ``flow[1]`` the column
    displacement, in cells, of each occupied cell toward the next labelled
    time; background cells carry zero flow.
    """

    timestamp_us: int
    ids: np.ndarray
    flow: np.ndarray


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def _advance(x: float, y: float, yaw: float, speed: float, yaw_rate: float, tau: float):
    if tau == 0.0:
        return x, y, yaw
    if abs(yaw_rate) < 1e-12:
        return x + speed * math.cos(yaw) * tau, y + speed * math.sin(yaw) * tau, yaw
    radius = speed / yaw_rate
    new_yaw = yaw + yaw_rate * tau
    return (
        x + radius * (math.sin(new_yaw) - math.sin(yaw)),
        y - radius * (math.cos(new_yaw) - math.cos(yaw)),
        new_yaw,
    )


def agent_pose(scenario: Scenario, agent_id: int, t_s: float) -> tuple[float, float, float]:
    """Closed-form pose (x, y, yaw) of an agent at time t; continuous in t."""
    if not (0.0 <= t_s <= scenario.duration_s + 1e-9):
        raise ValueError(f"t = {t_s} s outside scenario duration [0, {scenario.duration_s}]")
    agent = next((a for a in scenario.agents if a.id == agent_id), None)
    if agent is None:
        raise KeyError(f"unknown agent id {agent_id}")
    x, y, yaw = agent.x, agent.y, agent.yaw
    remaining = t_s
    segments = agent.program or (MotionSegment(math.inf, agent.speed, agent.yaw_rate),)
    for i, seg in enumerate(segments):
        last = i == len(segments) - 1
        tau = remaining if last else min(remaining, seg.duration_s)
        x, y, yaw = _advance(x, y, yaw, seg.speed, seg.yaw_rate, tau)
        remaining -= tau
        if remaining <= 0:
            break
    return x, y, yaw


# ---------------------------------------------------------------------------
# rasterisation and ground truth
# ---------------------------------------------------------------------------


def _cell_centers(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    n = scenario.grid_cells
    half = scenario.extent_m / 2.0
    coords = (np.arange(n) + 0.5) * scenario.resolution_m - half
    return coords[:, None].repeat(n, 1), coords[None, :].repeat(n, 0)  # (cy rows, cx cols)


def _rasterize(scenario: Scenario, t_s: float) -> np.ndarray:
    """Instance-id grid by cell-centre inclusion; overlaps keep the smaller id."""
    n = scenario.grid_cells
    cy, cx = _cell_centers(scenario)
    ids = np.zeros((n, n), dtype=np.int32)
    for agent in sorted(scenario.agents, key=lambda a: -a.id):
        ax, ay, ayaw = agent_pose(scenario, agent.id, t_s)
        dx, dy = cx - ax, cy - ay
        cos_y, sin_y = math.cos(ayaw), math.sin(ayaw)
        local_x = cos_y * dx + sin_y * dy
        local_y = -sin_y * dx + cos_y * dy
        inside = (np.abs(local_x) <= agent.length / 2.0) & (
            np.abs(local_y) <= agent.width / 2.0
        )
        ids[inside] = agent.id
    return ids


def render_ground_truth(
    scenario: Scenario, t_s: float, label_interval_s: float = DEFAULT_LABEL_INTERVAL_S
) -> InstanceFrame:
    """Exact instance ids at t plus per-cell flow toward t + label_interval."""
    n = scenario.grid_cells
    ids = _rasterize(scenario, t_s)
    flow = np.zeros((2, n, n))
    cy, cx = _cell_centers(scenario)
    t_next = min(t_s + label_interval_s, scenario.duration_s)
    for agent in scenario.agents:
        mask = ids == agent.id
        if not mask.any():
            continue
        ax, ay, ayaw = agent_pose(scenario, agent.id, t_s)
        bx, by, byaw = agent_pose(scenario, agent.id, t_next)
        cos_a, sin_a = math.cos(ayaw), math.sin(ayaw)
        cos_b, sin_b = math.cos(byaw), math.sin(byaw)
        dx, dy = cx[mask] - ax, cy[mask] - ay
        local_x = cos_a * dx + sin_a * dy
        local_y = -sin_a * dx + cos_a * dy
        next_x = bx + cos_b * local_x - sin_b * local_y
        next_y = by + sin_b * local_x + cos_b * local_y
        flow[0][mask] = (next_y - cy[mask]) / scenario.resolution_m
        flow[1][mask] = (next_x - cx[mask]) / scenario.resolution_m
    return InstanceFrame(timestamp_us=round(t_s * MICROSECONDS), ids=ids, flow=flow)


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------


def _sensor_rng(scenario: Scenario, modality: str, t_us: int) -> np.random.Generator:
    tag = zlib.crc32(modality.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([scenario.seed, tag, t_us]))


def _blur5(grid: np.ndarray) -> np.ndarray:
    padded = np.pad(grid, 2)
    out = np.zeros_like(grid)
    for u in range(5):
        for v in range(5):
            out += _BLUR_KERNEL[u, v] * padded[u : u + grid.shape[0], v : v + grid.shape[1]]
    return out


def sense(scenario: Scenario, modality: str, t_s: float) -> np.ndarray:
    """Raw sensor grid at time t; deterministic in (scenario, modality, t).

    lidar-like: exact occupancy with per-cell dropout and salt noise.
    camera-like: occupancy blurred 5x5, attenuated with range, with one
    random occlusion sector; values quantised to 255ths at the source so
    stream dumps are lossless.
    """
    spec = next((s for s in scenario.sensors if s.modality == modality), None)
    if spec is None:
        raise KeyError(f"modality {modality!r} not declared in scenario sensors")
    t_us = round(t_s * MICROSECONDS)
    occupancy = (_rasterize(scenario, t_s) > 0).astype(float)
    rng = _sensor_rng(scenario, modality, t_us)
    if modality == "lidar":
        dropout = float(spec.noise.get("dropout_p", 0.0))
        salt = float(spec.noise.get("salt_p", 0.0))
        keep = rng.random(occupancy.shape) >= dropout
        grid = occupancy * keep
        grid[(occupancy == 0) & (rng.random(occupancy.shape) < salt)] = 1.0
        return grid
    if modality == "camera":
        att_len = float(spec.noise.get("attenuation_m", 20.0))
        occ_deg = float(spec.noise.get("occlusion_deg", 60.0))
        cy, cx = _cell_centers(scenario)
        grid = _blur5(occupancy) * np.exp(-np.hypot(cx, cy) / att_len)
        if occ_deg > 0:
            start = rng.uniform(0.0, 2.0 * math.pi)
            bearing = np.mod(np.arctan2(cy, cx) - start, 2.0 * math.pi)
            grid[bearing < math.radians(occ_deg)] = 0.0
        return np.round(np.clip(grid, 0.0, 1.0) * _QUANT) / _QUANT
    raise KeyError(f"unknown modality {modality!r}")


def _sensor_timestamps_us(spec: SensorSpec, duration_s: float) -> list[int]:
    period_us = round(MICROSECONDS / spec.rate_hz)
    phase_us = round(spec.phase_s * MICROSECONDS)
    duration_us = round(duration_s * MICROSECONDS)
    return list(range(phase_us, duration_us + 1, period_us))


def emit_streams(scenario: Scenario) -> dict[str, list[StampedObservation]]:
    """Per-modality observation streams at phase + k/rate within the duration."""
    streams: dict[str, list[StampedObservation]] = {}
    for spec in scenario.sensors:
        stream = []
        for t_us in _sensor_timestamps_us(spec, scenario.duration_s):
            grid = sense(scenario, spec.modality, t_us / MICROSECONDS)
            stream.append(
                StampedObservation(
                    timestamp_us=t_us,
                    modality=spec.modality,
                    feature=GridTensor(grid[None, None]),
                )
            )
        streams[spec.modality] = stream
    return streams


# ---------------------------------------------------------------------------
# scenario and stream dump I/O
# ---------------------------------------------------------------------------


def scenario_to_json(scenario: Scenario) -> dict:
    return {
        "extent_m": scenario.extent_m,
        "resolution_m": scenario.resolution_m,
        "duration_s": scenario.duration_s,
        "seed": scenario.seed,
        "agents": [
            {
                "id": a.id,
                "length": a.length,
                "width": a.width,
                "x": a.x,
                "y": a.y,
                "yaw": a.yaw,
                "speed": a.speed,
                "yaw_rate": a.yaw_rate,
                "program": None
                if a.program is None
                else [
                    {"duration_s": s.duration_s, "speed": s.speed, "yaw_rate": s.yaw_rate}
                    for s in a.program
                ],
            }
            for a in scenario.agents
        ],
        "sensors": [
            {
                "modality": s.modality,
                "rate_hz": s.rate_hz,
                "phase_s": s.phase_s,
                "noise": dict(s.noise),
            }
            for s in scenario.sensors
        ],
    }


def scenario_from_json(doc: dict) -> Scenario:
    agents = tuple(
        AgentSpec(
            id=a["id"],
            length=a["length"],
            width=a["width"],
            x=a["x"],
            y=a["y"],
            yaw=a["yaw"],
            speed=a["speed"],
            yaw_rate=a.get("yaw_rate", 0.0),
            program=None
            if a.get("program") is None
            else tuple(
                MotionSegment(s["duration_s"], s["speed"], s["yaw_rate"]) for s in a["program"]
            ),
        )
        for a in doc["agents"]
    )
    sensors = tuple(
        SensorSpec(
            modality=s["modality"],
            rate_hz=s["rate_hz"],
            phase_s=s.get("phase_s", 0.0),
            noise=dict(s.get("noise", {})),
        )
        for s in doc["sensors"]
    )
    return Scenario(
        extent_m=doc["extent_m"],
        resolution_m=doc["resolution_m"],
        duration_s=doc["duration_s"],
        seed=doc["seed"],
        agents=agents,
        sensors=sensors,
    )


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(json.dumps(scenario_to_json(scenario), indent=2, sort_keys=True))


def load_scenario(path) -> Scenario:
    return scenario_from_json(json.loads(Path(path).read_text()))


def write_stream_dump(out_dir, scenario: Scenario) -> Path:
    """Directory of per-observation PGM grids plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for modality, stream in sorted(emit_streams(scenario).items()):
        for o in stream:
            name = f"{modality}_{o.timestamp_us:09d}.pgm"
            write_pgm(out / name, o.feature.data[0, 0] * _QUANT, maxval=255)
            entries.append({"modality": modality, "timestamp_us": o.timestamp_us, "file": name})
    manifest = {
        "grid_cells": scenario.grid_cells,
        "resolution_m": scenario.resolution_m,
        "observations": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_stream_dump(dump_dir) -> dict[str, list[StampedObservation]]:
    dump = Path(dump_dir)
    manifest = json.loads((dump / "manifest.json").read_text())
    streams: dict[str, list[StampedObservation]] = {}
    previous: dict[str, int] = {}
    for entry in manifest["observations"]:
        modality, t_us = entry["modality"], entry["timestamp_us"]
        if modality in previous and t_us <= previous[modality]:
            raise ValueError(
                f"stream dump manifest out of order for {modality!r}: "
                f"{previous[modality]} then {t_us}"
            )
        previous[modality] = t_us
        grid, maxval = read_pgm(dump / entry["file"])
        streams.setdefault(modality, []).append(
            StampedObservation(
                timestamp_us=t_us,
                modality=modality,
                feature=GridTensor(grid[None, None] / maxval),
            )
        )
    return streams


# ---------------------------------------------------------------------------
# reference suite
# ---------------------------------------------------------------------------


def _reference_scenario(family_seed: int, index: int, grid_cells: int,
                        resolution_m: float, duration_s: float) -> Scenario:
    rng = np.random.default_rng(np.random.SeedSequence([family_seed, index]))
    extent = grid_cells * resolution_m
    n_agents = int(rng.integers(3, 6))
    agents = []
    for i in range(n_agents):
        speed = float(rng.uniform(1.0, 4.0))
        yaw = float(rng.uniform(0.0, 2.0 * math.pi))
        yaw_rate = float(rng.uniform(-0.2, 0.2)) if i == 0 else 0.0
        # anchor mid-scenario near the centre so agents cross the sensed area
        anchor_t = float(rng.uniform(2.0, 6.0))
        ax = float(rng.uniform(-extent / 4, extent / 4))
        ay = float(rng.uniform(-extent / 4, extent / 4))
        agents.append(
            AgentSpec(
                id=i + 1,
                length=float(rng.uniform(3.5, 4.5)),
                width=float(rng.uniform(1.6, 2.2)),
                x=ax - speed * anchor_t * math.cos(yaw),
                y=ay - speed * anchor_t * math.sin(yaw),
                yaw=yaw,
                speed=speed,
                yaw_rate=yaw_rate,
            )
        )
    sensors = (
        SensorSpec("lidar", 5.0, 0.0, {"dropout_p": 0.1, "salt_p": 0.02}),
        SensorSpec("camera", 2.0, 0.0, {"attenuation_m": 20.0, "occlusion_deg": 60.0}),
    )
    return Scenario(
        extent_m=extent,
        resolution_m=resolution_m,
        duration_s=duration_s,
        seed=int(rng.integers(0, 2**31)),
        agents=tuple(agents),
        sensors=sensors,
    )


def make_reference_suite(
    out_dir,
    n_train: int = 20,
    n_eval: int = 5,
    seed: int = 0,
    grid_cells: int = 64,
    resolution_m: float = 0.5,
    duration_s: float = 8.0,
) -> Path:
    """Write scenario JSONs plus a train/eval split manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"train": [], "eval": []}
    for i in range(n_train + n_eval):
        scenario = _reference_scenario(seed, i, grid_cells, resolution_m, duration_s)
        name = f"scenario_{i:03d}.json"
        save_scenario(out / name, scenario)
        manifest["train" if i < n_train else "eval"].append(name)
    (out / "suite.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out
