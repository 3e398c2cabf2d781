"""Unified scenario description: data model, validation and the SIF file format.

A SIF file holds one scenario as gzip-compressed UTF-8 JSON. Floats are
written with the shortest round-trip representation, so ``read(write(d))``
reproduces every float bit pattern and re-serialization is byte-identical.
"""
from __future__ import annotations

import gzip
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScenarioFormatError, TypeConflictError, UnknownObjectError, UnsupportedVersionError
from .mapgraph import LINE_TYPES, Lane, LaneLine, validate_map

FORMAT_VERSION = "1.0"
SUPPORTED_MAJOR = "1"
SIF_SUFFIX = ".sif"
COORDINATE_CONVENTION = "right-handed, z-up, meters"
OBJECT_TYPES = ("vehicle", "pedestrian", "cyclist", "cone", "barrier")
LIGHT_STATES = ("Red", "Yellow", "Green", "Unknown")


@dataclass(eq=False)
class ObjectTrack:
    object_type: str
    position: np.ndarray
    heading: np.ndarray
    velocity: np.ndarray
    valid: np.ndarray
    length: float
    width: float
    height: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(np.shape(self.valid)[0])

    def valid_positions(self) -> np.ndarray:
        return self.position[np.asarray(self.valid, dtype=bool)]


@dataclass(eq=False)
class TrafficLightTrack:
    lane_id: str
    states: list[str]
    stop_point: tuple[float, float, float]


@dataclass(eq=False)
class ScenarioMetadata:
    source: str
    dt: float
    episode_length: int
    sdc_id: str
    coordinate_convention: str = COORDINATE_CONVENTION
    object_count: int = 0
    light_count: int = 0
    per_object_moving_distance: dict[str, float] = field(default_factory=dict)
    altitude_range: float = 0.0
    difficulty: float | None = None
    extra: dict = field(default_factory=dict)

    _KNOWN = ("source", "dt", "episode_length", "sdc_id", "coordinate_convention", "object_count",
              "light_count", "per_object_moving_distance", "altitude_range", "difficulty")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self._KNOWN}
        out["per_object_moving_distance"] = dict(self.per_object_moving_distance)
        for k, v in self.extra.items():
            out.setdefault(k, v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioMetadata":
        missing = [k for k in ("source", "dt", "episode_length", "sdc_id") if k not in d]
        if missing:
            raise ScenarioFormatError(f"metadata missing keys {missing}")
        kw = {k: d[k] for k in cls._KNOWN if k in d}
        kw["per_object_moving_distance"] = dict(kw.get("per_object_moving_distance", {}))
        kw["extra"] = {k: v for k, v in d.items() if k not in cls._KNOWN}
        return cls(**kw)

    @property
    def ego_moving_distance(self) -> float:
        return float(self.per_object_moving_distance.get(self.sdc_id, 0.0))


@dataclass(eq=False)
class ScenarioDescription:
    scenario_id: str
    map_features: dict
    tracks: dict[str, ObjectTrack]
    dynamic_states: dict[str, TrafficLightTrack]
    metadata: ScenarioMetadata
    format_version: str = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScenarioDescription):
            return NotImplemented
        return dumps_json(self) == dumps_json(other)

    __hash__ = None  # type: ignore[assignment]

    @property
    def sdc_track(self) -> ObjectTrack:
        return get_object_states(self, self.metadata.sdc_id)

    @property
    def lanes(self) -> dict[str, Lane]:
        return {k: f for k, f in self.map_features.items() if isinstance(f, Lane)}


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def get_object_states(desc: ScenarioDescription, object_id: str) -> ObjectTrack:
    """Full state sequence of one object; invalid frames stay in, flagged by ``valid``."""
    try:
        return desc.tracks[object_id]
    except KeyError:
        raise UnknownObjectError(f"unknown object id '{object_id}'") from None


def moving_distance(track: ObjectTrack) -> float:
    """Planar polyline length through the valid positions of a track."""
    pts = track.valid_positions()
    if pts.shape[0] < 2:
        return 0.0
    return float(np.sum(np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))))


def normalize_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a, dtype=np.float64) + math.pi) % (2.0 * math.pi) - math.pi


def normalize_headings(desc: ScenarioDescription) -> ScenarioDescription:
    """Copy of ``desc`` with every track heading wrapped to [-pi, pi)."""
    tracks = {}
    for oid, tr in desc.tracks.items():
        tracks[oid] = ObjectTrack(tr.object_type, tr.position, normalize_angle(tr.heading), tr.velocity,
                                  tr.valid, tr.length, tr.width, tr.height, dict(tr.metadata))
    return ScenarioDescription(desc.scenario_id, desc.map_features, tracks, desc.dynamic_states,
                               desc.metadata, desc.format_version)


def finalize_metadata(desc: ScenarioDescription) -> ScenarioDescription:
    """Recompute the derived metadata fields in place and return ``desc``."""
    from .metrics import difficulty_score

    md = desc.metadata
    md.object_count = len(desc.tracks)
    md.light_count = len(desc.dynamic_states)
    md.per_object_moving_distance = {oid: moving_distance(tr) for oid, tr in desc.tracks.items()}
    counts = {t: 0 for t in OBJECT_TYPES}
    for tr in desc.tracks.values():
        counts[tr.object_type] = counts.get(tr.object_type, 0) + 1
    md.extra["object_type_counts"] = counts
    ego = desc.tracks.get(md.sdc_id)
    md.altitude_range = 0.0
    md.difficulty = None
    if ego is not None:
        z = ego.valid_positions()
        if z.shape[0] and z.shape[1] == 3:
            md.altitude_range = float(z[:, 2].max() - z[:, 2].min())
        if int(np.count_nonzero(ego.valid)) >= 2:
            md.difficulty = difficulty_score(ego)
    return desc


def _shape(a) -> tuple:
    return tuple(np.shape(a))


def validate_scenario(desc: ScenarioDescription) -> ValidationReport:
    """Check every scenario invariant; never mutates ``desc``."""
    v: list[str] = []
    md = desc.metadata
    if not isinstance(desc.scenario_id, str) or not desc.scenario_id:
        v.append("scenario_id: must be a non-empty string")
    if str(desc.format_version).split(".")[0] != SUPPORTED_MAJOR:
        v.append(f"format_version: unsupported '{desc.format_version}'")
    n = md.episode_length
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 2:
        v.append("metadata/episode_length: must be an integer >= 2")
        n = None
    if not (isinstance(md.dt, (int, float)) and md.dt > 0 and math.isfinite(md.dt)):
        v.append("metadata/dt: must be > 0")
    if md.coordinate_convention != COORDINATE_CONVENTION:
        v.append("metadata/coordinate_convention: unexpected value")
    if md.object_count != len(desc.tracks):
        v.append("metadata/object_count: does not match number of tracks")
    if md.light_count != len(desc.dynamic_states):
        v.append("metadata/light_count: does not match number of traffic lights")
    sdc = desc.tracks.get(md.sdc_id)
    if sdc is None:
        v.append(f"metadata/sdc_id: '{md.sdc_id}' is not a track")
    elif sdc.object_type != "vehicle":
        v.append(f"metadata/sdc_id: '{md.sdc_id}' is not a vehicle")
    v.extend(validate_map(desc.map_features))
    for oid, tr in desc.tracks.items():
        where = f"tracks/{oid}"
        if tr.object_type not in OBJECT_TYPES:
            v.append(f"{where}: unknown object_type '{tr.object_type}'")
        ps = _shape(tr.position)
        if len(ps) != 2 or ps[1] != 3:
            v.append(f"{where}: position not shape (N,3)")
        k = ps[0] if ps else -1
        if _shape(tr.heading) != (k,):
            v.append(f"{where}: heading length differs from position")
        if _shape(tr.velocity) != (k, 2):
            v.append(f"{where}: velocity not shape (N,2)")
        if _shape(tr.valid) != (k,):
            v.append(f"{where}: valid length differs from position")
        elif np.asarray(tr.valid).dtype != np.bool_:
            v.append(f"{where}: valid must be boolean")
        if n is not None and k != n:
            v.append(f"{where}: {k} frames but episode_length is {n}")
        if not (tr.length > 0 and tr.width > 0):
            v.append(f"{where}: length and width must be > 0")
        if not tr.height >= 0:
            v.append(f"{where}: height must be >= 0")
        for name in ("position", "heading", "velocity"):
            arr = np.asarray(getattr(tr, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                v.append(f"{where}: {name} has non-finite values")
        hd = np.asarray(tr.heading, dtype=float)
        if np.any(hd < -math.pi) or np.any(hd >= math.pi):
            v.append(f"{where}: heading outside [-pi, pi)")
        if oid in md.per_object_moving_distance and len(ps) == 2 and _shape(tr.valid) == (k,):
            want = moving_distance(tr)
            got = md.per_object_moving_distance[oid]
            if abs(got - want) > 1e-9 * (1.0 + abs(want)):
                v.append(f"metadata/per_object_moving_distance/{oid}: {got} != recomputed {want}")
    missing = set(desc.tracks) - set(md.per_object_moving_distance)
    if missing:
        v.append(f"metadata/per_object_moving_distance: missing {sorted(missing)}")
    lanes = {k for k, f in desc.map_features.items() if isinstance(f, Lane)}
    for lid, lt in desc.dynamic_states.items():
        where = f"dynamic_states/{lid}"
        if lt.lane_id not in lanes:
            v.append(f"{where}: dangling lane reference '{lt.lane_id}'")
        if n is not None and len(lt.states) != n:
            v.append(f"{where}: {len(lt.states)} states but episode_length is {n}")
        bad = sorted({s for s in lt.states if s not in LIGHT_STATES})
        if bad:
            v.append(f"{where}: unknown light states {bad}")
        if len(lt.stop_point) != 3:
            v.append(f"{where}: stop_point must be (x, y, z)")
    return ValidationReport(v)


# -- serialization -----------------------------------------------------------


def _feature_to_dict(f) -> dict:
    if isinstance(f, Lane):
        return {
            "type": "lane",
            "polyline": f.polyline.tolist(),
            "polygon": f.polygon.tolist(),
            "speed_limit": f.speed_limit,
            "entry_lanes": list(f.entry_lanes),
            "exit_lanes": list(f.exit_lanes),
            "left_neighbors": list(f.left_neighbors),
            "right_neighbors": list(f.right_neighbors),
        }
    return {"type": "lane_line", "polyline": f.polyline.tolist(), "line_type": f.line_type}


def _feature_from_dict(fid: str, d: dict):
    kind = d.get("type")
    if kind == "lane":
        return Lane(fid, _arr(d["polyline"]), _arr(d["polygon"]), d.get("speed_limit"),
                    list(d.get("entry_lanes", [])), list(d.get("exit_lanes", [])),
                    list(d.get("left_neighbors", [])), list(d.get("right_neighbors", [])))
    if kind == "lane_line":
        return LaneLine(fid, _arr(d["polyline"]), d.get("line_type", "broken"))
    raise ScenarioFormatError(f"map feature '{fid}' has unknown type {kind!r}")


def _arr(x, dtype=np.float64) -> np.ndarray:
    try:
        return np.asarray(x, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"ragged or non-numeric array: {exc}") from None


def to_dict(desc: ScenarioDescription) -> dict:
    tracks = {}
    for oid, tr in desc.tracks.items():
        tracks[oid] = {
            "type": tr.object_type,
            "state": {
                "position": np.asarray(tr.position, dtype=np.float64).tolist(),
                "heading": np.asarray(tr.heading, dtype=np.float64).tolist(),
                "velocity": np.asarray(tr.velocity, dtype=np.float64).tolist(),
                "valid": np.asarray(tr.valid, dtype=bool).tolist(),
            },
            "length": float(tr.length),
            "width": float(tr.width),
            "height": float(tr.height),
            "metadata": tr.metadata,
        }
    lights = {
        lid: {"lane_id": lt.lane_id, "states": list(lt.states), "stop_point": [float(c) for c in lt.stop_point]}
        for lid, lt in desc.dynamic_states.items()
    }
    return {
        "format_version": desc.format_version,
        "scenario_id": desc.scenario_id,
        "map_features": {fid: _feature_to_dict(f) for fid, f in desc.map_features.items()},
        "tracks": tracks,
        "dynamic_states": lights,
        "metadata": _plain(desc.metadata.to_dict()),
    }


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


def from_dict(d: dict) -> ScenarioDescription:
    if not isinstance(d, dict):
        raise ScenarioFormatError("scenario payload is not an object")
    version = str(d.get("format_version", ""))
    if version.split(".")[0] != SUPPORTED_MAJOR:
        raise UnsupportedVersionError(f"unsupported format_version '{version}'")
    try:
        features = {fid: _feature_from_dict(fid, f) for fid, f in d["map_features"].items()}
        tracks = {}
        for oid, t in d["tracks"].items():
            st = t["state"]
            tracks[oid] = ObjectTrack(
                t["type"], _arr(st["position"]), _arr(st["heading"]), _arr(st["velocity"]),
                _arr(st["valid"], dtype=bool), float(t["length"]), float(t["width"]), float(t["height"]),
                dict(t.get("metadata", {})))
        lights = {lid: TrafficLightTrack(l["lane_id"], list(l["states"]), tuple(l["stop_point"]))
                  for lid, l in d["dynamic_states"].items()}
        md = ScenarioMetadata.from_dict(d["metadata"])
        return ScenarioDescription(d["scenario_id"], features, tracks, lights, md, version)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ScenarioFormatError(f"malformed scenario structure: {exc!r}") from None


def dumps_json(desc: ScenarioDescription) -> str:
    return json.dumps(to_dict(desc), separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def dumps_scenario(desc: ScenarioDescription) -> bytes:
    """Deterministic SIF bytes (gzip header carries no name or timestamp)."""
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, compresslevel=6, mtime=0) as gz:
        gz.write(dumps_json(desc).encode("utf-8"))
    return buf.getvalue()


def loads_scenario(data: bytes) -> ScenarioDescription:
    try:
        text = gzip.decompress(data).decode("utf-8")
        payload = json.loads(text)
    except (OSError, EOFError, zlib.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScenarioFormatError(f"corrupt or truncated SIF payload: {exc}") from None
    return from_dict(payload)


def write_scenario(desc: ScenarioDescription, path) -> None:
    report = validate_scenario(desc)
    if not report.ok:
        raise ScenarioFormatError("refusing to write invalid scenario: " + "; ".join(report.violations[:5]))
    Path(path).write_bytes(dumps_scenario(desc))


def read_scenario(path) -> ScenarioDescription:
    return loads_scenario(Path(path).read_bytes())


# -- frame-centric logs ------------------------------------------------------


def _frame_dt(frames: list[dict], tol: float = 1e-6) -> float | None:
    ts = [f.get("t") for f in frames]
    if len(frames) < 2 or any(t is None for t in ts):
        return None
    steps = np.diff(np.asarray(ts, dtype=float))
    dt = float(steps[0])
    if dt <= 0 or np.any(np.abs(steps - dt) > tol):
        raise ScenarioFormatError("frames do not share a consistent dt")
    return dt


def transpose_frame_log(frames: list[dict]) -> dict[str, ObjectTrack]:
    """Turn per-frame object records into object-centric tracks.

    Ids absent from a frame get zero-padded states with ``valid=False``.
    Track order follows first appearance. Size comes from the first frame an
    object appears in.
    """
    _frame_dt(frames)
    n = len(frames)
    order: list[str] = []
    types: dict[str, str] = {}
    rows: dict[str, dict[int, dict]] = {}
    for t, fr in enumerate(frames):
        for ob in fr.get("objects", ()):
            oid = str(ob["id"])
            otype = ob["type"]
            if oid not in types:
                types[oid] = otype
                order.append(oid)
                rows[oid] = {}
            elif types[oid] != otype:
                raise TypeConflictError(f"object '{oid}' typed '{types[oid]}' and '{otype}'")
            rows[oid][t] = ob
    tracks = {}
    for oid in order:
        pos = np.zeros((n, 3))
        hd = np.zeros(n)
        vel = np.zeros((n, 2))
        valid = np.zeros(n, dtype=bool)
        first = None
        for t, ob in rows[oid].items():
            pos[t] = ob["position"]
            hd[t] = ob["heading"]
            vel[t] = ob["velocity"]
            valid[t] = True
            if first is None or t < first[0]:
                first = (t, ob)
        size = first[1]["size"]
        tracks[oid] = ObjectTrack(types[oid], pos, hd, vel, valid, float(size[0]), float(size[1]),
                                  float(size[2]), dict(first[1].get("metadata", {})))
    return tracks


def transpose_light_log(frames: list[dict]) -> dict[str, TrafficLightTrack]:
    """Traffic-light tracks from per-frame light records; absent frames read Unknown."""
    n = len(frames)
    lights: dict[str, TrafficLightTrack] = {}
    for t, fr in enumerate(frames):
        for rec in fr.get("lights", ()):
            lid = str(rec["id"])
            if lid not in lights:
                lights[lid] = TrafficLightTrack(rec["lane_id"], ["Unknown"] * n, tuple(rec["stop_point"]))
            lights[lid].states[t] = rec["state"]
    return lights


def expand_frames(tracks: dict[str, ObjectTrack], lights: dict[str, TrafficLightTrack] | None = None,
                  dt: float | None = None, t0: float = 0.0) -> list[dict]:
    """Inverse of :func:`transpose_frame_log` (objects listed in track order)."""
    n = max([tr.n_frames for tr in tracks.values()] + [len(l.states) for l in (lights or {}).values()] + [0])
    frames = []
    for t in range(n):
        fr: dict = {}
        if dt is not None:
            fr["t"] = t0 + t * dt
        objs = []
        for oid, tr in tracks.items():
            if tr.valid[t]:
                rec = {"id": oid, "type": tr.object_type, "position": tr.position[t].tolist(),
                       "heading": float(tr.heading[t]), "velocity": tr.velocity[t].tolist(),
                       "size": [tr.length, tr.width, tr.height]}
                if tr.metadata:
                    rec["metadata"] = tr.metadata
                objs.append(rec)
        fr["objects"] = objs
        if lights:
            fr["lights"] = [{"id": lid, "lane_id": l.lane_id, "state": l.states[t],
                             "stop_point": list(l.stop_point)} for lid, l in lights.items()
                            if l.states[t] != "Unknown"]
        frames.append(fr)
    return frames


def write_frame_log(desc: ScenarioDescription, path) -> None:
    """Write ``desc`` as a frame-centric NDJSON log (header line, then one frame per line)."""
    header = {"kind": "header", "scenario_id": desc.scenario_id, "sdc_id": desc.metadata.sdc_id,
              "source": desc.metadata.source, "dt": desc.metadata.dt,
              "map_features": {fid: _feature_to_dict(f) for fid, f in desc.map_features.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for fr in expand_frames(desc.tracks, desc.dynamic_states, desc.metadata.dt):
            fh.write(json.dumps({"kind": "frame", **fr}, separators=(",", ":")) + "\n")


def read_frame_log(path) -> tuple[dict, list[dict]]:
    header = None
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioFormatError(f"{path}:{lineno}: {exc}") from None
            if rec.get("kind") == "header":
                header = rec
            else:
                frames.append(rec)
    if header is None:
        raise ScenarioFormatError(f"{path}: missing header line")
    return header, frames


def convert_frame_log(path) -> ScenarioDescription:
    """Converter for the generic frame-centric NDJSON log format."""
    header, frames = read_frame_log(path)
    tracks = transpose_frame_log(frames)
    lights = transpose_light_log(frames)
    dt = _frame_dt(frames) or float(header.get("dt", 0.1))
    features = {fid: _feature_from_dict(fid, f) for fid, f in header.get("map_features", {}).items()}
    md = ScenarioMetadata(source=str(header.get("source", "log")), dt=dt, episode_length=len(frames),
                          sdc_id=str(header["sdc_id"]))
    desc = ScenarioDescription(str(header["scenario_id"]), features, tracks, lights, md)
    return finalize_metadata(normalize_headings(desc))


__all__ = [
    "COORDINATE_CONVENTION", "FORMAT_VERSION", "LIGHT_STATES", "LINE_TYPES", "OBJECT_TYPES", "SIF_SUFFIX",
    "ObjectTrack", "ScenarioDescription", "ScenarioMetadata", "TrafficLightTrack", "ValidationReport",
    "convert_frame_log", "dumps_scenario", "expand_frames", "finalize_metadata", "from_dict",
    "get_object_states", "loads_scenario", "moving_distance", "normalize_angle", "normalize_headings",
    "read_frame_log", "read_scenario", "to_dict", "transpose_frame_log", "transpose_light_log",
    "validate_scenario", "write_frame_log", "write_scenario",
]
