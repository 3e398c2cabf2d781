"""Small hand-built scenarios shared across tests."""
from __future__ import annotations

import math

import numpy as np

from scenforge.database import write_manifest
from scenforge.mapgraph import Lane, LaneLine
from scenforge.scenario import (ObjectTrack, ScenarioDescription, ScenarioMetadata, TrafficLightTrack,
                                finalize_metadata, write_scenario)


def rect_lane(lane_id, x0, x1, y, width=3.5, reverse=False, **links):
    xs = (x1, x0) if reverse else (x0, x1)
    line = np.array([(xs[0], y, 0.0), (xs[1], y, 0.0)])
    poly = np.array([(x0, y - width / 2), (x1, y - width / 2), (x1, y + width / 2),
                     (x0, y + width / 2), (x0, y - width / 2)])
    return Lane(lane_id, line, poly, links.pop("speed_limit", 10.0), **links)


def straight_map(length=200.0, lanes=2, width=3.5):
    feats = {}
    for i in range(lanes):
        left = [f"L{i + 1}"] if i + 1 < lanes else []
        right = [f"L{i - 1}"] if i > 0 else []
        feats[f"L{i}"] = rect_lane(f"L{i}", 0.0, length, i * width, width,
                                   left_neighbors=left, right_neighbors=right)
    feats["edge_r"] = LaneLine("edge_r", np.array([(0, -width / 2, 0), (length, -width / 2, 0)], float), "road_edge")
    feats["edge_l"] = LaneLine("edge_l", np.array([(0, (lanes - 0.5) * width, 0), (length, (lanes - 0.5) * width, 0)],
                                                  float), "road_edge")
    for i in range(1, lanes):
        y = (i - 0.5) * width
        feats[f"div{i}"] = LaneLine(f"div{i}", np.array([(0, y, 0), (length, y, 0)], float), "broken")
    return feats


def track(kind, xs, ys, n, dt=0.1, headings=None, valid=None, length=4.5, width=1.9, height=1.5, z=None):
    xs = np.broadcast_to(np.asarray(xs, float), (n,)).copy()
    ys = np.broadcast_to(np.asarray(ys, float), (n,)).copy()
    pos = np.column_stack((xs, ys, np.zeros(n) if z is None else np.asarray(z, float)))
    if headings is None:
        vel = np.gradient(pos[:, :2], dt, axis=0) if n > 1 else np.zeros((n, 2))
        headings = np.zeros(n)
    else:
        headings = np.broadcast_to(np.asarray(headings, float), (n,)).copy()
        vel = np.gradient(pos[:, :2], dt, axis=0)
    valid = np.ones(n, bool) if valid is None else np.asarray(valid, bool)
    pos[~valid] = 0.0
    vel = np.where(valid[:, None], vel, 0.0)
    headings = np.where(valid, headings, 0.0)
    return ObjectTrack(kind, pos, headings, vel, valid, length, width, height)


def scenario(tracks, n, dt=0.1, sdc="ego", features=None, lights=None, sid="fixture", source="test"):
    md = ScenarioMetadata(source=source, dt=dt, episode_length=n, sdc_id=sdc)
    desc = ScenarioDescription(sid, straight_map() if features is None else features, tracks, lights or {}, md)
    return finalize_metadata(desc)


def straight_scenario(n=50, dt=0.1, ego_speed=5.0, x0=20.0, others=None, sid="straight", lights=None,
                      features=None):
    t = np.arange(n) * dt
    tracks = {"ego": track("vehicle", x0 + ego_speed * t, 0.0, n, dt)}
    for oid, tr in (others or {}).items():
        tracks[oid] = tr
    return scenario(tracks, n, dt, features=features, lights=lights, sid=sid)


def light(lane_id, states, stop=(0.0, 0.0, 0.0)):
    return TrafficLightTrack(lane_id, list(states), tuple(stop))


def random_scenario(rng, n=None, n_objects=None, sid=None):
    """A random, valid scenario with awkward floats, invalid frames and lights."""
    n = int(rng.integers(2, 40)) if n is None else n
    n_objects = int(rng.integers(1, 6)) if n_objects is None else n_objects
    length = float(rng.uniform(30, 300))
    feats = straight_map(length, lanes=int(rng.integers(1, 4)))
    tracks = {}
    for i in range(n_objects):
        kind = "vehicle" if i == 0 else str(rng.choice(["vehicle", "pedestrian", "cyclist", "cone", "barrier"]))
        valid = np.ones(n, bool) if i == 0 else rng.random(n) < 0.7
        pos = rng.normal(0, 1e3, (n, 3)) * rng.random((n, 1)) ** 3
        hd = rng.uniform(-math.pi, math.pi, n)
        vel = rng.normal(0, 10, (n, 2))
        pos[~valid] = 0.0
        hd[~valid] = 0.0
        vel[~valid] = 0.0
        size = rng.uniform(0.1, 12, 3)
        tracks[f"obj{i}" if i else "ego"] = ObjectTrack(kind, pos, hd, vel, valid, float(size[0]), float(size[1]),
                                                        float(size[2]), {"k": int(rng.integers(100))})
    lights = {}
    for j in range(int(rng.integers(0, 3))):
        states = [str(s) for s in rng.choice(["Red", "Yellow", "Green", "Unknown"], n)]
        lights[f"tl{j}"] = TrafficLightTrack("L0", states, tuple(float(c) for c in rng.normal(0, 50, 3)))
    sid = sid or f"rand_{int(rng.integers(1 << 40))}"
    md = ScenarioMetadata(source="random", dt=float(rng.uniform(0.01, 1)), episode_length=n, sdc_id="ego")
    return finalize_metadata(ScenarioDescription(sid, feats, tracks, lights, md))


def seeded_scenario(seed):
    """Picklable converter: one random scenario per integer seed."""
    return random_scenario(np.random.default_rng(seed), sid=f"r{seed:04d}")


class FailOn:
    """Picklable converter that raises for selected inputs."""

    def __init__(self, bad):
        self.bad = set(bad)

    def __call__(self, item):
        if item in self.bad:
            raise RuntimeError(f"cannot convert {item}")
        return seeded_scenario(item)


def vehicle_contacts(desc):
    """(frame, a, b) for every overlapping pair of valid vehicle footprints."""
    from scenforge import kernels

    ids = [oid for oid, tr in desc.tracks.items() if tr.object_type == "vehicle"]
    trs = [desc.tracks[i] for i in ids]
    ln = np.array([t.length for t in trs])
    wd = np.array([t.width for t in trs])
    out = []
    for f in range(desc.metadata.episode_length):
        x = np.array([t.position[f, 0] for t in trs])
        y = np.array([t.position[f, 1] for t in trs])
        h = np.array([t.heading[f] for t in trs])
        alive = np.array([t.valid[f] for t in trs], dtype=np.uint8)
        for a, b in kernels.collision_pairs(x, y, h, ln, wd, alive):
            out.append((f, ids[a], ids[b]))
    return out


def three_scenario_fixture(tmp_path):
    """Database of three hand-built scenarios with known counts: 2, 1 and 4 vehicles, one light, one cone."""
    n = 20
    a = straight_scenario(n=n, ego_speed=10.0, sid="a",
                          others={"v1": track("vehicle", 60.0, 3.5, n), "p1": track("pedestrian", 30.0, 5.0, n),
                                  "c1": track("cone", 80.0, 1.0, n, length=0.4, width=0.4)})
    b = straight_scenario(n=n, ego_speed=5.0, sid="b", lights={"tl": light("L0", ["Red"] * n)},
                          others={"p1": track("pedestrian", 10.0, 5.0, n), "p2": track("pedestrian", 12.0, 5.0, n)})
    c = straight_scenario(n=n, ego_speed=0.0, sid="c",
                          others={f"v{i}": track("vehicle", 40.0 + 8 * i, 0.0, n) for i in range(3)})
    root = tmp_path / "fx"
    root.mkdir()
    for d in (a, b, c):
        write_scenario(d, root / f"{d.scenario_id}.sif")
    return write_manifest(root, {d.scenario_id: d.metadata.to_dict() for d in (a, b, c)},
                          {d.scenario_id: f"{d.scenario_id}.sif" for d in (a, b, c)})


def enumerate_stats(db):
    """Summary statistics recomputed by plain enumeration."""
    lengths, vehicles, peds, inter, cons = [], [], [], [], []
    for desc in db:
        kinds = [t.object_type for t in desc.tracks.values()]
        ego = desc.tracks[desc.metadata.sdc_id]
        pts = ego.position[ego.valid][:, :2]
        lengths.append(sum(float(np.linalg.norm(q - p)) for p, q in zip(pts, pts[1:])))
        vehicles.append(kinds.count("vehicle"))
        peds.append(kinds.count("pedestrian"))
        inter.append(len(desc.dynamic_states) > 0)
        cons.append("cone" in kinds or "barrier" in kinds)

    def ms(xs):
        m = sum(xs) / len(xs)
        return m, (sum((x - m) ** 2 for x in xs) / len(xs)) ** 0.5

    return ms(lengths), ms(vehicles), ms(peds), sum(inter) / len(inter), sum(cons) / len(cons)
