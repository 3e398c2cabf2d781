"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import json
import math
import threading
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest
from goldens import REWARD_GOLDENS
from helpers import (enumerate_stats, random_scenario, seeded_scenario, straight_map, straight_scenario,
                     three_scenario_fixture, track, vehicle_contacts)
from oracles import box_contains, box_corners, box_samples, brute_arclength, dense_distance, march_ray

from scenforge import kernels
from scenforge.bridge import BridgeClient, BridgeServer, run_client_episode
from scenforge.cli import main
from scenforge.curriculum import build_curriculum, report_result
from scenforge.database import (MAPPING_FILE, SUMMARY_FILE, FilterPredicate, build_database,
                                filter_db, merge, split, stats, write_manifest)
from scenforge.engine import IDM, SimConfig, reset, step
from scenforge.metrics import (RewardConfig, Transition, average_distance, final_distance, route_completion,
                               step_reward)
from scenforge.pg import generate_scenario
from scenforge.scenario import dumps_scenario, loads_scenario, validate_scenario, write_scenario
from scenforge.traffic import IDMParams, idm_acceleration

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(k, title):
    """Record PASS/FAIL for criterion ``k``; ``notes`` collects measured values."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException:
        RESULTS[k] = f"FAIL  [{k:2d}] {title}" + (f" ({'; '.join(notes)})" if notes else "")
        raise
    RESULTS[k] = f"PASS  [{k:2d}] {title}" + (f" ({'; '.join(notes)})" if notes else "")


@pytest.fixture(scope="module")
def pg100():
    return [generate_scenario(seed) for seed in range(100)]


def test_01_replay_fidelity(pg100):
    with criterion(1, "replay fidelity on 100 PG scenarios") as notes:
        cfg = SimConfig(ego_policy="replay", traffic="replay", observations=False)
        t0 = time.perf_counter()
        deviations = 0
        for desc in pg100:
            world, _ = reset(desc, cfg=cfg)
            t = 0
            while True:
                for oid, tr in desc.tracks.items():
                    if world.alive(oid) != bool(tr.valid[t]):
                        deviations += 1
                    elif tr.valid[t] and world.pose(oid) != (tr.position[t, 0], tr.position[t, 1], tr.heading[t]):
                        deviations += 1
                if world.done:
                    break
                step(world)
                t += 1
            assert t == desc.metadata.episode_length - 1
        elapsed = time.perf_counter() - t0
        notes.append(f"{elapsed:.1f} s, {deviations} deviations")
        assert deviations == 0
        assert elapsed < 60.0


def test_02_serialization_round_trip():
    with criterion(2, "read/write identity on 1000 random scenarios") as notes:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        for _ in range(1000):
            desc = random_scenario(rng)
            assert validate_scenario(desc).ok
            back = loads_scenario(dumps_scenario(desc))
            assert back == desc
            for oid, tr in desc.tracks.items():
                other = back.tracks[oid]
                for name in ("position", "heading", "velocity", "valid"):
                    a, b = getattr(tr, name), getattr(other, name)
                    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
        elapsed = time.perf_counter() - t0
        notes.append(f"{elapsed:.1f} s")
        assert elapsed < 60.0


def random_polyline(rng):
    k = int(rng.integers(2, 7))
    while True:
        xy = rng.uniform(-40, 40, size=(k, 2))
        if np.all(np.hypot(*np.diff(xy, axis=0).T) > 0.5):
            return xy


def random_box(rng, spread):
    return (rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-math.pi, math.pi),
            rng.uniform(0.5, 6.0), rng.uniform(0.3, 3.0))


def mc_overlap(a, b, rng, eps, n=4000):
    pa = np.vstack((box_samples(a, n, rng), box_corners(a)))
    pb = np.vstack((box_samples(b, n, rng), box_corners(b)))
    return bool(box_contains(b, pa, eps).any() or box_contains(a, pb, eps).any())


def test_03_geometry_oracles():
    with criterion(3, "Frenet, OBB and raycast oracles") as notes:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(1000):
            xy = random_polyline(rng)
            cum = kernels.arc_length(xy)
            pts = rng.uniform(-50, 50, size=(5, 2))
            s, d, _ = kernels.project_points(xy, cum, pts)
            dist, interior = dense_distance(xy, pts)
            if interior.any():
                worst = max(worst, float(np.max(np.abs(np.abs(d[interior]) - dist[interior]))))
        notes.append(f"Frenet max err {worst:.1e} m")
        assert worst < 2e-3

        mismatches = ambiguous = 0
        for _ in range(1000):
            a, b = random_box(rng, 6.0), random_box(rng, 6.0)
            inner, outer = mc_overlap(a, b, rng, -1e-3), mc_overlap(a, b, rng, 1e-3)
            if inner != outer:
                ambiguous += 1
            elif kernels.obb_overlap(a, b) != inner:
                mismatches += 1
        notes.append(f"OBB {mismatches} mismatches, {ambiguous} inside margin")
        assert mismatches == 0

        worst = 0.0
        for _ in range(50):
            boxes = [random_box(rng, 25.0) for _ in range(6)]
            x, y, h, ln, wd = (np.array(c, dtype=float) for c in zip(*boxes))
            heading = rng.uniform(-3, 3)
            got = kernels.raycast_boxes(0.0, 0.0, heading, 24, 50.0, x, y, h, ln, wd, np.ones(6, np.uint8))

            def inside(p):
                return np.any([box_contains(bx, p) for bx in boxes], axis=0)

            for r in range(24):
                want = march_ray(np.zeros(2), heading + 2 * math.pi * r / 24, 50.0, inside)
                worst = max(worst, abs(got[r] - want))
        notes.append(f"raycast max err {worst:.1e} m")
        assert worst < 2e-3


def throughput_world(n_objects=100, n=400):
    others = {f"v{i:03d}": track("vehicle", 10.0 + (i // 2) * 20.0 + 8.0 * np.arange(n) * 0.1, 3.5 * (i % 2), n)
              for i in range(n_objects)}
    desc = straight_scenario(n=n, ego_speed=8.0, x0=5.0, others=others, features=straight_map(3000.0))
    world, _ = reset(desc, cfg=SimConfig(ego_policy="idm", traffic="idm", observations=False))
    return world


def test_04_throughput():
    with criterion(4, "single-thread stepping with 100 IDM objects") as notes:
        world = throughput_world()
        assert sum(b == IDM for b in world.bindings) == 101
        steps = 300
        t0 = time.perf_counter()
        for _ in range(steps):
            step(world)
        rate = steps / (time.perf_counter() - t0)
        assert not world.done
        notes.append(f"{rate:.0f} steps/s, {kernels.BACKEND} kernels")
        assert rate >= 500.0


def test_05_reward_goldens():
    with criterion(5, "20 reward golden transitions") as notes:
        cfg = {"single": RewardConfig.single(), "multi": RewardConfig.multi()}
        worst = max(abs(step_reward(cfg[mode], Transition(**fields)) - want)
                    for _, mode, fields, want in REWARD_GOLDENS)
        notes.append(f"{len(REWARD_GOLDENS)} cases, max err {worst:.1e}")
        assert len(REWARD_GOLDENS) == 20
        assert worst <= 1e-9


def synthetic_entries(n, seed=0):
    rng = np.random.default_rng(seed)
    diff = rng.gamma(2.0, 50.0, n)
    diff[rng.random(n) < 0.1] = 0.0
    length = rng.uniform(10, 300, n)
    return [(f"sc{i:05d}", float(d), float(ln)) for i, (d, ln) in enumerate(zip(diff, length))]


def test_06_curriculum():
    with criterion(6, "curriculum partition and level-up gate") as notes:
        state = build_curriculum(synthetic_entries(40000))
        assert state.n_levels == 100 and all(len(level) == 400 for level in state.levels)
        assert all(len(subs) == 20 and all(len(s) == 20 for s in subs) for subs in state.subsets)

        rng = np.random.default_rng(6)
        workers = list(state.workers)
        # independent model of the gate: window of recent outcomes, min episodes at level
        model = {w: {"level": 1, "hist": [], "count": 0} for w in workers}
        ups = 0
        for _ in range(20000):
            w = int(rng.choice(workers))
            success = bool(rng.random() < 0.8)
            m = model[w]
            m["hist"] = (m["hist"] + [success])[-state.window:]
            m["count"] += 1
            rate = Fraction(sum(m["hist"]), len(m["hist"]))
            want = m["count"] >= 20 and m["level"] < state.n_levels and rate >= Fraction(3, 4)
            got = report_result(state, w, success)
            assert got == want
            if got:
                ups += 1
                m.update(level=m["level"] + 1, hist=[], count=0)
            assert state.level(w) == m["level"]
            assert len(state.resident(w)) <= 20
        notes.append(f"{ups} level-ups over 20000 scripted episodes")
        assert ups > 0


def test_07_database_algebra(tmp_path):
    with criterion(7, "database algebra on random databases") as notes:
        rng = np.random.default_rng(7)
        for trial in range(4):
            tmp = tmp_path / f"t{trial}"
            base, na, nb = int(rng.integers(0, 10000)), int(rng.integers(1, 10)), int(rng.integers(1, 10))
            a = build_database(seeded_scenario, range(base, base + na), tmp / "a")
            b = build_database(seeded_scenario, range(base + na, base + na + nb), tmp / "b")
            m = merge([a, b], tmp / "m")
            assert len(m) == na + nb
            p = f"ego_moving_distance > {rng.uniform(0, 60):.3f}"
            q = f"object_count <= {int(rng.integers(0, 6))}"
            pq = filter_db(filter_db(m, p, tmp / "p"), q, tmp / "pq")
            both = filter_db(m, FilterPredicate.parse(p) & FilterPredicate.parse(q), tmp / "both")
            assert pq.ids == both.ids
            assert filter_db(pq, p, tmp / "idem").ids == pq.ids
            frac = float(rng.uniform(0.1, 0.9))
            train, test = split(m, (1 - frac, frac), trial, tmp / "s")
            assert set(train.ids).isdisjoint(test.ids) and set(train.ids) | set(test.ids) == set(m.ids)
            for d in (m, pq, both, train, test):
                assert sorted(x.name for x in d.root.iterdir()) == sorted([MAPPING_FILE, SUMMARY_FILE])
        one = build_database(seeded_scenario, range(12), tmp_path / "w1", workers=1)
        three = build_database(seeded_scenario, range(12), tmp_path / "w3", workers=3)
        for name in (MAPPING_FILE, SUMMARY_FILE):
            assert (one.root / name).read_bytes() == (three.root / name).read_bytes()
        assert all(one.path_of(s).read_bytes() == three.path_of(s).read_bytes() for s in one.ids)
        notes.append("4 random trials, worker counts 1 and 3")


def test_08_idm_safety(pg100):
    with criterion(8, "IDM safety on 100 PG rollouts") as notes:
        contacts = sum(len(vehicle_contacts(desc)) for desc in pg100)
        vehicles = sum(sum(t.object_type == "vehicle" for t in d.tracks.values()) for d in pg100)
        notes.append(f"{contacts} vehicle contacts, {vehicles} vehicles")
        assert contacts == 0
        for v0 in (5.0, 13.89, 30.0):
            assert abs(idm_acceleration(v0, v0, None, 0.0, IDMParams())) <= 1e-9
        want = 2.0 * (1 - (10 / 15) ** 4 - (17 / 17) ** 2)
        assert abs(idm_acceleration(10.0, 15.0, 17.0, 0.0) - want) <= 1e-9


def random_walk(rng, n):
    return np.cumsum(rng.normal(0, 1, (n, 2)) + rng.uniform(-1, 1, 2) * 2, axis=0)


def test_09_metrics_cross_check():
    with criterion(9, "metrics against brute force on 100 pairs") as notes:
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(100):
            gt = random_walk(rng, int(rng.integers(2, 80)))
            agent = gt[: int(rng.integers(1, len(gt) + 1))] + rng.normal(0, 2, (1, 2))
            agent = np.vstack((agent, random_walk(rng, int(rng.integers(1, 30))) + agent[-1]))
            best = max(brute_arclength(gt, pt)[0] for pt in agent.tolist())
            total = brute_arclength(gt, gt[0])[1]
            t = min(len(agent), len(gt))
            avg = sum(math.dist(agent[i], gt[i]) for i in range(t)) / t
            worst = max(worst, abs(route_completion(agent, gt) - min(1.0, best / total)),
                        abs(average_distance(agent, gt) - avg),
                        abs(final_distance(agent, gt) - math.dist(agent[-1], gt[-1])))
            assert (route_completion(gt, gt), average_distance(gt, gt), final_distance(gt, gt)) == (1.0, 0.0, 0.0)
        notes.append(f"max err {worst:.1e}")
        assert worst <= 1e-9


def test_10_stats_table(pg100, tmp_path, capsys):
    with criterion(10, "stats table columns, PG values and enumeration") as notes:
        root = tmp_path / "pg"
        root.mkdir()
        descs = pg100[:20]
        for d in descs:
            write_scenario(d, root / f"{d.scenario_id}.sif")
        write_manifest(root, {d.scenario_id: d.metadata.to_dict() for d in descs},
                       {d.scenario_id: f"{d.scenario_id}.sif" for d in descs})
        capsys.readouterr()
        assert main(["stats", str(root)]) == 0
        header = capsys.readouterr().out.splitlines()[0]
        for column in ("ego track", "vehicles", "pedestrians", "intersection", "construction"):
            assert column in header
        assert main(["stats", str(root), "--format", "json"]) == 0
        st = json.loads(capsys.readouterr().out)[str(root)]
        assert st["pedestrians_mean"] == 0.0
        assert 0.0 <= st["intersection_ratio"] <= 1.0 and 0.0 <= st["construction_ratio"] <= 1.0
        fx = three_scenario_fixture(tmp_path)
        got = stats(fx)
        (lm, ls), (vm, vs), (pm, ps), inter, cons = enumerate_stats(fx)
        assert got["ego_track_length_mean"] == pytest.approx(lm, abs=1e-9)
        assert got["ego_track_length_std"] == pytest.approx(ls, abs=1e-9)
        assert (got["vehicles_mean"], got["vehicles_std"]) == pytest.approx((vm, vs), abs=1e-12)
        assert (got["pedestrians_mean"], got["pedestrians_std"]) == pytest.approx((pm, ps), abs=1e-12)
        assert (got["intersection_ratio"], got["construction_ratio"]) == (inter, cons)
        notes.append(f"PG vehicles {st['vehicles_mean']:.2f}, intersection {st['intersection_ratio']:.2f}, "
                     f"construction {st['construction_ratio']:.2f}")


def bridge_scenario():
    n = 40
    return straight_scenario(n=n, sid="crossing", ego_speed=6.0,
                             others={"lead": track("vehicle", 45.0 + 3.0 * np.arange(n) * 0.1, 0.0, n),
                                     "b": track("vehicle", 30.0 + 4.0 * np.arange(n) * 0.1, 3.5, n)})


def test_11_bridge_determinism():
    with criterion(11, "bridge replay is bit-exact; violations close with an error") as notes:
        desc = bridge_scenario()
        rng = np.random.default_rng(11)
        acts = [(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-1, 1))) for _ in range(200)]
        world, obs = reset(desc, cfg=SimConfig(noise_seed=5, ego_policy="env"))
        local_obs, local_rewards = [obs["ego"].tolist()], []
        while not world.done:
            obs, rewards, _, _ = step(world, {"ego": acts[world.tick]})
            local_rewards.append(rewards["ego"])
            if not world.done:
                local_obs.append(obs["ego"].tolist())
        srv = BridgeServer(("127.0.0.1", 0), [desc], SimConfig(noise_seed=0), timeout=5.0)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        try:
            with BridgeClient("127.0.0.1", srv.port, timeout=10.0) as c:
                c.hello()
                stream = run_client_episode(c, lambda tick, o: {"ego": acts[tick]}, "crossing", seed=5)
            assert [m["agents"]["ego"] for m in stream if m["kind"] == "observation"] == local_obs
            assert [m["rewards"]["ego"] for m in stream if m["kind"] == "result"] == local_rewards
            for bad, code in (({"kind": "action", "tick": 0, "actions": {"ego": [0.0, 0.0]}}, "stale_tick"),
                              (b"not a json line\n", "malformed")):
                with BridgeClient("127.0.0.1", srv.port, timeout=10.0) as c:
                    c.hello()
                    c.reset("crossing")
                    c.act(0, {"ego": (0.0, 0.0)})
                    c.send_raw(bad) if isinstance(bad, bytes) else c.send(bad)
                    msg = c.recv()
                    assert msg["kind"] == "error" and msg["code"] == code
                    assert c.recv() is None
        finally:
            srv.shutdown()
            srv.server_close()
        notes.append(f"{len(local_rewards)} steps matched")
