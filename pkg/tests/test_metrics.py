import math

import numpy as np
import pytest
from goldens import REWARD_GOLDENS
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_arclength, dense_polyline

from scenforge.errors import ScenforgeError
from scenforge.metrics import (OBJECT, SUCCESS, TIMEOUT, VEHICLE_OR_HUMAN, EpisodeRecord, RewardConfig,
                               Transition, average_distance, difficulty_score, displacement_reward,
                               episode_metrics, final_distance, route_completion, smooth_penalty, step_reward)
from scenforge.scenario import ObjectTrack

CFG = {"single": RewardConfig.single(), "multi": RewardConfig.multi()}


def test_default_coefficients():
    single, multi = CFG["single"], CFG["multi"]
    assert (single.c1, single.c2, single.c3) == (2.0, 1.0, 1.0)
    assert (single.collision_vehicle, single.collision_object) == (2.0, 0.5)
    assert (single.success_reward, single.out_of_route_reward) == (10.0, -5.0)
    assert (multi.collision_vehicle, multi.out_of_route_reward) == (1.0, -1.0)
    with pytest.raises(ValueError):
        RewardConfig(collision_vehicle=-1.0)


@pytest.mark.parametrize("name, mode, fields, want", REWARD_GOLDENS, ids=[g[0] for g in REWARD_GOLDENS])
def test_reward_goldens(name, mode, fields, want):
    assert abs(step_reward(CFG[mode], Transition(**fields)) - want) <= 1e-9


def test_collision_classes():
    assert VEHICLE_OR_HUMAN == "vehicle/human" and OBJECT == "object"


@given(st.floats(-5, 5), st.floats(0, 30), st.floats(-1, 1),
       st.sampled_from([None, "vehicle/human", "object"]),
       st.sampled_from([None, "Success", "OutOfRoute", "OutOfRoad", "Timeout"]))
def test_zero_coefficients_leave_terminal_reward(disp, v, steer, collision, terminal):
    cfg = RewardConfig(c1=0.0, c2=0.0, c3=0.0)
    r = step_reward(cfg, Transition(disp, v, steer, collision, terminal))
    assert r == {"Success": 10.0, "OutOfRoute": -5.0, "OutOfRoad": -5.0}.get(terminal, 0.0)


def test_smooth_penalty_examples():
    assert smooth_penalty(0.0, 0.9) == 0.0
    assert smooth_penalty(10.0, 0.05) == 0.0
    assert smooth_penalty(10.0, 0.5) == pytest.approx(-0.4, abs=1e-12)


@given(st.floats(0, 50), st.floats(-1, 1))
def test_smooth_penalty_nonpositive(v, steer):
    assert smooth_penalty(v, steer) <= 0.0


def test_displacement_examples():
    ref = np.array([[0.0, 0.0], [100.0, 0.0]])
    assert displacement_reward(ref, (10.0, 0.5), (10.0, 0.5)) == 0.0
    assert displacement_reward(ref, (10.0, 0.0), (11.0, 0.0)) == pytest.approx(1.0, abs=1e-12)


def test_displacement_on_curve_matches_oracle():
    ang = np.radians(np.linspace(0, 90, 91))
    ref = np.column_stack((30 * np.cos(ang), 30 * np.sin(ang)))
    p0, p1 = (31.0, 5.0), (25.0, 17.0)
    want = brute_arclength(ref, p1)[0] - brute_arclength(ref, p0)[0]
    assert abs(displacement_reward(ref, p0, p1) - want) < 1e-6
    dense, ds = dense_polyline(ref, 0.01)
    k0 = np.argmin(np.hypot(*(dense - p0).T))
    k1 = np.argmin(np.hypot(*(dense - p1).T))
    assert abs(displacement_reward(ref, p0, p1) - (ds[k1] - ds[k0])) < 2e-2


def test_route_completion_examples():
    gt = np.column_stack((np.linspace(0, 100, 101), np.zeros(101)))
    assert route_completion(gt, gt) == 1.0
    assert route_completion(np.repeat(gt[:1], 50, axis=0), gt) == 0.0
    assert route_completion(gt[:51], gt) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ScenforgeError):
        route_completion(gt, gt[:1])


def test_distance_examples():
    gt = np.column_stack((np.linspace(0, 100, 200), np.zeros(200)))
    assert average_distance(gt, gt) == 0.0 and final_distance(gt, gt) == 0.0
    shifted = gt + [0.0, 3.0]
    assert average_distance(shifted, gt) == pytest.approx(3.0, abs=1e-12)
    prefix = gt[:10]
    assert average_distance(prefix, gt) == 0.0
    assert final_distance(prefix, gt) == pytest.approx(math.dist(gt[9], gt[199]), abs=1e-12)
    with pytest.raises(ScenforgeError):
        average_distance(np.zeros((0, 2)), gt)


def random_walk(rng, n):
    steps = rng.normal(0, 1, (n, 2)) + rng.uniform(-1, 1, 2) * 2
    return np.cumsum(steps, axis=0)


@given(st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt = random_walk(rng, int(rng.integers(2, 60)))
    agent = gt[: int(rng.integers(1, len(gt) + 1))] + rng.normal(0, 2, (1, 2))
    agent = np.vstack((agent, random_walk(rng, int(rng.integers(1, 30))) + agent[-1]))
    best, total = max(brute_arclength(gt, p)[0] for p in agent.tolist()), brute_arclength(gt, gt[0])[1]
    assert abs(route_completion(agent, gt) - min(1.0, best / total)) <= 1e-9
    t = min(len(agent), len(gt))
    avg = sum(math.dist(agent[i], gt[i]) for i in range(t)) / t
    assert abs(average_distance(agent, gt) - avg) <= 1e-9
    assert abs(final_distance(agent, gt) - math.dist(agent[-1], gt[-1])) <= 1e-9


@given(st.integers(0, 2**32 - 1))
def test_route_completion_monotone_in_time(seed):
    rng = np.random.default_rng(seed)
    gt = random_walk(rng, 30)
    agent = random_walk(rng, 25)
    rcs = [route_completion(agent[: k + 1], gt) for k in range(len(agent))]
    assert all(b >= a for a, b in zip(rcs, rcs[1:]))


def ego(pos, hd):
    pos = np.asarray(pos, float)
    n = len(pos)
    pos = np.column_stack((pos, np.zeros(n)))
    return ObjectTrack("vehicle", pos, np.asarray(hd, float), np.zeros((n, 2)), np.ones(n, bool), 4, 2, 1.5)


def arc(radius, n=2001, x0=0.0, y0=0.0, rot=0.0):
    th = np.linspace(0, math.pi / 2, n)
    p = np.column_stack((radius * np.sin(th), radius * (1 - np.cos(th))))
    c, s = math.cos(rot), math.sin(rot)
    p = p @ np.array([[c, s], [-s, c]]) + [x0, y0]
    return p, (th + rot + math.pi) % (2 * math.pi) - math.pi


def test_difficulty_examples():
    assert difficulty_score(ego([[0, 0], [10, 0], [20, 0]], [0, 0, 0])) == 0.0
    p, h = arc(50.0)
    # chord length of a fine arc under-reads 25*pi by about 1e-6
    assert difficulty_score(ego(p, h)) == pytest.approx(25 * math.pi * math.pi / 2, rel=1e-6)
    doubled = difficulty_score(ego(2 * p, h))
    assert doubled == pytest.approx(2 * difficulty_score(ego(p, h)), rel=1e-12)
    with pytest.raises(ScenforgeError):
        difficulty_score(ego([[0, 0]], [0]))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi), st.floats(0.1, 10))
def test_difficulty_rigid_invariance_and_scaling(x0, y0, rot, k):
    p, h = arc(20.0, n=50)
    base = difficulty_score(ego(p, h))
    q, g = arc(20.0, n=50, x0=x0, y0=y0, rot=rot)
    assert difficulty_score(ego(q, g)) == pytest.approx(base, rel=1e-9)
    assert difficulty_score(ego(k * p, h)) == pytest.approx(k * base, rel=1e-9)


def rec(status, rc=1.0, speed=5.0, cost=0, reward=1.0):
    return EpisodeRecord("s", "a", status, 10, rc, speed, cost, reward)


def test_episode_metrics_examples():
    assert episode_metrics([rec(SUCCESS)] * 4)["success_rate"] == 1.0
    with pytest.raises(ScenforgeError):
        episode_metrics([])


def test_episode_metrics_against_enumeration():
    statuses = ["Success", "Success", "OutOfRoad", "Timeout", "OutOfRoute", "Success", "Aborted",
                "Timeout", "Success", "OutOfRoad"]
    recs = [rec(s, rc=i / 10, speed=i, cost=i % 3, reward=-i) for i, s in enumerate(statuses)]
    m = episode_metrics(recs)
    assert m["episodes"] == 10
    assert m["success_rate"] == 0.4
    assert m["out_of_road_rate"] == 0.3
    assert m["timeout_rate"] == 0.2
    assert m["route_completion"] == pytest.approx(0.45)
    assert m["mean_speed"] == pytest.approx(4.5)
    assert m["cost"] == pytest.approx(0.9)
    assert m["total_reward"] == pytest.approx(-4.5)
    assert m["success_rate"] + m["out_of_road_rate"] + m["timeout_rate"] < 1.0  # one episode aborted
    assert TIMEOUT in statuses
