"""Compare the compiled and numpy kernel backends.

Micro-benchmarks call each kernel through ``impl=``; the engine benchmark runs
in a subprocess per backend because the engine binds its backend at import.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
import timeit

import numpy as np

from scenforge import kernels


def _boxes(rng, n, spread):
    return (rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(-math.pi, math.pi, n),
            rng.uniform(1.0, 5.0, n), rng.uniform(0.5, 2.0, n))


def micro_cases(rng):
    """name -> (callable taking impl, calls per timing)."""
    xy = np.cumsum(rng.uniform(0.5, 3.0, (200, 2)), axis=0)
    cum = kernels.arc_length(xy)
    pts = rng.uniform(xy.min(), xy.max(), (256, 2))
    x, y, h, ln, wd = _boxes(rng, 120, 60.0)
    alive = np.ones(120, np.uint8)
    segs = rng.uniform(-50, 50, (200, 4))
    poly = np.vstack((xy[::10], xy[:1]))
    path = np.array([[0.0, 0.0], [2000.0, 0.0]])
    params = [2.0, 1.5, 2.0, 4.0, 4.0, 7.5, 0.1, 50.0, 0.5]

    def traffic():
        ta = kernels.TrafficArrays(100, [path] * 100, np.arange(100), params)
        ta.x[:] = np.arange(100) * 15.0
        ta.v[:] = 10.0
        ta.v0[:] = 13.89
        ta.sp[:] = ta.x
        ta.length[:] = 4.5
        ta.width[:] = 1.9
        ta.alive[:] = 1
        return ta

    ta = traffic()
    return {
        "project_points (256 pts, 200 vertices)": (lambda im: kernels.project_points(xy, cum, pts, impl=im), 20),
        "collision_pairs (120 boxes)": (lambda im: kernels.collision_pairs(x, y, h, ln, wd, alive, impl=im), 20),
        "raycast_boxes (120 rays, 120 boxes)":
            (lambda im: kernels.raycast_boxes(0.0, 0.0, 0.3, 120, 50.0, x, y, h, ln, wd, alive, impl=im), 20),
        "raycast_segments (120 rays, 200 segs)":
            (lambda im: kernels.raycast_segments(0.0, 0.0, 0.3, 120, 50.0, segs, impl=im), 20),
        "points_in_polygon (256 pts)": (lambda im: kernels.points_in_polygon(poly, pts, impl=im), 20),
        "idm_step (100 vehicles)": (lambda im: kernels.idm_step(ta, impl=im), 50),
    }


def run_micro(repeat: int) -> dict:
    rng = np.random.default_rng(0)
    cases = micro_cases(rng)
    out: dict = {}
    for name, (fn, number) in cases.items():
        out[name] = {}
        for backend, impl in sorted(kernels.backends().items()):
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=repeat)) / number
            out[name][backend] = best
    return out


ENGINE_SNIPPET = """
import json, time
from scenforge import kernels
from scenforge.engine import SimConfig, reset, step
from scenforge.pg import generate_scenario
desc = generate_scenario({seed})
rates = {{}}
for obs in (False, True):
    world, _ = reset(desc, cfg=SimConfig(ego_policy="idm", traffic="idm", observations=obs))
    n = 0
    t0 = time.perf_counter()
    while not world.done:
        step(world)
        n += 1
    rates["obs" if obs else "no_obs"] = n / (time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "objects": len(desc.tracks), **rates}}))
"""


def run_engine(seed: int) -> dict:
    out = {}
    for backend in sorted(kernels.backends()):
        env = dict(os.environ, SCENFORGE_PURE_PYTHON="1" if backend == "python" else "0")
        proc = subprocess.run([sys.executable, "-c", ENGINE_SNIPPET.format(seed=seed)], env=env,
                              capture_output=True, text=True, check=True)
        res = json.loads(proc.stdout)
        out[res.pop("backend")] = res
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0, help="PG seed for the engine benchmark")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    micro = run_micro(args.repeat)
    names = sorted(kernels.backends())
    print(f"{'kernel':<42}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for case, res in micro.items():
        row = f"{case:<42}" + "".join(f"{res[n] * 1e6:>16.1f}" for n in names)
        if "compiled" in res:
            row += f"{res['python'] / res['compiled']:>9.1f}x"
        print(row)

    engine = run_engine(args.seed)
    print()
    print(f"engine steps/s on PG seed {args.seed} (IDM ego and traffic)")
    for backend, res in engine.items():
        print(f"  {backend:<9} {res['objects']:>4} objects  {res['no_obs']:>8.0f} without observations"
              f"  {res['obs']:>8.0f} with observations")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"micro_seconds": micro, "engine_steps_per_s": engine}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
