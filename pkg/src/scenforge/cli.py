"""``scenforge`` command line.

Exit codes: 0 success, 1 library error, 2 usage error, 3 missing input,
4 partial failure (some items failed or were dropped).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import database as dbm
from .errors import ScenforgeError

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_PARTIAL = 0, 1, 2, 3, 4
DB_ROOT_ENV = "SCENARIO_DB_ROOT"


class MissingInput(Exception):
    pass


class UsageError(Exception):
    pass


def db_path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get(DB_ROOT_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def load_db(p: str) -> dbm.Database:
    path = db_path(p)
    if not (path / dbm.MAPPING_FILE).exists():
        raise MissingInput(f"no scenario database at {path}")
    return dbm.Database.load(path)


def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive), ``3`` or ``1,4,7`` (parts may mix)."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                a, b = part.split("..", 1)
                lo, hi = int(a), int(b)
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"bad seed range {text!r}") from None
    if not seeds:
        raise UsageError("empty seed range")
    return seeds


def _scenarios(args):
    """(id, loader) pairs from a .sif file or a database, optionally one id."""
    from .scenario import read_scenario

    path = Path(args.input)
    if path.suffix == ".sif":
        if not path.exists():
            raise MissingInput(f"no scenario file {path}")
        desc = read_scenario(path)
        if args.id not in (None, desc.scenario_id):
            raise MissingInput(f"scenario '{args.id}' not in {path}")
        return [desc]
    db = load_db(args.input)
    if args.id is not None:
        if args.id not in db:
            raise MissingInput(f"scenario '{args.id}' not in {db.root}")
        return [db.read(args.id)]
    return db


# -- subcommands -------------------------------------------------------------


def cmd_pg_gen(args) -> int:
    from .pg import PGConfig, PGConverter

    overrides = {"num_blocks": args.num_blocks, "traffic_density": args.traffic_density,
                 "duration_s": args.duration, "dt": args.dt, "lanes_per_road": args.lanes,
                 "construction_prob": args.construction_prob}
    try:
        cfg = (PGConfig.from_file(args.config, **overrides) if args.config
               else PGConfig.from_mapping({}, **overrides))
    except FileNotFoundError as exc:
        raise MissingInput(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    db = dbm.build_database(PGConverter(cfg), parse_seeds(args.seeds), db_path(args.out), args.workers)
    failures = dbm.read_failures(db.root)
    print(f"wrote {len(db)} scenarios to {db.root}")
    return _report_failures(failures)


def _report_failures(failures) -> int:
    for f in failures:
        print(f"failed item {f['index']} ({f['input']}): {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


class _LogConverter:
    def __call__(self, path):
        from .scenario import convert_frame_log
        return convert_frame_log(path)


def cmd_convert(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise MissingInput(f"no log directory {src}")
    logs = sorted(p for p in src.iterdir() if p.suffix in (".ndjson", ".jsonl"))
    if not logs:
        raise MissingInput(f"no .ndjson/.jsonl frame logs in {src}")
    db = dbm.build_database(_LogConverter(), [str(p) for p in logs], db_path(args.out), args.workers)
    print(f"wrote {len(db)} scenarios to {db.root}")
    return _report_failures(dbm.read_failures(db.root))


def cmd_merge(args) -> int:
    db = dbm.merge([load_db(p) for p in args.inputs], db_path(args.out))
    print(f"merged {len(db)} scenarios into {db.root}")
    return EXIT_OK


def cmd_filter(args) -> int:
    if not args.filter:
        raise UsageError("filter needs at least one --filter clause")
    pred = dbm.FilterPredicate.parse(args.filter)
    db = dbm.filter_db(load_db(args.input), pred, db_path(args.out))
    print(f"kept {len(db)} scenarios in {db.root}")
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        parts = [float(x) for x in args.fractions.split(",")]
    except ValueError:
        raise UsageError(f"bad fractions {args.fractions!r}") from None
    if len(parts) != 2:
        raise UsageError("--fractions takes two values: train,test")
    train, test = dbm.split(load_db(args.input), (parts[0], parts[1]), args.seed, db_path(args.out))
    print(f"train {len(train)} -> {train.root}; test {len(test)} -> {test.root}")
    return EXIT_OK


def cmd_sample(args) -> int:
    db = dbm.sample(load_db(args.input), args.n, args.seed, db_path(args.out))
    print(f"sampled {len(db)} scenarios into {db.root}")
    return EXIT_OK


def cmd_check(args) -> int:
    db = load_db(args.input)
    if args.out:
        kept, report = dbm.sanity_check(db, db_path(args.out), args.workers)
        n_kept = len(kept)
    else:
        from .database import _check_one

        reasons = [_check_one(str(db.path_of(sid))) for sid in db.ids]
        report = [{"scenario_id": s, "reason": r} for s, r in zip(db.ids, reasons) if r is not None]
        n_kept = len(db) - len(report)
    for r in report:
        print(f"dropped {r['scenario_id']}: {r['reason']}", file=sys.stderr)
    print(f"{n_kept}/{len(db)} scenarios passed")
    return EXIT_PARTIAL if report else EXIT_OK


def cmd_stats(args) -> int:
    tables = {}
    for p in args.inputs:
        tables[p] = dbm.stats(load_db(p))
    if args.format == "json":
        print(json.dumps(tables, indent=1))
    else:
        lines = []
        for k, (name, st) in enumerate(tables.items()):
            text = dbm.format_stats(Path(name).name or name, st)
            lines.append(text if k == 0 else text.splitlines()[1])
        print("\n".join(lines))
    if args.json:
        Path(args.json).write_text(json.dumps(tables, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .render import write_replay

    scen = _scenarios(args)
    if isinstance(scen, dbm.Database):
        if len(scen) != 1:
            raise UsageError("replay of a multi-scenario database needs --id")
        scen = [scen.read(scen.ids[0])]
    paths = write_replay(scen[0], args.out, args.extent)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def _sim_cfg(args):
    from .engine import SimConfig

    return SimConfig(mode=args.mode, ego_policy="idm" if args.policy == "idm" else "replay",
                     traffic=args.traffic, noise_seed=args.seed, observations=False)


class _SimJob:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, desc):
        from .engine import run_episode

        if self.cfg.mode == "multi":
            raise ScenforgeError("multi-agent simulation needs the bridge policy")
        world = run_episode(desc, self.cfg)
        return [r.to_dict() for r in world.episode_records()]


def _read(args_db_sid):
    db, sid = args_db_sid
    return db.read(sid)


class _DbSimJob(_SimJob):
    def __call__(self, item):
        return super().__call__(_read(item))


def cmd_sim(args) -> int:
    from .metrics import episode_metrics

    scen = _scenarios(args)
    records: list[dict] = []
    if args.policy == "bridge":
        from .bridge import serve
        from .engine import SimConfig

        cfg = SimConfig(mode=args.mode, traffic=args.traffic, noise_seed=args.seed)
        serve(scen, args.endpoint, cfg, args.timeout, max_sessions=1 if args.endpoint != "-" else None,
              on_episode=lambda w: records.extend(r.to_dict() for r in w.episode_records()))
        if not records:
            print("no episodes were run", file=sys.stderr)
            return EXIT_PARTIAL
    else:
        cfg = _sim_cfg(args)
        if isinstance(scen, dbm.Database):
            items = [(scen, sid) for sid in scen.ids]
            job = _DbSimJob(cfg)
        else:
            items, job = scen, _SimJob(cfg)
        if args.workers > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                batches = list(pool.map(job, items))
        else:
            batches = [job(it) for it in items]
        records = [r for b in batches for r in b]
    out = {"episodes": records, "summary": episode_metrics(records)}
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .bridge import serve
    from .engine import SimConfig

    scen = _scenarios(args)
    cfg = SimConfig(mode=args.mode, traffic=args.traffic, use_boundary=args.boundary)
    if args.endpoint != "-":
        print(f"serving on {args.endpoint}", file=sys.stderr)
    try:
        serve(scen, args.endpoint, cfg, args.timeout)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenforge", description="Scenario databases, procedural generation and simulation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=1, help="process pool size")

    sp = sub.add_parser("pg-gen", help="generate procedural scenarios into a database")
    sp.add_argument("--seeds", required=True, help="e.g. 0..9 or 1,5,7")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON or key=value file with PG settings")
    sp.add_argument("--num-blocks", type=int)
    sp.add_argument("--traffic-density", type=float)
    sp.add_argument("--duration", type=float)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--lanes", type=int)
    sp.add_argument("--construction-prob", type=float)
    workers(sp)
    sp.set_defaults(func=cmd_pg_gen)

    sp = sub.add_parser("convert", help="convert a directory of frame-centric logs")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    workers(sp)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("merge", help="combine databases (copy-free)")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("filter", help="keep scenarios matching all --filter clauses")
    sp.add_argument("input")
    sp.add_argument("--filter", action="append", default=[], help="e.g. 'ego_moving_distance>10'")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("split", help="random train/test split")
    sp.add_argument("input")
    sp.add_argument("--fractions", default="0.8,0.2")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("sample", help="uniform sample without replacement")
    sp.add_argument("input")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("check", help="sanity check; with --out writes the passing subset")
    sp.add_argument("input")
    sp.add_argument("--out")
    workers(sp)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("stats", help="summary statistics table")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--json", help="also write the JSON table here")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("replay", help="render recorded frames as SVG")
    sp.add_argument("input", help="database directory or .sif file")
    sp.add_argument("--id")
    sp.add_argument("--out", required=True)
    sp.add_argument("--extent", type=float, default=100.0)
    sp.set_defaults(func=cmd_replay)

    def sim_common(sp):
        sp.add_argument("input", help="database directory or .sif file")
        sp.add_argument("--id")
        sp.add_argument("--mode", choices=("single", "multi"), default="single")
        sp.add_argument("--traffic", choices=("log", "idm", "replay"), default="log")
        sp.add_argument("--endpoint", default="127.0.0.1:7878", help="host:port or - for stdio")
        sp.add_argument("--timeout", type=float, default=30.0)

    sp = sub.add_parser("sim", help="run episodes and print metrics JSON")
    sim_common(sp)
    sp.add_argument("--policy", choices=("idm", "replay", "bridge"), default="idm")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    workers(sp)
    sp.set_defaults(func=cmd_sim)

    sp = sub.add_parser("serve", help="serve the bridge protocol")
    sim_common(sp)
    sp.add_argument("--boundary", action="store_true", help="append the boundary scan")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scenforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingInput as exc:
        print(f"scenforge: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"scenforge: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ScenforgeError as exc:
        print(f"scenforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
