"""Scenario databases: a directory with two JSON manifests.

``db_summary.json`` maps scenario id to its metadata, ``db_mapping.json``
maps scenario id to the scenario file path relative to the database
directory. Derived databases (merge, filter, split, sample, sanity check)
write only new manifests that point back at the original files.
"""
from __future__ import annotations

import json
import math
import operator
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DatabaseError, DuplicateIdError
from .scenario import SIF_SUFFIX, ScenarioDescription, read_scenario, validate_scenario, write_scenario

SUMMARY_FILE = "db_summary.json"
MAPPING_FILE = "db_mapping.json"
FAILURES_FILE = "failures.jsonl"
OVERPASS_ALTITUDE = 4.0


@dataclass
class Database:
    root: Path
    summary: dict[str, dict]
    mapping: dict[str, str]

    @classmethod
    def load(cls, root) -> "Database":
        root = Path(root)
        try:
            summary = json.loads((root / SUMMARY_FILE).read_text(encoding="utf-8"))
            mapping = json.loads((root / MAPPING_FILE).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DatabaseError(f"{root} is not a scenario database: {exc.filename} missing") from None
        except json.JSONDecodeError as exc:
            raise DatabaseError(f"corrupt manifest in {root}: {exc}") from None
        if set(summary) != set(mapping):
            raise DatabaseError(f"{root}: summary and mapping disagree on scenario ids")
        return cls(root, summary, mapping)

    @property
    def ids(self) -> list[str]:
        return list(self.mapping)

    def __len__(self) -> int:
        return len(self.mapping)

    def __contains__(self, sid) -> bool:
        return sid in self.mapping

    def path_of(self, sid: str) -> Path:
        return Path(os.path.normpath(self.root / self.mapping[sid]))

    def read(self, sid: str) -> ScenarioDescription:
        return read_scenario(self.path_of(sid))

    def __iter__(self):
        for sid in self.mapping:
            yield self.read(sid)


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise DatabaseError(f"output directory {out} is not empty")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatabaseError(f"cannot create {out}: {exc}") from None
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def write_manifest(out_dir, summary: dict, mapping: dict) -> Database:
    out = Path(out_dir)
    if list(summary) != list(mapping):
        raise DatabaseError("summary and mapping must list the same ids in the same order")
    (out / SUMMARY_FILE).write_text(_dump(summary), encoding="utf-8")
    (out / MAPPING_FILE).write_text(_dump(mapping), encoding="utf-8")
    return Database(out, dict(summary), dict(mapping))


def _derive(db: Database, ids: Sequence[str], out_dir) -> Database:
    out = _prepare_out(out_dir)
    summary, mapping = {}, {}
    for sid in ids:
        summary[sid] = db.summary[sid]
        mapping[sid] = Path(os.path.relpath(db.path_of(sid).resolve(), out.resolve())).as_posix()
    return write_manifest(out, summary, mapping)


# -- build -------------------------------------------------------------------


_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def scenario_filename(sid: str) -> str:
    return _SAFE.sub("_", sid) + SIF_SUFFIX


def _convert_one(args):
    converter, index, item, out = args
    try:
        desc = converter(item)
        if not isinstance(desc, ScenarioDescription):
            raise TypeError(f"converter returned {type(desc).__name__}")
        name = scenario_filename(desc.scenario_id)
        tmp = Path(out) / f".{index}.{name}.part"
        write_scenario(desc, tmp)
        return index, desc.scenario_id, name, desc.metadata.to_dict(), None, str(tmp)
    except Exception as exc:  # failures are reported, not fatal
        return index, None, None, None, f"{type(exc).__name__}: {exc}", None


def build_database(converter: Callable, inputs: Sequence, out_dir, workers: int = 1) -> Database:
    """Convert every input with ``converter`` and write the database.

    Failing items are skipped and listed in ``failures.jsonl``. The result is
    independent of ``workers``.
    """
    out = _prepare_out(out_dir)
    jobs = [(converter, i, item, str(out)) for i, item in enumerate(inputs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_convert_one, jobs))
    else:
        results = [_convert_one(j) for j in jobs]
    summary, mapping, failures = {}, {}, []
    used_names: set[str] = set()
    for index, sid, name, meta, err, tmp in sorted(results, key=lambda r: r[0]):
        if err is None and (sid in summary or name in used_names):
            err = f"{DuplicateIdError.__name__}: duplicate scenario id '{sid}'"
            os.unlink(tmp)
        if err is not None:
            failures.append({"index": index, "input": repr(inputs[index]), "error": err})
            continue
        os.replace(tmp, out / name)
        used_names.add(name)
        summary[sid] = meta
        mapping[sid] = name
    if failures:
        with open(out / FAILURES_FILE, "w", encoding="utf-8") as fh:
            for rec in failures:
                fh.write(json.dumps(rec) + "\n")
    if not summary:
        raise DatabaseError(f"no input converted successfully ({len(failures)} failures)")
    return write_manifest(out, summary, mapping)


def read_failures(db_dir) -> list[dict]:
    path = Path(db_dir) / FAILURES_FILE
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# -- derived databases -----------------------------------------------------


def merge(dbs: Sequence[Database], out_dir) -> Database:
    ids: list[str] = []
    seen: dict[str, Path] = {}
    for db in dbs:
        for sid in db.ids:
            if sid in seen:
                raise DuplicateIdError(f"scenario id '{sid}' appears in {seen[sid]} and {db.root}")
            seen[sid] = db.root
            ids.append(sid)
    owner = {sid: db for db in dbs for sid in db.ids}
    out = _prepare_out(out_dir)
    summary, mapping = {}, {}
    for sid in ids:
        db = owner[sid]
        summary[sid] = db.summary[sid]
        mapping[sid] = Path(os.path.relpath(db.path_of(sid).resolve(), out.resolve())).as_posix()
    return write_manifest(out, summary, mapping)


_OPS = {">=": operator.ge, "<=": operator.le, "==": operator.eq, "!=": operator.ne,
        ">": operator.gt, "<": operator.lt}
_CLAUSE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(>=|<=|==|!=|>|<)\s*(.+?)\s*$")


def _virtual(meta: dict, name: str):
    if name == "ego_moving_distance":
        return float(meta.get("per_object_moving_distance", {}).get(meta.get("sdc_id"), 0.0))
    counts = meta.get("object_type_counts")
    if name.endswith("_count") and isinstance(counts, dict) and name[:-6] in counts:
        return counts[name[:-6]]
    raise KeyError(name)


def metadata_value(meta: dict, name: str):
    if name in meta and not isinstance(meta[name], (dict, list)):
        return meta[name]
    return _virtual(meta, name)


@dataclass(frozen=True)
class Clause:
    field: str
    op: str
    value: object

    def __call__(self, meta: dict) -> bool:
        try:
            got = metadata_value(meta, self.field)
        except KeyError:
            raise DatabaseError(f"unknown metadata field '{self.field}'") from None
        if got is None:
            return False
        if isinstance(self.value, (int, float)) != isinstance(got, (int, float)) or isinstance(got, bool):
            if self.op in ("==", "!="):
                return _OPS[self.op](str(got), str(self.value))
            raise DatabaseError(f"field '{self.field}' is not numeric")
        return bool(_OPS[self.op](got, self.value))


@dataclass(frozen=True)
class FilterPredicate:
    """Conjunction of metadata clauses such as ``ego_moving_distance>10``."""

    clauses: tuple[Clause, ...] = ()

    @classmethod
    def parse(cls, text: str | Sequence[str]) -> "FilterPredicate":
        parts = text if not isinstance(text, str) else re.split(r"\s+and\s+|&&|,", text.strip())
        clauses = []
        for part in parts:
            if not part.strip():
                continue
            m = _CLAUSE.match(part)
            if not m:
                raise DatabaseError(f"cannot parse filter clause {part!r}")
            name, op, raw = m.groups()
            raw = raw.strip().strip("'\"")
            try:
                value: object = float(raw)
                if not math.isfinite(value):
                    raise ValueError
            except ValueError:
                if op not in ("==", "!="):
                    raise DatabaseError(f"clause {part!r} compares a string with {op}") from None
                value = raw
            clauses.append(Clause(name, op, value))
        return cls(tuple(clauses))

    def __and__(self, other: "FilterPredicate") -> "FilterPredicate":
        return FilterPredicate(self.clauses + other.clauses)

    def __call__(self, meta: dict) -> bool:
        return all(c(meta) for c in self.clauses)


def filter_db(db: Database, pred: FilterPredicate | str, out_dir) -> Database:
    pred = FilterPredicate.parse(pred) if isinstance(pred, str) else pred
    ids = [sid for sid in db.ids if pred(db.summary[sid])]
    return _derive(db, ids, out_dir)


def split_sizes(total: int, fractions: tuple[float, float]) -> tuple[int, int]:
    train, test = fractions
    if train < 0 or test < 0 or abs(train + test - 1.0) > 1e-9:
        raise DatabaseError("split fractions must be nonnegative and sum to 1")
    # round to nearest; an exact tie leaves the extra scenario in train
    n_test = int(math.ceil(test * total - 0.5 - 1e-9))
    return total - n_test, n_test


def split(db: Database, fractions: tuple[float, float], seed: int, out_dir) -> tuple[Database, Database]:
    """Random disjoint split into ``out_dir/train`` and ``out_dir/test``."""
    n_train, n_test = split_sizes(len(db), fractions)
    order = np.random.default_rng(seed).permutation(len(db))
    test_pos = set(order[:n_test].tolist())
    ids = db.ids
    test = [sid for k, sid in enumerate(ids) if k in test_pos]
    train = [sid for k, sid in enumerate(ids) if k not in test_pos]
    out = Path(out_dir)
    return _derive(db, train, out / "train"), _derive(db, test, out / "test")


def sample(db: Database, n: int, seed: int, out_dir) -> Database:
    if n < 0 or n > len(db):
        raise DatabaseError(f"cannot sample {n} of {len(db)} scenarios")
    pick = set(np.random.default_rng(seed).choice(len(db), size=n, replace=False).tolist())
    return _derive(db, [sid for k, sid in enumerate(db.ids) if k in pick], out_dir)


def _check_one(path: str):
    from .engine import reset

    try:
        desc = read_scenario(path)
    except Exception as exc:
        return f"unreadable: {type(exc).__name__}: {exc}"
    report = validate_scenario(desc)
    if not report.ok:
        return "invalid: " + "; ".join(report.violations)
    try:
        reset(desc, validate=False)
    except Exception as exc:
        return f"simulator reset failed: {type(exc).__name__}: {exc}"
    return None


def sanity_check(db: Database, out_dir, workers: int = 1) -> tuple[Database, list[dict]]:
    """Keep the scenarios that parse, validate and reset; report the rest."""
    paths = [str(db.path_of(sid)) for sid in db.ids]
    if workers > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reasons = list(pool.map(_check_one, paths))
    else:
        reasons = [_check_one(p) for p in paths]
    keep = [sid for sid, r in zip(db.ids, reasons) if r is None]
    report = [{"scenario_id": sid, "reason": r} for sid, r in zip(db.ids, reasons) if r is not None]
    return _derive(db, keep, out_dir), report


# -- statistics --------------------------------------------------------------


def _count(meta: dict, kind: str) -> int:
    return int(meta.get("object_type_counts", {}).get(kind, 0))


def has_intersection(meta: dict) -> bool:
    if meta.get("source") == "pg":
        return "intersection" in meta.get("pg_blocks", [])
    return int(meta.get("light_count", 0)) > 0


def stats(db: Database) -> dict:
    """Per-database summary statistics (population std)."""
    if len(db) == 0:
        raise DatabaseError("stats of an empty database")
    metas = [db.summary[sid] for sid in db.ids]
    ego = np.array([_virtual(m, "ego_moving_distance") for m in metas])
    veh = np.array([_count(m, "vehicle") for m in metas], dtype=float)
    ped = np.array([_count(m, "pedestrian") for m in metas], dtype=float)
    return {
        "scenarios": len(metas),
        "ego_track_length_mean": float(ego.mean()), "ego_track_length_std": float(ego.std()),
        "vehicles_mean": float(veh.mean()), "vehicles_std": float(veh.std()),
        "pedestrians_mean": float(ped.mean()), "pedestrians_std": float(ped.std()),
        "intersection_ratio": float(np.mean([has_intersection(m) for m in metas])),
        "construction_ratio": float(np.mean([_count(m, "cone") + _count(m, "barrier") > 0 for m in metas])),
    }


def format_stats(name: str, st: dict) -> str:
    head = f"{'database':<20} {'n':>5} {'ego track (m)':>18} {'vehicles':>14} {'pedestrians':>14} {'intersection':>12} {'construction':>12}"
    row = (f"{name:<20} {st['scenarios']:>5} "
           f"{st['ego_track_length_mean']:>9.2f}±{st['ego_track_length_std']:<8.2f}"
           f"{st['vehicles_mean']:>7.2f}±{st['vehicles_std']:<6.2f}"
           f"{st['pedestrians_mean']:>7.2f}±{st['pedestrians_std']:<6.2f}"
           f"{st['intersection_ratio']:>12.2f} {st['construction_ratio']:>12.2f}")
    return head + "\n" + row
