"""Command-line front end: ``canlearn gen-local | gen-can | solve-local | learn-can | report``.

Exit codes: 0 success, 2 usage error, 3 I/O or schema failure, 4 a solve
that did not converge.  Reports are CSV files that are appended to; the
header is written only when the file is new or empty.  Every run leaves a
``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from canlearn import __version__
from canlearn.errors import CanLearnError, DatasetIOError, SchemaError
from canlearn.interlace import DEFAULT_INTERLACE_TOL
from canlearn.metrics import evaluate_local, quartiles
from canlearn.model import CanGraph, load_dataset, save_dataset
from canlearn.search import SearchConfig, evaluate_against_truth, learn_can
from canlearn.spectral_solver import SolverConfig, build_problem, solve_edge
from canlearn.synth import TOPOLOGIES, GenSpec, gen_can, gen_global_section, gen_local_instance, local_instance_graph, with_measures

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NOCONV = 0, 2, 3, 4
SEED_ENV = "CANLEARN_SEED"

LOCAL_HEADER = [
    "instance", "l", "h", "seed", "ntrials", "converged", "trial", "iterations",
    "res_p1", "res_p2", "res_d1", "res_d2", "kl", "frob_dist", "f1", "constructive",
]
CAN_HEADER = ["topology", "n", "section_seed", "ntrials", "solves_launched", "solves_skipped", "fpr", "tpr", "wall_seconds"]
SUMMARY_HEADER = ["kind", "config", "metric", "count", "mean", "median", "q1", "q3", "iqr"]

# grouping keys and aggregated columns per report kind
REPORT_KINDS = {
    "local": (LOCAL_HEADER, ("l", "h", "ntrials"), ("converged", "iterations", "kl", "frob_dist", "f1", "constructive")),
    "can": (CAN_HEADER, ("topology", "n", "ntrials"), ("solves_launched", "solves_skipped", "fpr", "tpr", "wall_seconds")),
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-local": {"seed": 0, "count": 1},
    "gen-can": {"seed": 0, "sections": 1},
    "solve-local": {"seed": 0, "ntrials": 10, "tol": 1e-3, "max_iter": 1000},
    "learn-can": {"seed": 0, "ntrials": 100, "tol": 1e-3, "max_iter": 1000, "threads": None, "interlace_tol": DEFAULT_INTERLACE_TOL},
    "report": {},
}
REQUIRED = {
    "gen-local": ("l", "h", "out_dir"),
    "gen-can": ("topology", "n", "out_dir"),
    "solve-local": ("input", "report"),
    "learn-can": ("truth", "section", "report"),
    "report": ("reports", "out"),
}


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """Deterministic CSV cell: ``repr`` for floats, 1/0 for booleans, empty for None."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def append_row(path: Path, header: Sequence[str], row: Sequence[Any]) -> None:
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, newline="") as fh:
            first = next(csv.reader(fh), None)
        if first != list(header):
            raise UsageError(f"{path} exists with a different header")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(header)
        w.writerow([fmt(x) for x in row])


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Path, command: str, params: dict, inputs: Sequence[str], outputs: Sequence[Path], started: str) -> Path:
    digest_src = {"command": command, "params": params, "inputs": {str(p): _file_digest(p) for p in inputs}}
    blob = json.dumps(digest_src, sort_keys=True, default=str).encode()
    manifest = {
        "command": command,
        "config_digest": hashlib.sha256(blob).hexdigest(),
        "seed": params.get("seed"),
        "versions": f"canlearn {__version__}; numpy {np.__version__}; python {sys.version.split()[0]}",
        "started": started,
        "finished": _now(),
        "params": params,
        "outputs": [str(p) for p in outputs],
    }
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- commands


def cmd_gen_local(p: dict) -> tuple[int, list[Path]]:
    l, h, count = p["l"], p["h"], p["count"]
    if not l > h >= 1:
        raise UsageError(f"need l > h >= 1, got l={l}, h={h}")
    if count < 1:
        raise UsageError("--count must be positive")
    out = Path(p["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        inst = gen_local_instance(l, h, [p["seed"], i])
        meta = {"kind": "local", "l": l, "h": h, "seed": p["seed"], "index": i}
        path = out / f"local_l{l}_h{h}_s{p['seed']}_{i:03d}.json"
        save_dataset(local_instance_graph(inst, meta), path)
        written.append(path)
    return EXIT_OK, written


def section_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def cmd_gen_can(p: dict) -> tuple[int, list[Path]]:
    n, topo, sections = p["n"], p["topology"], p["sections"]
    if topo not in TOPOLOGIES:
        raise UsageError(f"--topology must be one of {TOPOLOGIES}")
    if n < 2 or sections < 0:
        raise UsageError("need --n >= 2 and --sections >= 0")
    out = Path(p["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    truth = gen_can(GenSpec(n_nodes=n, topology=topo, seed=p["seed"]))
    stem = f"{topo}_n{n}_s{p['seed']}"
    truth_path = out / f"{stem}_truth.json"
    save_dataset(truth, truth_path)
    written = [truth_path]
    for k in range(sections):
        ss = section_seed(p["seed"], k)
        measures = gen_global_section(truth, ss)
        meta = {"kind": "section", "topology": topo, "n": n, "seed": p["seed"], "section_seed": ss}
        path = out / f"{stem}_section{k:03d}.json"
        save_dataset(with_measures(truth, measures, meta), path)
        written.append(path)
    return EXIT_OK, written


def _solver_config(p: dict) -> SolverConfig:
    try:
        return SolverConfig(max_iter=p["max_iter"], tol=p["tol"], ntrials=p["ntrials"], seed=p["seed"])
    except CanLearnError as exc:
        raise UsageError(str(exc)) from None


def _local_instance(graph: CanGraph, path) -> tuple:
    if graph.n_nodes != 2 or len(graph.edges) != 1 or graph.edges[0].map is None:
        raise SchemaError("edges", f"{path} is not a local instance (two nodes, one edge with a map)")
    e = graph.edges[0]
    return graph.measures[e.low], graph.measures[e.high], e


def cmd_solve_local(p: dict) -> tuple[int, list[Path]]:
    config = _solver_config(p)
    graph = load_dataset(p["input"])
    low, high, edge = _local_instance(graph, p["input"])
    report = solve_edge(build_problem(low, high, edge.structure), config, edge=(edge.low, edge.high))
    ev = evaluate_local(report.map, edge.map, low, high) if report.converged else None
    row = [
        Path(p["input"]).stem, low.dim, high.dim, config.seed, config.ntrials, report.converged,
        report.trial_index, report.iterations, *report.final_residuals,
        ev and ev.kl, ev and ev.frob_dist, ev and ev.f1, None if ev is None else ev.constructive,
    ]
    out = Path(p["report"])
    append_row(out, LOCAL_HEADER, row)
    return (EXIT_OK if report.converged else EXIT_NOCONV), [out]


def cmd_learn_can(p: dict) -> tuple[int, list[Path]]:
    config = _solver_config(p)
    threads = p["threads"] if p["threads"] is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise UsageError("--threads must be positive")
    truth = load_dataset(p["truth"])
    section = load_dataset(p["section"])
    if section.dims != truth.dims:
        raise UsageError("section and truth files have different node dimensions")
    search = SearchConfig(solver=config, interlace_tol=p["interlace_tol"], parallel_edges=threads > 1, threads=threads)
    t0 = time.perf_counter()
    learned, trace = learn_can(section.measures, truth.structures(), search)
    wall = time.perf_counter() - t0
    fpr, tpr = evaluate_against_truth(learned, truth)
    row = [
        truth.meta.get("topology", ""), truth.n_nodes, section.meta.get("section_seed", ""), config.ntrials,
        trace.solves_launched, trace.solves_skipped, fpr, tpr, wall,
    ]
    out = Path(p["report"])
    append_row(out, CAN_HEADER, row)
    outputs = [out]
    if p.get("trace"):
        trace_path = Path(p["trace"])
        _atomic_write(trace_path, json.dumps(trace.to_dict(), indent=1) + "\n")
        outputs.append(trace_path)
    return EXIT_OK, outputs


def read_report(path) -> tuple[str, list[dict[str, str]]]:
    """Parse a local or CAN report; raises SchemaError on anything unexpected."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(str(path), "empty report")
    header, body = rows[0], rows[1:]
    kind = next((k for k, (hdr, *_) in REPORT_KINDS.items() if hdr == header), None)
    if kind is None:
        raise SchemaError(str(path), f"unrecognized header {header}")
    out = []
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{path}:{i}", f"expected {len(header)} fields, got {len(r)}")
        out.append(dict(zip(header, r)))
    return kind, out


def summarize(reports: Sequence[tuple[str, list[dict[str, str]]]]) -> list[list[Any]]:
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    for kind, rows in reports:
        _, keys, metrics = REPORT_KINDS[kind]
        for row in rows:
            config = ";".join(f"{k}={row[k]}" for k in keys)
            bucket = groups.setdefault((kind, config), {m: [] for m in metrics})
            for m in metrics:
                if row[m] == "":
                    continue  # metrics of non-converged solves
                try:
                    bucket[m].append(float(row[m]))
                except ValueError:
                    raise SchemaError(m, f"non-numeric value {row[m]!r}") from None
    table = []
    for (kind, config), bucket in sorted(groups.items()):
        for m in REPORT_KINDS[kind][2]:
            vals = bucket[m]
            if not vals:
                table.append([kind, config, m, 0, None, None, None, None, None])
                continue
            q1, med, q3 = quartiles(vals)
            table.append([kind, config, m, len(vals), float(np.mean(vals)), med, q1, q3, q3 - q1])
    return table


def cmd_report(p: dict) -> tuple[int, list[Path]]:
    parsed = [read_report(path) for path in p["reports"]]
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SUMMARY_HEADER)]
    lines += [",".join(fmt(x) for x in row) for row in summarize(parsed)]
    _atomic_write(out, "\n".join(lines) + "\n")
    return EXIT_OK, [out]


COMMANDS = {
    "gen-local": cmd_gen_local,
    "gen-can": cmd_gen_can,
    "solve-local": cmd_solve_local,
    "learn-can": cmd_learn_can,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canlearn", description="Learn causal abstraction networks from Gaussian covariances.")
    parser.add_argument("--version", action="version", version=f"canlearn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp, seeded=True):
        sp.add_argument("--config", help="JSON file with option values (flags take precedence)")
        if seeded:
            sp.add_argument("--seed", type=int, default=S, help=f"master seed (falls back to ${SEED_ENV}, then 0)")

    def solver_flags(sp):
        sp.add_argument("--ntrials", type=int, default=S)
        sp.add_argument("--tol", type=float, default=S)
        sp.add_argument("--max-iter", dest="max_iter", type=int, default=S)

    sp = sub.add_parser("gen-local", help="write planted local instances")
    sp.add_argument("--l", type=int, default=S)
    sp.add_argument("--h", type=int, default=S)
    sp.add_argument("--count", type=int, default=S)
    sp.add_argument("--out-dir", dest="out_dir", default=S)
    common(sp)

    sp = sub.add_parser("gen-can", help="write a ground-truth network and global sections")
    sp.add_argument("--topology", choices=TOPOLOGIES, default=S)
    sp.add_argument("--n", type=int, default=S)
    sp.add_argument("--sections", type=int, default=S)
    sp.add_argument("--out-dir", dest="out_dir", default=S)
    common(sp)

    sp = sub.add_parser("solve-local", help="solve one local instance and append a report row")
    sp.add_argument("--input", default=S)
    sp.add_argument("--report", default=S)
    solver_flags(sp)
    common(sp)

    sp = sub.add_parser("learn-can", help="learn a network from one global section")
    sp.add_argument("--truth", default=S)
    sp.add_argument("--section", default=S)
    sp.add_argument("--report", default=S)
    sp.add_argument("--trace", default=S)
    sp.add_argument("--threads", type=int, default=S, help="worker threads for edge solves (default: all cores)")
    sp.add_argument("--interlace-tol", dest="interlace_tol", type=float, default=S)
    solver_flags(sp)
    common(sp)

    sp = sub.add_parser("report", help="median / IQR summary of report CSVs")
    sp.add_argument("--reports", nargs="+", default=S)
    sp.add_argument("--out", default=S)
    common(sp, seeded=False)
    return parser


def resolve_params(command: str, flags: dict, environ=os.environ) -> dict:
    """Merge defaults < $CANLEARN_SEED < config file < flags."""
    params = dict(DEFAULTS[command])
    if "seed" in params and environ.get(SEED_ENV):
        try:
            params["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer") from None
    cfg_path = flags.pop("config", None)
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise DatasetIOError(f"cannot read config {cfg_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(cfg_path, f"invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise SchemaError(cfg_path, "config must be a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key not in params and key not in REQUIRED[command] and key != "trace":
                raise UsageError(f"unknown config key {key!r} for {command}")
            params[key] = value
    params.update(flags)
    missing = [k for k in REQUIRED[command] if k not in params]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return params


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(ns)
    command = flags.pop("command")
    started = _now()
    try:
        params = resolve_params(command, flags)
        code, outputs = COMMANDS[command](params)
        inputs = [params[k] for k in ("input", "truth", "section") if k in params]
        inputs += list(params.get("reports", []))
        anchor = Path(params["out_dir"]) if "out_dir" in params else outputs[0].parent
        write_manifest(anchor, command, params, inputs, outputs, started)
    except UsageError as exc:
        print(f"canlearn {command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError) as exc:
        print(f"canlearn {command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except CanLearnError as exc:
        print(f"canlearn {command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
