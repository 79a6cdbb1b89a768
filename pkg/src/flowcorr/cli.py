"""Command-line entry point: ``flowcorr <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import simulator
from .detector import PRESETS, CandidateSet, Metric, ToleranceSchedule, detect, detect_all
from .evaluator import EvaluationError, confusion, fmt3, kpis, render_csv, render_table, summarize
from .flow_stats import DEFAULT_SLACK
from .html_injector import InjectionSpec, inject_asset, parse_message, proxy_serve, transform_response
from .sweep import run_sweep
from .trace_model import ConnectionId, TraceError, load_ground_truth, natural_key, parse_trace

log = logging.getLogger("flowcorr")

CANDIDATE_HEADER = [
    "server_conn_id", "n_clients", "n_candidates", "candidates", "stopped_at",
    "tol_tp", "tol_at", "tol_td", "tol_tt", "evaluations",
]
DEFAULT_MAXIMA = PRESETS["B"]


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _read_trace(path: str):
    if not Path(path).is_file():
        raise CliError(f"trace file not found: {path}", code=1)
    try:
        return parse_trace(path)
    except TraceError as exc:
        raise CliError(f"{path}: {exc}", code=1) from None


def _read_truth(path: str):
    if not Path(path).is_file():
        raise CliError(f"ground-truth file not found: {path}", code=1)
    try:
        return load_ground_truth(path)
    except TraceError as exc:
        raise CliError(f"{path}: {exc}", code=1) from None


def _schedule(args, preset: str | None = None) -> ToleranceSchedule:
    base = PRESETS[preset.upper()] if preset else DEFAULT_MAXIMA
    maxima = [
        getattr(args, f"tol_max_{m}") if getattr(args, f"tol_max_{m}") is not None else b
        for m, b in zip(("tp", "at", "td", "tt"), base)
    ]
    try:
        return ToleranceSchedule.from_percent(*maxima, initial=args.tol_init, increment=args.tol_step)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# -- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    seed = args.seed
    if seed is None and os.environ.get("FLOWCORR_SEED"):
        seed = int(os.environ["FLOWCORR_SEED"])
    try:
        if args.config:
            scenario = simulator.load_scenario(args.config)
            if seed is not None:
                scenario = scenario.replace(seed=seed)
        else:
            scenario = simulator.preset(args.preset, seed=42 if seed is None else seed)
        if args.duration is not None:
            scenario = scenario.replace(duration=args.duration)
        result = simulator.simulate(scenario)
    except (simulator.ConfigurationError, OSError) as exc:
        raise CliError(f"configuration error: {exc}") from None
    manifest = simulator.write_outputs(result, scenario, args.out)
    print(
        f"{manifest['preset']}: {manifest['n_clients']} client connections, "
        f"{manifest['n_server_connections']} server connections -> {args.out}"
    )
    return 0


def _candidates_csv(results: list[CandidateSet], n_clients: int) -> str:
    rows = [",".join(CANDIDATE_HEADER)]
    for cs in results:
        tols = {s.metric: s.final_tolerance for s in cs.stages}
        stopped = cs.stopped_at
        rows.append(",".join([
            cs.server_conn.name,
            str(n_clients),
            str(len(cs.candidates)),
            ";".join(sorted((c.name for c in cs.candidates), key=natural_key)),
            stopped.value if stopped else ("error" if cs.error else ""),
            *(fmt3(tols[m]) if m in tols else "" for m in
              (Metric.PACKET_COUNT, Metric.AVG_GAP, Metric.TOTAL_DATA, Metric.TOTAL_TIME)),
            str(cs.evaluations),
        ]))
    return "\n".join(rows) + "\n"


def cmd_detect(args) -> int:
    servers = _read_trace(args.server_trace)
    clients = _read_trace(args.client_trace)
    schedule = _schedule(args, args.preset)
    results = detect_all(servers, clients, schedule, args.slack, args.threads)
    text = _candidates_csv(results, len(clients))
    _write(args.out, text)
    width = max([len(cs.server_conn.name) for cs in results] + [6])
    print(f"{'server':<{width}}  n  candidates")
    for cs in results:
        names = " ".join(sorted((c.name for c in cs.candidates), key=natural_key))
        print(f"{cs.server_conn.name:<{width}}  {len(cs.candidates)}  {names}")
    return 0


def _load_candidates(path: str) -> list[tuple[ConnectionId, frozenset, int]]:
    if not Path(path).is_file():
        raise CliError(f"candidates file not found: {path}", code=1)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CANDIDATE_HEADER:
            raise CliError(f"{path}: not a candidates report", code=1)
        for row in reader:
            if row["stopped_at"] == "error":
                continue
            cands = frozenset(ConnectionId(c) for c in row["candidates"].split(";") if c)
            out.append((ConnectionId(row["server_conn_id"]), cands, int(row["n_clients"])))
    return out


def cmd_evaluate(args) -> int:
    truth = _read_truth(args.ground_truth)
    vectors = []
    lines = ["server_conn_id,tp,fp,tn,fn," + ",".join(("se", "sp", "fpr", "fnr", "ppv", "npv"))]
    for server, cands, n in _load_candidates(args.candidates):
        if server not in truth:
            log.warning("no ground truth for %s", server)
            continue
        try:
            m = confusion(cands, truth[server], n)
        except EvaluationError as exc:
            raise CliError(f"{server}: {exc}", code=1) from None
        k = kpis(m)
        vectors.append(k)
        lines.append(",".join([server.name, *map(str, (m.tp, m.fp, m.tn, m.fn)),
                               *(fmt3(v) for v in k.as_dict().values())]))
    if not vectors:
        raise CliError("no detections with ground truth to evaluate", code=1)
    columns = {"all": summarize(vectors)}
    print(render_table(columns), end="")
    if args.out:
        out = Path(args.out)
        _write(str(out / "kpis.csv"), render_csv(columns))
        _write(str(out / "kpi_table.txt"), render_table(columns))
        _write(str(out / "per_detection.csv"), "\n".join(lines) + "\n")
    return 0


def _victim_from_manifest(truth_path: str) -> ConnectionId | None:
    manifest = Path(truth_path).parent / simulator.MANIFEST
    if manifest.is_file():
        name = json.loads(manifest.read_text()).get("victim_client_conn")
        return ConnectionId(name) if name else None
    return None


def cmd_sweep(args) -> int:
    presets = [p.strip().upper() for p in args.presets.split(",") if p.strip()]
    unknown = [p for p in presets if p not in PRESETS]
    if unknown or not presets:
        raise CliError(f"unknown preset(s) {', '.join(unknown) or '(none)'}; choose from {', '.join(PRESETS)}")
    servers = _read_trace(args.server_trace)
    clients = _read_trace(args.client_trace)
    truth = _read_truth(args.ground_truth)
    victim = ConnectionId(args.victim) if args.victim else _victim_from_manifest(args.ground_truth)
    if args.victim_preset.lower() == "custom":
        victim_schedule = _schedule(args)
    elif args.victim_preset.upper() in PRESETS:
        victim_schedule = _schedule(args, args.victim_preset)
    else:
        raise CliError(f"unknown victim preset {args.victim_preset!r}")
    result = run_sweep(
        servers, clients, truth, presets, victim, victim_schedule,
        args.slack, args.threads, args.tol_init, args.tol_step,
    )
    table = render_table(result.columns, result.victim_detected)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        _write(str(out / "sweep_table.txt"), table)
        _write(str(out / "sweep_kpis.csv"), render_csv(result.columns, result.victim_detected))
        _write(str(out / "sweep_detections.csv"), result.detections_csv())
    return 0


def cmd_inject(args) -> int:
    spec = InjectionSpec(args.asset_url, args.width)
    data = Path(args.input).read_bytes() if args.input != "-" else sys.stdin.buffer.read()
    if args.http:
        response = parse_message(data)
        out = transform_response(response, spec).to_bytes()
        matched = out != data
    else:
        out, matched = inject_asset(data, spec)
    if args.output == "-":
        sys.stdout.buffer.write(out)
    else:
        Path(args.output).write_bytes(out)
    print("injected" if matched else "no match; output unchanged", file=sys.stderr)
    return 0


def cmd_proxy(args) -> int:
    spec = InjectionSpec(args.asset_url, args.width, target_hosts=tuple(args.target_host or ()))
    proxy_serve(args.listen, args.origin, spec)
    return 0


def cmd_scaling(args) -> int:
    """Similarity evaluations (and optionally runtime) per detection vs client count."""
    sizes = [int(n) for n in args.clients.split(",")]
    schedule = _schedule(args, args.preset)
    rows = ["n_clients,detections,mean_evaluations" + (",mean_runtime_s" if args.timing else "")]
    for n in sizes:
        result = simulator.simulate(simulator.web_scenario(n, seed=args.seed))
        evals, times = [], []
        for flow in result.server_flows:
            t0 = time.perf_counter()
            evals.append(detect(flow, result.client_flows, schedule, args.slack).evaluations)
            times.append(time.perf_counter() - t0)
        row = f"{n},{len(evals)},{np.mean(evals):.3f}"
        if args.timing:
            row += f",{np.mean(times):.6f}"
        rows.append(row)
        print(row)
    _write(args.out, "\n".join(rows) + "\n")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tolerances (percent)")
    g.add_argument("--tol-init", type=float, default=5.0, help="starting tolerance (default 5)")
    g.add_argument("--tol-step", type=float, default=1.0, help="escalation step (default 1)")
    for m in ("tp", "at", "td", "tt"):
        g.add_argument(f"--tol-max-{m}", type=float, default=None, help=f"maximum {m} tolerance")
    p.add_argument("--slack", type=float, default=DEFAULT_SLACK, help="time-slice slack in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcorr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate client/server traces and ground truth")
    p.add_argument("--preset", default="tiny", help="tiny, small or papershape")
    p.add_argument("--config", help="scenario JSON file (overrides --preset)")
    p.add_argument("--seed", type=int, help="random seed (env FLOWCORR_SEED as fallback)")
    p.add_argument("--duration", type=float, help="override scenario duration in seconds")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="shortlist client connections per server connection")
    p.add_argument("--server-trace", required=True)
    p.add_argument("--client-trace", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), type=str.upper, help="base maxima (default B)")
    _add_schedule_flags(p)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="candidates CSV path")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="KPIs of a candidates report against ground truth")
    p.add_argument("--candidates", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", help="output directory for CSV/text reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="compare tolerance presets A-E")
    p.add_argument("--server-trace", required=True)
    p.add_argument("--client-trace", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--presets", default="A,B,C,D,E")
    p.add_argument("--victim", help="victim client connection id (default: from manifest.json)")
    p.add_argument("--victim-preset", default="A", help="preset for the Victim column, or 'custom'")
    _add_schedule_flags(p)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inject", help="rewrite an HTML body (or full HTTP response) file")
    p.add_argument("input", help="input file or '-'")
    p.add_argument("output", help="output file or '-'")
    p.add_argument("--asset-url", required=True)
    p.add_argument("--width", default="1px")
    p.add_argument("--http", action="store_true", help="input is a complete HTTP response")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("proxy", help="run the injecting reverse proxy")
    p.add_argument("--listen", type=_endpoint, default=("127.0.0.1", 8080))
    p.add_argument("--origin", type=_endpoint, required=True)
    p.add_argument("--asset-url", required=True)
    p.add_argument("--width", default="1px")
    p.add_argument("--target-host", action="append", help="only rewrite responses for this host")
    p.set_defaults(func=cmd_proxy)

    p = sub.add_parser("scaling", help="detection cost versus number of clients")
    p.add_argument("--clients", default="50,100,200,400")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--preset", choices=sorted(PRESETS), type=str.upper, default="B")
    _add_schedule_flags(p)
    p.add_argument("--timing", action="store_true", help="also report wall-clock runtime")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_scaling)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"flowcorr: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
