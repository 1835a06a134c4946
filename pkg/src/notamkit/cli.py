"""``notamkit`` command-line entry point.

Exit codes: 0 success, 2 when some records failed (or on usage errors), 1 on
fatal errors. Settings resolve as flags > ``--config`` JSON > environment >
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .corpus import compute_stats, load_corpus
from .debate import DebateConfig, run_hdf
from .discovery import AggregatorConfig, EmergentField, run_mda
from .errors import GatewayError, IoError, KeyCollision, NotamkitError, ReplayMiss, StageError, describe
from .evalkit import (
    SWEEP_PARAMETERS,
    score_discovery,
    score_extraction,
    sweep_extraction,
    sweep_tau_benchmark,
    sweep_tau_discovery,
)
from .gateway import (
    DEFAULT_MODEL,
    ENV_API_KEY,
    ENV_API_URL,
    ENV_MODEL,
    Backend,
    LiveBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
)
from .schema import ExtractionResult, get_schema
from .strategies import (
    KINDS,
    SC_TEMPERATURE_PRESETS,
    StrategyConfig,
    apply_srcv,
    builtin_bank,
    builtin_srcv_rules,
    load_icl_bank,
    load_srcv_rules,
    run_extraction,
)

log = logging.getLogger("notamkit")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

DEFAULTS = {
    "backend": "live",
    "model": DEFAULT_MODEL,
    "seed": 42,
    "jobs": 1,
    "schema": "runway_lighting",
    "strategy": "zero_shot",
    "shots": 5,
    "naming": "clear",
    "temperatures": ",".join(str(t) for t in SC_TEMPERATURE_PRESETS["default"]),
    "samples": 1,
    "vote": "field",
    "tau": 0.7,
    "max_iters": 5,
    "quiescence": 1,
    "mode": "extraction",
    "match_threshold": 0.5,
    "clusters": 50,
}


class UsageError(NotamkitError):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one invocation."""

    command: str
    backend: str
    model_id: str
    seed: int
    jobs: int
    options: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.options[key]

    def get(self, key, default=None):
        return self.options.get(key, default)


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in obj.items()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = _load_config(getattr(args, "config", None))
    env = {"model": os.environ.get(ENV_MODEL)}
    skip = {"command", "config", "func", "log_level"}
    resolved = {}
    for key in set(vars(args)) | set(DEFAULTS):
        if key in skip:
            continue
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key)
        if value is None:
            value = env.get(key)
        if value is None:
            value = DEFAULTS.get(key)
        resolved[key] = value
    spec = resolved.pop("backend")
    if not (spec == "live" or spec.startswith("mock:") or spec.startswith("replay:")):
        raise UsageError(f"backend must be live, mock:<script> or replay:<cassette>, got {spec!r}")
    return RunConfig(
        command=args.command,
        backend=spec,
        model_id=resolved.pop("model"),
        seed=int(resolved.pop("seed")),
        jobs=max(1, int(resolved.pop("jobs"))),
        options=resolved,
    )


def make_backend(spec: str) -> Backend:
    """Build the backend named by ``spec``. Tests may replace this function."""
    if spec == "live":
        return LiveBackend(os.environ.get(ENV_API_URL, ""), os.environ.get(ENV_API_KEY))
    kind, _, path = spec.partition(":")
    _require_file(path, f"{kind} file")
    return MockBackend.from_file(path) if kind == "mock" else ReplayBackend(path)


# -- helpers -----------------------------------------------------------------

def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise IoError(f"{what} not found: {path}")
    return p


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _write_text(path: Optional[str], text: str) -> None:
    if not path or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _jsonl(objs) -> str:
    return "".join(json.dumps(o, ensure_ascii=False, sort_keys=True) + "\n" for o in objs)


def _read_jsonl(path: str, what: str) -> list[dict]:
    p = _require_file(path, what)
    out = []
    for no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise IoError(f"{path}:{no}: invalid JSON ({exc.msg})") from exc
    return out


def _write_meta(out: Optional[str], meta: dict) -> None:
    """Timestamps and run facts live beside the output so the output itself stays reproducible."""
    if not out or out == "-":
        log.info("run meta: %s", json.dumps(meta, sort_keys=True))
        return
    _write_text(out + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _values(raw: str, parameter: str) -> list[float]:
    try:
        vals = [float(v) for v in str(raw).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {raw!r}") from exc
    if parameter == "shots":
        return [int(v) for v in vals]
    return vals


def _strategy(cfg: RunConfig) -> StrategyConfig:
    temps = _values(cfg["temperatures"], "temperature")
    return StrategyConfig(
        kind=cfg["strategy"],
        shots=int(cfg["shots"]),
        naming=cfg["naming"],
        sc_temperatures=tuple(temps),
        sc_samples_per_temperature=int(cfg["samples"]),
        vote=cfg["vote"],
        model_id=cfg.model_id,
    )


def _bank(cfg: RunConfig, schema):
    if cfg.get("icl_bank"):
        return load_icl_bank(_require_file(cfg["icl_bank"], "ICL bank"), schema)
    try:
        return builtin_bank(schema)
    except (IoError, FileNotFoundError, KeyError):
        return []


def _safe_name(notam_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", notam_id) or "notam"


# -- commands ----------------------------------------------------------------

def cmd_parse(cfg: RunConfig, backend_factory) -> int:
    corpus = load_corpus(_require_file(cfg["input"], "--input"))
    schema = get_schema(cfg["schema"])
    strategy = _strategy(cfg)
    bank = _bank(cfg, schema) if strategy.kind in ("icl", "cot") else []
    rules = []
    if cfg.get("srcv"):
        rules = builtin_srcv_rules(schema) if cfg["srcv"] == "builtin" else load_srcv_rules(
            _require_file(cfg["srcv"], "--srcv"), schema
        )
    started = _now()
    backend = backend_factory()
    results = run_extraction(corpus.records, schema, strategy, backend, bank, cfg.jobs)
    if rules:
        by_id = {r.id: r for r in corpus.records}
        results = [apply_srcv(res, by_id[res.notam_id], rules, backend, schema, cfg.model_id) for res in results]
    failures = sum(not r.ok for r in results)
    _write_text(cfg.get("out"), _jsonl(r.to_json() for r in results))
    _write_meta(cfg.get("out"), {
        "command": "parse", "started": started, "finished": _now(), "backend": cfg.backend,
        "records": len(results), "failures": failures, "rejected_lines": len(corpus.rejects),
    })
    for rej in corpus.rejects:
        log.warning("input line %d rejected: %s", rej.line_no, rej.reason)
    if failures:
        print(f"{failures} of {len(results)} records failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_discover(cfg: RunConfig, backend_factory) -> int:
    corpus = load_corpus(_require_file(cfg["input"], "--input"))
    agg = AggregatorConfig(float(cfg["tau"]))
    debate = DebateConfig(int(cfg["max_iters"]), int(cfg["quiescence"]))
    tdir = Path(cfg["transcript_dir"]) if cfg.get("transcript_dir") else None
    if tdir:
        tdir.mkdir(parents=True, exist_ok=True)
    started = _now()
    backend = backend_factory()
    lines, failures = [], 0
    for rec in corpus.records:
        try:
            z_mda = run_mda(rec, backend, agg, cfg.model_id)
            final, transcript = run_hdf(z_mda, backend, debate, cfg.model_id)
        except NotamkitError as exc:
            cause = exc.cause if isinstance(exc, StageError) else exc
            if isinstance(cause, ReplayMiss):
                raise cause
            failures += 1
            lines.append({"notam_id": rec.id, "fields": [], "error": describe(exc)})
            partial = getattr(exc, "partial", None)
            if tdir and partial is not None:
                _write_text(str(tdir / f"{_safe_name(rec.id)}.json"), partial.dumps() + "\n")
            continue
        lines.append({"notam_id": rec.id, "fields": [f.to_json() for f in final.fields]})
        if tdir:
            _write_text(str(tdir / f"{_safe_name(rec.id)}.json"), transcript.dumps() + "\n")
    _write_text(cfg.get("out"), _jsonl(lines))
    _write_meta(cfg.get("out"), {
        "command": "discover", "started": started, "finished": _now(), "backend": cfg.backend,
        "records": len(lines), "failures": failures,
    })
    return EXIT_PARTIAL if failures else EXIT_OK


def _discovery_docs(rows: list[dict]) -> dict[str, list[EmergentField]]:
    out = {}
    for row in rows:
        doc = str(row["notam_id"])
        if doc in out:
            raise KeyCollision(f"duplicate document {doc!r}")
        out[doc] = [EmergentField.from_json(f) for f in row.get("fields", ())]
    return out


def cmd_eval(cfg: RunConfig, backend_factory) -> int:
    pred_rows = _read_jsonl(cfg["pred"], "--pred")
    gold_rows = _read_jsonl(cfg["gold"], "--gold")
    if cfg["mode"] == "extraction":
        report = score_extraction(
            [ExtractionResult.from_json(r) for r in pred_rows], [ExtractionResult.from_json(r) for r in gold_rows]
        )
    else:
        report = score_discovery(
            _discovery_docs(pred_rows), _discovery_docs(gold_rows), float(cfg["match_threshold"])
        )
    print(report.render())
    if cfg.get("out"):
        _write_text(cfg["out"], json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, backend_factory) -> int:
    parameter = cfg["param"]
    values = _values(cfg["values"], parameter)
    if parameter == "tau" and not cfg.get("input"):
        result = sweep_tau_benchmark(values, int(cfg["clusters"]), cfg.seed)
    elif parameter == "tau":
        corpus = load_corpus(_require_file(cfg["input"], "--input"))
        gold = _discovery_docs(_read_jsonl(cfg["gold"], "--gold"))
        result = sweep_tau_discovery(values, corpus.records, gold, backend_factory(), float(cfg["match_threshold"]))
    else:
        corpus = load_corpus(_require_file(cfg["input"], "--input"))
        gold = [ExtractionResult.from_json(r) for r in _read_jsonl(cfg["gold"], "--gold")]
        schema = get_schema(cfg["schema"])
        base = _strategy(cfg)
        result = sweep_extraction(
            parameter, values, corpus.records, gold, schema, base, backend_factory(), _bank(cfg, schema), cfg.jobs
        )
    _write_text(cfg.get("out"), result.to_csv())
    if cfg.get("json_out"):
        _write_text(cfg["json_out"], json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    if cfg.get("out"):
        print(result.render())
    return EXIT_OK


def cmd_stats(cfg: RunConfig, backend_factory) -> int:
    corpus = load_corpus(_require_file(cfg["input"], "--input"))
    stats = compute_stats(corpus.records)
    if cfg.get("json"):
        print(json.dumps(stats.to_json(), indent=2, sort_keys=True))
    else:
        print(stats.render())
    if corpus.rejects:
        print(f"{len(corpus.rejects)} input lines rejected", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "parse": cmd_parse,
    "discover": cmd_discover,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
}


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default settings")
    common.add_argument("--backend", help="live | mock:<script.json> | replay:<cassette.jsonl>")
    common.add_argument("--model", help=f"model id (env {ENV_MODEL})")
    common.add_argument("--seed", type=int, help="seed for all randomness (default 42)")
    common.add_argument("--jobs", type=int, help="concurrent requests (default 1)")
    common.add_argument("--log-level", default="WARNING")

    strat = argparse.ArgumentParser(add_help=False)
    strat.add_argument("--schema", help="built-in schema id or schema JSON path")
    strat.add_argument("--strategy", choices=KINDS)
    strat.add_argument("--shots", type=int)
    strat.add_argument("--naming", choices=("clear", "weak"))
    strat.add_argument("--temperatures", help="self-consistency temperatures, comma-separated")
    strat.add_argument("--samples", type=int, help="samples per temperature")
    strat.add_argument("--vote", choices=("field", "whole"))
    strat.add_argument("--icl-bank", help="JSONL file of worked examples")

    p = argparse.ArgumentParser(prog="notamkit", description="NOTAM extraction and field discovery toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", parents=[common, strat], help="extract schema fields from a corpus")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--srcv", help="SRCV rules file, or 'builtin'")

    sd = sub.add_parser("discover", parents=[common], help="discover and refine emergent fields")
    sd.add_argument("--input")
    sd.add_argument("--tau", type=float)
    sd.add_argument("--max-iters", type=int)
    sd.add_argument("--quiescence", type=int)
    sd.add_argument("--out")
    sd.add_argument("--transcript-dir")

    se = sub.add_parser("eval", parents=[common], help="score predictions against gold")
    se.add_argument("--pred")
    se.add_argument("--gold")
    se.add_argument("--mode", choices=("extraction", "discovery"))
    se.add_argument("--match-threshold", type=float)
    se.add_argument("--out")

    sw = sub.add_parser("sweep", parents=[common, strat], help="sweep tau, shots or temperature")
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMETERS)
    sw.add_argument("--values", required=True)
    sw.add_argument("--input")
    sw.add_argument("--gold")
    sw.add_argument("--match-threshold", type=float)
    sw.add_argument("--clusters", type=int, help="synthetic benchmark size for tau without --input")
    sw.add_argument("--out", help="CSV output")
    sw.add_argument("--json-out")

    ss = sub.add_parser("stats", parents=[common], help="corpus statistics")
    ss.add_argument("--input")
    ss.add_argument("--json", action="store_true", default=None)

    sr = sub.add_parser("record", parents=[common], help="run another command, capturing a cassette")
    sr.add_argument("--cassette", required=True)
    sr.add_argument("rest", nargs=argparse.REMAINDER, help="command to run, e.g. -- parse --input x.jsonl")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)

    cassette = None
    if args.command == "record":
        rest = args.rest[1:] if args.rest[:1] == ["--"] else list(args.rest)
        if not rest or rest[0] not in COMMANDS:
            parser.error("record needs a command to run, e.g. record --cassette c.jsonl -- parse ...")
        cassette = args.cassette
        outer_backend = args.backend
        args = parser.parse_args(rest)
        if args.backend is None and outer_backend is not None:
            args.backend = outer_backend

    try:
        cfg = resolve_config(args)

        def backend_factory() -> Backend:
            backend = make_backend(cfg.backend)
            if cassette:
                backend = RecordingBackend(backend, cassette)
            return backend

        return COMMANDS[cfg.command](cfg, backend_factory)
    except (NotamkitError, GatewayError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and not isinstance(exc, NotamkitError) and exc.args else exc
        print(f"error: {describe(exc) if msg is exc else f'{type(exc).__name__}: {msg}'}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
