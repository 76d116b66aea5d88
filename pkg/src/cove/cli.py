"""Command-line entry point: run, eval, replay, validate, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .backend import (
    BackendError,
    HTTPBackend,
    ReplayBackend,
    ScriptedBackend,
    load_http_settings,
    load_rules,
)
from .datasets import DatasetError, TaskRecord, dataset_hash, load_dataset
from .evaluation import (
    EvalReport,
    FactJudgment,
    JudgeMode,
    ListJudgment,
    NoFacts,
    EmptyGold,
    extract_facts,
    fact_report,
    judge_fact,
    list_report,
    multispan_report,
    render_table,
    clip_sentences,
    sentence_facts,
)
from .model import (
    CoveError,
    DecodingParams,
    InvalidConfig,
    PipelineConfig,
    PipelineResult,
    TaskKind,
    Variant,
    decode_result,
    encode_result,
    validate_config,
)
from .pipeline import PipelineError, parse_list_answer, run
from .prompts import BankStep, PromptError, load_banks

log = logging.getLogger("cove")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATASET = 2
EXIT_BACKEND = 3
EXIT_DIVERGENCE = 4

RESULTS = "results.jsonl"
MANIFEST = "manifest.json"
REPORT = "report.json"


class ConfigError(CoveError):
    pass


# -- config ------------------------------------------------------------------

# flag dest -> config-file key; every run flag has a file equivalent
_RUN_KEYS = {
    "dataset": "dataset", "task": "task", "variant": "variant", "planner": "planner_strategy",
    "max_questions": "max_questions", "parallelism": "parallelism", "seed": "seed",
    "failure_policy": "failure_policy", "temperature": "temperature", "max_tokens": "max_tokens",
    "stop": "stop_sequences", "jobs": "jobs", "mock": "mock", "backend_config": "backend_config",
    "banks": "banks", "out_dir": "out_dir", "run_dir": "run_dir",
}
_DEFAULTS = {"jobs": 1, "out_dir": "runs"}


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    # nested decoding block is accepted as in PipelineConfig.to_dict
    flat = dict(doc)
    for k, v in (flat.pop("decoding", None) or {}).items():
        flat.setdefault(k, v)
    unknown = set(flat) - set(_RUN_KEYS.values())
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return flat


def effective_settings(args) -> dict:
    """Config file values overlaid with explicitly given flags."""
    settings = dict(_DEFAULTS)
    settings.update(load_config_file(getattr(args, "config", None)))
    for dest, key in _RUN_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[key] = value
    return settings


def build_config(settings: dict) -> PipelineConfig:
    try:
        decoding = DecodingParams(
            float(settings.get("temperature", 0.0)),
            int(settings.get("max_tokens", 512)),
            tuple(settings.get("stop_sequences") or ()),
        )
        config = PipelineConfig(
            variant=settings.get("variant", Variant.FACTORED.value),
            planner_strategy=settings.get("planner_strategy", "open"),
            max_questions=int(settings.get("max_questions", 10)),
            decoding=decoding,
            parallelism=int(settings.get("parallelism", 4)),
            seed=int(settings.get("seed", 0)),
            failure_policy=settings.get("failure_policy", "abort"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for warning in validate_config(config):
        log.warning(warning)
    return config


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def make_backend(settings: dict, seed: int):
    mock, http = settings.get("mock"), settings.get("backend_config")
    if mock and http:
        raise ConfigError("give either a mock script or an HTTP backend config, not both")
    if mock:
        try:
            backend = ScriptedBackend(load_rules(mock), seed=seed, backend_id=f"scripted:{Path(mock).name}")
        except (OSError, ValueError) as exc:
            raise ConfigError(f"mock script: {exc}") from None
        return backend, {"kind": "mock", "rules": str(mock), "rules_hash": _file_hash(mock)}
    try:
        http_settings = load_http_settings(http)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"backend config: {exc}") from None
    return HTTPBackend(http_settings), {
        "kind": "http", "endpoint": http_settings.endpoint, "model": http_settings.model,
    }


def _banks(path):
    try:
        banks = load_banks(path)
        banks.validate()
        return banks
    except (OSError, PromptError) as exc:
        raise ConfigError(f"banks: {exc}") from None


# -- run ---------------------------------------------------------------------


def read_results_file(path: Path) -> list[PipelineResult]:
    """Results from a file; a torn final line (interrupted write) is ignored."""
    out = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        if i == len(lines) - 1 and not line.endswith("\n"):
            log.warning("%s: ignoring incomplete last line", path)
            break
        out.append(decode_result(line))
    return out


def _truncate_torn_line(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


def cmd_run(args) -> int:
    try:
        settings = effective_settings(args)
        config = build_config(settings)
        if not settings.get("dataset") or not settings.get("task"):
            raise ConfigError("dataset and task are required")
        task = TaskKind(settings["task"])
    except (ConfigError, InvalidConfig, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        records = load_dataset(settings["dataset"], task)
    except (OSError, DatasetError) as exc:
        log.error("dataset error: %s", exc)
        return EXIT_DATASET
    try:
        banks = _banks(settings.get("banks"))
        backend, descriptor = make_backend(settings, config.seed)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    now = datetime.now(timezone.utc)
    if settings.get("run_dir"):
        run_dir = Path(settings["run_dir"])
    else:
        run_dir = Path(settings["out_dir"]) / f"{now:%Y%m%d-%H%M%S}-{config.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path, results_path = run_dir / MANIFEST, run_dir / RESULTS
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "dataset": {
            "path": str(settings["dataset"]),
            "hash": dataset_hash(settings["dataset"]),
            "task_kind": task.value,
            "records": len(records),
        },
        "backend": descriptor,
        "banks": None if settings.get("banks") is None else str(settings["banks"]),
        "jobs": int(settings["jobs"]),
        "output_dir": str(run_dir),
        "timestamp": now.isoformat(timespec="seconds"),
        "version": __version__,
    }
    done: set[str] = set()
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text(encoding="utf-8"))
        for key in ("config_hash",):
            if old.get(key) != manifest[key]:
                log.error("config error: %s holds a run with a different config", run_dir)
                return EXIT_CONFIG
        if old["dataset"]["hash"] != manifest["dataset"]["hash"]:
            log.error("config error: %s was run on a different dataset", run_dir)
            return EXIT_CONFIG
        if results_path.exists():
            _truncate_torn_line(results_path)
            done = {r.query.id for r in read_results_file(results_path)}
        log.info("resuming %s: %d of %d queries already done", run_dir, len(done), len(records))
    else:
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    todo = [r for r in records if r.id not in done]
    failures = 0
    with open(results_path, "a", encoding="utf-8") as out, \
            ThreadPoolExecutor(max_workers=max(1, int(settings["jobs"]))) as pool:
        futures = [pool.submit(run, rec.query, config, backend, banks) for rec in todo]
        # consume in dataset order so output is independent of scheduling
        for rec, fut in zip(todo, futures):
            try:
                result = fut.result()
            except (PipelineError, BackendError) as exc:
                failures += 1
                log.error("query %s failed: %s", rec.id, exc)
                continue
            except CoveError as exc:
                failures += 1
                log.error("query %s failed: %s", rec.id, exc)
                continue
            out.write(encode_result(result))
            out.flush()
            for warning in result.trace.warnings:
                log.info("query %s: %s", rec.id, warning)
    print(run_dir)
    if failures:
        log.error("%d of %d queries failed; completed results kept in %s", failures, len(todo), results_path)
        return EXIT_BACKEND
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def _results_path(path) -> Path:
    p = Path(path)
    return p / RESULTS if p.is_dir() else p


def _manifest_for(results_path: Path) -> dict:
    m = results_path.parent / MANIFEST
    return json.loads(m.read_text(encoding="utf-8")) if m.exists() else {}


def _response(result: PipelineResult, field: str, clip: int | None) -> str:
    text = result.baseline_response if field == "baseline" else result.final_response
    return clip_sentences(text, clip) if clip else text


def cmd_eval(args) -> int:
    results_path = _results_path(args.results)
    manifest = _manifest_for(results_path)
    try:
        task = TaskKind(args.task or manifest.get("dataset", {}).get("task_kind"))
        dataset = args.dataset or manifest.get("dataset", {}).get("path")
        if not dataset:
            raise ValueError("no gold dataset given")
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        gold = {r.id: r for r in load_dataset(dataset, task)}
        results = read_results_file(results_path)
    except (OSError, DatasetError, ValueError, KeyError) as exc:
        log.error("dataset error: %s", exc)
        return EXIT_DATASET
    if not results:
        log.error("dataset error: %s holds no results", results_path)
        return EXIT_DATASET
    ids = [r.query.id for r in results]
    missing = sorted(set(ids) - set(gold))
    if missing or len(set(ids)) != len(ids) or (not args.allow_partial and set(ids) != set(gold)):
        log.error("dataset error: result ids do not match gold ids (unknown %s, missing %s)",
                  missing[:5], sorted(set(gold) - set(ids))[:5])
        return EXIT_DATASET

    variant = manifest.get("config", {}).get("variant") or results[0].trace.config.variant.value
    label = args.label or (variant if args.field == "final" else f"{variant}:baseline")
    meta = {
        "variant": variant,
        "field": args.field,
        "config_hash": manifest.get("config_hash", results[0].trace.config.config_hash()),
        "dataset_hash": dataset_hash(dataset),
        "results": str(results_path),
    }
    ordered = sorted(results, key=lambda r: r.query.id)
    try:
        if task is TaskKind.LIST_QA:
            judgments = [
                ListJudgment(r.query.id, tuple(parse_list_answer(_response(r, args.field, None))),
                             gold[r.query.id].gold)
                for r in ordered
            ]
            report = list_report(label, judgments, meta)
        elif task is TaskKind.MULTISPAN_QA:
            pairs = [(parse_list_answer(_response(r, args.field, None)), gold[r.query.id].gold_strings)
                     for r in ordered]
            report = multispan_report(label, pairs, meta)
        else:
            report = _fact_eval(args, ordered, gold, label, meta)
    except (EmptyGold, NoFacts) as exc:
        log.error("dataset error: %s", exc)
        return EXIT_DATASET
    except (ConfigError, BackendError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_BACKEND

    out = Path(args.out) if args.out else results_path.parent / (
        REPORT if args.field == "final" else f"report.{args.field}.json")
    out.write_text(report.dumps(), encoding="utf-8")
    print(render_table([report]), end="")
    return EXIT_OK


def _fact_eval(args, results, gold: dict[str, TaskRecord], label, meta) -> EvalReport:
    backend = None
    if args.facts == "backend" or args.judge == "backend":
        backend, _ = make_backend({"mock": args.mock, "backend_config": args.backend_config}, 0)
    bank = _banks(args.banks).get(TaskKind.LONGFORM_BIO, BankStep.EXTRACT) if args.facts == "backend" else None
    warnings: list[str] = []
    judgments = []
    for r in results:
        text = _response(r, args.field, args.clip)
        if not text.strip():
            facts = []
        elif args.facts == "backend":
            facts = extract_facts(text, backend, bank)
        else:
            facts = sentence_facts(text)
        rec = gold[r.query.id]
        judgments.append(FactJudgment(
            r.query.id,
            tuple((f, judge_fact(f, rec.gold_strings, JudgeMode(args.judge), backend, warnings)) for f in facts),
            rec.rarity,
        ))
    report = fact_report(label, judgments, meta)
    report.flags.extend(warnings)
    if args.clip:
        report.meta["clip"] = str(args.clip)
    return report


# -- replay ------------------------------------------------------------------


def replay_result(result: PipelineResult, banks) -> list[str]:
    """Re-run one recorded result against its own completions; returns divergences."""
    recorded = result.trace
    backend = ReplayBackend(recorded.calls)
    problems = []
    try:
        again = run(result.query, recorded.config, backend, banks)
        trace = again.trace
    except PipelineError as exc:
        again, trace = None, exc.trace
        problems.append(f"{result.query.id}: replay stopped at {exc.step.value}: {exc}")
    old, new = recorded.calls, trace.calls
    for a, b in zip(old, new):
        if a.prompt != b.prompt or a.step != b.step:
            where = next((i for i, (x, y) in enumerate(zip(a.prompt, b.prompt)) if x != y),
                         min(len(a.prompt), len(b.prompt)))
            problems.append(f"{result.query.id}: seq {a.seq} ({a.step.value}) prompt differs at char {where}")
    if again is not None and len(old) != len(new):
        problems.append(f"{result.query.id}: recorded {len(old)} calls, replay made {len(new)}")
    if again is not None and again.final_response != result.final_response:
        problems.append(f"{result.query.id}: final response differs")
    return problems


def cmd_replay(args) -> int:
    results_path = _results_path(args.results)
    manifest = _manifest_for(results_path)
    try:
        results = read_results_file(results_path)
    except (OSError, ValueError, KeyError) as exc:
        log.error("dataset error: cannot read %s: %s", results_path, exc)
        return EXIT_DATASET
    try:
        banks = _banks(args.banks or manifest.get("banks"))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    if args.id:
        results = [r for r in results if r.query.id in set(args.id)]
    problems = []
    for result in results:
        problems.extend(replay_result(result, banks))
    for p in problems:
        print(f"DIVERGED {p}")
    print(f"replayed {len(results)} results, {len(problems)} divergences")
    return EXIT_DIVERGENCE if problems else EXIT_OK


# -- validate / report -------------------------------------------------------


def cmd_validate(args) -> int:
    code = EXIT_OK
    if args.dataset:
        if not args.task:
            log.error("config error: --task is required with --dataset")
            return EXIT_CONFIG
        try:
            records = load_dataset(args.dataset, args.task)
            print(f"{args.dataset}: {len(records)} {args.task} records OK")
        except (OSError, DatasetError) as exc:
            print(f"{args.dataset}: {exc}")
            code = EXIT_DATASET
    if args.banks:
        try:
            banks = _banks(args.banks)
            print(f"{args.banks}: {len(banks)} banks OK")
        except ConfigError as exc:
            print(exc)
            code = code or EXIT_CONFIG
    if args.rules:
        try:
            print(f"{args.rules}: {len(load_rules(args.rules))} rules OK")
        except (OSError, ValueError) as exc:
            print(exc)
            code = code or EXIT_CONFIG
    if args.config:
        try:
            build_config(load_config_file(args.config))
            print(f"{args.config}: config OK")
        except (ConfigError, InvalidConfig, ValueError) as exc:
            print(f"{args.config}: {exc}")
            code = code or EXIT_CONFIG
    if not (args.dataset or args.banks or args.rules or args.config):
        try:
            print(f"built-in banks: {len(_banks(None))} OK")
        except ConfigError as exc:
            print(exc)
            code = EXIT_CONFIG
    return code


_VARIANT_ORDER = {v.value: i for i, v in enumerate(Variant)}


def cmd_report(args) -> int:
    reports = []
    for path in args.paths:
        p = Path(path)
        files = sorted(p.glob("report*.json")) if p.is_dir() else [p]
        if not files:
            log.error("dataset error: no report in %s; run `cove eval` first", p)
            return EXIT_DATASET
        for f in files:
            try:
                reports.append(EvalReport.from_dict(json.loads(f.read_text(encoding="utf-8"))))
            except (OSError, ValueError, KeyError) as exc:
                log.error("dataset error: %s: %s", f, exc)
                return EXIT_DATASET
    if args.compare:
        reports.sort(key=lambda r: (_VARIANT_ORDER.get(r.meta.get("variant"), 99),
                                    r.meta.get("field") != "baseline", r.label))
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    else:
        print(render_table(reports), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cove", description="Chain-of-Verification pipelines and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a pipeline variant over a dataset")
    p.add_argument("--config", help="YAML config file; flags override its values")
    p.add_argument("--dataset")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--planner", choices=["open", "yes_no", "rule"])
    p.add_argument("--max-questions", type=int)
    p.add_argument("--parallelism", type=int, help="max concurrent backend calls per query")
    p.add_argument("--jobs", type=int, help="queries processed concurrently")
    p.add_argument("--seed", type=int)
    p.add_argument("--failure-policy", choices=["abort", "skip"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--stop", action="append", help="extra stop sequence (repeatable)")
    p.add_argument("--mock", help="scripted mock rules file")
    p.add_argument("--backend-config", help="YAML file for the HTTP backend")
    p.add_argument("--banks", help="directory of demonstration banks")
    p.add_argument("--out-dir", help="parent directory for new run directories")
    p.add_argument("--run-dir", help="explicit run directory (resumed if it exists)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a results file against gold")
    p.add_argument("results", help="run directory or results file")
    p.add_argument("--dataset", help="gold dataset (defaults to the run manifest)")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--field", choices=["final", "baseline"], default="final")
    p.add_argument("--label")
    p.add_argument("--out", help="report file (default: report.json next to the results)")
    p.add_argument("--allow-partial", action="store_true", help="score a subset of the gold ids")
    p.add_argument("--facts", choices=["sentences", "backend"], default="sentences",
                   help="longform fact extraction")
    p.add_argument("--judge", choices=[m.value for m in JudgeMode], default="exact")
    p.add_argument("--clip", type=int, help="keep only the first N sentences before scoring")
    p.add_argument("--mock")
    p.add_argument("--backend-config")
    p.add_argument("--banks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-execute recorded traces and check prompts byte for byte")
    p.add_argument("results", help="run directory or results file")
    p.add_argument("--id", action="append")
    p.add_argument("--banks")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("validate", help="check datasets, banks, mock scripts and configs")
    p.add_argument("--dataset")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--banks")
    p.add_argument("--rules")
    p.add_argument("--config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="render one or more eval reports as a table")
    p.add_argument("paths", nargs="+", help="run directories or report files")
    p.add_argument("--compare", action="store_true", help="order rows by variant")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
