"""Dataset loading, execution-accuracy metrics, and the command line entry.

QEX is the fraction of turns whose predicted SQL executes to the same result
as the gold SQL; IEX is the fraction of interactions where every turn is
correct. Gold statements that themselves fail to execute make their turn
uncounted: logged, excluded from QEX and from the interaction's all-correct
test, while the interaction stays in the IEX denominator.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import Catalog, CatalogError
from .demopool import DemoPool, FusedConfig, default_pool, fused_augment, load_pool
from .executor import ComparisonPolicy, compare_results, execute
from .llm import EndpointConfig, HttpChatClient, ScriptedMock
from .pipeline import PipelineConfig, SessionState, process_turn


class EvalError(Exception):
    pass


class UnknownFormat(EvalError):
    pass


class SchemaMismatch(EvalError):
    pass


FORMATS = ("native", "sparc", "cosql", "chase")


@dataclass
class EvalInteraction:
    interaction_id: str
    db_id: str
    turns: list[tuple[str, str]]  # (question, gold_sql)

    def __post_init__(self):
        if not self.turns:
            raise EvalError(f"interaction {self.interaction_id} has no turns")

    def as_dict(self) -> dict:
        return {
            "interaction_id": self.interaction_id,
            "db_id": self.db_id,
            "turns": [{"question": q, "gold_sql": s} for q, s in self.turns],
        }


@dataclass
class EvalReport:
    qex: float
    iex: float
    per_turn: list[dict]
    config: dict

    def as_dict(self) -> dict:
        return {
            "qex": self.qex,
            "iex": self.iex,
            "per_turn": self.per_turn,
            "config": self.config,
        }


def _load_json_files(path: Path) -> list:
    if path.is_dir():
        rows = []
        for child in sorted(path.glob("*.json")):
            data = json.loads(child.read_text(encoding="utf-8"))
            rows.extend(data if isinstance(data, list) else [data])
        return rows
    data = json.loads(path.read_text(encoding="utf-8"))
    return data if isinstance(data, list) else [data]


def _native_interactions(rows: list) -> list[EvalInteraction]:
    out = []
    for row in rows:
        turns = [(t["question"], t["gold_sql"]) for t in row["turns"]]
        out.append(EvalInteraction(row["interaction_id"], row["db_id"], turns))
    return out


def _published_interactions(rows: list) -> list[EvalInteraction]:
    """Adapter for the released multi-turn benchmark layouts: entries carry
    database_id and an interaction list; question/SQL key names vary across
    releases and the trailing "final" summary object is not a turn."""
    out = []
    for i, row in enumerate(rows):
        db_id = row.get("database_id") or row.get("db_id")
        if not db_id:
            raise EvalError(f"entry {i}: no database_id")
        turns = []
        for item in row.get("interaction", []):
            question = item.get("utterance") or item.get("question")
            sql = item.get("query") or item.get("sql")
            if question and sql:
                turns.append((question.strip(), sql.strip()))
        out.append(EvalInteraction(f"{db_id}-{i}", db_id, turns))
    return out


def load_dataset(path, format: str, catalog: Catalog | None = None) -> list[EvalInteraction]:
    """Read interactions from a file or a directory of JSON files. With a
    catalog, every referenced database must resolve."""
    if format not in FORMATS:
        raise UnknownFormat(f"unknown dataset format: {format!r}")
    rows = _load_json_files(Path(path))
    if format == "native":
        interactions = _native_interactions(rows)
    else:
        interactions = _published_interactions(rows)
    if catalog is not None:
        known = set(catalog.ids())
        for inter in interactions:
            if inter.db_id not in known:
                raise SchemaMismatch(
                    f"interaction {inter.interaction_id} references missing "
                    f"database {inter.db_id!r}"
                )
    return interactions


def serialize_interactions(interactions: list[EvalInteraction]) -> list[dict]:
    return [inter.as_dict() for inter in interactions]


def evaluate(
    interactions: list[EvalInteraction],
    catalog: Catalog,
    pool: DemoPool,
    llm,
    cfg: PipelineConfig | None = None,
    transcript_path=None,
    model_name: str | None = None,
) -> EvalReport:
    """Run every interaction in a fresh session pinned to its database and
    score the executed results."""
    cfg = cfg or PipelineConfig()
    known = set(catalog.ids())
    for inter in interactions:
        if inter.db_id not in known:
            raise SchemaMismatch(
                f"interaction {inter.interaction_id} references missing "
                f"database {inter.db_id!r}"
            )
    if model_name is None:
        endpoint = getattr(llm, "config", None)
        model_name = getattr(endpoint, "model_name", None) or "scripted-mock"

    per_turn: list[dict] = []
    interactions_correct = 0
    transcript = open(transcript_path, "w", encoding="utf-8") if transcript_path else None
    try:
        for inter in interactions:
            session = SessionState(inter.interaction_id, db_id=inter.db_id)
            entry = catalog.get(inter.db_id)
            all_correct = True
            for idx, (question, gold_sql) in enumerate(inter.turns):
                record = {
                    "interaction_id": inter.interaction_id,
                    "turn": idx,
                    "correct": False,
                    "pred_sql": "",
                    "gold_sql": gold_sql,
                    "error": None,
                }
                turn = None
                try:
                    turn = process_turn(session, question, catalog, pool, llm, cfg)
                    record["pred_sql"] = turn.final_sql
                    if turn.result.error is not None:
                        record["error"] = turn.result.error.message
                except Exception as exc:  # per-turn failures are data
                    record["error"] = f"{type(exc).__name__}: {exc}"
                gold = execute(entry, gold_sql)
                if gold.error is not None:
                    record["correct"] = None
                    record["error"] = f"gold failed: {gold.error.message}"
                elif turn is not None and turn.result.error is None:
                    policy = ComparisonPolicy.for_gold(gold_sql)
                    record["correct"] = compare_results(turn.result, gold, policy)
                if record["correct"] is False:
                    all_correct = False
                per_turn.append(record)
                if transcript is not None:
                    line = {
                        "interaction_id": inter.interaction_id,
                        "turn_index": idx,
                        "turn": turn.as_dict() if turn is not None else None,
                    }
                    transcript.write(json.dumps(line, ensure_ascii=False) + "\n")
            if all_correct:
                interactions_correct += 1
    finally:
        if transcript is not None:
            transcript.close()

    counted = [r for r in per_turn if r["correct"] is not None]
    qex = sum(1 for r in counted if r["correct"]) / len(counted) if counted else 0.0
    iex = interactions_correct / len(interactions) if interactions else 0.0
    config = dict(cfg.as_dict(), model=model_name)
    return EvalReport(qex=qex, iex=iex, per_turn=per_turn, config=config)


# -- command line ------------------------------------------------------------


def _build_llm(args):
    if getattr(args, "mock", None):
        spec = json.loads(Path(args.mock).read_text(encoding="utf-8"))
        if isinstance(spec, list):
            return ScriptedMock(sequence=spec)
        if spec.get("mode") == "keyed":
            return ScriptedMock(keyed=spec["replies"])
        return ScriptedMock(sequence=spec["replies"])
    if getattr(args, "endpoint", None):
        import os

        config = EndpointConfig(
            base_url=args.endpoint,
            api_key=os.environ.get(args.api_key_env, ""),
            model_name=args.model,
        )
        return HttpChatClient(config)
    raise EvalError("either --mock or --endpoint is required")


def _ingest_directory(catalog: Catalog, root: Path) -> list[str]:
    """Register every database file under root: flat files, or one level of
    <db_id>/<db_id>.sqlite nesting."""
    added = []
    patterns = ("*.sqlite", "*.db")
    files = [p for pat in patterns for p in sorted(root.glob(pat))]
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        for pat in patterns:
            files.extend(sorted(child.glob(pat)))
    for path in files:
        db_id = path.stem
        catalog.ingest(str(path), db_id)
        added.append(db_id)
    return added


def _load_demo_pool(args, catalog) -> DemoPool:
    if getattr(args, "demos", None):
        return load_pool(args.demos, catalog=catalog)
    return default_pool(catalog)


def _add_llm_flags(sub):
    sub.add_argument("--mock", help="scripted replies JSON (offline run)")
    sub.add_argument("--endpoint", help="chat-completions base URL")
    sub.add_argument("--model", default="", help="model name for the endpoint")
    sub.add_argument(
        "--api-key-env",
        default="CONVOSQL_API_KEY",
        help="environment variable holding the endpoint key",
    )


def _add_pipeline_flags(sub):
    sub.add_argument("--n-shot", type=int, default=3)
    sub.add_argument("--max-debug-iters", type=int, default=3)
    sub.add_argument("--no-pre-sql", action="store_true")
    sub.add_argument("--no-self-debug", action="store_true")


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        n_shot=args.n_shot,
        max_debug_iters=args.max_debug_iters,
        enable_pre_sql=not args.no_pre_sql,
        enable_self_debug=not args.no_self_debug,
    )


def _cmd_eval(args) -> int:
    catalog = Catalog()
    _ingest_directory(catalog, Path(args.databases))
    interactions = load_dataset(args.data, args.format, catalog=catalog)
    pool = _load_demo_pool(args, catalog)
    llm = _build_llm(args)
    report = evaluate(
        interactions,
        catalog,
        pool,
        llm,
        _pipeline_config(args),
        transcript_path=args.transcript,
    )
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.as_dict(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )
    name = Path(args.data).stem or "dataset"
    print(f"{'dataset':<24} {'QEX':>8} {'IEX':>8}")
    print(f"{name:<24} {report.qex:>8.3f} {report.iex:>8.3f}")
    return 0


def _cmd_augment(args) -> int:
    catalog = Catalog()
    _ingest_directory(catalog, Path(args.databases))
    pool = _load_demo_pool(args, catalog)
    before = len(pool)
    cfg = FusedConfig(rounds=args.rounds, random_seed=args.seed)
    if args.rounds > 0:
        llm = _build_llm(args)
        pool = fused_augment(pool, catalog, llm, cfg)
    if args.out:
        pool.path = Path(args.out)
        pool.save()
    print(
        json.dumps(
            {"pool_before": before, "pool_after": len(pool), "added": len(pool) - before}
        )
    )
    return 0


def _cmd_ingest(args) -> int:
    catalog = Catalog(root=args.root)
    db_id = args.id or Path(args.db).stem
    catalog.ingest(args.db, db_id, replace=args.replace)
    print(json.dumps({"db_id": db_id, "tables": len(catalog.get(db_id).tables)}))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app, load_service_config, pipeline_config_from_dict

    file_cfg = load_service_config(args.config) if args.config else {}
    data_dir = args.data_dir or file_cfg.get("data_dir")
    if not data_dir:
        raise EvalError("serve needs --data-dir (flag or config file)")
    endpoint_cfg = file_cfg.get("endpoint", {})
    pipeline_cfg = None
    if "pipeline" in file_cfg:
        pipeline_cfg = pipeline_config_from_dict(file_cfg["pipeline"])
    app = build_app(
        data_dir=data_dir,
        mock_script=args.mock,
        endpoint=args.endpoint or endpoint_cfg.get("base_url"),
        model=args.model or endpoint_cfg.get("model", ""),
        api_key_env=args.api_key_env,
        pipeline_config=pipeline_cfg,
        static_dir=args.static_dir or file_cfg.get("static_dir"),
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convosql", description="conversational text-to-SQL toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="run a dataset and report QEX/IEX")
    p_eval.add_argument("--data", required=True, help="dataset file or directory")
    p_eval.add_argument("--format", required=True, choices=FORMATS)
    p_eval.add_argument("--databases", required=True, help="directory of database files")
    p_eval.add_argument("--demos", help="demonstration pool JSON")
    p_eval.add_argument("--report", help="write the report JSON here")
    p_eval.add_argument("--transcript", help="write per-turn JSON lines here")
    _add_llm_flags(p_eval)
    _add_pipeline_flags(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_aug = sub.add_parser("augment", help="grow the demonstration pool")
    p_aug.add_argument("--demos", help="demonstration pool JSON")
    p_aug.add_argument("--databases", required=True)
    p_aug.add_argument("--rounds", type=int, default=2)
    p_aug.add_argument("--seed", type=int, default=0)
    p_aug.add_argument("--out", help="write the grown pool here")
    _add_llm_flags(p_aug)
    p_aug.set_defaults(func=_cmd_augment)

    p_ing = sub.add_parser("ingest", help="register a database file")
    p_ing.add_argument("--root", required=True, help="catalog directory")
    p_ing.add_argument("--db", required=True, help="database file")
    p_ing.add_argument("--id", help="database id (default: file stem)")
    p_ing.add_argument("--replace", action="store_true")
    p_ing.set_defaults(func=_cmd_ingest)

    p_srv = sub.add_parser("serve", help="start the HTTP service")
    p_srv.add_argument("--data-dir")
    p_srv.add_argument("--config", help="service config JSON")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)
    p_srv.add_argument("--static-dir", help="directory with the built web client")
    _add_llm_flags(p_srv)
    p_srv.set_defaults(func=_cmd_serve)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (EvalError, CatalogError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
