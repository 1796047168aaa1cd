"""Conversation orchestration: prompt assembly, draft-based schema filtering,
SQL generation, execution-guided repair, and session bookkeeping.

One call to process_turn runs a full turn: on a fresh session the database is
picked by beam retrieval over the catalog, then demonstrations are selected,
the schema is (optionally) narrowed using a draft query, the model writes the
SQL, and failures are repaired against real execution errors before the final
result is returned.
"""

from __future__ import annotations

import re
import threading
import time
import uuid
from dataclasses import dataclass, field

from .catalog import Catalog, DatabaseEntry, serialize_schema
from .demopool import DemoPool, Demonstration
from .executor import ExecError, ExecutionResult, execute
from .llm import ChatMessage, GenerationParams, LlmError
from .prompts import load_prompt
from .retrieval import LlmFailure, RetrievalConfig, murre_retrieve, select_database
from .sqlkit import ParseFailure, extract_table_refs


class PipelineError(Exception):
    pass


class NoSqlFound(PipelineError):
    """The model reply contained neither a fenced block nor a statement."""


class TurnInFlight(PipelineError):
    """A second turn was started while one is still being processed."""


@dataclass
class PipelineConfig:
    n_shot: int = 3
    max_debug_iters: int = 3
    enable_pre_sql: bool = True
    enable_self_debug: bool = True
    retrieval_per_turn: bool = False
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    generation: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if self.n_shot < 0:
            raise ValueError("n_shot must be >= 0")
        if self.max_debug_iters < 0:
            raise ValueError("max_debug_iters must be >= 0")

    def as_dict(self) -> dict:
        return {
            "n_shot": self.n_shot,
            "max_debug_iters": self.max_debug_iters,
            "enable_pre_sql": self.enable_pre_sql,
            "enable_self_debug": self.enable_self_debug,
            "retrieval_per_turn": self.retrieval_per_turn,
            "retrieval": {
                "beam_width": self.retrieval.beam_width,
                "max_hops": self.retrieval.max_hops,
                "tables_per_hop": self.retrieval.tables_per_hop,
                "score_aggregation": self.retrieval.score_aggregation,
            },
            "generation": {
                "temperature": self.generation.temperature,
                "max_tokens": self.generation.max_tokens,
            },
        }


@dataclass
class Turn:
    question: str
    pre_sql: str | None
    filtered_tables: list[str] | None
    final_sql: str
    debug_trace: list[tuple[str, str]]
    result: ExecutionResult
    demo_ids: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "question": self.question,
            "pre_sql": self.pre_sql,
            "filtered_tables": self.filtered_tables,
            "final_sql": self.final_sql,
            "debug_trace": [[sql, err] for sql, err in self.debug_trace],
            "result": self.result.as_dict(),
            "demo_ids": list(self.demo_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Turn":
        res = data.get("result") or {}
        err = res.get("error")
        result = ExecutionResult(
            columns=list(res.get("columns", [])),
            rows=[tuple(r) for r in res.get("rows", [])],
            error=ExecError(err["message"], err["kind"]) if err else None,
            truncated=bool(res.get("truncated", False)),
        )
        return cls(
            question=data["question"],
            pre_sql=data.get("pre_sql"),
            filtered_tables=data.get("filtered_tables"),
            final_sql=data.get("final_sql", ""),
            debug_trace=[(s, e) for s, e in data.get("debug_trace", [])],
            result=result,
            demo_ids=list(data.get("demo_ids", [])),
        )


@dataclass
class SessionState:
    session_id: str
    db_id: str | None = None
    turns: list[Turn] = field(default_factory=list)
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    retrieval: list[tuple[str, float]] | None = None
    retrieved_tables: dict[str, list[str]] | None = None
    lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    @property
    def history(self) -> list[tuple[str, str]]:
        return [(t.question, t.final_sql) for t in self.turns]


def new_session(session_id: str | None = None) -> SessionState:
    return SessionState(session_id or uuid.uuid4().hex)


@dataclass
class PromptBundle:
    messages: list[ChatMessage]


def _render_dialogue(schema_text: str, history, question: str) -> str:
    parts = ["Database schema:\n" + schema_text]
    if history:
        lines = []
        for q, sql in history:
            lines.append(f"Q: {q}")
            lines.append(f"SQL: {sql}")
        parts.append("Conversation so far:\n" + "\n".join(lines))
    parts.append("Question: " + question)
    return "\n\n".join(parts)


def build_prompt(
    session: SessionState,
    schema_text: str,
    demos: list[Demonstration],
    question: str,
    system_text: str | None = None,
) -> PromptBundle:
    """Assemble the chat prompt: system text, one user/assistant pair per
    demonstration turn, then a single user message carrying the schema, the
    dialogue so far, and the current question."""
    if not schema_text:
        raise ValueError("schema_text must be non-empty")
    messages = [ChatMessage("system", system_text or load_prompt("system"))]
    for demo in demos:
        for turn in demo.turns:
            messages.append(ChatMessage("user", turn.question))
            messages.append(
                ChatMessage("assistant", f"```sql\n{turn.sql}\n```")
            )
    messages.append(
        ChatMessage("user", _render_dialogue(schema_text, session.history, question))
    )
    return PromptBundle(messages)


_FENCE_RE = re.compile(r"```(?:\w+[ \t]*\n)?(.*?)```", re.DOTALL)
_STMT_RE = re.compile(r"\b(SELECT|WITH)\b", re.IGNORECASE)


def extract_sql(model_output: str) -> str:
    """First fenced code block, else the first SELECT/WITH statement with
    trailing prose cut at the statement terminator."""
    m = _FENCE_RE.search(model_output)
    if m:
        sql = m.group(1).strip()
        if sql:
            return sql
    for m in _STMT_RE.finditer(model_output):
        sql = model_output[m.start():]
        semi = sql.find(";")
        if semi != -1:
            sql = sql[:semi]
        sql = sql.strip()
        # a conversational "with" is not a CTE; a real one names the table
        # expression ("WITH x AS (") and has a SELECT inside
        if m.group(1).upper() == "WITH" and not (
            re.match(r"WITH\s+(RECURSIVE\s+)?\S+\s+AS\s*\(", sql, re.I)
            and re.search(r"\bSELECT\b", sql, re.I)
        ):
            continue
        return sql
    raise NoSqlFound("model reply contained no SQL statement")


def _fk_neighbors(entry: DatabaseEntry, names: set[str]) -> set[str]:
    """Expand a table set by one hop along foreign keys, both directions."""
    wanted = {n.lower() for n in names}
    out = set(wanted)
    for table in entry.tables:
        for col in table.columns:
            if not col.foreign_ref:
                continue
            ref = col.foreign_ref[0].lower()
            if table.name.lower() in wanted:
                out.add(ref)
            if ref in wanted:
                out.add(table.name.lower())
    return {t.name for t in entry.tables if t.name.lower() in out}


def pre_sql_filter(
    session: SessionState,
    entry: DatabaseEntry,
    demos: list[Demonstration],
    question: str,
    llm,
    cfg: PipelineConfig,
) -> tuple[str, str | None, list[str] | None]:
    """Draft a query over the full schema, then keep only the tables the
    draft touches plus their foreign-key neighbors. Any failure to pin down
    a table set falls back to the full schema."""
    full_schema = serialize_schema(entry)
    bundle = build_prompt(
        session, full_schema, demos, question, system_text=load_prompt("presql")
    )
    try:
        reply = llm.complete(bundle.messages, cfg.generation)
    except LlmError as exc:
        raise LlmFailure(f"draft generation failed: {exc}") from exc
    try:
        pre_sql = extract_sql(reply)
    except NoSqlFound:
        return full_schema, None, None
    try:
        refs = extract_table_refs(pre_sql)
    except ParseFailure:
        return full_schema, pre_sql, None
    known = {r for r in refs if entry.has_table(r)}
    if not known:
        return full_schema, pre_sql, None
    kept = _fk_neighbors(entry, known)
    tables = sorted(kept, key=str.lower)
    return serialize_schema(entry, tables=set(tables)), pre_sql, tables


def self_debug(
    sql: str,
    entry: DatabaseEntry,
    question: str,
    schema_text: str,
    llm,
    cfg: PipelineConfig,
    executor=execute,
    on_stage=None,
) -> tuple[str, list[tuple[str, str]], ExecutionResult]:
    """Execute, and while the statement errors ask for a repair, at most
    max_debug_iters times. Each repair call adds one (sql, error) trace
    entry. An upstream failure mid-loop returns the last state as-is."""
    result = executor(entry, sql)
    trace: list[tuple[str, str]] = []
    if not cfg.enable_self_debug:
        return sql, trace, result
    template = load_prompt("debug")
    while result.error is not None and len(trace) < cfg.max_debug_iters:
        trace.append((sql, result.error.message))
        if on_stage:
            on_stage("debug", {"iteration": len(trace), "error": result.error.message})
        prompt = [
            ChatMessage("system", load_prompt("system")),
            ChatMessage(
                "user",
                template.format(
                    sql=sql,
                    error=result.error.message,
                    schema=schema_text,
                    question=question,
                ),
            ),
        ]
        try:
            reply = llm.complete(prompt, cfg.generation)
            sql = extract_sql(reply)
        except (LlmError, NoSqlFound):
            break
        result = executor(entry, sql)
    return sql, trace, result


def process_turn(
    session: SessionState,
    question: str,
    catalog: Catalog,
    pool: DemoPool,
    llm,
    cfg: PipelineConfig | None = None,
    on_stage=None,
    on_token=None,
) -> Turn:
    """Run one conversation turn end to end and append it to the session.

    on_stage(name, payload) fires as each phase completes; on_token receives
    text chunks of the final generation only.
    """
    cfg = cfg or PipelineConfig()
    if not session.lock.acquire(blocking=False):
        raise TurnInFlight(f"session {session.session_id} has a turn in flight")
    try:
        emit = on_stage or (lambda name, payload: None)
        if session.db_id is None or cfg.retrieval_per_turn:
            ranked, tables = murre_retrieve(question, catalog, cfg.retrieval, llm=llm)
            session.db_id = select_database(ranked)
            session.retrieval = ranked
            session.retrieved_tables = tables
            emit("retrieval", {"ranked": ranked, "db_id": session.db_id})
        entry = catalog.get(session.db_id)
        demos = pool.select_demos(
            question, history=[q for q, _ in session.history], n=cfg.n_shot
        )
        emit("demos", {"demo_ids": [d.demo_id for d in demos]})
        schema_text = serialize_schema(entry)
        pre_sql = None
        filtered_tables = None
        if cfg.enable_pre_sql:
            schema_text, pre_sql, filtered_tables = pre_sql_filter(
                session, entry, demos, question, llm, cfg
            )
            emit("pre-sql", {"pre_sql": pre_sql, "filtered_tables": filtered_tables})
        bundle = build_prompt(session, schema_text, demos, question)
        emit("generation", {})
        try:
            reply = llm.complete(bundle.messages, cfg.generation, on_chunk=on_token)
        except LlmError as exc:
            raise LlmFailure(f"generation failed: {exc}") from exc
        try:
            sql = extract_sql(reply)
        except NoSqlFound as exc:
            turn = Turn(
                question=question,
                pre_sql=pre_sql,
                filtered_tables=filtered_tables,
                final_sql="",
                debug_trace=[],
                result=ExecutionResult(error=ExecError(str(exc), "rejected")),
                demo_ids=[d.demo_id for d in demos],
            )
            session.turns.append(turn)
            session.updated_at = time.time()
            emit("execution", turn.result.as_dict())
            return turn
        final_sql, trace, result = self_debug(
            sql, entry, question, schema_text, llm, cfg, on_stage=on_stage
        )
        emit("execution", result.as_dict())
        turn = Turn(
            question=question,
            pre_sql=pre_sql,
            filtered_tables=filtered_tables,
            final_sql=final_sql,
            debug_trace=trace,
            result=result,
            demo_ids=[d.demo_id for d in demos],
        )
        session.turns.append(turn)
        session.updated_at = time.time()
        return turn
    finally:
        session.lock.release()
