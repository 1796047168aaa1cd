"""Open-domain database retrieval: multi-hop table retrieval with beam search
and LLM-driven removal of already-covered query content.

Each hop scores every table against the state's residual query, branches on
the best k, and prunes to the best B states. A state stops growing when the
rewriter says nothing is left to cover or the hop budget runs out. Databases
are then ranked by the best within-database score any halted state achieved.
"""

import logging
from dataclasses import dataclass, field

from .catalog import Catalog
from .demopool import CorpusStats, bm25_score
from .llm import ChatMessage, LlmError
from .prompts import load_prompt
from .textutil import tokenize_text

log = logging.getLogger(__name__)


class RetrievalError(Exception):
    pass


class EmptyCatalog(RetrievalError):
    pass


class NoCandidates(RetrievalError):
    pass


class LlmFailure(RetrievalError):
    pass


class _StopMarker:
    def __repr__(self):
        return "STOP"


STOP = _StopMarker()
STOP_LITERAL = "<DONE>"


@dataclass
class ScoredTable:
    db_id: str
    table_name: str
    score: float


@dataclass
class BeamState:
    residual_query: str
    chosen: list[ScoredTable] = field(default_factory=list)
    cum_score: float = 0.0
    hop: int = 0

    def key(self):
        """Deterministic total order for pruning ties."""
        return (-self.cum_score, tuple((t.db_id, t.table_name) for t in self.chosen))


@dataclass
class RetrievalConfig:
    beam_width: int = 4
    max_hops: int = 3
    tables_per_hop: int = 4
    score_aggregation: str = "sum"  # sum | max

    def __post_init__(self):
        if self.beam_width < 1 or self.max_hops < 1 or self.tables_per_hop < 1:
            raise ValueError("beam_width, max_hops and tables_per_hop must be positive")
        if self.score_aggregation not in ("sum", "max"):
            raise ValueError(f"unknown score_aggregation {self.score_aggregation!r}")

    def aggregate(self, scores) -> float:
        scores = list(scores)
        if not scores:
            return 0.0
        return max(scores) if self.score_aggregation == "max" else sum(scores)


def _table_doc(entry, table) -> list[str]:
    parts = [table.name]
    for col in table.columns:
        parts.append(col.name)
        if col.declared_type:
            parts.append(col.declared_type)
    return tokenize_text(" ".join(parts))


def score_tables(query: str, catalog: Catalog) -> list[ScoredTable]:
    """Every catalog table scored by BM25 between the query and the table's
    schema text (name, columns, declared types).

    Query tokens ending in "s" are stripped to the singular when the stripped
    form occurs anywhere in the schema vocabulary, so "singers" can match a
    table named singer without a stemmer.
    """
    keys = []
    docs = []
    for entry in catalog.entries():
        for table in entry.tables:
            keys.append((entry.db_id, table.name))
            docs.append(_table_doc(entry, table))
    if not keys:
        raise EmptyCatalog("no tables to score")
    stats = CorpusStats.from_docs(docs)
    vocab = set(stats.df)
    q_tokens = [
        t[:-1] if t.endswith("s") and t[:-1] in vocab else t
        for t in tokenize_text(query)
    ]
    scored = [
        ScoredTable(db_id, name, bm25_score(q_tokens, doc, stats))
        for (db_id, name), doc in zip(keys, docs)
    ]
    scored.sort(key=lambda t: (-t.score, t.db_id, t.table_name))
    return scored


REWRITE_SYSTEM = (
    "You shorten database questions by deleting the parts already covered by"
    " known tables. Reply with the remaining request only, or <DONE> if"
    " nothing remains."
)


def rewrite_remove(query: str, chosen: list[ScoredTable], llm) -> "str | _StopMarker":
    """Ask the LLM for the query minus the content the chosen tables cover.

    An empty reply or the <DONE> marker means nothing is left. An empty
    chosen list short-circuits: there is nothing to remove."""
    if not chosen:
        return query
    tables = ", ".join(f"{t.db_id}.{t.table_name}" for t in chosen)
    template = load_prompt("rewrite")
    messages = [
        ChatMessage("system", REWRITE_SYSTEM),
        ChatMessage("user", template.format(tables=tables, query=query)),
    ]
    try:
        reply = llm.complete(messages)
    except LlmError as exc:
        raise LlmFailure(f"rewrite call failed: {exc}") from exc
    reply = reply.strip()
    if not reply or reply == STOP_LITERAL:
        return STOP
    return reply


def murre_retrieve(
    query: str,
    catalog: Catalog,
    cfg: RetrievalConfig | None = None,
    llm=None,
    scorer=None,
) -> tuple[list[tuple[str, float]], dict[str, list[str]]]:
    """Multi-hop retrieval; returns (ranked (db_id, score) list, tables per db).

    `scorer` may replace the lexical table scorer; it must accept
    (query, catalog) and return ranked ScoredTable lists.
    """
    cfg = cfg or RetrievalConfig()
    if len(catalog) == 0:
        raise EmptyCatalog("catalog holds no databases")
    scorer = scorer or score_tables
    active = [BeamState(residual_query=query)]
    halted: list[BeamState] = []
    while active:
        branched: list[BeamState] = []
        for state in active:
            ranked = scorer(state.residual_query, catalog)
            taken = {(t.db_id, t.table_name) for t in state.chosen}
            fresh = [t for t in ranked if (t.db_id, t.table_name) not in taken]
            for table in fresh[: cfg.tables_per_hop]:
                chosen = state.chosen + [table]
                branched.append(
                    BeamState(
                        residual_query=state.residual_query,
                        chosen=chosen,
                        cum_score=cfg.aggregate(t.score for t in chosen),
                        hop=state.hop + 1,
                    )
                )
        branched.sort(key=BeamState.key)
        survivors = branched[: cfg.beam_width]
        active = []
        for state in survivors:
            if state.hop >= cfg.max_hops:
                halted.append(state)
                continue
            residual = rewrite_remove(state.residual_query, [state.chosen[-1]], llm)
            if residual is STOP:
                halted.append(state)
            else:
                state.residual_query = residual
                active.append(state)
    db_scores: dict[str, float] = {}
    db_tables: dict[str, set[str]] = {}
    for state in halted:
        per_db: dict[str, list[float]] = {}
        for table in state.chosen:
            per_db.setdefault(table.db_id, []).append(table.score)
            db_tables.setdefault(table.db_id, set()).add(table.table_name)
        for db_id, scores in per_db.items():
            restricted = cfg.aggregate(scores)
            if db_id not in db_scores or restricted > db_scores[db_id]:
                db_scores[db_id] = restricted
    ranked = sorted(db_scores.items(), key=lambda kv: (-kv[1], kv[0]))
    tables = {db_id: sorted(names) for db_id, names in db_tables.items()}
    log.debug("retrieval ranked %d databases: %s", len(ranked), ranked[:3])
    return ranked, tables


def select_database(ranked: list[tuple[str, float]]) -> str:
    """Top database id; callers pass murre_retrieve's ranking, which already
    breaks score ties lexicographically."""
    if not ranked:
        raise NoCandidates("retrieval produced no databases")
    best_score = max(score for _db, score in ranked)
    candidates = sorted(db for db, score in ranked if score == best_score)
    return candidates[0]
