"""Demonstration pool: storage, BM25 selection, and Fused augmentation.

The pool holds (question, SQL) exemplars used as few-shot context. Fused
augmentation grows it: demos are clustered by SQL structure, members of
different clusters are fused by an LLM into new candidates, and candidates
enter the pool only after executing cleanly against their database.
"""

import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .catalog import Catalog, serialize_schema
from .executor import execute
from .llm import ChatMessage, LlmError
from .prompts import load_prompt
from .sqlkit import (
    KeywordSignature,
    ParseFailure,
    UnterminatedString,
    extract_table_refs,
    keyword_signature,
    normalize_sql,
    tokenize,
)
from .textutil import tokenize_text

log = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75


class PoolError(Exception):
    pass


class EmptyPool(PoolError):
    pass


class InsufficientPool(PoolError):
    pass


class InvalidDemoFile(PoolError):
    pass


class LlmFailure(PoolError):
    pass


@dataclass
class DemoTurn:
    question: str
    sql: str


@dataclass
class Demonstration:
    demo_id: str
    db_id: str
    turns: list[DemoTurn]
    source: str = "seed"  # seed | synthesized
    signature: KeywordSignature = field(init=False, repr=False)

    def __post_init__(self):
        if not self.turns:
            raise ValueError("demonstration needs at least one turn")
        self.signature = keyword_signature(self.turns[-1].sql)

    def as_dict(self) -> dict:
        return {
            "demo_id": self.demo_id,
            "db_id": self.db_id,
            "source": self.source,
            "turns": [{"question": t.question, "sql": t.sql} for t in self.turns],
        }


@dataclass
class CorpusStats:
    n_docs: int
    avg_len: float
    df: dict[str, int]

    @classmethod
    def from_docs(cls, docs: list[list[str]]):
        df: Counter = Counter()
        for doc in docs:
            df.update(set(doc))
        n = len(docs)
        avg = sum(len(d) for d in docs) / n if n else 0.0
        return cls(n_docs=n, avg_len=avg, df=dict(df))


def bm25_score(
    query_tokens: list[str],
    doc_tokens: list[str],
    stats: CorpusStats,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> float:
    """Okapi BM25 with idf = ln((N - df + 0.5)/(df + 0.5) + 1).

    Query terms are deduplicated; repeated question words do not multiply the
    score. Terms are summed in sorted order so scores are reproducible to the
    last bit.
    """
    tf = Counter(doc_tokens)
    dl = len(doc_tokens)
    score = 0.0
    for term in sorted(set(query_tokens)):
        f = tf.get(term, 0)
        if not f:
            continue
        df = stats.df.get(term, 0)
        idf = math.log((stats.n_docs - df + 0.5) / (df + 0.5) + 1)
        score += idf * (f * (k1 + 1)) / (f + k1 * (1 - b + b * dl / stats.avg_len))
    return score


@dataclass
class Verdict:
    accepted: bool
    reason: str | None = None
    detail: str = ""


class DemoPool:
    """Ordered collection of demonstrations plus the BM25 corpus view.

    Corpus statistics are recomputed on every membership change; the document
    for each demo is its turn questions plus the table names of its target
    schema when the catalog knows the database.
    """

    def __init__(self, demos, catalog: Catalog | None = None, path=None):
        self.demos: list[Demonstration] = list(demos)
        self.catalog = catalog
        self.path = Path(path) if path else None
        ids = [d.demo_id for d in self.demos]
        if len(set(ids)) != len(ids):
            raise InvalidDemoFile("duplicate demo_id in pool")
        self._recompute()

    def __len__(self):
        return len(self.demos)

    def __iter__(self):
        return iter(self.demos)

    def get(self, demo_id: str) -> Demonstration | None:
        for d in self.demos:
            if d.demo_id == demo_id:
                return d
        return None

    def _doc_for(self, demo: Demonstration) -> list[str]:
        tokens = tokenize_text(" ".join(t.question for t in demo.turns))
        if self.catalog is not None and demo.db_id in self.catalog:
            for name in self.catalog.get(demo.db_id).table_names():
                tokens.extend(tokenize_text(name))
        return tokens

    def _recompute(self):
        self.doc_tokens = [self._doc_for(d) for d in self.demos]
        self.stats = CorpusStats.from_docs(self.doc_tokens)

    # -- selection ----------------------------------------------------------

    def select_demos(self, question: str, history=(), n: int = 3) -> list[Demonstration]:
        """Top-n demos by BM25 between the dialogue text and demo documents."""
        if n <= 0 or not self.demos:
            return []
        query = tokenize_text(" ".join([*history, question]))
        scored = [
            (bm25_score(query, doc, self.stats), demo)
            for doc, demo in zip(self.doc_tokens, self.demos)
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1].demo_id))
        return [demo for _score, demo in scored[:n]]

    # -- verification and update --------------------------------------------

    def verify(self, demo: Demonstration, catalog: Catalog) -> Verdict:
        """Gate for pool entry; returns the first failing check, if any."""
        if demo.db_id not in catalog:
            return Verdict(False, "unknown-database", demo.db_id)
        entry = catalog.get(demo.db_id)
        for turn in demo.turns:
            try:
                tokenize(turn.sql)
            except UnterminatedString as exc:
                return Verdict(False, "tokenize-failure", str(exc))
            try:
                refs = extract_table_refs(turn.sql)
            except ParseFailure as exc:
                return Verdict(False, "parse-failure", str(exc))
            for ref in refs:
                if not entry.has_table(ref):
                    return Verdict(False, "unknown-table", ref)
            result = execute(entry, turn.sql)
            if result.error is not None:
                return Verdict(False, "execution-error", result.error.message)
        key = self._dedup_key(demo)
        for existing in self.demos:
            if self._dedup_key(existing) == key:
                return Verdict(False, "duplicate", existing.demo_id)
        return Verdict(True)

    @staticmethod
    def _dedup_key(demo: Demonstration) -> tuple[str, ...]:
        return tuple(normalize_sql(t.sql) for t in demo.turns)

    def save(self, path=None):
        target = Path(path) if path else self.path
        if target is None:
            raise ValueError("no path to save the pool to")
        data = [d.as_dict() for d in self.demos]
        target.write_text(
            json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def update_pool(pool: DemoPool, accepted: list[Demonstration]) -> DemoPool:
    """Pool with the accepted demos appended; persists when the pool has a
    backing file."""
    merged = DemoPool(pool.demos + list(accepted), catalog=pool.catalog, path=pool.path)
    if merged.path is not None:
        merged.save()
    return merged


def load_pool(path, catalog: Catalog | None = None) -> DemoPool:
    """Read a pool file (JSON array of demos); reject the whole file on the
    first invalid record."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidDemoFile(f"line {exc.lineno}: {exc.msg}") from exc
    demos = parse_demos(data, catalog=catalog)
    return DemoPool(demos, catalog=catalog, path=path)


def default_pool(catalog: Catalog | None = None) -> DemoPool:
    """The starter pool packaged with the library.

    Used when no pool file exists yet, so demo selection works before anyone
    uploads their own exemplars. The packaged demos reference a database that
    need not be present in the catalog; they still serve as few-shot text.
    """
    ref = resources.files("convosql").joinpath("assets/seed_demos.json")
    data = json.loads(ref.read_text(encoding="utf-8"))
    demos = parse_demos(data, catalog=None)
    return DemoPool(demos, catalog=catalog)


def parse_demos(data, catalog: Catalog | None = None) -> list[Demonstration]:
    """Validate a decoded pool document and build its demonstrations."""
    if not isinstance(data, list):
        raise InvalidDemoFile("top-level value must be an array of demos")
    demos = []
    seen = set()
    for idx, item in enumerate(data):
        where = f"demo[{idx}]"
        if not isinstance(item, dict):
            raise InvalidDemoFile(f"{where}: not an object")
        try:
            demo_id = item["demo_id"]
            db_id = item["db_id"]
            turns = item["turns"]
        except KeyError as exc:
            raise InvalidDemoFile(f"{where}: missing field {exc}") from exc
        source = item.get("source", "seed")
        if source not in ("seed", "synthesized"):
            raise InvalidDemoFile(f"{where}: bad source {source!r}")
        if not isinstance(demo_id, str) or not demo_id:
            raise InvalidDemoFile(f"{where}: demo_id must be a non-empty string")
        if demo_id in seen:
            raise InvalidDemoFile(f"{where}: duplicate demo_id {demo_id!r}")
        seen.add(demo_id)
        if not isinstance(db_id, str) or not db_id:
            raise InvalidDemoFile(f"{where}: db_id must be a non-empty string")
        if catalog is not None and db_id not in catalog:
            raise InvalidDemoFile(f"{where}: unknown database {db_id!r}")
        if not isinstance(turns, list) or not 1 <= len(turns) <= 3:
            raise InvalidDemoFile(f"{where}: turns must hold 1 to 3 entries")
        parsed_turns = []
        for t_idx, turn in enumerate(turns):
            t_where = f"{where}.turns[{t_idx}]"
            if not isinstance(turn, dict):
                raise InvalidDemoFile(f"{t_where}: not an object")
            question = turn.get("question")
            sql = turn.get("sql")
            if not isinstance(question, str) or not question.strip():
                raise InvalidDemoFile(f"{t_where}: question must be non-empty text")
            if not isinstance(sql, str) or not sql.strip():
                raise InvalidDemoFile(f"{t_where}: sql must be non-empty text")
            try:
                tokenize(sql)
            except UnterminatedString as exc:
                raise InvalidDemoFile(f"{t_where}: sql does not tokenize: {exc}") from exc
            parsed_turns.append(DemoTurn(question=question, sql=sql))
        demos.append(Demonstration(demo_id, db_id, parsed_turns, source))
    return demos


# -- Fused augmentation ------------------------------------------------------


@dataclass
class FusedConfig:
    rounds: int = 2
    fusion_arity: int = 2
    additions_cap: int = 16
    random_seed: int = 0


def cluster_pool(pool: DemoPool) -> list[list[str]]:
    """Partition demo ids by keyword-presence signature (subquery count kept
    exact). Clusters come out largest first, ties by signature."""
    if not pool.demos:
        raise EmptyPool("cannot cluster an empty pool")
    groups: dict[tuple, list[str]] = {}
    for demo in pool.demos:
        groups.setdefault(demo.signature.presence_key(), []).append(demo.demo_id)
    for members in groups.values():
        members.sort()
    return [
        members
        for _key, members in sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    ]


FUSION_SYSTEM = (
    "You create new demonstration pairs for a text-to-SQL assistant:"
    " one question and one SQLite query per request."
)

_QUESTION_LINE = re.compile(r"^\s*question\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_SQL_BLOCK = re.compile(r"```(?:sql)?\s*\n(.*?)```", re.DOTALL | re.IGNORECASE)


def parse_fusion_reply(reply: str) -> tuple[str, str] | None:
    """Pull (question, sql) out of a fusion reply, or None if either part is
    missing."""
    q_match = _QUESTION_LINE.search(reply)
    sql_match = _SQL_BLOCK.search(reply)
    if not q_match or not sql_match:
        return None
    question = q_match.group(1).strip()
    sql = sql_match.group(1).strip()
    if not question or not sql:
        return None
    return question, sql


def _fresh_demo_id(taken: set[str]) -> str:
    k = 0
    while f"fused_{k}" in taken:
        k += 1
    return f"fused_{k}"


def fuse_round(
    pool: DemoPool,
    catalog: Catalog,
    llm,
    cfg: FusedConfig,
    rng: random.Random | None = None,
) -> list[Demonstration]:
    """One augmentation round: sample across clusters, fuse via the LLM,
    parse candidates. Verification happens separately."""
    m = cfg.fusion_arity
    if len(pool.demos) < m:
        raise InsufficientPool(f"need at least {m} demos, have {len(pool.demos)}")
    db_ids = catalog.ids()
    if not db_ids:
        raise InsufficientPool("catalog holds no databases to fuse over")
    rng = rng or random.Random(cfg.random_seed)
    clusters = cluster_pool(pool)
    by_id = {d.demo_id: d for d in pool.demos}
    template = load_prompt("fusion")
    taken = set(by_id)
    candidates: list[Demonstration] = []
    for _ in range(cfg.additions_cap):
        if len(clusters) >= m:
            sample = [by_id[rng.choice(c)] for c in rng.sample(clusters, m)]
        else:
            ordered = sorted(pool.demos, key=lambda d: d.demo_id)
            sample = rng.sample(ordered, m)
        db_id = rng.choice(db_ids)
        examples = "\n\n".join(
            f"Question: {d.turns[-1].question}\nSQL: {d.turns[-1].sql}" for d in sample
        )
        schema = serialize_schema(catalog.get(db_id))
        messages = [
            ChatMessage("system", FUSION_SYSTEM),
            ChatMessage("user", template.format(examples=examples, schema=schema)),
        ]
        try:
            reply = llm.complete(messages)
        except LlmError as exc:
            raise LlmFailure(f"fusion call failed: {exc}") from exc
        parsed = parse_fusion_reply(reply)
        if parsed is None:
            log.debug("fusion reply skipped: no question/sql found")
            continue
        question, sql = parsed
        demo_id = _fresh_demo_id(taken)
        taken.add(demo_id)
        candidates.append(
            Demonstration(demo_id, db_id, [DemoTurn(question, sql)], source="synthesized")
        )
    return candidates


def fused_augment(pool: DemoPool, catalog: Catalog, llm, cfg: FusedConfig) -> DemoPool:
    """Run the full augmentation loop: R rounds of fuse, verify, update."""
    pool, _summary = fused_augment_report(pool, catalog, llm, cfg)
    return pool


def fused_augment_report(
    pool: DemoPool, catalog: Catalog, llm, cfg: FusedConfig
) -> tuple[DemoPool, dict]:
    """fused_augment plus a tally: candidate count, acceptances, and
    rejections keyed by verification reason."""
    rng = random.Random(cfg.random_seed)
    summary = {"candidates": 0, "accepted": 0, "rejected": {}}
    for round_no in range(cfg.rounds):
        candidates = fuse_round(pool, catalog, llm, cfg, rng=rng)
        summary["candidates"] += len(candidates)
        accepted: list[Demonstration] = []
        staging = pool
        for cand in candidates:
            verdict = staging.verify(cand, catalog)
            if verdict.accepted:
                accepted.append(cand)
                staging = DemoPool(
                    staging.demos + [cand], catalog=staging.catalog, path=None
                )
            else:
                reason = verdict.reason or "unknown"
                summary["rejected"][reason] = summary["rejected"].get(reason, 0) + 1
                log.info(
                    "round %d: rejected %s (%s: %s)",
                    round_no,
                    cand.demo_id,
                    verdict.reason,
                    verdict.detail,
                )
        pool = update_pool(pool, accepted)
        summary["accepted"] += len(accepted)
        log.info("round %d: accepted %d of %d", round_no, len(accepted), len(candidates))
    return pool, summary
