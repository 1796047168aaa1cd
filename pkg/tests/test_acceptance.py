"""Release gate: one test per acceptance criterion, each with its own
independently coded oracle where the criterion calls for one.

Every test prints a single "criterion N PASS/FAIL" line (visible with -s or
in captured output) and enforces the criterion's runtime budget. The final
criterion needs a live chat endpoint and is skipped unless one is configured
through CONVOSQL_LIVE_BASE_URL.
"""

import hashlib
import json
import math
import os
import random
import re
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from convosql.catalog import Catalog, serialize_schema
from convosql.demopool import (
    Demonstration,
    DemoPool,
    DemoTurn,
    FusedConfig,
    bm25_score,
    fused_augment_report,
    load_pool,
)
from convosql.evalharness import EvalInteraction, evaluate, load_dataset
from convosql.executor import ComparisonPolicy, ExecutionResult, compare_results, execute
from convosql.llm import EndpointConfig, HttpChatClient, ScriptedMock
from convosql.pipeline import PipelineConfig, new_session, process_turn, self_debug
from convosql.retrieval import RetrievalConfig, murre_retrieve
from convosql.sqlkit import normalize_sql, tokenize
from tests.conftest import SINGER_DDL, SINGER_ROWS, build_sqlite

FIXTURES = Path(__file__).parent / "fixtures"

# pipeline variant with no optional stage, so one turn is one LLM call
BARE = PipelineConfig(enable_pre_sql=False, enable_self_debug=False)


@contextmanager
def criterion(num, label, budget=None):
    """Wrap a criterion body: report one pass/fail line, enforce the budget."""
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"criterion {num} FAIL  {label}")
        raise
    elapsed = time.perf_counter() - t0
    if budget is not None and elapsed >= budget:
        print(f"criterion {num} FAIL  {label} (took {elapsed:.2f}s, budget {budget}s)")
        raise AssertionError(f"criterion {num} exceeded {budget}s: {elapsed:.2f}s")
    print(f"criterion {num} PASS  {label} ({elapsed:.2f}s)")


def fenced(sql):
    return f"```sql\n{sql}\n```"


def make_catalog(tmp_path, name="concert_singer"):
    cat = Catalog()
    cat.ingest(build_sqlite(tmp_path / f"{name}.sqlite", SINGER_DDL, SINGER_ROWS), name)
    return cat


# -- 1. demo selection vs closed-form BM25 -----------------------------------

BM25_VOCAB = [
    "apple", "brick", "cloud", "delta", "ember", "frost", "globe", "hinge",
    "ivory", "joint", "kiosk", "lemon",
]


def closed_form_bm25(query_terms, doc, docs, k1=1.2, b=0.75):
    """Okapi BM25 from the formula, no shared code with the package."""
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    score = 0.0
    for term in sorted(set(query_terms)):
        f = doc.count(term)
        if f == 0:
            continue
        df = sum(1 for d in docs if term in d)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
        score += idf * (f * (k1 + 1)) / (f + k1 * (1 - b + b * len(doc) / avgdl))
    return score


def test_criterion_01_demo_ranking_matches_bm25_oracle():
    with criterion(1, "select_demos equals the closed-form BM25 oracle", budget=5.0):
        rng = random.Random(101)
        for case in range(50):
            n_docs = rng.randint(1, 20)
            docs = [
                [rng.choice(BM25_VOCAB) for _ in range(rng.randint(1, 8))]
                for _ in range(n_docs)
            ]
            demos = [
                Demonstration(f"d{i:02d}", "any_db", [DemoTurn(" ".join(doc), "SELECT 1")])
                for i, doc in enumerate(docs)
            ]
            pool = DemoPool(demos)
            query_terms = [rng.choice(BM25_VOCAB) for _ in range(rng.randint(1, 8))]
            question = " ".join(query_terms)

            want = sorted(
                (
                    (closed_form_bm25(query_terms, doc, docs), demo.demo_id)
                    for doc, demo in zip(docs, demos)
                ),
                key=lambda pair: (-pair[0], pair[1]),
            )
            got_order = [d.demo_id for d in pool.select_demos(question, n=n_docs)]
            assert got_order == [demo_id for _s, demo_id in want], (case, question)
            by_id = dict(zip((d.demo_id for d in demos), pool.doc_tokens))
            for want_score, demo_id in want:
                got_score = bm25_score(query_terms, by_id[demo_id], pool.stats)
                assert abs(got_score - want_score) <= 1e-9, (case, demo_id)


# -- 2. beam search vs exhaustive enumeration --------------------------------

SCHEMA_WORDS = [
    "singer", "concert", "stadium", "album", "track", "invoice", "customer",
    "product", "book", "loan", "author", "price", "city", "school", "teacher",
    "student", "course", "flight", "pilot", "airport",
]


def exhaustive_db_ranking(query, table_docs):
    """Score every table document directly and keep each database's best.

    Mirrors the declared scorer semantics (BM25 over table docs, query tokens
    plural-stripped against the corpus vocabulary) without touching the
    retrieval module.
    """
    split = lambda text: re.findall(r"[^\W_]+", text.lower())
    docs = [split(t) for _db, _tbl, t in table_docs]
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    vocab = set().union(*docs)
    terms = []
    for tok in split(query):
        if tok.endswith("s") and tok[:-1] in vocab:
            tok = tok[:-1]
        terms.append(tok)
    terms = sorted(set(terms))
    best = {}
    for (db_id, _tbl, _t), doc in zip(table_docs, docs):
        s = 0.0
        for term in terms:
            f = doc.count(term)
            if f == 0:
                continue
            df = sum(1 for d in docs if term in d)
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            s += idf * (f * 2.2) / (f + 1.2 * (0.25 + 0.75 * len(doc) / avgdl))
        if db_id not in best or s > best[db_id]:
            best[db_id] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def test_criterion_02_beam_matches_exhaustive_enumeration(tmp_path):
    with criterion(2, "single-hop beam equals exhaustive enumeration", budget=10.0):
        rng = random.Random(202)
        for case in range(100):
            cat = Catalog()
            table_docs = []
            n_dbs = rng.randint(2, 4)
            budget_tables = 10
            for d in range(n_dbs):
                db_id = f"db{d}"
                take = min(rng.randint(1, 3), budget_tables - (n_dbs - 1 - d))
                budget_tables -= take
                ddl = []
                for tbl in rng.sample(SCHEMA_WORDS, take):
                    cols = rng.sample(SCHEMA_WORDS, rng.randint(1, 3))
                    col_text = ", ".join(f"{c}_{j} TEXT" for j, c in enumerate(cols))
                    ddl.append(f"CREATE TABLE {tbl} ({col_text})")
                    doc_text = f"{tbl} " + " ".join(
                        f"{c}_{j} TEXT" for j, c in enumerate(cols)
                    )
                    table_docs.append((db_id, tbl, doc_text))
                cat.ingest(
                    build_sqlite(tmp_path / f"c{case}_{db_id}.sqlite", ddl), db_id
                )
            n_tables = len(table_docs)
            assert n_tables <= 10
            query = " ".join(
                rng.choice(SCHEMA_WORDS) + ("s" if rng.random() < 0.3 else "")
                for _ in range(rng.randint(1, 5))
            )
            cfg = RetrievalConfig(
                beam_width=n_tables, max_hops=1, tables_per_hop=n_tables
            )
            ranked, _tables = murre_retrieve(query, cat, cfg)
            want = exhaustive_db_ranking(query, table_docs)
            assert [db for db, _s in ranked] == [db for db, _s in want], (case, query)
            for (got_db, got_s), (_db, want_s) in zip(ranked, want):
                assert abs(got_s - want_s) <= 1e-9, (case, query, got_db)


# -- 3. retrieval recall on a planted corpus ---------------------------------

PLANT_WORDS = [
    "falcon", "harbor", "copper", "meadow", "lantern", "orchid",
    "timber", "velvet", "granite", "saffron", "juniper", "cobalt",
]
NOISE_WORDS = [
    "anchor", "bishop", "candle", "drawer", "engine", "fabric", "garden",
    "hammer", "island", "jacket", "kettle", "ladder", "mirror", "needle",
    "oyster", "pencil", "quiver", "ribbon", "shovel", "tunnel", "utensil",
    "violin", "walnut", "zipper",
]


class _AlwaysStop:
    def complete(self, messages, params=None, on_chunk=None):
        return "<DONE>"


def test_criterion_03_synthetic_corpus_recall(tmp_path):
    with criterion(3, "planted database ranks first on 100 trials", budget=10.0):
        rng = random.Random(303)
        hits = 0
        trials = 0
        for corpus in range(10):
            planted = corpus % 10
            cat = Catalog()
            planted_words = []
            for d in range(10):
                words = PLANT_WORDS if d == planted else NOISE_WORDS
                ddl = []
                for tbl in rng.sample(words, 2):
                    cols = rng.sample(words, 2)
                    ddl.append(
                        f"CREATE TABLE {tbl} ({cols[0]} TEXT, {cols[1]} TEXT)"
                    )
                    if d == planted:
                        planted_words.extend([tbl, *cols])
                cat.ingest(
                    build_sqlite(tmp_path / f"r{corpus}_db{d}.sqlite", ddl), f"db{d}"
                )
            for _ in range(10):
                query = " ".join(rng.sample(planted_words, 3))
                cfg = RetrievalConfig(beam_width=4, max_hops=2, tables_per_hop=4)
                ranked, _tables = murre_retrieve(query, cat, cfg, llm=_AlwaysStop())
                trials += 1
                if ranked and ranked[0][0] == f"db{planted}":
                    hits += 1
        assert trials == 100
        assert hits >= 95, f"top-1 recall {hits}/100"


# -- 4. deterministic evaluation and metric arithmetic ------------------------

SUITE_REPLIES = [
    fenced("SELECT count(*) FROM singer"),
    fenced("SELECT count(*) FROM singer WHERE country = 'France'"),
    fenced("SELECT name FROM singer ORDER BY age"),
    fenced("SELECT name FROM singer ORDER BY age DESC LIMIT 2"),
    fenced("SELECT concert_name FROM concert WHERE year = 2014"),
]


def test_criterion_04_deterministic_eval_and_metrics(tmp_path):
    with criterion(4, "byte-identical reruns; qex/iex arithmetic", budget=10.0):
        cat = make_catalog(tmp_path)
        interactions = load_dataset(FIXTURES / "eval_suite.json", "native", catalog=cat)
        assert len(interactions) == 3

        outputs = []
        for run in range(3):
            transcript = tmp_path / f"run{run}.jsonl"
            report = evaluate(
                interactions,
                cat,
                DemoPool([]),
                ScriptedMock(sequence=list(SUITE_REPLIES)),
                cfg=BARE,
                transcript_path=transcript,
            )
            report_bytes = json.dumps(report.as_dict(), sort_keys=True).encode()
            outputs.append((transcript.read_bytes(), report_bytes))
        assert outputs[0] == outputs[1] == outputs[2]

        pattern = [
            EvalInteraction(
                "pat-a",
                "concert_singer",
                [
                    ("q1", "SELECT count(*) FROM singer"),
                    ("q2", "SELECT name FROM singer"),
                    ("q3", "SELECT count(*) FROM concert"),
                ],
            ),
            EvalInteraction(
                "pat-b",
                "concert_singer",
                [
                    ("q4", "SELECT count(*) FROM concert"),
                    ("q5", "SELECT count(*) FROM singer"),
                ],
            ),
        ]
        replies = [
            fenced("SELECT count(*) FROM singer"),
            fenced("SELECT name FROM singer"),
            fenced("SELECT count(*) FROM concert"),
            fenced("SELECT count(*) FROM concert"),
            fenced("SELECT 99"),
        ]
        report = evaluate(
            pattern, cat, DemoPool([]), ScriptedMock(sequence=replies), cfg=BARE
        )
        flags = [rec["correct"] for rec in report.per_turn]
        assert flags == [True, True, True, True, False]
        assert report.qex == 0.8
        assert report.iex == 0.5


# -- 5. self-debug repair loop ------------------------------------------------

BROKEN_SQL = "SELECT nickname FROM singer"


def test_criterion_05_self_debug_contract(tmp_path):
    with criterion(5, "repair trace lengths and call budget", budget=2.0):
        cat = make_catalog(tmp_path)
        entry = cat.get("concert_singer")
        schema = serialize_schema(entry)
        cfg = PipelineConfig(max_debug_iters=3)

        fixing = ScriptedMock(sequence=[fenced("SELECT count(*) FROM singer")])
        sql, trace, result = self_debug(
            BROKEN_SQL, entry, "How many singers?", schema, fixing, cfg
        )
        assert result.error is None
        assert sql == "SELECT count(*) FROM singer"
        assert len(trace) == 1
        assert len(fixing.calls) == 1

        stubborn = ScriptedMock(sequence=[fenced(BROKEN_SQL)] * 10)
        sql, trace, result = self_debug(
            BROKEN_SQL, entry, "How many singers?", schema, stubborn, cfg
        )
        assert len(stubborn.calls) == 3
        assert len(trace) == 3
        assert result.error is not None
        assert "nickname" in result.error.message


# -- 6. pre-draft schema filtering is exactly one extra call ------------------


def _run_turns(tmp_path, subdir, enable_pre_sql):
    workdir = tmp_path / subdir
    workdir.mkdir()
    cat = make_catalog(workdir)
    reply = fenced("SELECT count(*) FROM singer")
    calls_per_turn = []
    mock = ScriptedMock(sequence=[reply] * 8)
    session = new_session()
    session.db_id = "concert_singer"
    cfg = PipelineConfig(enable_pre_sql=enable_pre_sql, enable_self_debug=False)
    for question in ("How many singers?", "And how many concerts?"):
        before = len(mock.calls)
        process_turn(session, question, cat, DemoPool([]), mock, cfg)
        calls_per_turn.append(len(mock.calls) - before)
    return calls_per_turn


def test_criterion_06_pre_sql_toggle_call_count(tmp_path):
    with criterion(6, "pre-draft toggle adds exactly one call per turn"):
        with_draft = _run_turns(tmp_path, "on", enable_pre_sql=True)
        without_draft = _run_turns(tmp_path, "off", enable_pre_sql=False)
        assert len(with_draft) == len(without_draft) == 2
        for on_calls, off_calls in zip(with_draft, without_draft):
            assert on_calls - off_calls == 1


# -- 7. result comparison vs naive oracle; read-only execution ----------------


def naive_value_eq(a, b, tol):
    if a is None or b is None:
        return a is None and b is None
    is_num = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)
    if is_num(a) != is_num(b):
        return False
    if is_num(a):
        if a == b:
            return True
        return abs(a - b) <= tol * max(abs(a), abs(b))
    return a == b


def naive_multiset_eq(pred, gold, ordered, tol):
    if pred.error is not None or gold.error is not None:
        return False
    p, g = pred.rows, gold.rows
    if len(p) != len(g):
        return False
    row_eq = lambda ra, rb: len(ra) == len(rb) and all(
        naive_value_eq(x, y, tol) for x, y in zip(ra, rb)
    )
    if ordered:
        return all(row_eq(a, b) for a, b in zip(p, g))
    remaining = list(range(len(g)))

    def match(i):
        if i == len(p):
            return True
        for pos, j in enumerate(remaining):
            if row_eq(p[i], g[j]):
                remaining.pop(pos)
                if match(i + 1):
                    return True
                remaining.insert(pos, j)
        return False

    return match(0)


def random_result(rng, width, height):
    def value():
        kind = rng.randrange(5)
        if kind == 0:
            return None
        if kind == 1:
            return rng.randint(-2, 2)
        if kind == 2:
            return rng.choice(["x", "y", "xy", ""])
        base = rng.choice([0.0, 0.25, 1 / 3, 1.0, 1e-7])
        return base * (1.0 + rng.choice([0.0, 1e-9, 5e-7, 1e-5]) * rng.choice([-1, 1]))

    rows = [tuple(value() for _ in range(width)) for _ in range(height)]
    return ExecutionResult(columns=[f"c{i}" for i in range(width)], rows=rows)


def test_criterion_07_comparison_oracle_and_readonly_digest(tmp_path):
    with criterion(7, "comparison oracle on 200 pairs; file digest stable", budget=5.0):
        rng = random.Random(707)
        for case in range(200):
            width = rng.randint(1, 3)
            height = rng.randint(0, 6)
            gold = random_result(rng, width, height)
            if rng.randrange(2):
                pred = ExecutionResult(
                    columns=gold.columns, rows=rng.sample(gold.rows, len(gold.rows))
                )
            else:
                pred = random_result(rng, width, height)
            for ordered in (False, True):
                policy = ComparisonPolicy(ordered=ordered)
                got = compare_results(pred, gold, policy)
                want = naive_multiset_eq(pred, gold, ordered, policy.float_tolerance)
                assert got == want, (case, ordered, pred.rows, gold.rows)

        db_file = Path(build_sqlite(tmp_path / "probe.sqlite", SINGER_DDL, SINGER_ROWS))
        before = hashlib.sha256(db_file.read_bytes()).hexdigest()
        cat = Catalog()
        cat.ingest(str(db_file), "probe")
        entry = cat.get("probe")
        attempts = [
            "SELECT count(*) FROM singer",
            "SELEC broken",
            "DROP TABLE singer",
            "INSERT INTO singer VALUES (99, 'X', 'Y', 1)",
            "UPDATE singer SET age = 1",
            "DELETE FROM concert",
            "PRAGMA journal_mode = wal",
        ]
        for statement in attempts:
            execute(entry, statement)
            after = hashlib.sha256(db_file.read_bytes()).hexdigest()
            assert after == before, f"file changed after: {statement}"


# -- 8. augmentation gate lets only the valid candidate in --------------------


def test_criterion_08_fused_verification_gate(tmp_path):
    with criterion(8, "of 4 candidates only the valid one enters", budget=2.0):
        cat = make_catalog(tmp_path)
        pool_path = tmp_path / "pool.json"
        seeds = [
            Demonstration(
                "a01", "concert_singer",
                [DemoTurn("How many singers do we have?", "SELECT count(*) FROM singer")],
            ),
            Demonstration(
                "a02", "concert_singer",
                [DemoTurn("List all singer names.", "SELECT name FROM singer")],
            ),
        ]
        pool = DemoPool(seeds, catalog=cat, path=pool_path)
        pool.save()
        candidate = lambda q, s: f"Question: {q}\n{fenced(s)}"
        replies = [
            candidate("Show nicknames.", "SELECT nickname FROM singer"),
            candidate("Broken one.", "SELECT FROM WHERE ("),
            candidate("How many singers?", "SELECT count(*) FROM singer"),
            candidate("Who is from France?", "SELECT name FROM singer WHERE country = 'France'"),
        ]
        cfg = FusedConfig(rounds=1, fusion_arity=2, additions_cap=4, random_seed=8)
        updated, summary = fused_augment_report(
            pool, cat, ScriptedMock(sequence=replies), cfg
        )

        assert summary["candidates"] == 4
        assert summary["accepted"] == 1
        assert sum(summary["rejected"].values()) == 3
        assert len(updated) == 3
        added = [d for d in updated.demos if d.demo_id not in ("a01", "a02")]
        assert len(added) == 1
        assert added[0].turns[-1].sql == "SELECT name FROM singer WHERE country = 'France'"

        reloaded = load_pool(pool_path, catalog=cat)
        assert [d.as_dict() for d in reloaded.demos] == [d.as_dict() for d in updated.demos]


# -- 9. live endpoint smoke test (opt-in) -------------------------------------

LIVE_URL = os.environ.get("CONVOSQL_LIVE_BASE_URL", "")


@pytest.mark.skipif(not LIVE_URL, reason="CONVOSQL_LIVE_BASE_URL not configured")
def test_criterion_09_live_endpoint_smoke(tmp_path):
    with criterion(9, "live endpoint evaluates the benchmark subset"):
        cat = make_catalog(tmp_path)
        interactions = load_dataset(FIXTURES / "sparc_live.json", "sparc", catalog=cat)
        assert len(interactions) == 20
        endpoint = EndpointConfig(
            base_url=LIVE_URL,
            api_key=os.environ.get("CONVOSQL_API_KEY", ""),
            model_name=os.environ.get("CONVOSQL_LIVE_MODEL", "gpt-4o-mini"),
        )
        report = evaluate(interactions, cat, DemoPool([]), HttpChatClient(endpoint))
        total_turns = sum(len(i.turns) for i in interactions)
        assert len(report.per_turn) == total_turns
        assert 0.0 <= report.qex <= 1.0
        assert 0.0 <= report.iex <= 1.0
        for rec in report.per_turn:
            if not rec["pred_sql"]:
                continue
            tokenize(rec["pred_sql"])
            head = normalize_sql(rec["pred_sql"]).upper()
            assert head.startswith(("SELECT", "WITH")), rec["pred_sql"]
