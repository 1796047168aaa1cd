"""Read-only SQL execution and execution-result comparison.

Execution results are the ground truth everywhere: repair loops react to the
error kind, demonstration verification requires a clean run, and evaluation
compares predicted rows against gold rows.
"""

import hashlib
import sqlite3
import time
from dataclasses import dataclass, field

from .catalog import DatabaseEntry, open_readonly
from .sqlkit import has_order_by, tokenize

ROW_CAP = 10000
TIME_CAP = 5.0

# statement verbs that are refused before any connection is opened
_WRITE_VERBS = frozenset(
    {"INSERT", "UPDATE", "DELETE", "CREATE", "DROP", "ALTER", "PRAGMA", "INTO", "SET"}
)


@dataclass
class ExecError:
    message: str
    kind: str  # syntax | schema | runtime | timeout | rejected


@dataclass
class ExecutionResult:
    columns: list[str] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)
    error: ExecError | None = None
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return self.error is None

    def as_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": [list(r) for r in self.rows],
            "truncated": self.truncated,
            "error": (
                {"message": self.error.message, "kind": self.error.kind}
                if self.error
                else None
            ),
        }


@dataclass
class ComparisonPolicy:
    ordered: bool = False
    float_tolerance: float = 1e-6

    @classmethod
    def for_gold(cls, gold_sql: str, float_tolerance: float = 1e-6):
        """Ordered comparison exactly when the gold statement sorts."""
        return cls(ordered=has_order_by(gold_sql), float_tolerance=float_tolerance)


def _classify(message: str) -> str:
    low = message.lower()
    if "interrupted" in low:
        return "timeout"
    if "syntax error" in low or "unrecognized token" in low or "incomplete input" in low:
        return "syntax"
    if "no such table" in low or "no such column" in low or "ambiguous column" in low:
        return "schema"
    if "readonly database" in low or "one statement at a time" in low:
        return "rejected"
    return "runtime"


def _first_keyword(sql: str) -> str | None:
    try:
        for tok in tokenize(sql):
            if tok.kind == "keyword":
                return tok.text
            if tok.kind == "punctuation" and tok.text in ("(", ";"):
                continue
            return None
    except ValueError:
        return None
    return None


def _convert(value):
    if isinstance(value, bytes):
        return "blob:" + hashlib.sha256(value).hexdigest()
    return value


def execute(
    entry: DatabaseEntry,
    sql: str,
    row_cap: int = ROW_CAP,
    time_cap: float = TIME_CAP,
) -> ExecutionResult:
    """Run one SELECT against the entry's database file.

    Never raises: failures come back inside the result. Write statements are
    rejected up front, and the read-only open mode backstops anything the
    verb check misses (e.g. writes smuggled through WITH).
    """
    verb = _first_keyword(sql)
    if verb in _WRITE_VERBS:
        return ExecutionResult(
            error=ExecError(f"statement kind {verb} is not allowed", "rejected")
        )
    try:
        con = open_readonly(entry.storage_ref)
    except sqlite3.Error as exc:
        return ExecutionResult(error=ExecError(str(exc), "runtime"))
    deadline = time.monotonic() + time_cap
    con.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 2000)
    try:
        cur = con.execute(sql)
        columns = [d[0] for d in cur.description] if cur.description else []
        rows: list[tuple] = []
        truncated = False
        while True:
            chunk = cur.fetchmany(256)
            if not chunk:
                break
            for raw in chunk:
                if len(rows) >= row_cap:
                    truncated = True
                    break
                rows.append(tuple(_convert(v) for v in raw))
            if truncated:
                break
        return ExecutionResult(columns=columns, rows=rows, truncated=truncated)
    except (sqlite3.Error, sqlite3.Warning) as exc:
        message = str(exc)
        return ExecutionResult(error=ExecError(message, _classify(message)))
    except ValueError as exc:
        # some sqlite3 builds signal multi-statement input this way
        return ExecutionResult(error=ExecError(str(exc), "rejected"))
    finally:
        con.close()


def _values_eq(a, b, tol: float) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a_num = isinstance(a, (int, float)) and not isinstance(a, bool)
    b_num = isinstance(b, (int, float)) and not isinstance(b, bool)
    if a_num and b_num:
        if a == b:
            return True
        return abs(a - b) <= tol * max(abs(a), abs(b))
    if a_num != b_num:
        return False
    return a == b


def _rows_eq(ra, rb, tol: float) -> bool:
    if len(ra) != len(rb):
        return False
    return all(_values_eq(x, y, tol) for x, y in zip(ra, rb))


def _match_multiset(pred_rows, gold_rows, tol: float) -> bool:
    """Perfect matching between the two row lists under tolerant equality.

    Tolerance makes row equality non-transitive, so bucket counting is not
    enough in general; augmenting paths find a perfect matching if one exists.
    """
    n = len(pred_rows)
    adj = [
        [j for j, g in enumerate(gold_rows) if _rows_eq(p, g, tol)]
        for p in pred_rows
    ]
    matched_gold: list[int | None] = [None] * n

    def try_assign(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if matched_gold[j] is None or try_assign(matched_gold[j], seen):
                matched_gold[j] = i
                return True
        return False

    for i in range(n):
        if not try_assign(i, set()):
            return False
    return True


def compare_results(
    pred: ExecutionResult, gold: ExecutionResult, policy: ComparisonPolicy | None = None
) -> bool:
    """Row-level equality of two execution results under the policy."""
    policy = policy or ComparisonPolicy()
    if pred.error is not None or gold.error is not None:
        return False
    if len(pred.rows) != len(gold.rows):
        return False
    tol = policy.float_tolerance
    if policy.ordered:
        return all(_rows_eq(p, g, tol) for p, g in zip(pred.rows, gold.rows))
    # exact multiset fast path, valid whenever no float values are involved
    def hashable(rows):
        try:
            counts: dict = {}
            for r in rows:
                if any(isinstance(v, float) for v in r):
                    return None
                counts[r] = counts.get(r, 0) + 1
            return counts
        except TypeError:
            return None

    pc, gc = hashable(pred.rows), hashable(gold.rows)
    if pc is not None and gc is not None:
        return pc == gc
    return _match_multiset(pred.rows, gold.rows, tol)
