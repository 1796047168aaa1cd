"""SQL text analysis: tokenization, table-reference extraction, structural
keyword signatures, and normalization.

Covers the SELECT subset used by cross-domain text-to-SQL benchmarks (no CTE
bodies are analyzed structurally, no window functions). Statements outside the
subset degrade to token-level handling; the executor is the final validity
check.
"""

from dataclasses import dataclass


class UnterminatedString(ValueError):
    """A quoted string or quoted identifier is never closed."""


class ParseFailure(ValueError):
    """No table reference could be resolved from a statement that needs one."""


KEYWORDS = frozenset(
    """
    SELECT FROM WHERE GROUP BY HAVING ORDER LIMIT OFFSET
    UNION INTERSECT EXCEPT ALL DISTINCT
    JOIN INNER LEFT RIGHT FULL OUTER CROSS NATURAL ON USING AS
    AND OR NOT IN LIKE GLOB BETWEEN IS NULL EXISTS
    CASE WHEN THEN ELSE END ASC DESC CAST WITH VALUES
    COUNT SUM AVG MIN MAX
    INSERT UPDATE DELETE INTO SET CREATE TABLE DROP ALTER PRAGMA INDEX VIEW
    """.split()
)

AGGREGATES = frozenset({"COUNT", "SUM", "AVG", "MIN", "MAX"})

_MULTI_OPS = ("<>", "<=", ">=", "!=", "||", "==")
_SINGLE_OPS = set("+-*/%<>=")
_PUNCT = set("(),.;")


@dataclass
class SqlToken:
    kind: str  # keyword | identifier | literal | operator | punctuation
    text: str


def _scan_quoted(sql: str, i: int, quote: str, closer: str) -> int:
    """Return the index one past the closing quote, honoring doubled closers."""
    j = i + 1
    while j < len(sql):
        if sql[j] == closer:
            if closer != "]" and j + 1 < len(sql) and sql[j + 1] == closer:
                j += 2
                continue
            return j + 1
        j += 1
    raise UnterminatedString(f"unterminated {quote!r} quote at offset {i}")


def _is_word_start(ch: str) -> bool:
    return ch == "_" or ch.isalpha()


def _is_word_char(ch: str) -> bool:
    return ch == "_" or ch == "$" or ch.isalnum()


def tokenize(sql: str) -> list[SqlToken]:
    """Lex a statement. Total over any input except unclosed quotes."""
    tokens: list[SqlToken] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch.isspace():
            i += 1
            continue
        if sql.startswith("--", i):
            nl = sql.find("\n", i)
            i = n if nl < 0 else nl + 1
            continue
        if sql.startswith("/*", i):
            end = sql.find("*/", i + 2)
            i = n if end < 0 else end + 2
            continue
        if ch == "'":
            j = _scan_quoted(sql, i, ch, "'")
            tokens.append(SqlToken("literal", sql[i:j]))
            i = j
            continue
        if ch in ('"', "`", "["):
            closer = {'"': '"', "`": "`", "[": "]"}[ch]
            j = _scan_quoted(sql, i, ch, closer)
            tokens.append(SqlToken("identifier", sql[i:j]))
            i = j
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and sql[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (sql[j].isdigit() or (sql[j] == "." and not seen_dot)):
                if sql[j] == ".":
                    seen_dot = True
                j += 1
            if j < n and sql[j] in "eE":
                k = j + 1
                if k < n and sql[k] in "+-":
                    k += 1
                if k < n and sql[k].isdigit():
                    j = k
                    while j < n and sql[j].isdigit():
                        j += 1
            tokens.append(SqlToken("literal", sql[i:j]))
            i = j
            continue
        if _is_word_start(ch):
            j = i
            while j < n and _is_word_char(sql[j]):
                j += 1
            word = sql[i:j]
            if word.upper() in KEYWORDS:
                tokens.append(SqlToken("keyword", word.upper()))
            else:
                tokens.append(SqlToken("identifier", word))
            i = j
            continue
        two = sql[i : i + 2]
        if two in _MULTI_OPS:
            tokens.append(SqlToken("operator", two))
            i += 2
            continue
        if ch in _SINGLE_OPS:
            tokens.append(SqlToken("operator", ch))
            i += 1
            continue
        # everything else, including unknown characters, is single-char punctuation
        tokens.append(SqlToken("punctuation", ch))
        i += 1
    return tokens


def _unquote(text: str) -> str:
    if text and text[0] in ('"', "`", "["):
        closer = {'"': '"', "`": "`", "[": "]"}[text[0]]
        inner = text[1:-1]
        if closer != "]":
            inner = inner.replace(closer * 2, closer)
        return inner
    return text


def _normalize_ident(text: str) -> str:
    return _unquote(text).lower()


def extract_table_refs(sql: str) -> set[str]:
    """Base tables named after FROM/JOIN anywhere in the statement.

    Aliases are excluded, subquery and set-operation branches are included,
    and names are case-normalized. Raises ParseFailure when no table resolves
    and the statement is not a bare SELECT of expressions.
    """
    tokens = tokenize(sql)
    refs: set[str] = set()
    state = {"saw_from": False, "resolved": False}
    _scan_refs(tokens, refs, state)
    has_select = any(t.kind == "keyword" and t.text == "SELECT" for t in tokens)
    if not refs:
        if state["saw_from"] and not state["resolved"]:
            raise ParseFailure("FROM clause present but no table reference resolved")
        if not has_select:
            raise ParseFailure("statement is not a SELECT")
    return refs


def _scan_refs(tokens: list[SqlToken], refs: set[str], state: dict) -> None:
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t.kind == "keyword" and t.text in ("FROM", "JOIN"):
            state["saw_from"] = True
            i = _parse_table_list(tokens, i + 1, refs, state, comma_list=(t.text == "FROM"))
        else:
            i += 1


def _parse_table_list(tokens, i, refs, state, comma_list):
    while True:
        i = _parse_table_item(tokens, i, refs, state)
        if (
            comma_list
            and i < len(tokens)
            and tokens[i].kind == "punctuation"
            and tokens[i].text == ","
        ):
            i += 1
            continue
        return i


def _parse_table_item(tokens, i, refs, state):
    if i >= len(tokens):
        return i
    t = tokens[i]
    if t.kind == "punctuation" and t.text == "(":
        # subquery or parenthesized join source: recurse over the inner slice
        j, depth = i + 1, 1
        while j < len(tokens) and depth:
            if tokens[j].kind == "punctuation":
                if tokens[j].text == "(":
                    depth += 1
                elif tokens[j].text == ")":
                    depth -= 1
            j += 1
        inner = tokens[i + 1 : j - 1] if depth == 0 else tokens[i + 1 :]
        if inner and not (inner[0].kind == "keyword" and inner[0].text in ("SELECT", "WITH", "VALUES")):
            # join source such as (t1 JOIN t2 ...): the leading names follow
            # no FROM keyword, so pick them up as a table list first
            _parse_table_list(inner, 0, refs, state, comma_list=True)
        _scan_refs(inner, refs, state)
        state["resolved"] = True
        return _skip_alias(tokens, j)
    if t.kind == "identifier":
        name = _normalize_ident(t.text)
        i += 1
        # dotted reference: keep the last component (schema.table)
        while (
            i + 1 < len(tokens)
            and tokens[i].kind == "punctuation"
            and tokens[i].text == "."
            and tokens[i + 1].kind == "identifier"
        ):
            name = _normalize_ident(tokens[i + 1].text)
            i += 2
        refs.add(name)
        state["resolved"] = True
        return _skip_alias(tokens, i)
    return i


def _skip_alias(tokens, i):
    if i < len(tokens) and tokens[i].kind == "keyword" and tokens[i].text == "AS":
        i += 1
        if i < len(tokens) and tokens[i].kind == "identifier":
            i += 1
    elif i < len(tokens) and tokens[i].kind == "identifier":
        i += 1
    return i


FEATURES = (
    "join",
    "where",
    "group_by",
    "having",
    "order_by",
    "limit",
    "union",
    "intersect",
    "except",
    "subqueries",
    "aggregates",
)


@dataclass
class KeywordSignature:
    """Structural feature counts of one statement, in FEATURES order."""

    join: int = 0
    where: int = 0
    group_by: int = 0
    having: int = 0
    order_by: int = 0
    limit: int = 0
    union: int = 0
    intersect: int = 0
    except_: int = 0
    subqueries: int = 0
    aggregates: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return (
            self.join,
            self.where,
            self.group_by,
            self.having,
            self.order_by,
            self.limit,
            self.union,
            self.intersect,
            self.except_,
            self.subqueries,
            self.aggregates,
        )

    def presence_key(self) -> tuple[int, ...]:
        """Counts collapsed to presence bits; subquery count stays exact."""
        vals = list(self.as_tuple())
        key = [1 if v else 0 for v in vals]
        key[FEATURES.index("subqueries")] = vals[FEATURES.index("subqueries")]
        return tuple(key)


def keyword_signature(sql: str) -> KeywordSignature:
    """Count the fixed structural features of a statement.

    Degenerate input (empty, or unlexable) yields the zero vector."""
    sig = KeywordSignature()
    try:
        tokens = tokenize(sql)
    except UnterminatedString:
        return sig
    selects = 0
    for idx, t in enumerate(tokens):
        if t.kind != "keyword":
            continue
        nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
        if t.text == "SELECT":
            selects += 1
        elif t.text == "JOIN":
            sig.join += 1
        elif t.text == "WHERE":
            sig.where += 1
        elif t.text == "GROUP" and nxt is not None and nxt.text == "BY":
            sig.group_by += 1
        elif t.text == "HAVING":
            sig.having += 1
        elif t.text == "ORDER" and nxt is not None and nxt.text == "BY":
            sig.order_by += 1
        elif t.text == "LIMIT":
            sig.limit += 1
        elif t.text == "UNION":
            sig.union += 1
        elif t.text == "INTERSECT":
            sig.intersect += 1
        elif t.text == "EXCEPT":
            sig.except_ += 1
        elif t.text in AGGREGATES and nxt is not None and nxt.text == "(":
            sig.aggregates += 1
    sig.subqueries = max(0, selects - 1)
    return sig


def normalize_sql(sql: str) -> str:
    """Canonical single-spaced form: keywords upper-cased, literals intact,
    trailing semicolons stripped. Idempotent."""
    tokens = tokenize(sql)
    while tokens and tokens[-1].kind == "punctuation" and tokens[-1].text == ";":
        tokens.pop()
    return " ".join(t.text for t in tokens)


def has_order_by(sql: str) -> bool:
    """True iff an ORDER BY appears outside all parentheses."""
    depth = 0
    tokens = tokenize(sql)
    for idx, t in enumerate(tokens):
        if t.kind == "punctuation":
            if t.text == "(":
                depth += 1
            elif t.text == ")":
                depth = max(0, depth - 1)
        elif (
            t.kind == "keyword"
            and t.text == "ORDER"
            and depth == 0
            and idx + 1 < len(tokens)
            and tokens[idx + 1].text == "BY"
        ):
            return True
    return False
