"""Database catalog: ingestion of uploaded SQLite files, schema extraction,
and deterministic schema serialization.

A catalog can be purely in-memory (tests) or backed by a directory holding the
database files plus a JSON manifest, in which case it survives restarts.
"""

import json
import logging
import os
import re
import sqlite3
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


class CatalogError(Exception):
    pass


class CorruptDatabase(CatalogError):
    """The file is not a readable SQLite database."""


class DuplicateId(CatalogError):
    """db_id already registered and replace was not requested."""


class EmptyDatabase(CatalogError):
    """The file contains no user tables."""


class UnknownTable(CatalogError):
    pass


class UnknownDatabase(CatalogError):
    pass


@dataclass
class ColumnSchema:
    name: str
    declared_type: str
    is_primary_key: bool = False
    foreign_ref: tuple[str, str] | None = None


@dataclass
class TableSchema:
    name: str
    columns: list[ColumnSchema]
    row_count: int = 0

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass
class DatabaseEntry:
    db_id: str
    display_name: str
    tables: list[TableSchema]
    storage_ref: str

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table(self, name: str) -> TableSchema:
        low = name.lower()
        for t in self.tables:
            if t.name.lower() == low:
                return t
        raise UnknownTable(f"{self.db_id}: no table named {name!r}")

    def has_table(self, name: str) -> bool:
        low = name.lower()
        return any(t.name.lower() == low for t in self.tables)


def open_readonly(path: str) -> sqlite3.Connection:
    """Open a database file without any possibility of writing to it."""
    uri = "file:" + str(path).replace("?", "%3f").replace("#", "%23") + "?mode=ro"
    return sqlite3.connect(uri, uri=True)


def _introspect(path: str) -> list[TableSchema]:
    try:
        con = open_readonly(path)
        names = [
            r[0]
            for r in con.execute(
                "SELECT name FROM sqlite_master"
                " WHERE type='table' AND name NOT LIKE 'sqlite_%'"
            )
        ]
    except sqlite3.Error as exc:
        raise CorruptDatabase(f"cannot read {path}: {exc}") from exc
    tables: list[TableSchema] = []
    try:
        pk_by_table: dict[str, list[str]] = {}
        for name in names:
            cols = []
            for _cid, cname, ctype, _notnull, _default, pk in con.execute(
                f"PRAGMA table_info({_quote_ident(name)})"
            ):
                cols.append(ColumnSchema(cname, ctype or "", is_primary_key=pk > 0))
            pk_by_table[name.lower()] = [c.name for c in cols if c.is_primary_key]
            (count,) = con.execute(
                f"SELECT count(*) FROM {_quote_ident(name)}"
            ).fetchone()
            tables.append(TableSchema(name, cols, row_count=count))
        for tbl in tables:
            for _id, _seq, ref_table, col_from, col_to, *_ in con.execute(
                f"PRAGMA foreign_key_list({_quote_ident(tbl.name)})"
            ):
                if col_to is None:
                    # bare REFERENCES t: resolve to the single primary key if any
                    pk = pk_by_table.get(ref_table.lower(), [])
                    if len(pk) != 1:
                        continue
                    col_to = pk[0]
                for col in tbl.columns:
                    if col.name.lower() == (col_from or "").lower():
                        col.foreign_ref = (ref_table, col_to)
    except sqlite3.Error as exc:
        raise CorruptDatabase(f"cannot introspect {path}: {exc}") from exc
    finally:
        con.close()
    if not tables:
        raise EmptyDatabase(f"{path} has no user tables")
    return tables


_PLAIN_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


def _quote_ident(name: str) -> str:
    if _PLAIN_IDENT.match(name):
        return name
    return '"' + name.replace('"', '""') + '"'


def serialize_schema(entry: DatabaseEntry, tables: set[str] | None = None) -> str:
    """Render the schema as CREATE TABLE text, one block per table in entry
    order. When a subset is given only those tables are rendered, and foreign
    key clauses are kept only if the referenced table is inside the subset, so
    the output never names a table outside the subset.
    """
    if tables is None:
        wanted = {t.name.lower() for t in entry.tables}
    else:
        wanted = set()
        for name in tables:
            entry.table(name)  # raises UnknownTable
            wanted.add(name.lower())
    blocks = []
    for tbl in entry.tables:
        if tbl.name.lower() not in wanted:
            continue
        lines = []
        for col in tbl.columns:
            decl = _quote_ident(col.name)
            if col.declared_type:
                decl += " " + col.declared_type
            lines.append(decl)
        pk = [c.name for c in tbl.columns if c.is_primary_key]
        if pk:
            lines.append("PRIMARY KEY (" + ", ".join(_quote_ident(c) for c in pk) + ")")
        for col in tbl.columns:
            if col.foreign_ref and col.foreign_ref[0].lower() in wanted:
                ref_table, ref_col = col.foreign_ref
                lines.append(
                    f"FOREIGN KEY ({_quote_ident(col.name)}) REFERENCES"
                    f" {_quote_ident(ref_table)} ({_quote_ident(ref_col)})"
                )
        body = ",\n".join("    " + line for line in lines)
        blocks.append(f"CREATE TABLE {_quote_ident(tbl.name)} (\n{body}\n);")
    return "\n\n".join(blocks)


def preview_rows(entry: DatabaseEntry, table: str, limit: int) -> tuple[list[str], list[list]]:
    """First `limit` rows of a table in storage order."""
    tbl = entry.table(table)
    cols = ", ".join(_quote_ident(c) for c in tbl.column_names())
    con = open_readonly(entry.storage_ref)
    try:
        cur = con.execute(
            f"SELECT {cols} FROM {_quote_ident(tbl.name)} LIMIT ?", (max(0, limit),)
        )
        rows = [list(r) for r in cur.fetchall()]
    finally:
        con.close()
    return tbl.column_names(), rows


_SAFE_FILENAME = re.compile(r"[A-Za-z0-9_.-]+$")


def _filename_for(db_id: str) -> str:
    if _SAFE_FILENAME.match(db_id):
        return db_id + ".sqlite"
    digest = "".join(f"{b:02x}" for b in db_id.encode("utf-8")[:16])
    return "db_" + digest + ".sqlite"


@dataclass
class Catalog:
    """Registry of ingested databases, optionally persisted to a directory."""

    root: Path | None = None
    _entries: dict[str, DatabaseEntry] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _tmpdir: tempfile.TemporaryDirectory | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.root is not None:
            self.root = Path(self.root)
            (self.root / "files").mkdir(parents=True, exist_ok=True)
            self._load_manifest()

    # -- persistence ------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def _load_manifest(self):
        path = self._manifest_path()
        if not path.exists():
            return
        data = json.loads(path.read_text(encoding="utf-8"))
        for db_id, meta in data.items():
            file_path = self.root / "files" / meta["file"]
            try:
                tables = _introspect(str(file_path))
            except CatalogError as exc:
                log.warning("skipping %s from manifest: %s", db_id, exc)
                continue
            self._entries[db_id] = DatabaseEntry(
                db_id=db_id,
                display_name=meta.get("display_name", db_id),
                tables=tables,
                storage_ref=str(file_path),
            )

    def _write_manifest(self):
        data = {
            db_id: {
                "display_name": e.display_name,
                "file": Path(e.storage_ref).name,
            }
            for db_id, e in self._entries.items()
        }
        tmp = self._manifest_path().with_suffix(".json.tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self._manifest_path())

    # -- ingestion --------------------------------------------------------

    def ingest(
        self,
        source: str | Path | bytes,
        db_id: str,
        display_name: str | None = None,
        replace: bool = False,
    ) -> DatabaseEntry:
        """Register a database file under db_id.

        Re-uploading an existing id requires replace=True; the swap is atomic
        so readers either see the old entry or the new one.
        """
        with self._lock:
            if db_id in self._entries and not replace:
                raise DuplicateId(f"database id {db_id!r} already registered")
            storage = self._store_file(source, db_id)
            tables = _introspect(storage)
            entry = DatabaseEntry(
                db_id=db_id,
                display_name=display_name or db_id,
                tables=tables,
                storage_ref=storage,
            )
            self._entries[db_id] = entry
            if self.root is not None:
                self._write_manifest()
            log.info("ingested %s: %d tables", db_id, len(tables))
            return entry

    def _store_file(self, source, db_id: str) -> str:
        if isinstance(source, bytes):
            dest_dir = self._files_dir()
            fd, tmp_name = tempfile.mkstemp(dir=dest_dir, suffix=".part")
            with os.fdopen(fd, "wb") as fh:
                fh.write(source)
            dest = os.path.join(dest_dir, _filename_for(db_id))
            os.replace(tmp_name, dest)
            return dest
        src = Path(source)
        if not src.exists():
            raise CorruptDatabase(f"no such file: {src}")
        if self.root is None:
            return str(src)
        dest = self.root / "files" / _filename_for(db_id)
        fd, tmp_name = tempfile.mkstemp(dir=self.root / "files", suffix=".part")
        with os.fdopen(fd, "wb") as fh:
            fh.write(src.read_bytes())
        os.replace(tmp_name, dest)
        return str(dest)

    def _files_dir(self) -> str:
        if self.root is not None:
            return str(self.root / "files")
        if self._tmpdir is None:
            self._tmpdir = tempfile.TemporaryDirectory(prefix="convosql_catalog_")
        return self._tmpdir.name

    # -- lookup -----------------------------------------------------------

    def get(self, db_id: str) -> DatabaseEntry:
        try:
            return self._entries[db_id]
        except KeyError:
            raise UnknownDatabase(f"no database registered under {db_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def entries(self) -> list[DatabaseEntry]:
        return [self._entries[i] for i in self.ids()]

    def __contains__(self, db_id: str) -> bool:
        return db_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)
