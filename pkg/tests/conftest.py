"""Shared fixtures: small SQLite databases built from known DDL."""

import sqlite3

import pytest

SINGER_DDL = [
    """CREATE TABLE singer (
        singer_id INTEGER PRIMARY KEY,
        name TEXT,
        country TEXT,
        age INTEGER
    )""",
    """CREATE TABLE concert (
        concert_id INTEGER PRIMARY KEY,
        concert_name TEXT,
        singer_id INTEGER,
        year INTEGER,
        FOREIGN KEY (singer_id) REFERENCES singer (singer_id)
    )""",
]

SINGER_ROWS = {
    "singer": [
        (1, "Joe Sharp", "Netherlands", 52),
        (2, "Timbaland", "United States", 32),
        (3, "Justin Brown", "France", 29),
        (4, "Rose White", "France", 41),
        (5, "John Nizinik", "Georgia", 43),
    ],
    "concert": [
        (1, "Auditions", 1, 2014),
        (2, "Super bootcamp", 2, 2014),
        (3, "Home Visits", 2, 2015),
        (4, "Week 1", 3, 2015),
    ],
}


def build_sqlite(path, ddl_statements, rows=None):
    """Create a database file from DDL and optional row data."""
    con = sqlite3.connect(path)
    try:
        for ddl in ddl_statements:
            con.execute(ddl)
        for table, rowlist in (rows or {}).items():
            if not rowlist:
                continue
            marks = ", ".join("?" * len(rowlist[0]))
            con.executemany(f'INSERT INTO "{table}" VALUES ({marks})', rowlist)
        con.commit()
    finally:
        con.close()
    return str(path)


@pytest.fixture
def singer_db(tmp_path):
    """Two-table database with one foreign key and a few rows."""
    return build_sqlite(tmp_path / "concert_singer.sqlite", SINGER_DDL, SINGER_ROWS)
