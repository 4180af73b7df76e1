"""SQLite-backed repository shared by the three registries.

Each registry owns one database file and one table.  All statements are
parameterized; the only interpolated SQL fragments are column names fixed
at class definition time.
"""

from __future__ import annotations

import json
import re
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

from .. import errors

_PATTERN = re.compile(r"^[a-z0-9-]{0,63}\*?$")


@dataclass(frozen=True)
class QueryForm:
    """Name pattern (exact, or prefix with a trailing ``*``), metadata
    equality filters and a validity flag."""

    name_pattern: Optional[str] = None
    metadata: dict[str, str] = field(default_factory=dict)
    valid_only: bool = True

    def __post_init__(self) -> None:
        p = self.name_pattern
        if p is not None and (not isinstance(p, str) or not p or not _PATTERN.match(p)):
            raise errors.MalformedQuery("namePattern must be a label or label prefix ending in '*'")
        if not isinstance(self.valid_only, bool):
            raise errors.MalformedQuery("validOnly must be a boolean")

    @classmethod
    def from_wire(cls, body: Any) -> "QueryForm":
        from ..messages import check_metadata

        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise errors.MalformedQuery("query form must be a JSON object")
        unknown = set(body) - {"namePattern", "metadata", "validOnly"}
        if unknown:
            raise errors.MalformedQuery(f"unknown query fields: {sorted(unknown)}")
        try:
            meta = check_metadata(body.get("metadata"))
        except errors.MalformedRequest as exc:
            raise errors.MalformedQuery(str(exc)) from None
        return cls(body.get("namePattern"), meta, body.get("validOnly", True))

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"metadata": dict(self.metadata), "validOnly": self.valid_only}
        if self.name_pattern is not None:
            out["namePattern"] = self.name_pattern
        return out

    def matches(self, name: str, metadata: dict[str, str], end_epoch: float, now_epoch: float) -> bool:
        """Plain-Python reading of the form, used as a brute-force reference."""
        p = self.name_pattern
        if p is not None:
            if p.endswith("*"):
                if not name.startswith(p[:-1]):
                    return False
            elif name != p:
                return False
        if any(metadata.get(k) != v for k, v in self.metadata.items()):
            return False
        return not (self.valid_only and end_epoch <= now_epoch)


class Repository:
    """Generic table access: insert, delete by key, filtered select."""

    def __init__(self, path: Optional[Path], table: str, schema: str, name_column: str):
        self.table = table
        self.name_column = name_column
        target = ":memory:" if path is None else str(path)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._db = sqlite3.connect(target, check_same_thread=False, isolation_level=None)
        self._db.row_factory = sqlite3.Row
        self._lock = threading.RLock()
        with self._lock:
            self._db.execute("PRAGMA journal_mode=WAL" if path is not None else "PRAGMA journal_mode=MEMORY")
            self._db.execute(schema)

    @contextmanager
    def transaction(self) -> Iterator[sqlite3.Connection]:
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                yield self._db
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
            self._db.execute("COMMIT")

    def insert(self, row: dict[str, Any]) -> None:
        cols = list(row)
        sql = f"INSERT INTO {self.table} ({', '.join(cols)}) VALUES ({', '.join('?' for _ in cols)})"
        with self._lock:
            self._db.execute(sql, [row[c] for c in cols])

    def find(self, **key: Any) -> list[dict[str, Any]]:
        where, params = self._where(key)
        with self._lock:
            rows = self._db.execute(f"SELECT * FROM {self.table}{where}", params).fetchall()
        return [dict(r) for r in rows]

    def delete(self, **key: Any) -> int:
        where, params = self._where(key)
        with self._lock:
            return self._db.execute(f"DELETE FROM {self.table}{where}", params).rowcount

    def delete_expired(self, now_epoch: float) -> list[dict[str, Any]]:
        with self.transaction() as db:
            rows = [dict(r) for r in db.execute(f"SELECT * FROM {self.table} WHERE eov_epoch < ?", (now_epoch,))]
            db.execute(f"DELETE FROM {self.table} WHERE eov_epoch < ?", (now_epoch,))
        return rows

    def all(self) -> list[dict[str, Any]]:
        return self.find()

    def count(self) -> int:
        with self._lock:
            return self._db.execute(f"SELECT COUNT(*) FROM {self.table}").fetchone()[0]

    def query(self, form: QueryForm, now_epoch: float) -> list[dict[str, Any]]:
        clauses: list[str] = []
        params: list[Any] = []
        p = form.name_pattern
        if p is not None:
            if p.endswith("*"):
                clauses.append(f"substr({self.name_column}, 1, ?) = ?")
                params += [len(p) - 1, p[:-1]]
            else:
                clauses.append(f"{self.name_column} = ?")
                params.append(p)
        for k, v in sorted(form.metadata.items()):
            clauses.append("json_extract(metadata, ?) IS ?")
            params += [f'$."{k}"', v]
        if form.valid_only:
            clauses.append("eov_epoch > ?")
            params.append(now_epoch)
        where = (" WHERE " + " AND ".join(clauses)) if clauses else ""
        with self._lock:
            rows = self._db.execute(f"SELECT * FROM {self.table}{where} ORDER BY rowid", params).fetchall()
        return [dict(r) for r in rows]

    def raw_dump(self) -> bytes:
        """Every stored byte, for isolation checks."""
        with self._lock:
            return b"\n".join("\x1f".join(map(repr, r)).encode() for r in self._db.execute(f"SELECT * FROM {self.table}"))

    def close(self) -> None:
        with self._lock:
            self._db.close()

    @staticmethod
    def _where(key: dict[str, Any]) -> tuple[str, list[Any]]:
        if not key:
            return "", []
        return " WHERE " + " AND ".join(f"{k} = ?" for k in key), list(key.values())


def dumps_meta(meta: dict[str, str]) -> str:
    return json.dumps(meta, sort_keys=True)


def loads_meta(text: str) -> dict[str, str]:
    return json.loads(text) if text else {}


class KeyedLocks:
    """One lock per uniqueness key; writers on different keys do not block."""

    def __init__(self):
        self._locks: dict[Sequence, threading.Lock] = {}
        self._guard = threading.Lock()

    def __call__(self, key) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())
