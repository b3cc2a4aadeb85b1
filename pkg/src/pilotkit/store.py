"""File-backed persistence: append-only record logs, the client/agent bridge
and the per-session store.

Session directory layout::

    <session>/events.jsonl
    <session>/bridge/inbox.jsonl     client -> agents
    <session>/bridge/outbox.jsonl    agents -> client
    <session>/cursors.json           consumer positions in the bridge files

The event log has exactly one writing process; bridge files may have
several (every agent writes the outbox) and serialize appends with an
advisory lock. Readers only consume complete (newline-terminated) lines,
so tailing a file that is being appended to from another process is safe.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import threading
import time
import warnings
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable

from .exceptions import CorruptRecord, StoreError
from .model import Event

log = logging.getLogger(__name__)

EVENTS = "events.jsonl"
INBOX = "bridge/inbox.jsonl"
OUTBOX = "bridge/outbox.jsonl"
CURSORS = "cursors.json"


def _encode(record) -> dict:
    if isinstance(record, Event):
        return record.to_dict()
    return dict(record)


def _report(exc: CorruptRecord):
    log.warning("%s", exc)
    warnings.warn(exc, stacklevel=3)


def parse_lines(data: bytes, path, on_corrupt: Callable | None = None) -> list[dict]:
    """Decode newline-delimited JSON, skipping and reporting bad lines."""
    on_corrupt = on_corrupt or _report
    records = []
    lines = data.split(b"\n")
    # a trailing partial line (no newline) is an interrupted write
    for lineno, raw in enumerate(lines, start=1):
        if lineno == len(lines):
            if raw.strip():
                on_corrupt(CorruptRecord(path, lineno, "truncated record"))
            break
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            if not isinstance(rec, dict) or "seq" not in rec:
                raise ValueError("missing sequence number")
        except (ValueError, UnicodeDecodeError) as exc:
            on_corrupt(CorruptRecord(path, lineno, str(exc)))
            continue
        records.append(rec)
    return records


class AppendLog:
    """Append-only newline-delimited JSON log with dense sequence numbers."""

    def __init__(self, path, *, fsync: bool = False, shared: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        # shared logs take an exclusive flock per append and re-read the
        # last sequence number, so several processes may write them
        self.shared = shared
        self._lock = threading.Lock()
        self._seq = 0
        needs_newline = False
        if self.path.exists() and self.path.stat().st_size:
            data = self.path.read_bytes()
            needs_newline = not data.endswith(b"\n")
            for rec in parse_lines(data, self.path, on_corrupt=lambda exc: None):
                self._seq = max(self._seq, int(rec["seq"]))
        try:
            self._fh = open(self.path, "ab")
            if needs_newline:
                # terminate a torn final line so new records stay parseable
                self._fh.write(b"\n")
                self._fh.flush()
        except OSError as exc:
            raise StoreError(f"cannot open {self.path}: {exc}") from exc

    @property
    def last_sequence(self) -> int:
        return self._seq

    def append(self, record) -> int:
        return self.append_bulk([record])[-1]

    def append_bulk(self, records: Iterable) -> list[int]:
        with self._lock:
            if self._fh.closed:
                raise StoreError(f"{self.path} is closed")
            if not self.shared:
                return self._write(records)
            fcntl.flock(self._fh, fcntl.LOCK_EX)
            try:
                self._seq = max(self._seq, self._tail_sequence())
                return self._write(records)
            finally:
                fcntl.flock(self._fh, fcntl.LOCK_UN)

    def _tail_sequence(self) -> int:
        with open(self.path, "rb") as fh:
            end = fh.seek(0, os.SEEK_END)
            size = 4096
            while True:
                start = max(0, end - size)
                fh.seek(start)
                data = fh.read(end - start)
                lines = data.split(b"\n")
                # lines[-1] is the (possibly empty) unterminated tail
                for raw in reversed(lines[:-1] if start == 0 else lines[1:-1]):
                    try:
                        return int(json.loads(raw)["seq"])
                    except (ValueError, KeyError, TypeError):
                        continue
                if start == 0:
                    return 0
                size *= 4

    def _write(self, records) -> list[int]:
        seqs, chunks = [], []
        seq = self._seq
        for record in records:
            seq += 1
            d = _encode(record)
            d["seq"] = seq
            chunks.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
            seqs.append(seq)
        if not chunks:
            return []
        try:
            self._fh.write(("\n".join(chunks) + "\n").encode("utf-8"))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StoreError(f"write to {self.path} failed: {exc}") from exc
        self._seq = seq
        return seqs

    def replay(self, from_sequence: int = 1, on_corrupt: Callable | None = None) -> list[dict]:
        return replay_file(self.path, from_sequence, on_corrupt)

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


def replay_file(path, from_sequence: int = 1, on_corrupt: Callable | None = None) -> list[dict]:
    if from_sequence < 1:
        raise ValueError("from_sequence must be >= 1")
    path = Path(path)
    if not path.exists():
        return []
    records = parse_lines(path.read_bytes(), path, on_corrupt)
    return [r for r in records if r["seq"] >= from_sequence]


class CursorFile:
    """Consumer positions, shared between processes under an advisory lock."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock_path = self.path.with_name(self.path.name + ".lock")
        self._tlock = threading.Lock()

    @contextmanager
    def _locked(self):
        with self._tlock, open(self._lock_path, "a+") as lf:
            fcntl.flock(lf, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(lf, fcntl.LOCK_UN)

    def _read(self) -> dict:
        try:
            return json.loads(self.path.read_text())
        except FileNotFoundError:
            return {}
        except ValueError:
            log.warning("cursor file %s unreadable, starting from scratch", self.path)
            return {}

    def load(self) -> dict:
        with self._locked():
            return self._read()

    def get(self, consumer: str) -> dict:
        return self.load().get(consumer, {"records": 0, "offset": 0})

    def set(self, consumer: str, position: dict):
        with self._locked():
            data = self._read()
            data[consumer] = position
            tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.{threading.get_ident()}")
            tmp.write_text(json.dumps(data, sort_keys=True))
            os.replace(tmp, self.path)


class PersistentQueue:
    """A file-backed queue with per-consumer cursors.

    Messages carry a ``target``; a consumer only receives messages addressed
    to it, each exactly once (the cursor is committed before the messages
    are handed out). Cursors survive process restarts.
    """

    def __init__(self, path, cursors: CursorFile, *, poll: float = 0.002):
        self.path = Path(path)
        self.cursors = cursors
        self.poll = poll
        self._log = None
        self._readers: dict[str, dict] = {}
        self._lock = threading.Lock()

    def put_bulk(self, messages: list) -> int:
        if not messages:
            raise ValueError("put_bulk needs at least one message")
        with self._lock:
            if self._log is None:
                self._log = AppendLog(self.path, shared=True)
        self._log.append_bulk(messages)
        return len(messages)

    def put(self, message) -> int:
        return self.put_bulk([message])

    def get_bulk(self, consumer: str, max_n: int = 1024, timeout: float | None = 0.0,
                 target: str | None = None) -> list[dict]:
        """Return up to ``max_n`` messages for ``target`` (default: consumer name).

        Waits up to ``timeout`` seconds for at least one message; ``None``
        waits forever, ``0`` does not wait.
        """
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        target = consumer if target is None else target
        deadline = None if timeout is None else time.monotonic() + timeout
        delay = self.poll / 4
        while True:
            got = self._scan(consumer, target, max_n)
            if got:
                return got
            if deadline is not None and time.monotonic() >= deadline:
                return []
            time.sleep(delay if deadline is None else min(delay, max(0.0, deadline - time.monotonic())))
            delay = min(delay * 2, self.poll * 4)

    def _reader(self, consumer) -> dict:
        r = self._readers.get(consumer)
        if r is None:
            pos = self.cursors.get(f"{self.path.name}:{consumer}")
            r = {"records": pos["records"], "offset": pos["offset"], "fh": None, "buf": b""}
            self._readers[consumer] = r
        return r

    def _scan(self, consumer, target, max_n) -> list[dict]:
        with self._lock:
            r = self._reader(consumer)
            if r["fh"] is None:
                if not self.path.exists():
                    return []
                r["fh"] = open(self.path, "rb")
            fh = r["fh"]
            fh.seek(r["offset"])
            data = fh.read(1 << 20)
            if not data:
                return []
            if b"\n" not in data and len(data) == 1 << 20:
                data += fh.read()
            out = []
            offset, records = r["offset"], r["records"]
            start = 0
            while len(out) < max_n:
                nl = data.find(b"\n", start)
                if nl < 0:
                    break
                line = data[start:nl]
                start = nl + 1
                offset += len(line) + 1
                if not line.strip():
                    continue
                records += 1
                try:
                    msg = json.loads(line)
                except ValueError:
                    _report(CorruptRecord(self.path, records, "undecodable bridge message"))
                    continue
                if msg.get("target") == target:
                    out.append(msg)
            if offset != r["offset"]:
                r["offset"], r["records"] = offset, records
                if out:
                    self.cursors.set(f"{self.path.name}:{consumer}", {"records": records, "offset": offset})
            return out

    def close(self):
        with self._lock:
            if self._log is not None:
                self._log.close()
            for r in self._readers.values():
                if r["fh"] is not None:
                    r["fh"].close()
            self._readers.clear()


class SessionStore:
    """Event log plus bridge queues for one session directory."""

    def __init__(self, path, *, fsync: bool = False):
        self.path = Path(path)
        self.session_id = self.path.name
        (self.path / "bridge").mkdir(parents=True, exist_ok=True)
        self.events = AppendLog(self.path / EVENTS, fsync=fsync)
        self.cursors = CursorFile(self.path / CURSORS)
        self.inbox = PersistentQueue(self.path / INBOX, self.cursors)
        self.outbox = PersistentQueue(self.path / OUTBOX, self.cursors)

    def persist(self, record) -> int:
        return self.events.append(record)

    def persist_bulk(self, records) -> list[int]:
        return self.events.append_bulk(records)

    def replay(self, from_sequence: int = 1, on_corrupt: Callable | None = None) -> list[dict]:
        return self.events.replay(from_sequence, on_corrupt)

    def close(self):
        self.events.close()
        self.inbox.close()
        self.outbox.close()
