"""In-process message broker with durable, acknowledged queues.

Delivery semantics follow the usual work-queue model: a consumed message is
held by its consumer until acked (gone for good) or nacked (requeued at the
tail, flagged as redelivered). A consumer that disconnects, or whose lease
lapses, gives back everything it holds.

Durable queues journal to ``<journal_dir>/<queue>.journal``, one record per
line::

    <delivery_tag> <acked:0|1> <base64 payload>

A publish appends an ``acked=0`` line before :meth:`Broker.publish` returns;
an ack appends ``<tag> 1 -``. Replay keeps every tag without an ack line.
"""

from __future__ import annotations

import base64
import itertools
import json
import logging
import os
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

log = logging.getLogger(__name__)

DEFAULT_LEASE = 30.0
_HEADER = struct.Struct(">I")


class BrokerError(Exception):
    pass


class UnknownQueue(BrokerError):
    pass


class SettingsMismatch(BrokerError):
    pass


class UnknownTag(BrokerError):
    pass


class UnknownConsumer(BrokerError):
    pass


class MalformedPayload(ValueError):
    pass


def encode(doc: Any) -> bytes:
    """Length-prefixed JSON."""
    body = json.dumps(doc, separators=(",", ":"), sort_keys=True).encode()
    return _HEADER.pack(len(body)) + body


def decode(payload: bytes) -> Any:
    if len(payload) < _HEADER.size:
        raise MalformedPayload("payload shorter than its length prefix")
    (n,) = _HEADER.unpack_from(payload)
    body = payload[_HEADER.size:]
    if len(body) != n:
        raise MalformedPayload(f"length prefix says {n} bytes, got {len(body)}")
    try:
        return json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(str(exc)) from exc


@dataclass(frozen=True)
class MessageEnvelope:
    queue: str
    delivery_tag: int
    payload: bytes
    redelivered: bool
    msg_id: str | None = None


class QueueHandle:
    """Live view of a declared queue."""

    def __init__(self, broker: "Broker", name: str, durable: bool) -> None:
        self._broker = broker
        self.name = name
        self.durable = durable

    @property
    def depth(self) -> int:
        return self._broker.depth(self.name)

    def __repr__(self) -> str:
        return f"QueueHandle({self.name!r}, durable={self.durable})"


class _Message:
    __slots__ = ("tag", "payload", "redelivered", "msg_id")

    def __init__(self, tag: int, payload: bytes, msg_id: str | None) -> None:
        self.tag = tag
        self.payload = payload
        self.redelivered = False
        self.msg_id = msg_id


class _Queue:
    def __init__(self, name: str, durable: bool, lock: threading.RLock) -> None:
        self.name = name
        self.durable = durable
        self.ready: deque[int] = deque()
        self.messages: dict[int, _Message] = {}
        self.owner: dict[int, str] = {}  # unacked tag -> consumer id
        self.ids: dict[str, int] = {}  # msg_id -> tag, for held messages
        self.next_tag = 1
        self.cond = threading.Condition(lock)
        self.watchers: set[threading.Condition] = set()
        self.journal = None
        self.published = 0
        self.acked = 0
        self.redelivered = 0

    def notify(self) -> None:
        self.cond.notify()
        for w in self.watchers:
            w.notify_all()


class _Consumer:
    __slots__ = ("cid", "lease", "expires", "held")

    def __init__(self, cid: str, lease: float | None) -> None:
        self.cid = cid
        self.lease = lease
        self.expires = None if lease is None else time.monotonic() + lease
        self.held: set[tuple[str, int]] = set()


class Broker:
    """Thread-safe broker. Every public method is atomic."""

    def __init__(self, journal_dir: str | Path | None = None, *, fsync: bool = False,
                 default_lease: float | None = DEFAULT_LEASE) -> None:
        self._lock = threading.RLock()
        self._queues: dict[str, _Queue] = {}
        self._handles: dict[str, QueueHandle] = {}
        self._consumers: dict[str, _Consumer] = {}
        self._ids = itertools.count(1)
        self._journal_dir = Path(journal_dir) if journal_dir is not None else None
        self._fsync = fsync
        self.default_lease = default_lease
        self._closed = False
        if self._journal_dir is not None:
            self._journal_dir.mkdir(parents=True, exist_ok=True)

    # -- queues -----------------------------------------------------------

    def declare_queue(self, name: str, durable: bool = True) -> QueueHandle:
        with self._lock:
            q = self._queues.get(name)
            if q is not None:
                if q.durable != durable:
                    raise SettingsMismatch(f"queue {name!r} exists with durable={q.durable}")
                return self._handles[name]
            q = _Queue(name, durable, self._lock)
            if durable and self._journal_dir is not None:
                self._open_journal(q)
            self._queues[name] = q
            handle = self._handles[name] = QueueHandle(self, name, durable)
            return handle

    def queues(self) -> list[str]:
        with self._lock:
            return list(self._queues)

    def _queue(self, name: str) -> _Queue:
        try:
            return self._queues[name]
        except KeyError:
            raise UnknownQueue(name) from None

    def depth(self, name: str) -> int:
        with self._lock:
            q = self._queue(name)
            return len(q.messages)

    def ready_count(self, name: str) -> int:
        with self._lock:
            return len(self._queue(name).ready)

    # -- journal ----------------------------------------------------------

    def _journal_path(self, name: str) -> Path:
        assert self._journal_dir is not None
        return self._journal_dir / f"{name}.journal"

    def _open_journal(self, q: _Queue) -> None:
        path = self._journal_path(q.name)
        restored: dict[int, bytes] = {}
        acked: set[int] = set()
        if path.exists():
            with open(path, "rb") as fh:
                for raw in fh:
                    if not raw.endswith(b"\n"):
                        break  # torn tail from a crash mid-write
                    # the payload field is empty for a zero-length message
                    parts = raw[:-1].split(b" ")
                    if len(parts) != 3:
                        continue
                    tag = int(parts[0])
                    if parts[1] == b"1":
                        acked.add(tag)
                    else:
                        restored[tag] = base64.b64decode(parts[2])
        pending = sorted(t for t in restored if t not in acked)
        seen = set(restored) | acked
        q.next_tag = max(seen, default=0) + 1
        # rewrite compacted
        tmp = path.with_suffix(".journal.tmp")
        with open(tmp, "wb") as fh:
            for tag in pending:
                fh.write(b"%d 0 %s\n" % (tag, base64.b64encode(restored[tag])))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        for tag in pending:
            q.messages[tag] = _Message(tag, restored[tag], None)
            q.ready.append(tag)
        q.journal = open(path, "ab", buffering=0)
        if pending:
            log.info("queue %s: restored %d unacked message(s) from journal", q.name, len(pending))

    def _journal_write(self, q: _Queue, line: bytes) -> None:
        if q.journal is None:
            return
        q.journal.write(line)
        if self._fsync:
            os.fsync(q.journal.fileno())

    # -- consumers --------------------------------------------------------

    def register_consumer(self, name: str = "consumer", lease: float | None = None) -> str:
        with self._lock:
            cid = f"{name}#{next(self._ids)}"
            self._consumers[cid] = _Consumer(cid, lease if lease is not None else self.default_lease)
            return cid

    def renew(self, consumer: str) -> None:
        with self._lock:
            c = self._consumers.get(consumer)
            if c is None:
                raise UnknownConsumer(consumer)
            if c.lease is not None:
                c.expires = time.monotonic() + c.lease

    def consumer_alive(self, consumer: str) -> bool:
        with self._lock:
            self._reap()
            return consumer in self._consumers

    def disconnect(self, consumer: str) -> int:
        """Drop a consumer; everything it holds becomes visible again. Returns the count."""
        with self._lock:
            c = self._consumers.pop(consumer, None)
            if c is None:
                return 0
            return self._release(c)

    def _release(self, c: _Consumer) -> int:
        by_queue: dict[str, list[int]] = {}
        for qname, tag in c.held:
            by_queue.setdefault(qname, []).append(tag)
        for qname, tags in by_queue.items():
            q = self._queues[qname]
            # back to the head, in original order
            for tag in sorted(tags, reverse=True):
                q.owner.pop(tag, None)
                msg = q.messages[tag]
                msg.redelivered = True
                q.redelivered += 1
                q.ready.appendleft(tag)
            q.cond.notify_all()
            for w in q.watchers:
                w.notify_all()
        n = len(c.held)
        c.held.clear()
        return n

    def _reap(self) -> None:
        now = time.monotonic()
        expired = [c for c in self._consumers.values() if c.expires is not None and c.expires < now]
        for c in expired:
            log.warning("consumer %s missed its lease; requeueing %d message(s)", c.cid, len(c.held))
            del self._consumers[c.cid]
            self._release(c)

    def _consumer(self, consumer: str | None) -> _Consumer:
        if consumer is None:
            c = self._consumers.get("default")
            if c is None:
                c = self._consumers["default"] = _Consumer("default", None)
            return c
        c = self._consumers.get(consumer)
        if c is None:
            raise UnknownConsumer(consumer)
        return c

    # -- messaging --------------------------------------------------------

    def publish(self, queue: str, payload: bytes, msg_id: str | None = None) -> int:
        """Append a message and return its delivery tag.

        With ``msg_id``, a publish is dropped (returning the held tag) while a
        message with the same id is still ready or unacked on this queue.
        """
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        with self._lock:
            q = self._queue(queue)
            if msg_id is not None and msg_id in q.ids:
                return q.ids[msg_id]
            tag = q.next_tag
            q.next_tag += 1
            payload = bytes(payload)
            self._journal_write(q, b"%d 0 %s\n" % (tag, base64.b64encode(payload)))
            q.messages[tag] = _Message(tag, payload, msg_id)
            if msg_id is not None:
                q.ids[msg_id] = tag
            q.ready.append(tag)
            q.published += 1
            q.notify()
            return tag

    def consume(self, queue: str, batch_limit: int = 1, consumer: str | None = None,
                timeout: float = 0.0) -> list[MessageEnvelope]:
        """Claim up to ``batch_limit`` of the oldest ready messages.

        Non-blocking by default; with ``timeout > 0`` waits that long for the
        first message to arrive.
        """
        if batch_limit < 1:
            raise ValueError("batch_limit must be >= 1")
        with self._lock:
            self._reap()
            q = self._queue(queue)
            c = self._consumer(consumer)
            if not q.ready and timeout > 0:
                deadline = time.monotonic() + timeout
                while not q.ready:
                    left = deadline - time.monotonic()
                    if left <= 0:
                        break
                    q.cond.wait(left)
                    if c.cid not in self._consumers and consumer is not None:
                        raise UnknownConsumer(consumer)
            out = []
            while q.ready and len(out) < batch_limit:
                tag = q.ready.popleft()
                msg = q.messages[tag]
                q.owner[tag] = c.cid
                c.held.add((queue, tag))
                out.append(MessageEnvelope(queue, tag, msg.payload, msg.redelivered, msg.msg_id))
            if c.lease is not None:
                c.expires = time.monotonic() + c.lease
            return out

    def wait_any(self, queues: Iterable[str], timeout: float) -> bool:
        """Block until one of ``queues`` has a ready message, or timeout."""
        with self._lock:
            qs = [self._queue(n) for n in queues]
            if any(q.ready for q in qs):
                return True
            cond = threading.Condition(self._lock)
            for q in qs:
                q.watchers.add(cond)
            try:
                cond.wait(timeout)
            finally:
                for q in qs:
                    q.watchers.discard(cond)
            return any(q.ready for q in qs)

    def _take(self, queue: str, tag: int, consumer: str | None) -> tuple[_Queue, _Message]:
        q = self._queue(queue)
        owner = q.owner.get(tag)
        if owner is None or (consumer is not None and owner != consumer):
            raise UnknownTag(f"{queue}: tag {tag} is not outstanding"
                             + (f" for {consumer}" if consumer else ""))
        del q.owner[tag]
        c = self._consumers.get(owner)
        if c is not None:
            c.held.discard((queue, tag))
        return q, q.messages[tag]

    def ack(self, queue: str, delivery_tag: int, consumer: str | None = None) -> None:
        with self._lock:
            q, msg = self._take(queue, delivery_tag, consumer)
            self._journal_write(q, b"%d 1 -\n" % delivery_tag)
            del q.messages[delivery_tag]
            if msg.msg_id is not None:
                q.ids.pop(msg.msg_id, None)
            q.acked += 1

    def ack_many(self, queue: str, delivery_tags: Iterable[int], consumer: str | None = None) -> None:
        """Ack several outstanding messages under one lock hold."""
        with self._lock:
            for tag in delivery_tags:
                q, msg = self._take(queue, tag, consumer)
                self._journal_write(q, b"%d 1 -\n" % tag)
                del q.messages[tag]
                if msg.msg_id is not None:
                    q.ids.pop(msg.msg_id, None)
                q.acked += 1

    def nack(self, queue: str, delivery_tag: int, consumer: str | None = None) -> None:
        with self._lock:
            q, msg = self._take(queue, delivery_tag, consumer)
            msg.redelivered = True
            q.redelivered += 1
            q.ready.append(delivery_tag)
            q.notify()

    # -- introspection ----------------------------------------------------

    def stats(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                name: {"depth": len(q.messages), "published": q.published,
                       "acked": q.acked, "redelivered": q.redelivered}
                for name, q in self._queues.items()
            }

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            for q in self._queues.values():
                if q.journal is not None:
                    q.journal.close()
                    q.journal = None
                q.cond.notify_all()

    def __enter__(self) -> "Broker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
