"""Shared machinery for engine components: threads, kill points, sync/ack."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, NamedTuple

from .broker import Broker, BrokerError, decode, encode
from .profiler import Profiler
from .state import AckMessage, StateStore, SyncMessage

if TYPE_CHECKING:
    from .config import RunConfig
    from .execmanager import RuntimeHandle

log = logging.getLogger(__name__)

PENDING = "pending"
DONE = "done"
DEAD_LETTER = "dl"
# subcomponents that report state changes, each with a sync and an ack queue
SYNC_SENDERS = ("enqueue", "dequeue", "emgr", "callback", "heartbeat")


def sync_queue(name: str) -> str:
    return f"sync.{name}"


def ack_queue(name: str) -> str:
    return f"ack.{name}"


def all_queues() -> list[str]:
    qs = [PENDING, DONE, DEAD_LETTER]
    for s in SYNC_SENDERS:
        qs += [sync_queue(s), ack_queue(s)]
    return qs


class ComponentKilled(BaseException):
    """Unwinds a subcomponent thread at a kill point, skipping all cleanup."""


class Change(NamedTuple):
    kind: str
    uid: str
    state: str
    attempt: int = 0
    exit_code: int | None = None
    reason: str | None = None


@dataclass
class RunContext:
    broker: Broker
    store: StateStore
    config: "RunConfig"
    profiler: Profiler
    rts: "RuntimeHandle"
    workdir: Path
    base_dir: Path
    fatal: list[BaseException] = field(default_factory=list)
    kill_requests: set[str] = field(default_factory=set)
    crashed: threading.Event = field(default_factory=threading.Event)
    lock: threading.Lock = field(default_factory=threading.Lock)
    # transaction the execution started from; keeps sender ids of a resumed
    # run apart from those already recorded in the checkpoint
    epoch: int = 0

    def request_kill(self, name: str) -> None:
        with self.lock:
            self.kill_requests.add(name)

    def take_kill(self, name: str) -> bool:
        with self.lock:
            if name in self.kill_requests:
                self.kill_requests.discard(name)
                return True
            return False


class Component:
    """Owns a few subcomponent threads. Dies as a unit."""

    name = "component"

    def __init__(self, ctx: RunContext, incarnation: int = 1) -> None:
        self.ctx = ctx
        self.incarnation = incarnation
        self._stop = threading.Event()
        self._killed = threading.Event()
        self.threads: list[threading.Thread] = []
        self.consumers: list[str] = []
        self.error: BaseException | None = None
        self._renewed = time.monotonic()

    # -- lifecycle --------------------------------------------------------

    def start(self) -> None:
        raise NotImplementedError

    def spawn(self, target: Callable[[], None], sub: str) -> None:
        t = threading.Thread(target=self._guard, args=(target, sub), daemon=True,
                             name=f"{self.name}.{sub}#{self.incarnation}")
        self.threads.append(t)
        t.start()

    def _guard(self, target: Callable[[], None], sub: str) -> None:
        try:
            target()
        except ComponentKilled:
            log.info("%s.%s#%d killed", self.name, sub, self.incarnation)
        except BrokerError as exc:
            # expected once the supervisor has disconnected a killed component
            if not self._killed.is_set():
                log.warning("%s.%s#%d lost its broker session: %s", self.name, sub, self.incarnation, exc)
                self.error = exc
        except FatalError as exc:
            self.ctx.fatal.append(exc)
            self.error = exc
        except Exception as exc:  # noqa: BLE001 - supervision decides what to do
            log.exception("%s.%s#%d crashed", self.name, sub, self.incarnation)
            self.error = exc
        finally:
            if not self._stop.is_set():
                self._killed.set()

    def register(self, sub: str) -> str:
        cid = self.ctx.broker.register_consumer(f"{self.name}.{sub}#{self.incarnation}",
                                                lease=self.ctx.config.lease)
        self.consumers.append(cid)
        return cid

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    @property
    def failed(self) -> bool:
        """Something died without being asked to stop."""
        if self._stop.is_set():
            return False
        if self._killed.is_set() or any(not t.is_alive() for t in self.threads):
            return True
        return any(not self.ctx.broker.consumer_alive(c) for c in self.consumers)

    def check(self) -> None:
        """Kill point. Also keeps the component's broker leases fresh."""
        if self._killed.is_set() or self.ctx.crashed.is_set():
            raise ComponentKilled(self.name)
        if self.ctx.take_kill(self.name):
            self._killed.set()
            raise ComponentKilled(self.name)
        now = time.monotonic()
        if now - self._renewed > self.ctx.config.lease / 4:
            self._renewed = now
            for cid in self.consumers:
                self.ctx.broker.renew(cid)

    def kill(self) -> None:
        self._killed.set()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for t in self.threads:
            t.join(timeout)

    def join(self, timeout: float) -> None:
        for t in self.threads:
            t.join(timeout)


class FatalError(Exception):
    """Raised inside a component when the whole run has to stop."""


class SyncClient:
    """Sender side of the sync/ack protocol.

    ``send`` publishes up to ``window`` updates, then blocks until each is
    acked; it never returns before the store has ruled on every update.
    """

    def __init__(self, comp: Component, sub: str, window: int = 64) -> None:
        self.comp = comp
        self.broker = comp.ctx.broker
        self.sender = f"{sub}:{comp.ctx.epoch}.{comp.incarnation}"
        self.sync_q = sync_queue(sub)
        self.ack_q = ack_queue(sub)
        self.window = window
        self.cid = comp.register(f"{sub}-acks")
        self.seq = 0

    def send(self, changes: list[Change]) -> list[bool]:
        results: list[bool] = []
        for i in range(0, len(changes), self.window):
            results.extend(self._send_window(changes[i:i + self.window]))
        return results

    def send_one(self, change: Change) -> bool:
        return self.send([change])[0]

    def _send_window(self, chunk: list[Change]) -> list[bool]:
        pending: dict[int, int] = {}
        out: list[bool] = [False] * len(chunk)
        for i, ch in enumerate(chunk):
            self.seq += 1
            msg = SyncMessage(ch.uid, ch.kind, ch.state, ch.attempt, self.sender, self.seq,
                              ch.exit_code, ch.reason)
            self.broker.publish(self.sync_q, encode(msg.to_doc()), msg_id=f"{self.sender}:{self.seq}")
            pending[self.seq] = i
        with self.comp.ctx.profiler.paused():
            self._await(pending, out)
        return out

    def _await(self, pending: dict[int, int], out: list[bool]) -> None:
        while pending:
            self.comp.check()
            for env in self.broker.consume(self.ack_q, 64, self.cid, timeout=0.05):
                self.broker.ack(self.ack_q, env.delivery_tag, self.cid)
                try:
                    ack = AckMessage.from_doc(decode(env.payload))
                except Exception:  # noqa: BLE001
                    log.warning("%s: dropping malformed ack", self.sender)
                    continue
                if ack.sender != self.sender:
                    continue  # addressed to an earlier incarnation
                idx = pending.pop(ack.seq, None)
                if idx is not None:
                    out[idx] = ack.accepted
