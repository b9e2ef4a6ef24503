"""Producer/consumer throughput benchmark over the broker.

``p`` producer threads push ``tasks`` task messages through the broker to
``c`` consumer threads, which hand each message to an empty sink. With
``p == c`` there is one queue per pair; otherwise ``max(p, c)`` queues are
shared round-robin on both sides.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import asdict, dataclass

import psutil

from .broker import Broker, encode

# published reference run: 8 producers, 8 consumers, 10^6 tasks
REFERENCE = {"producers": 8, "consumers": 8, "tasks": 1_000_000, "total_time": 107.0, "peak_rss_mb": 3126.0}


@dataclass
class BenchResult:
    producers: int
    consumers: int
    tasks: int
    payload_size: int
    queues: int
    total_time: float
    produce_time: float
    consume_time: float
    base_rss_mb: float
    peak_rss_mb: float

    def to_dict(self) -> dict:
        return asdict(self)


def queue_layout(producers: int, consumers: int) -> tuple[int, list[list[int]], list[list[int]]]:
    """Queue count plus the queues each producer and each consumer works on."""
    n = producers if producers == consumers else max(producers, consumers)
    prod = [[q for q in range(n) if q % producers == i] for i in range(producers)]
    cons = [[q for q in range(n) if q % consumers == k] for k in range(consumers)]
    return n, prod, cons


def split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _payload(uid: str, size: int) -> bytes:
    doc = {"uid": uid, "executable": "sleep", "arguments": ["0"], "cores": 1, "pad": ""}
    raw = encode(doc)
    if len(raw) < size:
        doc["pad"] = "x" * (size - len(raw))
        raw = encode(doc)
    return raw


def _sink(payload: bytes) -> None:
    """Stands in for the runtime: accepts a task and does nothing with it."""


class _RssSampler(threading.Thread):
    def __init__(self, period: float = 0.01) -> None:
        super().__init__(daemon=True, name="bench.rss")
        self.proc = psutil.Process()
        self.period = period
        self.peak = self.proc.memory_info().rss
        self._done = threading.Event()

    def run(self) -> None:
        while not self._done.wait(self.period):
            self.peak = max(self.peak, self.proc.memory_info().rss)

    def finish(self) -> int:
        self._done.set()
        self.join()
        self.peak = max(self.peak, self.proc.memory_info().rss)
        return self.peak


def run_bench(producers: int, consumers: int, tasks: int, payload_size: int = 256,
              batch: int = 256) -> BenchResult:
    if producers < 1 or consumers < 1:
        raise ValueError("producers and consumers must be >= 1")
    if tasks < 0:
        raise ValueError("tasks must be >= 0")
    n, prod_queues, cons_queues = queue_layout(producers, consumers)
    names = [f"bench.{q}" for q in range(n)]
    broker = Broker(None)
    for name in names:
        broker.declare_queue(name, durable=False)

    # which queue each message lands on is fixed up front, so every consumer
    # knows how many messages it has to drain
    per_producer = split(tasks, producers)
    expected = [0] * n
    for i, count in enumerate(per_producer):
        qs = prod_queues[i]
        for j, c in enumerate(split(count, len(qs))):
            expected[qs[j]] += c

    proc = psutil.Process()
    base = proc.memory_info().rss
    sampler = _RssSampler()
    ends: dict[str, float] = {}
    go = threading.Event()

    def produce(i: int) -> None:
        qs = [names[q] for q in prod_queues[i]]
        go.wait()
        for m in range(per_producer[i]):
            broker.publish(qs[m % len(qs)], _payload(f"p{i}.t{m}", payload_size))
        ends[f"p{i}"] = time.perf_counter()

    def consume(k: int) -> None:
        cid = broker.register_consumer(f"bench.c{k}")
        left = {names[q]: expected[q] for q in cons_queues[k]}
        go.wait()
        while any(left.values()):
            got = 0
            for qname, need in left.items():
                if not need:
                    continue
                envs = broker.consume(qname, min(batch, need), cid)
                for env in envs:
                    _sink(env.payload)
                if envs:
                    broker.ack_many(qname, [e.delivery_tag for e in envs], cid)
                left[qname] = need - len(envs)
                got += len(envs)
            if not got:
                # nothing ready anywhere: block until one of the owed queues fills
                broker.wait_any([q for q, need in left.items() if need], 0.05)
        ends[f"c{k}"] = time.perf_counter()

    threads = [threading.Thread(target=produce, args=(i,), daemon=True) for i in range(producers)]
    threads += [threading.Thread(target=consume, args=(k,), daemon=True) for k in range(consumers)]
    for t in threads:
        t.start()
    sampler.start()
    start = time.perf_counter()
    go.set()
    for t in threads:
        t.join()
    peak = sampler.finish()
    broker.close()
    prod_end = max((v for k, v in ends.items() if k.startswith("p")), default=start)
    cons_end = max((v for k, v in ends.items() if k.startswith("c")), default=start)
    return BenchResult(
        producers=producers, consumers=consumers, tasks=tasks, payload_size=payload_size, queues=n,
        total_time=max(prod_end, cons_end) - start, produce_time=prod_end - start,
        consume_time=cons_end - start, base_rss_mb=base / 2**20, peak_rss_mb=peak / 2**20,
    )


def median_bench(producers: int, consumers: int, tasks: int, payload_size: int = 256,
                 repetitions: int = 5) -> tuple[float, list[BenchResult]]:
    runs = [run_bench(producers, consumers, tasks, payload_size) for _ in range(repetitions)]
    return statistics.median(r.total_time for r in runs), runs


def format_rows(results: list[BenchResult]) -> str:
    lines = [f"{'p':>3} {'c':>3} {'queues':>6} {'tasks':>9} {'total s':>9} {'produce s':>9} "
             f"{'consume s':>9} {'base MB':>8} {'peak MB':>8}"]
    for r in results:
        lines.append(f"{r.producers:>3} {r.consumers:>3} {r.queues:>6} {r.tasks:>9} {r.total_time:>9.3f} "
                     f"{r.produce_time:>9.3f} {r.consume_time:>9.3f} {r.base_rss_mb:>8.1f} {r.peak_rss_mb:>8.1f}")
    ref = REFERENCE
    lines.append(f"{ref['producers']:>3} {ref['consumers']:>3} {'':>6} {ref['tasks']:>9} {ref['total_time']:>9.3f} "
                 f"{'':>9} {'':>9} {'':>8} {ref['peak_rss_mb']:>8.1f}  (reference host, not compared)")
    return "\n".join(lines)
