"""Randomized broker workloads checked against a reference multiset."""

from __future__ import annotations

import random
from collections import Counter

from pstflow.broker import Broker


def run_schedule(seed: int, n_messages: int, n_consumers: int = 3) -> tuple[Counter, Counter, int]:
    """Random publish/consume/ack/nack/disconnect against a reference multiset.

    Returns (published, acked-per-payload, deliveries of already-acked messages).
    """
    rng = random.Random(seed)
    b = Broker()
    b.declare_queue("q", False)
    consumers = [b.register_consumer(f"c{i}") for i in range(n_consumers)]
    held: dict[str, list] = {c: [] for c in consumers}
    published: Counter = Counter()
    acked: Counter = Counter()
    sent = after_ack = 0
    while sent < n_messages or b.depth("q"):
        op = rng.random()
        if op < 0.35 and sent < n_messages:
            payload = b"m%d" % sent
            b.publish("q", payload)
            published[payload] += 1
            sent += 1
        elif op < 0.6:
            c = rng.choice(consumers)
            got = b.consume("q", rng.randint(1, 8), c)
            after_ack += sum(1 for env in got if acked[env.payload])
            held[c].extend(got)
        elif op < 0.85:
            c = rng.choice(consumers)
            if held[c]:
                env = held[c].pop(rng.randrange(len(held[c])))
                b.ack("q", env.delivery_tag, c)
                acked[env.payload] += 1
        elif op < 0.95:
            c = rng.choice(consumers)
            if held[c]:
                env = held[c].pop(rng.randrange(len(held[c])))
                b.nack("q", env.delivery_tag, c)
        else:
            i = rng.randrange(len(consumers))
            c = consumers[i]
            b.disconnect(c)
            held.pop(c)
            consumers[i] = b.register_consumer(f"c{i}")
            held[consumers[i]] = []
    return published, acked, after_ack
