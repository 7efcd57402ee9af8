"""In-process message transport between simulated workers."""

import threading
from collections import defaultdict
from dataclasses import dataclass

import numpy as np


@dataclass
class ExchangeMessage:
    """Values one worker sends another within one phase.

    ``descriptor`` names what the payload is (target block and the box or
    pipeline row it covers); ``box`` gives the payload's global ranges, one
    (start, stop) pair per dimension, in the phase's index space.
    """

    sender: int
    receiver: int
    phase: str
    descriptor: tuple
    box: tuple
    payload: np.ndarray

    def __post_init__(self):
        expected = tuple(stop - start for start, stop in self.box)
        if tuple(self.payload.shape) != expected:
            raise ValueError(
                f"Payload shape {self.payload.shape} does not match box {self.box}"
            )

    @property
    def size(self):
        return int(self.payload.size)


class Channel:
    """Lock-protected mailboxes, one per worker, with per-phase accounting.

    Phases may carry a sub-tag after a slash (e.g. one per pipeline stage);
    accounting groups by the part before it and skips messages a worker
    sends to itself.

    Messages are handed out sorted by (sender, descriptor) so consumers never
    depend on arrival order.
    """

    def __init__(self, workers):
        self.workers = workers
        self._lock = threading.Lock()
        self._boxes = defaultdict(list)
        self.elements = defaultdict(int)
        self.messages = defaultdict(int)

    def send(self, message: ExchangeMessage):
        if not 0 <= message.receiver < self.workers:
            raise ValueError(f"No worker {message.receiver}")
        with self._lock:
            self._boxes[(message.receiver, message.phase)].append(message)
            if message.sender != message.receiver:
                tag = message.phase.split("/")[0]
                self.elements[tag] += message.size
                self.messages[tag] += 1

    def receive(self, worker, phase):
        """Take every message addressed to ``worker`` in ``phase``."""
        with self._lock:
            pending = self._boxes.pop((worker, phase), [])
        return sorted(pending, key=lambda m: (m.sender, m.descriptor))

    def pending(self):
        with self._lock:
            return sum(len(v) for v in self._boxes.values())
