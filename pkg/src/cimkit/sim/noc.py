"""2D mesh network with XY routing and per-link flit reservation.

Each directed link carries at most one flit per cycle.  A message is
injected one flit per cycle starting at the SEND's execute cycle; a flit
advances one hop every ``hop_latency`` cycles once the next link is free.
Router buffers are unbounded, so contention only shows up on links.

A message is complete ``n_flits`` cycles after its first flit arrives,
which equals one cycle after the last flit arrives when nothing contends.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


@dataclass
class Message:
    src: int
    dst: int
    nbytes: int
    data: bytes
    sent_at: int
    first_arrival: int
    complete: int
    flits: int
    hops: int


@dataclass
class NocState:
    mesh_width: int
    flit_bytes: int
    hop_latency: int = 1
    link_free: dict[tuple[int, int], int] = field(default_factory=dict)
    mailboxes: dict[tuple[int, int], deque] = field(default_factory=dict)
    bytes_sent: dict[tuple[int, int], int] = field(default_factory=dict)
    bytes_received: dict[tuple[int, int], int] = field(default_factory=dict)
    flit_hops: int = 0
    last_arrival: int = 0

    def coords(self, core: int) -> tuple[int, int]:
        return core % self.mesh_width, core // self.mesh_width

    def route(self, src: int, dst: int) -> list[tuple[int, int]]:
        """Directed links visited by XY routing (X first, then Y)."""
        x, y = self.coords(src)
        tx, ty = self.coords(dst)
        links = []
        here = src
        while x != tx:
            x += 1 if tx > x else -1
            nxt = y * self.mesh_width + x
            links.append((here, nxt))
            here = nxt
        while y != ty:
            y += 1 if ty > y else -1
            nxt = y * self.mesh_width + x
            links.append((here, nxt))
            here = nxt
        return links

    def send(self, src: int, dst: int, data: bytes, t: int) -> Message:
        nbytes = len(data)
        key = (src, dst)
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + nbytes
        links = self.route(src, dst)
        nflits = -(-nbytes // self.flit_bytes)
        if nflits == 0:
            msg = Message(src, dst, 0, b"", t, t, t, 0, len(links))
        else:
            first = None
            arrival = t
            for i in range(nflits):
                tf = t + i
                for link in links:
                    tf = max(tf, self.link_free.get(link, 0))
                    self.link_free[link] = tf + 1
                    tf += self.hop_latency
                if first is None:
                    first = tf
                arrival = tf
            complete = max(first + nflits, arrival + 1)
            msg = Message(src, dst, nbytes, data, t, first, complete, nflits, len(links))
            self.flit_hops += nflits * len(links)
            self.last_arrival = max(self.last_arrival, arrival)
        self.mailboxes.setdefault(key, deque()).append(msg)
        return msg

    def peek(self, src: int, dst: int) -> Message | None:
        box = self.mailboxes.get((src, dst))
        return box[0] if box else None

    def take(self, src: int, dst: int) -> Message:
        msg = self.mailboxes[(src, dst)].popleft()
        key = (src, dst)
        self.bytes_received[key] = self.bytes_received.get(key, 0) + msg.nbytes
        return msg

    def in_flight(self) -> int:
        """Messages sent but never received."""
        return sum(len(b) for b in self.mailboxes.values())
