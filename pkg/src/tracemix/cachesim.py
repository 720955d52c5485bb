"""Trace-replay cache simulation: plain LRU and the preloading variant.

Both simulators account one hit or miss per covered block of each read
request; writes bypass the read cache entirely.  The preloading simulator
additionally closes each time slice by feeding the aggregated counts to the
decoder and inserting the predicted cluster's blocks (in ascending id order,
uninstrumented) before the next slice's requests arrive.
"""

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .ingest import BinningConfig
from . import predict


class LRUCache:
    """Fixed-capacity block set with least-recently-used eviction."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._blocks = OrderedDict()

    def __len__(self):
        return len(self._blocks)

    def __contains__(self, block):
        return block in self._blocks

    def access(self, block) -> bool:
        """Service one request: True on hit (refreshes recency), False on miss
        (inserts the block, evicting the LRU victim when full)."""
        if block in self._blocks:
            self._blocks.move_to_end(block)
            return True
        self.insert(block)
        return False

    def insert(self, block):
        """Place a block without recording a hit or miss."""
        if block in self._blocks:
            self._blocks.move_to_end(block)
            return
        if len(self._blocks) >= self.capacity:
            self._blocks.popitem(last=False)
        self._blocks[block] = None


@dataclass
class SimReport:
    """Hit/miss accounting of one simulator run."""

    hits: int
    misses: int
    hitrate: float
    preload_volumes: list = field(default_factory=list)
    wall_clock: float = 0.0
    outcomes: list = None  # optional per-request hit/miss sequence

    @classmethod
    def from_counts(cls, hits, misses, preload_volumes=None, wall_clock=0.0,
                    outcomes=None):
        total = hits + misses
        return cls(hits=hits, misses=misses,
                   hitrate=hits / total if total else 0.0,
                   preload_volumes=preload_volumes or [],
                   wall_clock=wall_clock, outcomes=outcomes)

    def summary(self):
        return (f"requests={self.hits + self.misses} hits={self.hits} "
                f"misses={self.misses} hitrate={self.hitrate:.4f}")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("hits,misses,hitrate,preloads,wall_clock\n")
            fh.write(f"{self.hits},{self.misses},{self.hitrate:.6f},"
                     f"{sum(self.preload_volumes)},{self.wall_clock:.3f}\n")


def capacity_from_trace(events, fraction) -> int:
    """Cache capacity as a fraction of the trace footprint (distinct blocks
    touched), never below one block."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    footprint = set()
    for e in events:
        footprint.update(e.block_ids)
    return max(1, math.ceil(fraction * len(footprint)))


def simulate_baseline(events, capacity, record_outcomes=False) -> SimReport:
    """Replay the read requests against a plain LRU cache."""
    started = time.monotonic()
    cache = LRUCache(capacity)
    hits = misses = 0
    outcomes = [] if record_outcomes else None
    for e in events:
        if e.op != "read":
            continue
        for block in e.block_ids:
            if cache.access(block):
                hits += 1
                if outcomes is not None:
                    outcomes.append(True)
            else:
                misses += 1
                if outcomes is not None:
                    outcomes.append(False)
    return SimReport.from_counts(hits, misses, wall_clock=time.monotonic() - started,
                                 outcomes=outcomes)


def simulate_preloading(events, model, access_map, binning: BinningConfig,
                        capacity, record_outcomes=False,
                        preload_log=None) -> SimReport:
    """Replay with predictive preloading at every slice boundary.

    The just-completed slice is aggregated with the same binning the model was
    trained under, fed to the decoder, and the predicted cluster's blocks are
    inserted in ascending id order.  Preload insertions are not counted as
    hits or misses.  An initial preload fires before any slice completes.
    """
    if model.M != binning.M:
        raise ConfigError(
            f"model was fitted with {model.M} bins but binning has {binning.M}")
    started = time.monotonic()
    cache = LRUCache(capacity)
    decoder = predict.new_decoder(model)
    hits = misses = 0
    outcomes = [] if record_outcomes else None
    preload_volumes = []

    def preload():
        blocks = predict.predict_blocks(decoder, model, access_map)
        for block in sorted(blocks):
            cache.insert(block)
        preload_volumes.append(len(blocks))
        if preload_log is not None:
            preload_log.append(sorted(blocks))

    def close_slice(counts):
        predict.decoder_observe(decoder, model, counts)
        preload()

    current_slice = 0
    counts = np.zeros(binning.M, dtype=np.int64)
    preload()  # before any slice completes, from the initial distribution
    for e in events:
        e_slice = int(e.timestamp // binning.nu)
        while current_slice < e_slice:
            close_slice(counts)
            counts = np.zeros(binning.M, dtype=np.int64)
            current_slice += 1
        if e.op != "read":
            continue
        if binning.count_per_block:
            for block in e.block_ids:
                counts[binning.bin_of(block * binning.block_size)] += 1
        else:
            counts[binning.bin_of(e.offset)] += 1
        for block in e.block_ids:
            if cache.access(block):
                hits += 1
                if outcomes is not None:
                    outcomes.append(True)
            else:
                misses += 1
                if outcomes is not None:
                    outcomes.append(False)
    return SimReport.from_counts(hits, misses, preload_volumes=preload_volumes,
                                 wall_clock=time.monotonic() - started,
                                 outcomes=outcomes)
