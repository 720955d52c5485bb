"""Block I/O trace parsing and aggregation into per-slice count vectors.

A trace is a timestamped list of read/write requests against a byte address
space.  For modeling we chop time into fixed-length slices and the address
range into M equal bins, turning the trace into a sequence of M-dimensional
count vectors plus, per slice, the raw set of block ids touched (used later
to preload the cache).
"""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TraceParseError

DEFAULT_BLOCK_SIZE = 4096

# Windows FILETIME tick length, used by the MSR enterprise traces.
_FILETIME_TICKS_PER_SEC = 1e7

ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class TraceEvent:
    """One I/O request. block_ids lists every fixed-size block covered by
    [offset, offset + size)."""

    timestamp: float
    op: str
    offset: int
    size: int
    block_ids: tuple

    def __post_init__(self):
        if self.size <= 0:
            raise TraceParseError(f"event size must be positive, got {self.size}")
        if self.timestamp < 0:
            raise TraceParseError("event timestamp must be non-negative")
        if self.op not in ("read", "write"):
            raise TraceParseError(f"unknown op {self.op!r}")
        if len(self.block_ids) == 0:
            raise TraceParseError("event covers no blocks")


def blocks_covered(offset, size, block_size=DEFAULT_BLOCK_SIZE) -> tuple:
    """Contiguous block ids covered by [offset, offset+size)."""
    first = offset // block_size
    last = (offset + size - 1) // block_size
    return tuple(range(first, last + 1))


@dataclass(frozen=True)
class BinningConfig:
    """How to aggregate: M equal address bins over [lba_lo, lba_hi), slices of
    nu seconds, cache blocks of block_size bytes.

    count_per_block=True switches the histogram to one increment per covered
    block instead of one per request.
    """

    M: int
    lba_lo: int
    lba_hi: int
    nu: float
    block_size: int = DEFAULT_BLOCK_SIZE
    count_per_block: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.lba_hi <= self.lba_lo:
            raise ValueError("lba_hi must exceed lba_lo")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def bin_of(self, offset) -> int:
        """Bin index of a byte offset; out-of-range offsets clamp to the edges."""
        j = (int(offset) - self.lba_lo) * self.M // (self.lba_hi - self.lba_lo)
        return min(max(j, 0), self.M - 1)


@dataclass
class CountVectorSequence:
    """T count vectors over M bins plus the per-slice raw block-access sets."""

    X: np.ndarray
    A: list
    config: BinningConfig

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError("X must be a T x M array")
        if len(self.A) != self.X.shape[0]:
            raise ValueError("X and A must have the same length")
        if np.any(self.X < 0):
            raise ValueError("counts must be non-negative")

    def __len__(self):
        return self.X.shape[0]


# ---------------------------------------------------------------------------
# Parsing

# format_id -> (column indices for timestamp/op/offset/size, seconds per
# timestamp unit, op spellings meaning "read")
_FORMATS = {
    # MSR Cambridge style: Timestamp,Hostname,DiskNumber,Type,Offset,Size,ResponseTime
    "msr": {"cols": (0, 3, 4, 5), "tick": 1.0 / _FILETIME_TICKS_PER_SEC},
    # plain: timestamp_secs,op,offset,size
    "plain": {"cols": (0, 1, 2, 3), "tick": 1.0},
}

_READ_OPS = {"read", "r"}
_WRITE_OPS = {"write", "w"}


def parse_trace(byte_stream, format_id="msr", block_size=DEFAULT_BLOCK_SIZE):
    """Parse a CSV trace into time-sorted events.

    byte_stream may be a path or an open text/binary file.  Timestamps are
    rebased to seconds since the first event.  Write events are retained and
    flagged; downstream read-cache paths filter them out.
    """
    if format_id not in _FORMATS:
        raise TraceParseError(f"unknown trace format {format_id!r}")
    fmt = _FORMATS[format_id]
    t_col, op_col, off_col, sz_col = fmt["cols"]
    ncols = max(fmt["cols"]) + 1

    if isinstance(byte_stream, (str, Path)):
        fh = open(byte_stream, "r", newline="")
        close = True
    elif isinstance(byte_stream, (bytes, bytearray)):
        fh = io.StringIO(byte_stream.decode())
        close = False
    else:
        raw = byte_stream.read()
        if isinstance(raw, bytes):
            raw = raw.decode()
        fh = io.StringIO(raw)
        close = False

    rows = []
    try:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < ncols:
                raise TraceParseError(f"line {lineno}: expected >= {ncols} columns, got {len(row)}")
            try:
                ts = float(row[t_col])
                op_raw = row[op_col].strip().lower()
                offset = int(row[off_col])
                size = int(row[sz_col])
            except ValueError as exc:
                raise TraceParseError(f"line {lineno}: {exc}") from None
            if op_raw in _READ_OPS:
                op = "read"
            elif op_raw in _WRITE_OPS:
                op = "write"
            else:
                raise TraceParseError(f"line {lineno}: unknown op {row[op_col]!r}")
            if size <= 0:
                raise TraceParseError(f"line {lineno}: size must be positive, got {size}")
            if offset < 0:
                raise TraceParseError(f"line {lineno}: negative offset {offset}")
            rows.append((ts, op, offset, size))
    finally:
        if close:
            fh.close()

    if not rows:
        raise TraceParseError("empty trace")

    rows.sort(key=lambda r: r[0])
    t0 = rows[0][0]
    tick = fmt["tick"]
    return [
        TraceEvent(
            timestamp=(ts - t0) * tick,
            op=op,
            offset=offset,
            size=size,
            block_ids=blocks_covered(offset, size, block_size),
        )
        for ts, op, offset, size in rows
    ]


# ---------------------------------------------------------------------------
# Aggregation

def infer_lba_range(events, nu=None, fraction=None, include_writes=False):
    """(lo, hi) covering the offsets seen in the learning portion of a trace.

    With nu and fraction given, only events in the first ceil(fraction * T)
    slices are considered; later offsets outside the range clamp to edge bins.
    """
    pool = [e for e in events if include_writes or e.op == "read"]
    if not pool:
        raise TraceParseError("no events to infer an address range from")
    if nu is not None and fraction is not None:
        t_total = int(pool[-1].timestamp // nu) + 1
        learn_slices = math.ceil(fraction * t_total)
        cutoff = learn_slices * nu
        learn = [e for e in pool if e.timestamp < cutoff]
        if learn:
            pool = learn
    lo = min(e.offset for e in pool)
    hi = max(e.offset for e in pool) + 1
    return lo, hi


def binning_from_events(events, M, nu, block_size=DEFAULT_BLOCK_SIZE,
                        fraction=None, count_per_block=False) -> BinningConfig:
    """Build a BinningConfig with the address range taken from the learning
    portion (or the whole trace when fraction is None)."""
    lo, hi = infer_lba_range(events, nu=nu, fraction=fraction)
    return BinningConfig(M=M, lba_lo=lo, lba_hi=hi, nu=nu,
                         block_size=block_size, count_per_block=count_per_block)


def aggregate(events, config: BinningConfig, include_writes=False) -> CountVectorSequence:
    """Histogram events into per-slice count vectors and block-access sets.

    Requests are binned once each by their starting offset (or once per
    covered block with count_per_block); the access sets record every block
    covered.  Writes are excluded unless include_writes is set.
    """
    kept = [e for e in events if include_writes or e.op == "read"]
    if not kept:
        return CountVectorSequence(np.zeros((0, config.M), dtype=np.int64), [], config)

    t_max = int(kept[-1].timestamp // config.nu)
    T = t_max + 1
    X = np.zeros((T, config.M), dtype=np.int64)
    A = [set() for _ in range(T)]
    for e in kept:
        t = int(e.timestamp // config.nu)
        if config.count_per_block:
            for blk in e.block_ids:
                X[t, config.bin_of(blk * config.block_size)] += 1
        else:
            X[t, config.bin_of(e.offset)] += 1
        A[t].update(e.block_ids)
    return CountVectorSequence(X, A, config)


def split_learn_operate(seq: CountVectorSequence, fraction):
    """Split the slice sequence into learning and operating parts, in temporal
    order, with the first ceil(fraction * T) slices forming the learning part.
    The cut is clamped so neither side is empty."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    T = len(seq)
    if T < 2:
        raise ValueError("need at least 2 slices to split")
    cut = min(max(math.ceil(fraction * T), 1), T - 1)
    learn = CountVectorSequence(seq.X[:cut].copy(), [set(a) for a in seq.A[:cut]], seq.config)
    operate = CountVectorSequence(seq.X[cut:].copy(), [set(a) for a in seq.A[cut:]], seq.config)
    return learn, operate


# ---------------------------------------------------------------------------
# Artifact round-trip

def save_artifact(seq: CountVectorSequence, path):
    """Write a count-vector sequence to a .npz artifact."""
    flat = []
    offsets = [0]
    for acc in seq.A:
        flat.extend(sorted(acc))
        offsets.append(len(flat))
    cfg = seq.config
    np.savez(
        path,
        version=np.int64(ARTIFACT_VERSION),
        X=seq.X,
        A_flat=np.asarray(flat, dtype=np.int64),
        A_offsets=np.asarray(offsets, dtype=np.int64),
        binning=np.asarray([cfg.M, cfg.lba_lo, cfg.lba_hi, cfg.block_size,
                            int(cfg.count_per_block)], dtype=np.int64),
        nu=np.float64(cfg.nu),
    )


def load_artifact(path) -> CountVectorSequence:
    with np.load(path) as z:
        if int(z["version"]) != ARTIFACT_VERSION:
            raise ValueError(f"unsupported artifact version {int(z['version'])}")
        m, lo, hi, bs, per_block = (int(v) for v in z["binning"])
        cfg = BinningConfig(M=m, lba_lo=lo, lba_hi=hi, nu=float(z["nu"]),
                            block_size=bs, count_per_block=bool(per_block))
        flat = z["A_flat"]
        offsets = z["A_offsets"]
        A = [set(int(b) for b in flat[offsets[i]:offsets[i + 1]])
             for i in range(len(offsets) - 1)]
        return CountVectorSequence(z["X"], A, cfg)
