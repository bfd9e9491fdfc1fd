"""Time-tag streams, 1PPS block segmentation and the PTAG binary format.

Tags are integer picoseconds from a per-run epoch.  A :class:`TagStream` keeps
them as two parallel numpy arrays (``t_ps`` as int64, ``channel`` as uint8),
sorted by time with ties broken by channel.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

DEFAULT_RESOLUTION_PS = 156
PPS_PERIOD_PS = 10**12

PTAG_MAGIC = b"PTAG"
PTAG_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")
_RECORD = np.dtype([("t", "<u8"), ("ch", "u1"), ("pad", "u1", (7,))])


class TimeTag(NamedTuple):
    t_ps: int
    channel: int


class TagStreamError(ValueError):
    """A stream violates its invariants."""


class PtagError(Exception):
    """Base class for PTAG file problems."""


class PtagMagicError(PtagError):
    pass


class PtagVersionError(PtagError):
    pass


class PtagTruncatedError(PtagError):
    pass


class PtagPaddingError(PtagError):
    pass


class PtagUnsortedError(PtagError):
    pass


def _sorted_order_ok(t: np.ndarray, ch: np.ndarray) -> bool:
    if t.size < 2:
        return True
    dt = np.diff(t)
    if np.any(dt < 0):
        return False
    ties = dt == 0
    return not np.any(ties & (ch[1:] < ch[:-1]))


@dataclass(frozen=True, eq=False)
class TagStream:
    """An immutable, sorted sequence of detection events from one node."""

    t_ps: np.ndarray
    channel: np.ndarray
    resolution_ps: int = DEFAULT_RESOLUTION_PS
    pps_period_ps: int = PPS_PERIOD_PS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t_ps, dtype=np.int64)
        ch = np.ascontiguousarray(self.channel, dtype=np.uint8)
        if t.shape != ch.shape or t.ndim != 1:
            raise TagStreamError("t_ps and channel must be 1-d arrays of equal length")
        if self.resolution_ps <= 0 or self.pps_period_ps <= 0:
            raise TagStreamError("resolution_ps and pps_period_ps must be positive")
        if t.size:
            if t[0] < 0 or t.min() < 0:
                raise TagStreamError("tag times must be non-negative")
            if self.resolution_ps > 1 and np.any(t % self.resolution_ps):
                raise TagStreamError(f"tag times must be multiples of {self.resolution_ps} ps")
            if not _sorted_order_ok(t, ch):
                raise TagStreamError("tags must be sorted by (t_ps, channel)")
        t.flags.writeable = False
        ch.flags.writeable = False
        object.__setattr__(self, "t_ps", t)
        object.__setattr__(self, "channel", ch)

    @classmethod
    def from_unsorted(cls, t_ps, channel, **kwargs) -> "TagStream":
        t = np.asarray(t_ps, dtype=np.int64)
        ch = np.asarray(channel, dtype=np.uint8)
        order = np.lexsort((ch, t))
        return cls(t[order], ch[order], **kwargs)

    @classmethod
    def empty(cls, **kwargs) -> "TagStream":
        return cls(np.empty(0, np.int64), np.empty(0, np.uint8), **kwargs)

    def __len__(self) -> int:
        return int(self.t_ps.size)

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.t_ps.tolist(), self.channel.tolist()):
            yield TimeTag(t, c)

    def __getitem__(self, i: int) -> TimeTag:
        return TimeTag(int(self.t_ps[i]), int(self.channel[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.resolution_ps == other.resolution_ps
            and self.pps_period_ps == other.pps_period_ps
            and np.array_equal(self.t_ps, other.t_ps)
            and np.array_equal(self.channel, other.channel)
        )

    def _derive(self, t, ch, **changes) -> "TagStream":
        kw = dict(resolution_ps=self.resolution_ps, pps_period_ps=self.pps_period_ps,
                  metadata=dict(self.metadata))
        kw.update(changes)
        return TagStream(t, ch, **kw)

    def select(self, channels) -> "TagStream":
        """Sub-stream restricted to the given channel id(s)."""
        mask = np.isin(self.channel, np.atleast_1d(np.asarray(channels, dtype=np.uint8)))
        return self._derive(self.t_ps[mask], self.channel[mask])

    def window(self, start_ps: int, stop_ps: int) -> "TagStream":
        """Tags with ``start_ps <= t < stop_ps``."""
        lo, hi = np.searchsorted(self.t_ps, [start_ps, stop_ps], side="left")
        return self._derive(self.t_ps[lo:hi], self.channel[lo:hi])

    @property
    def span_ps(self) -> int:
        if len(self) == 0:
            return 0
        return int(self.t_ps[-1] - self.t_ps[0])

    def channel_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.channel, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True)
class TagBlock:
    """Tags of one stream falling in ``[index*period, (index+1)*period)``."""

    index: int
    tags: TagStream

    def __len__(self) -> int:
        return len(self.tags)


def split_into_blocks(stream: TagStream, n_blocks: int | None = None) -> list[TagBlock]:
    """Segment a stream at its 1PPS edges.

    Blocks run from index 0 up to the block holding the last tag (empty blocks
    in between are kept so that indices line up across nodes).  ``n_blocks``
    pads with empty blocks or, if smaller than needed, raises.
    """
    period = stream.pps_period_ps
    if len(stream) == 0:
        last = -1
    else:
        last = int(stream.t_ps[-1] // period)
    count = last + 1 if n_blocks is None else n_blocks
    if count < last + 1:
        raise TagStreamError(f"stream spans {last + 1} blocks, more than n_blocks={n_blocks}")
    edges = np.arange(count + 1, dtype=np.int64) * period
    cuts = np.searchsorted(stream.t_ps, edges, side="left")
    return [
        TagBlock(i, stream._derive(stream.t_ps[cuts[i]:cuts[i + 1]], stream.channel[cuts[i]:cuts[i + 1]]))
        for i in range(count)
    ]


def merge_blocks(blocks, template: TagStream | None = None) -> TagStream:
    """Concatenate blocks back into one stream (inverse of :func:`split_into_blocks`)."""
    blocks = list(blocks)
    if not blocks:
        return TagStream.empty() if template is None else template._derive(
            np.empty(0, np.int64), np.empty(0, np.uint8))
    ref = blocks[0].tags if template is None else template
    t = np.concatenate([b.tags.t_ps for b in blocks])
    ch = np.concatenate([b.tags.channel for b in blocks])
    return ref._derive(t, ch)


def quantize(t_true_ps: float, resolution_ps: int) -> int:
    """Round a true time onto the TTU grid (round half away from zero)."""
    if resolution_ps <= 0:
        raise ValueError("resolution_ps must be positive")
    if t_true_ps < 0:
        raise ValueError("negative time: event precedes the stream epoch")
    return resolution_ps * math.floor(t_true_ps / resolution_ps + 0.5)


def quantize_array(t_true_ps: np.ndarray, resolution_ps: int) -> np.ndarray:
    """Vectorised :func:`quantize`; inputs must already be non-negative."""
    t = np.asarray(t_true_ps, dtype=np.float64)
    if t.size and t.min() < 0:
        raise ValueError("negative time: event precedes the stream epoch")
    return (np.floor(t / resolution_ps + 0.5).astype(np.int64)) * resolution_ps


# -- PTAG I/O ---------------------------------------------------------------

def encode_ptag(stream: TagStream) -> bytes:
    n = len(stream)
    if stream.resolution_ps >= 2**32:
        raise PtagError("resolution_ps does not fit in u32")
    rec = np.zeros(n, dtype=_RECORD)
    rec["t"] = stream.t_ps.astype(np.uint64)
    rec["ch"] = stream.channel
    return _HEADER.pack(PTAG_MAGIC, PTAG_VERSION, stream.resolution_ps, n) + rec.tobytes()


def decode_ptag(data: bytes) -> TagStream:
    if len(data) < _HEADER.size:
        raise PtagTruncatedError(f"file shorter than the {_HEADER.size}-byte header")
    magic, version, resolution, count = _HEADER.unpack_from(data, 0)
    if magic != PTAG_MAGIC:
        raise PtagMagicError(f"bad magic {magic!r}, expected {PTAG_MAGIC!r}")
    if version != PTAG_VERSION:
        raise PtagVersionError(f"unsupported PTAG version {version}")
    if resolution == 0:
        raise PtagError("resolution_ps must be positive")
    need = _HEADER.size + count * _RECORD.itemsize
    if len(data) < need:
        raise PtagTruncatedError(f"header announces {count} tags but payload is short")
    if len(data) > need:
        raise PtagError(f"{len(data) - need} trailing bytes after the last record")
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=_HEADER.size)
    if np.any(rec["pad"]):
        raise PtagPaddingError("record padding bytes must be zero")
    t = rec["t"]
    if count and t.max() > np.iinfo(np.int64).max:
        raise PtagError("tag time exceeds the supported range")
    t = t.astype(np.int64)
    ch = rec["ch"].copy()
    if not _sorted_order_ok(t, ch):
        raise PtagUnsortedError("payload is not sorted by (t_ps, channel)")
    try:
        return TagStream(t, ch, resolution_ps=int(resolution))
    except TagStreamError as exc:
        raise PtagError(str(exc)) from exc


def write_tag_file(stream: TagStream, path) -> None:
    Path(path).write_bytes(encode_ptag(stream))


def read_tag_file(path) -> TagStream:
    return decode_ptag(Path(path).read_bytes())
