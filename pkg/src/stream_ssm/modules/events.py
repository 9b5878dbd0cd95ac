#!/usr/bin/python3

"""
Event-camera streams.

Native file: a 16-byte header followed by 16-byte little-endian records.

    header  magic b"STEV" | version uint32 | width uint32 | height uint32
    record  t uint64 (microseconds) | x uint16 | y uint16 | polarity uint8 | 3 pad bytes

The CSV form has the header line ``t,x,y,p`` and one integer row per event.
"""

import csv
import logging
import struct
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional, Tuple

import numpy as np

from stream_ssm.modules.errors import ConfigurationError, DataError
from stream_ssm.modules.stream_layer import TokenSequence

logger = logging.getLogger(__name__)

MAGIC = b"STEV"
VERSION = 1
HEADER = struct.Struct("<4sIII")
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")])
CSV_HEADER = ["t", "x", "y", "p"]
MICROSECONDS = 1e-6


class EventRecord(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def make_events(t, x, y, p):
    t = np.asarray(t)
    events = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    events["t"] = t
    events["x"] = x
    events["y"] = y
    events["p"] = p
    return events


def _check_events(events, width, height, path=None):
    """Raises DataError naming the first bad record (1-based)."""
    checks = (
        (events["x"] >= width, "x outside sensor width"),
        (events["y"] >= height, "y outside sensor height"),
        (events["p"] > 1, "polarity must be 0 or 1"),
    )
    for bad, message in checks:
        if bad.any():
            raise DataError(message, line=int(np.argmax(bad)) + 1, path=path)
    if events.size > 1:
        backwards = events["t"][1:] < events["t"][:-1]
        if backwards.any():
            raise DataError("timestamps go backwards", line=int(np.argmax(backwards)) + 2, path=path)


@dataclass
class EventStream:
    events: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"sensor size must be positive, got {self.width}x{self.height}")
        _check_events(self.events, self.width, self.height)

    def __len__(self):
        return self.events.shape[0]

    def __iter__(self):
        for event in self.events:
            yield EventRecord(int(event["t"]), int(event["x"]), int(event["y"]), int(event["p"]))

    @classmethod
    def from_records(cls, records, width, height):
        records = list(records)
        return cls(make_events([r.t for r in records], [r.x for r in records],
                               [r.y for r in records], [r.p for r in records]), width, height)

    @property
    def duration(self):
        """Covered time span in microseconds, inclusive of both ends."""
        if len(self) == 0:
            return 0
        return int(self.events["t"][-1]) - int(self.events["t"][0]) + 1


# ============================================================
# Files
# ============================================================

def read_event_header(f, path=None):
    header = f.read(HEADER.size)
    if len(header) != HEADER.size:
        raise DataError("truncated header", path=path)
    magic, version, width, height = HEADER.unpack(header)
    if magic != MAGIC:
        raise DataError(f"not an event file (magic {magic!r})", path=path)
    if version != VERSION:
        raise DataError(f"unsupported event file version {version}", path=path)
    return width, height


def iter_event_records(f, chunk_records=4096, path=None):
    """
    Yields raw records from a binary stream positioned after the header.

    Records are not validated; a trailing partial record raises DataError
    after every complete one has been yielded.
    """
    pending = b""
    count = 0
    while True:
        data = f.read(chunk_records * EVENT_DTYPE.itemsize)
        if not data:
            break
        pending += data
        usable = len(pending) - len(pending) % EVENT_DTYPE.itemsize
        for event in np.frombuffer(pending[:usable], dtype=EVENT_DTYPE):
            count += 1
            yield EventRecord(int(event["t"]), int(event["x"]), int(event["y"]), int(event["p"]))
        pending = pending[usable:]
    if pending:
        raise DataError(f"truncated record ({len(pending)} trailing bytes)", line=count + 1, path=path)


def read_events_binary(path) -> EventStream:
    with open(path, "rb") as f:
        width, height = read_event_header(f, path)
        data = f.read()
    if len(data) % EVENT_DTYPE.itemsize:
        raise DataError(f"truncated record ({len(data) % EVENT_DTYPE.itemsize} trailing bytes)",
                        line=len(data) // EVENT_DTYPE.itemsize + 1, path=path)
    events = np.frombuffer(data, dtype=EVENT_DTYPE).copy()
    _check_events(events, width, height, path)
    return EventStream(events, width, height)


def write_events_binary(path, stream: EventStream):
    events = np.zeros(len(stream), dtype=EVENT_DTYPE)
    for name in CSV_HEADER:
        events[name] = stream.events[name]
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, stream.width, stream.height))
        f.write(events.tobytes())


def read_events_csv(path, width, height) -> EventStream:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [field.strip() for field in header] != CSV_HEADER:
            raise DataError(f"expected header '{','.join(CSV_HEADER)}'", line=1, path=path)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"expected 4 fields, got {len(row)}", line=line, path=path)
            try:
                t, x, y, p = (int(value) for value in row)
            except ValueError:
                raise DataError(f"non-integer field in '{','.join(row)}'", line=line, path=path)
            if t < 0 or x < 0 or y < 0 or p < 0:
                raise DataError("negative field", line=line, path=path)
            if x >= width or y >= height:
                raise DataError(f"pixel ({x}, {y}) outside {width}x{height} sensor", line=line, path=path)
            if p > 1:
                raise DataError(f"polarity {p} is not 0 or 1", line=line, path=path)
            if rows and t < rows[-1][0]:
                raise DataError("timestamps go backwards", line=line, path=path)
            rows.append((t, x, y, p))

    columns = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(make_events(columns[:, 0], columns[:, 1], columns[:, 2], columns[:, 3]), width, height)


def write_events_csv(path, stream: EventStream):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for record in stream:
            writer.writerow(record)


# ============================================================
# Tokens
# ============================================================

def event_token_ids(events, width, height):
    """id = polarity * width * height + y * width + x"""
    events = np.asarray(events, dtype=EVENT_DTYPE)
    _check_events(events, width, height)
    return (events["p"].astype(np.int64) * width * height
            + events["y"].astype(np.int64) * width
            + events["x"].astype(np.int64))


def event_times(events):
    """Timestamps in seconds, relative to the first event."""
    t = np.asarray(events, dtype=EVENT_DTYPE)["t"].astype(np.int64)
    if t.size == 0:
        return t.astype(np.float64)
    return (t - t[0]).astype(np.float64) * MICROSECONDS


def tokenize_events(events, width, height, embedding) -> TokenSequence:
    """One token per event; its feature is the embedding row of the pixel/polarity id."""
    ids = event_token_ids(events, width, height)
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape[0] != 2 * width * height:
        raise ConfigurationError(
            f"embedding has {embedding.shape[0]} rows, a {width}x{height} sensor needs {2 * width * height}")
    return TokenSequence(event_times(events), embedding[ids])


# ============================================================
# Augmentation
# ============================================================

@dataclass
class EventAugmentConfig:
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.0
    translate_prob: float = 0.5
    max_shift: int = 1
    jitter_prob: float = 0.5
    jitter_range: Tuple[float, float] = (0.9, 1.1)
    cutmix_prob: float = 0.0
    cutmix_ratio: Tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        self.jitter_range = tuple(self.jitter_range)
        self.cutmix_ratio = tuple(self.cutmix_ratio)
        for name in ("flip_x_prob", "flip_y_prob", "translate_prob", "jitter_prob", "cutmix_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.max_shift < 0:
            raise ConfigurationError("max_shift must be >= 0")
        low, high = self.jitter_range
        if not 0.0 < low <= high:
            raise ConfigurationError(f"invalid jitter range {self.jitter_range}")
        low, high = self.cutmix_ratio
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigurationError(f"invalid cutmix ratio {self.cutmix_ratio}")

    @classmethod
    def disabled(cls):
        return cls(flip_x_prob=0.0, flip_y_prob=0.0, translate_prob=0.0, jitter_prob=0.0, cutmix_prob=0.0)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**data)


def jitter_time(stream: EventStream, scale) -> EventStream:
    """t' = t_0 + round((t - t_0) * scale): every gap is rescaled by ``scale``."""
    if len(stream) == 0:
        return stream
    events = stream.events.copy()
    t = events["t"].astype(np.int64)
    events["t"] = t[0] + np.round((t - t[0]) * float(scale)).astype(np.int64)
    return EventStream(events, stream.width, stream.height)


def augment_events(stream: EventStream, rng, config: EventAugmentConfig) -> EventStream:
    """
    Random flips, a clamped translation and time-scale jitter, each applied
    with its configured probability. The same number of draws is taken
    whatever is applied, so later draws do not depend on earlier outcomes.
    """
    draws = rng.random(4)
    shift = rng.integers(-config.max_shift, config.max_shift + 1, size=2)
    scale = rng.uniform(*config.jitter_range)

    events = stream.events.copy()
    width, height = stream.width, stream.height
    if draws[0] < config.flip_x_prob:
        events["x"] = width - 1 - events["x"]
    if draws[1] < config.flip_y_prob:
        events["y"] = height - 1 - events["y"]
    if draws[2] < config.translate_prob:
        events["x"] = np.clip(events["x"].astype(np.int64) + shift[0], 0, width - 1)
        events["y"] = np.clip(events["y"].astype(np.int64) + shift[1], 0, height - 1)
    result = EventStream(events, width, height)
    if draws[3] < config.jitter_prob:
        result = jitter_time(result, scale)
    return result


def event_cutmix(a: EventStream, label_a, b: EventStream, label_b, rng,
                 ratio=(0.1, 0.5), window: Optional[Tuple[int, int]] = None, source_start=None):
    """
    Splices a time window of ``b`` into ``a``.

    The window ``[tau, tau + w)`` lies inside a's duration; a's events there
    are dropped and b's events from ``[sigma, sigma + w)`` are shifted by
    ``tau - sigma`` and merged in (a before b on equal timestamps). Returns the
    mixed stream and ``(1 - lam) * label_a + lam * label_b`` where ``lam`` is
    the fraction of output events taken from b.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise ConfigurationError("cannot mix streams from different sensor sizes")
    label_a = np.asarray(label_a, dtype=np.float64)
    label_b = np.asarray(label_b, dtype=np.float64)

    ta = a.events["t"].astype(np.int64)
    tb = b.events["t"].astype(np.int64)
    if window is None:
        w = int(round(rng.uniform(*ratio) * a.duration))
        tau = int(ta[0]) + int(rng.integers(0, a.duration - w + 1)) if len(a) else 0
    else:
        tau, w = (int(value) for value in window)

    if source_start is None:
        if len(b) == 0:
            sigma = 0
        elif w <= b.duration:
            sigma = int(tb[0]) + int(rng.integers(0, b.duration - w + 1))
        else:
            sigma = int(tb[0])
    else:
        sigma = int(source_start)

    keep_a = a.events[(ta < tau) | (ta >= tau + w)]
    take_b = b.events[(tb >= sigma) & (tb < sigma + w)].copy()
    take_b["t"] = (take_b["t"].astype(np.int64) + (tau - sigma)).astype(np.uint64)

    merged = np.concatenate([keep_a, take_b])
    order = np.argsort(merged["t"], kind="stable")
    lam = take_b.size / merged.size if merged.size else 0.0
    return EventStream(merged[order], a.width, a.height), (1.0 - lam) * label_a + lam * label_b
