"""Event stream persistence, event-frame aggregation, and clip sampling.

An "event frame" is the 2-channel (ON/OFF) spatial histogram of events in
one source-frame interval. A clip is the network's input unit: x event
frames taken with a stride of y+1 source frames (y skipped frames between
used frames, whose events are discarded), plus the grayscale frames
bounding the sampled window. The protocol string "E4-S3" names x=4, y=3.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import v2e
from .errors import DataError, FormatError
from .ingest import LumaFrame, SequenceMeta, load_sequence

EVT1_MAGIC = b"EVT1"
CSV_HEADER = "t_us,x,y,p"


def events_sorted(events: np.ndarray) -> bool:
    """True when sorted by (t_us, y, x, p) non-decreasing."""
    if events.size < 2:
        return True
    a, b = events[:-1], events[1:]
    t_lt = a["t_us"] < b["t_us"]
    t_eq = a["t_us"] == b["t_us"]
    y_lt = a["y"] < b["y"]
    y_eq = a["y"] == b["y"]
    x_lt = a["x"] < b["x"]
    x_eq = a["x"] == b["x"]
    ok = t_lt | (t_eq & (y_lt | (y_eq & (x_lt | (x_eq & (a["p"] <= b["p"]))))))
    return bool(ok.all())


# ---------------------------------------------------------------------------
# persistence


def write_evt1(path: str | Path, events: np.ndarray, width: int, height: int) -> None:
    """Binary stream: magic, u32 width, u32 height, u64 count, 14-byte records."""
    if not events_sorted(events):
        raise FormatError("refusing to write an unsorted event stream")
    header = EVT1_MAGIC + np.uint32(width).tobytes() + np.uint32(height).tobytes() + np.uint64(len(events)).tobytes()
    ev = np.ascontiguousarray(events, dtype=v2e.EVENT_DTYPE)
    ev["_pad"] = 0
    Path(path).write_bytes(header + ev.tobytes())


def read_evt1(path: str | Path) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != EVT1_MAGIC:
        raise FormatError(f"{path}: bad EVT1 magic")
    width = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    height = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    count = int(np.frombuffer(raw, dtype="<u8", count=1, offset=12)[0])
    payload = raw[20:]
    if len(payload) != count * v2e.EVENT_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated EVT1 payload ({len(payload)} bytes for {count} events)")
    events = np.frombuffer(payload, dtype=v2e.EVENT_DTYPE).copy()
    if not events_sorted(events):
        raise FormatError(f"{path}: event records are not sorted")
    return events, width, height


def write_csv(path: str | Path, events: np.ndarray) -> None:
    if not events_sorted(events):
        raise FormatError("refusing to write an unsorted event stream")
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        np.savetxt(f, np.stack([events["t_us"], events["x"], events["y"], events["p"]], axis=1), fmt="%d", delimiter=",")


def read_csv(path: str | Path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise FormatError(f"{path}: expected CSV header {CSV_HEADER!r}, got {header!r}")
        body = f.read()
    if not body.strip():
        return v2e.empty_events()
    try:
        table = np.loadtxt(body.strip().splitlines(), dtype=np.int64, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed CSV row: {exc}") from exc
    if table.shape[1] != 4:
        raise FormatError(f"{path}: expected 4 columns, got {table.shape[1]}")
    events = v2e.make_events(table[:, 0], table[:, 1], table[:, 2], table[:, 3])
    if not events_sorted(events):
        raise FormatError(f"{path}: event records are not sorted")
    return events


def write_stream(path: str | Path, events: np.ndarray, width: int, height: int, format: str = "evt1") -> None:
    if format == "evt1":
        write_evt1(path, events, width, height)
    elif format == "csv":
        write_csv(path, events)
    else:
        raise DataError(f"unknown stream format {format!r}")


def read_stream(path: str | Path, format: str = "evt1"):
    """Returns (events, width, height); dims are None for CSV (not in-band)."""
    if format == "evt1":
        return read_evt1(path)
    if format == "csv":
        return read_csv(path), None, None
    raise DataError(f"unknown stream format {format!r}")


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EventFrame:
    """ON/OFF count histograms over a half-open time window (t_start, t_end]."""

    on_counts: np.ndarray
    off_counts: np.ndarray
    t_start_us: int
    t_end_us: int

    def __post_init__(self):
        if self.t_end_us <= self.t_start_us:
            raise DataError("event frame window must have t_end_us > t_start_us")

    @property
    def height(self) -> int:
        return self.on_counts.shape[0]

    @property
    def width(self) -> int:
        return self.on_counts.shape[1]


def aggregate(events: np.ndarray, t_start_us: int, t_end_us: int, width: int, height: int) -> EventFrame:
    """Histogram events with t_start < t <= t_end into ON/OFF channels."""
    if t_end_us <= t_start_us:
        raise DataError("aggregate needs t_end_us > t_start_us")
    sel = events[(events["t_us"] > t_start_us) & (events["t_us"] <= t_end_us)]
    if sel.size and (int(sel["x"].max()) >= width or int(sel["y"].max()) >= height):
        raise DataError(f"event coordinates exceed {width}x{height} sensor")
    on = np.zeros((height, width), dtype=np.int64)
    off = np.zeros((height, width), dtype=np.int64)
    if sel.size:
        flat = sel["y"].astype(np.int64) * width + sel["x"].astype(np.int64)
        pol = sel["p"] != 0
        on.ravel()[:] = np.bincount(flat[pol], minlength=width * height)
        off.ravel()[:] = np.bincount(flat[~pol], minlength=width * height)
    return EventFrame(on, off, t_start_us, t_end_us)


# ---------------------------------------------------------------------------
# clips


@dataclass
class ClipSpec:
    """E_x-S_y: x event frames, y skipped source frames between used frames."""

    x: int
    y: int
    fps: float = 60.0

    def __post_init__(self):
        if self.x < 1 or self.y < 0:
            raise DataError(f"invalid clip spec x={self.x} y={self.y}")

    @property
    def duration_frames(self) -> int:
        return self.x + (self.x - 1) * self.y

    @property
    def duration_seconds(self) -> float:
        return self.duration_frames / self.fps

    def __str__(self) -> str:
        return f"E{self.x}-S{self.y}"


def parse_protocol(text: str, fps: float = 60.0) -> ClipSpec:
    """Parse 'E4-S3' -> ClipSpec(x=4, y=3)."""
    m = re.fullmatch(r"[Ee](\d+)-[Ss](\d+)", text.strip())
    if not m:
        raise DataError(f"protocol must look like 'E4-S3', got {text!r}")
    return ClipSpec(x=int(m.group(1)), y=int(m.group(2)), fps=fps)


def clip_duration_frames(spec: ClipSpec) -> int:
    return spec.duration_frames


@dataclass
class Sequence:
    """One labeled recording: frames, its event stream, and metadata."""

    frames: list
    events: np.ndarray
    label: int
    fps: float = 60.0
    name: str = ""

    def __post_init__(self):
        if not self.frames:
            raise DataError("sequence has no frames")


@dataclass
class Clip:
    """Sampler output: x event frames plus the grayscale frames the network
    may consume (first/last of the window, the window's second frame, and
    the frame opening each used window)."""

    event_frames: list
    first_gray: LumaFrame
    last_gray: LumaFrame
    second_gray: LumaFrame
    all_grays: list
    label: int
    start: int


def _window_bounds(seq: Sequence, index: int) -> tuple[int, int]:
    """Time window owned by frame `index` (wrapping indices allowed)."""
    n = len(seq.frames)
    i = index % n
    t0 = int(seq.frames[i].t_us)
    if i + 1 < n:
        return t0, int(seq.frames[i + 1].t_us)
    if n >= 2:
        return t0, 2 * int(seq.frames[-1].t_us) - int(seq.frames[-2].t_us)
    return t0, t0 + max(1, round(1e6 / seq.fps))


def sample_clip(seq: Sequence, spec: ClipSpec, start: int | None = None, gen: np.random.Generator | None = None) -> Clip:
    """Cut one clip out of a sequence.

    With start=None a uniformly random start is drawn from [0, L - T]
    inclusive (T = clip duration in frames), so every phase of the sequence
    is equally likely. Sequences shorter than T are read cyclically; the
    random start then ranges over [0, L - 1].
    """
    n_frames = len(seq.frames)
    total = spec.duration_frames
    if start is None:
        if gen is None:
            raise DataError("sample_clip needs a Generator when start is random")
        hi = n_frames - total if n_frames >= total else n_frames - 1
        start = int(gen.integers(0, hi + 1))
    height, width = seq.frames[0].data.shape
    used = [start + k * (spec.y + 1) for k in range(spec.x)]
    event_frames = []
    for u in used:
        t0, t1 = _window_bounds(seq, u)
        event_frames.append(aggregate(seq.events, t0, t1, width, height))
    return Clip(
        event_frames=event_frames,
        first_gray=seq.frames[start % n_frames],
        last_gray=seq.frames[(start + total - 1) % n_frames],
        second_gray=seq.frames[(start + 1) % n_frames],
        all_grays=[seq.frames[u % n_frames] for u in used],
        label=seq.label,
        start=start,
    )


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class Dataset:
    root: Path
    labels: list[str]
    train_dirs: list[Path] = field(default_factory=list)
    test_dirs: list[Path] = field(default_factory=list)


def load_dataset(root: str | Path) -> Dataset:
    """Discover `root/labels.txt` + `root/{train,test}/<seq_id>/` directories."""
    root = Path(root)
    labels_path = root / "labels.txt"
    if not labels_path.exists():
        raise DataError(f"missing {labels_path}")
    labels = [line.strip() for line in labels_path.read_text().splitlines() if line.strip()]
    if not labels:
        raise DataError(f"{labels_path} lists no classes")
    ds = Dataset(root=root, labels=labels)
    for split, target in (("train", ds.train_dirs), ("test", ds.test_dirs)):
        split_dir = root / split
        if split_dir.is_dir():
            target.extend(sorted(p for p in split_dir.iterdir() if p.is_dir()))
    if not ds.train_dirs and not ds.test_dirs:
        raise DataError(f"no train/ or test/ sequences under {root}")
    return ds


def load_sequence_events(
    seq_dir: str | Path,
    params: v2e.V2eParams,
    n_labels: int,
    cache: bool = True,
    threads: int = 1,
) -> Sequence:
    """Load one sequence directory, generating + caching events.evt1 on demand.

    The conversion seed is derived from (params.seed, directory name), so a
    dataset converts identically no matter the traversal or thread count.
    """
    from . import rng
    from dataclasses import replace

    seq_dir = Path(seq_dir)
    frames, meta = load_sequence(seq_dir)
    if meta.label is None or not 0 <= meta.label < n_labels:
        raise DataError(f"{seq_dir}/meta.txt: label must be in [0, {n_labels})")
    cache_path = seq_dir / "events.evt1"
    height, width = frames[0].data.shape
    if cache and cache_path.exists():
        events, w, h = read_evt1(cache_path)
        if (w, h) != (width, height):
            raise DataError(f"{cache_path}: cached dims {w}x{h} != frames {width}x{height}")
    else:
        seq_params = replace(params, seed=rng.derive(params.seed, rng.tag("sequence"), rng.tag(seq_dir.name)))
        events = v2e.convert_video(frames, seq_params, threads=threads)
        if cache:
            write_evt1(cache_path, events, width, height)
    return Sequence(frames=frames, events=events, label=meta.label, fps=meta.fps, name=seq_dir.name)
