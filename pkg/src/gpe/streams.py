"""Task-stream construction.

Two stream families share one interface:

* rotation streams: every task is the full base digit split viewed under one
  fixed rotation angle (domain-incremental: labels stay, inputs shift);
* highlight streams: synthetic frame sequences whose annotated domain
  combinations follow the nested-domain algebra (each stage introduces the
  combinations that become possible once its new domain exists).

Everything is deterministic given (spec, seed). Rotation tasks materialize
their pixels lazily so twenty 8.6k-image tasks do not sit in memory at once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations as subsets_of_size
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    GenerationError,
    InvariantError,
    ParseError,
)
from .seeding import child_rng

# ---------------------------------------------------------------------------
# IDX binary format


def load_idx(path) -> tuple[np.ndarray, dict]:
    """Decode one IDX file (big-endian).

    Bytes 0-1 must be zero; byte 2 is the element type (only 0x08, unsigned
    byte, is supported); byte 3 is the dimension count, followed by that many
    32-bit big-endian dimension sizes, then the row-major payload. Tensors
    with 2+ dimensions (images) are scaled to [0,1] float64; 1-D tensors
    (label vectors) are returned as raw integers.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header, {len(raw)} bytes (need 4)")
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError(
            f"{path}: bad magic bytes {raw[0]:02x} {raw[1]:02x} at offset 0"
        )
    if raw[2] != 0x08:
        raise ParseError(
            f"{path}: unsupported element type 0x{raw[2]:02x} at offset 2"
        )
    ndim = raw[3]
    if ndim == 0:
        raise ParseError(f"{path}: zero dimension count at offset 3")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(
            f"{path}: truncated dimension list, {len(raw)} bytes (need {header})"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise ParseError(
            f"{path}: expected {expected} payload bytes, got {actual} "
            f"(payload begins at offset {header})"
        )
    flat = np.frombuffer(raw, dtype=np.uint8, offset=header)
    meta = {"element_type": raw[2], "dims": dims, "header_bytes": header}
    if ndim == 1:
        return flat.astype(np.int64), meta
    return flat.astype(np.float64).reshape(dims) / 255.0, meta


def save_idx(tensor: np.ndarray, path) -> None:
    """Encode a tensor back to IDX bytes (inverse of load_idx)."""
    t = np.asarray(tensor)
    if t.ndim == 1:
        data = np.asarray(np.rint(t), dtype=np.int64)
        if np.any(data < 0) or np.any(data > 255):
            raise ConfigurationError("1-D IDX payload must fit unsigned bytes")
        payload = data.astype(np.uint8)
    else:
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ConfigurationError("image tensor must lie in [0,1]")
        payload = np.asarray(np.rint(t * 255.0), dtype=np.uint8)
    header = bytes([0, 0, 0x08, t.ndim]) + struct.pack(f">{t.ndim}I", *t.shape)
    Path(path).write_bytes(header + payload.tobytes())


# ---------------------------------------------------------------------------
# rotation streams


@dataclass(frozen=True)
class DomainLabel:
    id: int
    name: str


@dataclass
class Dataset:
    """A flat digit dataset: rows are flattened images scaled to [0,1]."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    image_shape: tuple[int, int]


def load_digit_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    tr_x, _ = load_idx(d / "train-images.idx")
    tr_y, _ = load_idx(d / "train-labels.idx")
    te_x, _ = load_idx(d / "test-images.idx")
    te_y, _ = load_idx(d / "test-labels.idx")
    if tr_x.ndim != 3 or te_x.ndim != 3:
        raise ParseError("image files must be 3-D (count x height x width)")
    shape = tr_x.shape[1:]
    return Dataset(
        np.ascontiguousarray(tr_x.reshape(tr_x.shape[0], -1)),
        tr_y,
        np.ascontiguousarray(te_x.reshape(te_x.shape[0], -1)),
        te_y,
        shape,
    )


_MAP_CACHE: dict[tuple[int, int, float], list[tuple[np.ndarray, np.ndarray]]] = {}


def _bilinear_map(shape: tuple[int, int], angle: float):
    """Per-output-pixel gather indices and weights for one rotation angle.

    Output pixel p reads the source at the inverse rotation of p about the
    image center; out-of-bounds corners contribute weight 0.
    """
    key = (shape[0], shape[1], float(angle))
    cached = _MAP_CACHE.get(key)
    if cached is not None:
        return cached
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = rows - cy, cols - cx
    cos, sin = np.cos(angle), np.sin(angle)
    sy = cy + cos * dy + sin * dx
    sx = cx - sin * dy + cos * dx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy, wx = sy - y0, sx - x0
    parts = []
    for yy, xx, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0).ravel()
        parts.append((idx, (wgt * valid).ravel()))
    _MAP_CACHE[key] = parts
    return parts


def rotate_batch(flat: np.ndarray, angle: float, shape: tuple[int, int]) -> np.ndarray:
    """Rotate a batch of flattened images about their centers (bilinear)."""
    parts = _bilinear_map(shape, angle)
    out = np.zeros_like(flat)
    step = 2048  # bound the transient gather buffers
    for lo in range(0, flat.shape[0], step):
        chunk = flat[lo : lo + step]
        acc = out[lo : lo + step]
        for idx, wgt in parts:
            acc += chunk[:, idx] * wgt
    return out


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate one image about its center; bilinear, zero outside the frame.

    Streams draw angles from [0, pi); the operation itself accepts any
    angle (tests exercise round trips with the negated angle).
    """
    img = np.asarray(img, dtype=np.float64)
    return rotate_batch(img.reshape(1, -1), angle, img.shape).reshape(img.shape)


class RotationTask:
    """One rotation domain: the full base train split under a fixed angle.

    Pixels are materialized on access (pure function of base + angle), so
    holding a 20-task stream does not hold 20 rotated copies.
    """

    def __init__(self, index: int, angle: float, base: Dataset) -> None:
        self.index = index
        self.angle = angle
        self.base = base
        self.domains = frozenset(
            {DomainLabel(index - 1, f"rotation-{index}")}
        )

    @property
    def samples(self) -> np.ndarray:
        return rotate_batch(self.base.train_x, self.angle, self.base.image_shape)

    @property
    def labels(self) -> np.ndarray:
        return self.base.train_y

    def __len__(self) -> int:
        return self.base.train_x.shape[0]

    def sample_ids(self) -> list[tuple[int, int]]:
        return [(self.index, i) for i in range(len(self))]


@dataclass
class RotationTestSet:
    """Base test split plus the per-task angles applied at evaluation time."""

    base_x: np.ndarray
    base_y: np.ndarray
    angles: list[float]
    image_shape: tuple[int, int]

    def task_view(self, task_index: int) -> tuple[np.ndarray, np.ndarray]:
        angle = self.angles[task_index - 1]
        return rotate_batch(self.base_x, angle, self.image_shape), self.base_y


@dataclass
class TaskStream:
    kind: str  # "rotation" | "highlight"
    tasks: list
    test: object
    domains: tuple[DomainLabel, ...]


def build_rotation_stream(
    base: Dataset, t_count: int, seed: int, spacing: str = "uniform"
) -> TaskStream:
    """T tasks, one frozen angle each, drawn uniformly from [0, pi)."""
    if t_count < 1:
        raise ConfigurationError(f"need at least one task, got {t_count}")
    if spacing == "uniform":
        rng = child_rng(seed, "stream", "rotation-angles")
        angles = [float(a) for a in rng.uniform(0.0, np.pi, size=t_count)]
    elif spacing == "even":
        angles = [float(a) for a in np.linspace(0.0, np.pi, t_count, endpoint=False)]
    else:
        raise ConfigurationError(f"unknown angle spacing {spacing!r}")
    tasks = [RotationTask(t + 1, angles[t], base) for t in range(t_count)]
    test = RotationTestSet(base.test_x, base.test_y, angles, base.image_shape)
    domains = tuple(sorted((d for task in tasks for d in task.domains), key=lambda d: d.id))
    return TaskStream("rotation", tasks, test, domains)


# ---------------------------------------------------------------------------
# domain-combination algebra


def _nonempty_subsets(domains: frozenset) -> set[frozenset]:
    items = sorted(domains, key=lambda d: d.id)
    out: set[frozenset] = set()
    for size in range(1, len(items) + 1):
        for combo in subsets_of_size(items, size):
            out.add(frozenset(combo))
    return out


def domain_combinations(domain_sets: list) -> list[list[frozenset]]:
    """Fresh combinations per stage.

    Stage t owns every non-empty subset of its domain set that was not
    already a subset of an earlier (nested) domain set. Each stage's list is
    returned sorted by (size, member ids) for determinism.
    """
    sets = [frozenset(s) for s in domain_sets]
    if not sets:
        raise ConfigurationError("need at least one domain set")
    for prev, cur in zip(sets, sets[1:]):
        if not (prev < cur):
            raise ConfigurationError(
                "domain sets must be strictly growing and nested"
            )
    result: list[list[frozenset]] = []
    seen: set[frozenset] = set()
    for s in sets:
        fresh = _nonempty_subsets(s) - seen
        seen |= fresh
        result.append(
            sorted(fresh, key=lambda c: (len(c), sorted(d.id for d in c)))
        )
    return result


# ---------------------------------------------------------------------------
# synthetic highlight sequences


@dataclass
class SequenceSample:
    """One synthetic sequence: frames, binary frame labels, annotations."""

    sid: str
    frames: np.ndarray
    frame_labels: np.ndarray
    segments: list[tuple[int, int, DomainLabel]]  # [start, end)

    def __post_init__(self) -> None:
        n = self.frames.shape[0]
        if self.frame_labels.shape[0] != n:
            raise InvariantError(f"{self.sid}: label/frame length mismatch")
        expected = np.zeros(n, dtype=np.int64)
        spans: dict[int, list[tuple[int, int]]] = {}
        for start, end, dom in self.segments:
            if not (0 <= start < end <= n):
                raise InvariantError(f"{self.sid}: segment ({start},{end}) out of bounds")
            for s, e in spans.get(dom.id, []):
                if start < e and s < end:
                    raise InvariantError(
                        f"{self.sid}: overlapping segments for domain {dom.id}"
                    )
            spans.setdefault(dom.id, []).append((start, end))
            expected[start:end] = 1
        if not np.array_equal(expected, self.frame_labels):
            raise InvariantError(f"{self.sid}: labels inconsistent with segments")

    @property
    def annotated_domains(self) -> frozenset:
        return frozenset(dom for _, _, dom in self.segments)


@dataclass
class HighlightStreamSpec:
    """Generator knobs for the synthetic highlight stream."""

    domain_names: tuple[str, ...] = ("presentation", "eating", "ingredients", "cooking")
    train_per_task: int = 24
    test_sequences: int = 48
    seq_len_min: int = 90
    seq_len_max: int = 150
    feature_dim: int = 32
    signature_scale: float = 6.0
    signature_decay: float = 1.0  # mean norm = scale * decay^domain_id
    noise_scale: float = 1.0
    seg_min: int = 3
    seg_max: int = 120
    extra_segment_prob: float = 0.25
    combo_decay: float = 0.35  # weight rho^(|combo|-1) when sampling from C_t

    def domains(self) -> tuple[DomainLabel, ...]:
        return tuple(DomainLabel(i, n) for i, n in enumerate(self.domain_names))


def domain_means(spec: HighlightStreamSpec, seed: int) -> dict[int, np.ndarray]:
    """Fixed per-domain signature means, stable across the whole stream."""
    means = {}
    for dom in spec.domains():
        rng = child_rng(seed, "stream", "domain-mean", dom.id)
        v = rng.normal(size=spec.feature_dim)
        norm = spec.signature_scale * spec.signature_decay**dom.id
        means[dom.id] = norm * v / np.linalg.norm(v)
    return means


def synth_sequence(
    combination: frozenset,
    length: int,
    rng: np.random.Generator,
    spec: HighlightStreamSpec,
    means: dict[int, np.ndarray],
    sid: str,
) -> SequenceSample:
    """Background noise plus >= 1 signature segment per domain in the combination.

    Segment lengths honor [seg_min, seg_max]; segments never overlap. The
    draw order is fixed (domains sorted by id) so one generator yields one
    sequence deterministically.
    """
    if not combination:
        raise ConfigurationError("combination must be non-empty")
    doms = sorted(combination, key=lambda d: d.id)
    seg_domains: list[DomainLabel] = []
    for dom in doms:
        seg_domains.append(dom)
        if rng.random() < spec.extra_segment_prob:
            seg_domains.append(dom)
    # drop optional extras (keep one per domain) if the length cannot fit them
    while len(seg_domains) > len(doms) and len(seg_domains) * spec.seg_min > length:
        for i in range(len(seg_domains) - 1, -1, -1):
            if seg_domains.count(seg_domains[i]) > 1:
                del seg_domains[i]
                break
    n_seg = len(seg_domains)
    if n_seg * spec.seg_min > length:
        raise GenerationError(
            f"{sid}: length {length} cannot fit {n_seg} segments of >= {spec.seg_min}"
        )

    lens: list[int] = []
    budget = length - n_seg * spec.seg_min
    for i in range(n_seg):
        hi = min(spec.seg_max, spec.seg_min + budget)
        ln = int(rng.integers(spec.seg_min, hi + 1))
        budget -= ln - spec.seg_min
        lens.append(ln)
    order = rng.permutation(n_seg)
    free = length - sum(lens)
    gaps = rng.multinomial(free, np.full(n_seg + 1, 1.0 / (n_seg + 1)))

    frames = spec.noise_scale * rng.normal(size=(length, spec.feature_dim))
    labels = np.zeros(length, dtype=np.int64)
    segments: list[tuple[int, int, DomainLabel]] = []
    pos = 0
    for slot, oi in enumerate(order):
        pos += int(gaps[slot])
        start, end = pos, pos + lens[oi]
        dom = seg_domains[oi]
        frames[start:end] = means[dom.id] + spec.noise_scale * rng.normal(
            size=(end - start, spec.feature_dim)
        )
        labels[start:end] = 1
        segments.append((start, end, dom))
        pos = end
    segments.sort(key=lambda s: s[0])
    return SequenceSample(sid, frames, labels, segments)


@dataclass
class HighlightTask:
    index: int
    sequences: list[SequenceSample]
    domains: frozenset

    @property
    def frame_count(self) -> int:
        return sum(s.frames.shape[0] for s in self.sequences)

    def sample_ids(self) -> list[str]:
        return [s.sid for s in self.sequences]


@dataclass
class HighlightTestSet:
    sequences: list[SequenceSample]


def _pick_combination(rng: np.random.Generator, combos: list[frozenset], decay: float) -> frozenset:
    weights = np.array([decay ** (len(c) - 1) for c in combos])
    weights /= weights.sum()
    return combos[int(rng.choice(len(combos), p=weights))]


def build_highlight_stream(spec: HighlightStreamSpec, seed: int) -> TaskStream:
    """One stage per domain; stage t samples only stage-t-fresh combinations.

    The test set is fixed across stages and mixes combinations over the full
    final domain set, so every domain appears in many test sequences.
    """
    doms = spec.domains()
    if len(doms) < 1:
        raise ConfigurationError("need at least one domain")
    domain_sets = [frozenset(doms[: t + 1]) for t in range(len(doms))]
    fresh = domain_combinations(domain_sets)

    means = domain_means(spec, seed)
    tasks = []
    for t, combos in enumerate(fresh, start=1):
        if not combos:
            raise ConfigurationError(f"stage {t} has no fresh combinations")
        rng = child_rng(seed, "stream", "task", t)
        seqs = []
        for i in range(spec.train_per_task):
            combo = _pick_combination(rng, combos, spec.combo_decay)
            length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
            seqs.append(synth_sequence(combo, length, rng, spec, means, f"t{t}-s{i}"))
        tasks.append(HighlightTask(t, seqs, domain_sets[t - 1]))

    rng = child_rng(seed, "stream", "test")
    all_combos = sorted(
        _nonempty_subsets(domain_sets[-1]),
        key=lambda c: (len(c), sorted(d.id for d in c)),
    )
    test_seqs = []
    for i in range(spec.test_sequences):
        combo = all_combos[i % len(all_combos)]
        length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        test_seqs.append(synth_sequence(combo, length, rng, spec, means, f"test-{i}"))
    return TaskStream("highlight", tasks, HighlightTestSet(test_seqs), doms)


# ---------------------------------------------------------------------------
# line-oriented stream manifest (audit / cross-run reuse)
#
# One record per sample:  id|task|length|label RLE|segments
#   label RLE:  value x run length, comma separated (e.g. 0x17,1x30,0x73)
#   segments:   start:end:domain_id, semicolon separated
# Frames are not stored; they regenerate deterministically from (spec, seed).


def _rle(labels: np.ndarray) -> str:
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append(f"{int(labels[start])}x{i - start}")
            start = i
    return ",".join(runs)


def _unrle(text: str) -> np.ndarray:
    out: list[int] = []
    for run in text.split(","):
        val, count = run.split("x")
        out.extend([int(val)] * int(count))
    return np.array(out, dtype=np.int64)


def save_stream_manifest(stream: TaskStream, path) -> None:
    if stream.kind != "highlight":
        raise ConfigurationError("only highlight streams serialize to manifests")
    lines = ["# gpe-stream v1", f"kind = {stream.kind}"]
    lines.append(
        "domains = " + ",".join(f"{d.id}:{d.name}" for d in stream.domains)
    )
    lines.append(f"tasks = {len(stream.tasks)}")

    def record(seq: SequenceSample, task_index: int) -> str:
        segs = ";".join(f"{s}:{e}:{d.id}" for s, e, d in seq.segments)
        return f"{seq.sid}|{task_index}|{len(seq.frame_labels)}|{_rle(seq.frame_labels)}|{segs}"

    for task in stream.tasks:
        lines.extend(record(s, task.index) for s in task.sequences)
    lines.extend(record(s, 0) for s in stream.test.sequences)  # task 0 = test split
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ManifestRecord:
    sid: str
    task: int
    length: int
    labels: np.ndarray
    segments: list[tuple[int, int, int]]  # domain by id


def load_stream_manifest(path) -> list[ManifestRecord]:
    records = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or "|" not in line:
            continue  # blank, comment, or header line
        parts = line.split("|")
        if len(parts) != 5:
            raise ParseError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
        sid, task, length, rle, segs = parts
        labels = _unrle(rle)
        if labels.shape[0] != int(length):
            raise ParseError(f"{path}:{ln}: label run length != declared length")
        seg_list = []
        if segs:
            for seg in segs.split(";"):
                s, e, d = seg.split(":")
                seg_list.append((int(s), int(e), int(d)))
        records.append(ManifestRecord(sid, int(task), int(length), labels, seg_list))
    return records


def stream_matches_manifest(stream: TaskStream, records: list[ManifestRecord]) -> bool:
    by_id = {r.sid: r for r in records}
    seqs = [(s, t.index) for t in stream.tasks for s in t.sequences]
    seqs += [(s, 0) for s in stream.test.sequences]
    if len(seqs) != len(by_id):
        return False
    for seq, task_index in seqs:
        rec = by_id.get(seq.sid)
        if rec is None or rec.task != task_index:
            return False
        if not np.array_equal(rec.labels, seq.frame_labels):
            return False
        if rec.segments != [(s, e, d.id) for s, e, d in seq.segments]:
            return False
    return True
