"""Frame-directory datasets: manifest IO, clip reading, synthetic generators.

Layout: one directory of raster frames per video, frames named
``frame_%05d.pgm`` (grayscale) or ``frame_%05d.ppm`` (RGB), plus a
line-delimited JSON manifest and a ``labels.json`` gloss->index map.

The synthetic generator builds an order-permutation dataset: every class
shows the same T frames (a bright patch parked on T fixed cells), only the
visiting order differs. A classifier that ignores frame order is at chance
on it by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FrameIOError, InputError, IntegrityError, ParseError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    frame_dir: str
    num_frames: int
    label: int
    split: str

    def __post_init__(self):
        if self.num_frames < 1:
            raise ParseError(f"entry {self.video_id!r}: num_frames must be positive")
        if self.split not in SPLITS:
            raise ParseError(f"entry {self.video_id!r}: unknown split {self.split!r}")

    def to_json(self) -> str:
        return json.dumps({"video_id": self.video_id, "frame_dir": self.frame_dir,
                           "num_frames": self.num_frames, "label": self.label,
                           "split": self.split}, ensure_ascii=False)


# -- portable raster frames ------------------------------------------------------------


def write_frame(path: Path | str, frame: np.ndarray) -> None:
    """Write [H,W] or [C,H,W] (C in {1,3}) values in [0,1] as 8-bit PGM/PPM."""
    arr = np.asarray(frame)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FrameIOError(f"{path}: frame must be [H,W] or [C,H,W] with 1 or 3 channels")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    c, h, w = data.shape
    magic = b"P5" if c == 1 else b"P6"
    body = data[0] if c == 1 else np.moveaxis(data, 0, 2)  # P6 interleaves RGB per pixel
    try:
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (w, h))
            fh.write(body.tobytes())
    except OSError as exc:
        raise FrameIOError(f"{path}: {exc}") from exc


def read_frame(path: Path | str) -> np.ndarray:
    """Read a binary PGM/PPM frame back to [C,H,W] floats in [0,1]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FrameIOError(f"{path}: {exc}") from exc
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FrameIOError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    # header: magic, whitespace-separated width height maxval, then raster
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FrameIOError(f"{path}: only 8-bit rasters supported, maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    if pixels.size != expected:
        raise FrameIOError(f"{path}: truncated raster ({pixels.size} of {expected} bytes)")
    if channels == 1:
        out = pixels.reshape(1, h, w)
    else:
        out = np.moveaxis(pixels.reshape(h, w, 3), 2, 0)
    return out.astype(np.float64) / 255.0


def frame_name(index: int, channels: int = 1) -> str:
    return f"frame_{index:05d}." + ("pgm" if channels == 1 else "ppm")


def frame_path(frame_dir: Path, index: int) -> Path:
    for ext in ("pgm", "ppm"):
        p = frame_dir / f"frame_{index:05d}.{ext}"
        if p.exists():
            return p
    raise FrameIOError(f"{frame_dir}: no frame_{index:05d}.pgm/.ppm")


def _resize_nearest(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    c, h, w = frame.shape
    th, tw = size
    if (h, w) == (th, tw):
        return frame
    rows = (np.arange(th) * h // th).astype(np.intp)
    cols = (np.arange(tw) * w // tw).astype(np.intp)
    return frame[:, rows[:, None], cols[None, :]]


# -- manifest ---------------------------------------------------------------------------


def save_manifest(path: Path | str, entries: list[ManifestEntry],
                  label_map: dict[str, int] | None = None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")
    if label_map is not None:
        with open(path.parent / "labels.json", "w", encoding="utf-8") as fh:
            json.dump(label_map, fh, ensure_ascii=False, indent=0, sort_keys=True)
            fh.write("\n")


def load_manifest(path: Path | str, verify: bool = False
                  ) -> tuple[list[ManifestEntry], dict[str, int] | None]:
    """Parse a JSONL manifest; returns entries and the sibling label map.

    Duplicate video ids and malformed lines are rejected with line numbers.
    With verify on, each frame_dir must exist and hold num_frames frames.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entry = ManifestEntry(str(obj["video_id"]), str(obj["frame_dir"]),
                                      int(obj["num_frames"]), int(obj["label"]),
                                      str(obj["split"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
            if entry.video_id in seen:
                raise ParseError(
                    f"{path}:{lineno}: duplicate video_id {entry.video_id!r} "
                    f"(first seen on line {seen[entry.video_id]})")
            seen[entry.video_id] = lineno
            entries.append(entry)

    if verify:
        base = path.parent
        for entry in entries:
            d = _resolve_dir(base, entry.frame_dir)
            if not d.is_dir():
                raise IntegrityError(f"{entry.video_id}: frame_dir {d} missing")
            count = len(list(d.glob("frame_*.p?m")))
            if count != entry.num_frames:
                raise IntegrityError(
                    f"{entry.video_id}: manifest says {entry.num_frames} frames, found {count}")

    labels_path = path.parent / "labels.json"
    label_map = None
    if labels_path.exists():
        with open(labels_path, encoding="utf-8") as fh:
            label_map = {str(k): int(v) for k, v in json.load(fh).items()}
    return entries, label_map


def _resolve_dir(base: Path, frame_dir: str) -> Path:
    p = Path(frame_dir)
    return p if p.is_absolute() else base / p


def read_clip(entry: ManifestEntry, indices: list[int], base: Path | str = ".",
              size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode the given frame indices to a [T,C,H,W] array in [0,1]."""
    for idx in indices:
        if not 0 <= idx < entry.num_frames:
            raise InputError(f"{entry.video_id}: frame index {idx} outside "
                             f"[0, {entry.num_frames})")
    d = _resolve_dir(Path(base), entry.frame_dir)
    cache: dict[int, np.ndarray] = {}
    frames = []
    for idx in indices:
        if idx not in cache:
            frame = read_frame(frame_path(d, idx))
            if size is not None:
                frame = _resize_nearest(frame, size)
            cache[idx] = frame
        frames.append(cache[idx])
    return np.stack(frames)


# -- synthetic order-permutation videos ---------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Order-permutation dataset: same frames per class, different order."""

    num_classes: int = 4
    t: int = 8
    frame_size: tuple[int, int] = (32, 32)
    clips_per_class: dict[str, int] = field(
        default_factory=lambda: {"train": 50, "val": 0, "test": 13})
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.t < 2:
            raise ConfigError("synthetic clips need t >= 2 to carry order information")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        limit = 1
        for i in range(2, self.t + 1):
            limit *= i
            if limit >= self.num_classes:
                break
        if self.num_classes > limit:
            raise ConfigError(
                f"{self.num_classes} classes exceed the {limit} distinct orderings of "
                f"{self.t} cells")
        for split in self.clips_per_class:
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")


def _cell_positions(t: int, size: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    """T cell rectangles arranged on a near-square grid."""
    h, w = size
    cols = int(np.ceil(np.sqrt(t)))
    rows = int(np.ceil(t / cols))
    ch, cw = h // rows, w // cols
    cells = []
    for k in range(t):
        r, c = divmod(k, cols)
        cells.append((r * ch, min((r + 1) * ch, h), c * cw, min((c + 1) * cw, w)))
    return cells


def class_orders(spec: SynthSpec) -> list[list[int]]:
    """Deterministic distinct visiting orders; class 0 is the identity order."""
    rng = np.random.default_rng(spec.seed)
    orders = [list(range(spec.t))]
    seen = {tuple(orders[0])}
    while len(orders) < spec.num_classes:
        candidate = tuple(rng.permutation(spec.t).tolist())
        if candidate not in seen:
            seen.add(candidate)
            orders.append(list(candidate))
    return orders


def base_frames(spec: SynthSpec) -> np.ndarray:
    """The T noiseless frames shared by every class: one lit cell each."""
    h, w = spec.frame_size
    frames = np.zeros((spec.t, 1, h, w))
    for k, (r0, r1, c0, c1) in enumerate(_cell_positions(spec.t, spec.frame_size)):
        frames[k, 0, r0:r1, c0:c1] = 1.0
    return frames


def synth_temporal(spec: SynthSpec, out_dir: Path | str) -> Path:
    """Generate the dataset under out_dir; returns the manifest path.

    Fixed seed gives a byte-identical tree. Class k's clips show the shared
    frames in class_orders(spec)[k] order plus seeded uniform noise.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FrameIOError(f"{out_dir}: {exc}") from exc

    orders = class_orders(spec)
    frames = base_frames(spec)
    rng = np.random.default_rng(spec.seed + 1)
    entries: list[ManifestEntry] = []
    for split in SPLITS:
        count = spec.clips_per_class.get(split, 0)
        for label in range(spec.num_classes):
            for i in range(count):
                video_id = f"{split}_c{label}_{i:04d}"
                rel = Path(split) / video_id
                d = out_dir / rel
                d.mkdir(parents=True, exist_ok=True)
                order = orders[label]
                for t_idx in range(spec.t):
                    frame = frames[order[t_idx]]
                    if spec.noise > 0:
                        frame = np.clip(
                            frame + rng.uniform(-spec.noise, spec.noise, size=frame.shape), 0, 1)
                    write_frame(d / frame_name(t_idx, channels=1), frame)
                entries.append(ManifestEntry(video_id, str(rel), spec.t, label, split))

    label_map = {f"ORDER{k}": k for k in range(spec.num_classes)}
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest_path, entries, label_map)
    return manifest_path


def make_isolated_clips(glosses: dict[str, int], out_dir: Path | str, num_frames: int = 8,
                        frame_size: tuple[int, int] = (32, 32), seed: int = 0) -> Path:
    """Synthetic isolated-word clips, one per gloss id, for assembly demos.

    Class k is encoded as a patch whose intensity level is (k+1)/(K+1), so a
    deterministic oracle recognizer can decode the class from pixels alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k_total = len(glosses)
    h, w = frame_size
    rng = np.random.default_rng(seed)
    entries = []
    for gloss_id, label in sorted(glosses.items(), key=lambda kv: kv[1]):
        rel = Path("clips") / gloss_id
        d = out_dir / rel
        d.mkdir(parents=True, exist_ok=True)
        level = (label + 1) / (k_total + 1)
        for t_idx in range(num_frames):
            frame = np.zeros((1, h, w))
            frame[0, h // 4: 3 * h // 4, w // 4: 3 * w // 4] = level
            # tiny jitter outside the patch keeps clips non-constant
            frame[0, 0, :] = rng.uniform(0, 0.02, size=w)
            write_frame(d / frame_name(t_idx, channels=1), frame)
        entries.append(ManifestEntry(gloss_id, str(rel), num_frames, label, "train"))
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest_path, entries, dict(sorted(glosses.items())))
    return manifest_path


def load_clip_dataset(manifest: Path | str, split: str, sample_spec,
                      size: tuple[int, int] | None = None) -> list[tuple[np.ndarray, int]]:
    """Materialize (clip, label) pairs for one split via segment sampling."""
    from .sampler import segment_sample

    manifest = Path(manifest)
    entries, _ = load_manifest(manifest)
    base = manifest.parent
    out = []
    for entry in entries:
        if entry.split != split:
            continue
        indices = segment_sample(entry.num_frames, sample_spec)
        out.append((read_clip(entry, indices, base=base, size=size), entry.label))
    if not out:
        raise InputError(f"{manifest}: no entries in split {split!r}")
    return out
