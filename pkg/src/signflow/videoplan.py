"""Generation-side assembly and the end-to-end recognition pipeline.

Generation: a gloss sequence becomes an ordered clip plan over an
isolated-word clip index, then (optionally) a materialized frame directory.
Output is frames + manifest, never an encoded container, so results stay
bit-exact and testable; an external encoder can consume the directory.

Recognition: frames -> segment sampling -> model -> class -> gloss id ->
natural-order text, with the intermediate gloss trace kept observable.
Continuous multi-sign videos are cut by fixed-stride sliding windows with
one vote per window (a baseline cutter; repeats collapse).
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ManifestEntry, frame_path, load_manifest, read_clip, save_manifest
from .errors import ConfigError, FrameIOError, GlossLookupError, InputError
from .gloss import GlossSequence, Lexicon, ReorderRule, glosses_to_text
from .sampler import SampleSpec, segment_sample

HARD_CUT = "hard-cut"
FALLBACK_SKIP = "skip"
FALLBACK_ERROR = "error"


@dataclass(frozen=True)
class TransitionPolicy:
    """hard-cut, or hold-last-frame(n) copies between consecutive entries."""

    kind: str = HARD_CUT
    hold_frames: int = 0

    def __post_init__(self):
        if self.kind not in (HARD_CUT, "hold-last-frame"):
            raise ConfigError(f"unknown transition policy {self.kind!r}")
        if self.kind == HARD_CUT and self.hold_frames:
            raise ConfigError("hard-cut takes no hold_frames")
        if self.hold_frames < 0:
            raise ConfigError("hold_frames must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "TransitionPolicy":
        if text == HARD_CUT:
            return cls()
        if text.startswith("hold-last-frame:"):
            return cls("hold-last-frame", int(text.split(":", 1)[1]))
        raise ConfigError(f"cannot parse transition policy {text!r}")


@dataclass(frozen=True)
class PlanEntry:
    gloss_id: str
    clip_ref: str
    frame_count: int
    fps: float

    def to_dict(self) -> dict:
        return {"gloss_id": self.gloss_id, "clip_ref": self.clip_ref,
                "frame_count": self.frame_count, "fps": self.fps}


@dataclass
class AssemblyManifest:
    entries: list[PlanEntry]
    policy: TransitionPolicy
    total_frames: int
    warnings: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries],
                "policy": {"kind": self.policy.kind, "hold_frames": self.policy.hold_frames},
                "total_frames": self.total_frames,
                "warnings": self.warnings}


class ClipIndex:
    """Isolated-word clip lookup: clip_ref -> manifest entry + frame dir."""

    def __init__(self, manifest_path: Path | str, fps: float = 25.0):
        self.manifest_path = Path(manifest_path)
        entries, _ = load_manifest(self.manifest_path)
        self.base = self.manifest_path.parent
        self.by_id = {e.video_id: e for e in entries}
        self.fps = fps

    def get(self, clip_ref: str) -> ManifestEntry | None:
        return self.by_id.get(clip_ref)


def plan(glosses: GlossSequence, lex: Lexicon, index: ClipIndex,
         policy: TransitionPolicy = TransitionPolicy(),
         fallback: str = FALLBACK_SKIP) -> AssemblyManifest:
    """One plan entry per gloss, in order. OOV tokens map to per-character
    clips when the lexicon has them; otherwise the fallback applies
    (skip-with-warning or a single error naming all missing ids)."""
    if fallback not in (FALLBACK_SKIP, FALLBACK_ERROR):
        raise ConfigError(f"unknown fallback {fallback!r}")
    entries: list[PlanEntry] = []
    warnings: list[dict] = []
    missing: list[str] = []
    for token in glosses.tokens:
        if token.gloss_id is not None:
            lex_entry = lex.lookup_gloss(token.gloss_id)
        else:
            lex_entry = lex.entries.get(token.surface)  # per-character fingerspell clip
        gloss_name = token.gloss_id if token.gloss_id is not None else f"#{token.surface}"
        clip = index.get(lex_entry.clip_ref) if lex_entry is not None else None
        if clip is None:
            missing.append(gloss_name)
            warnings.append({"kind": "missing-clip", "gloss": gloss_name,
                             "surface": token.surface})
            continue
        entries.append(PlanEntry(gloss_name, clip.video_id, clip.num_frames, index.fps))
    if missing and fallback == FALLBACK_ERROR:
        raise GlossLookupError(f"no clips for glosses: {missing}")
    total = sum(e.frame_count for e in entries)
    if policy.kind == "hold-last-frame" and entries:
        total += policy.hold_frames * (len(entries) - 1)
    return AssemblyManifest(entries, policy, total, warnings)


def concat_frames(manifest: AssemblyManifest, index: ClipIndex, out_dir: Path | str,
                  video_id: str = "assembled") -> ManifestEntry | None:
    """Copy frames in plan order into out_dir; returns a dataset entry for
    the assembled video (None when the plan is empty).

    hold-last-frame(n) inserts n copies of each entry's final frame between
    entries. Frame files are copied byte-identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    last_src: Path | None = None
    for pos, entry in enumerate(manifest.entries):
        if pos > 0 and manifest.policy.kind == "hold-last-frame" and last_src is not None:
            for _ in range(manifest.policy.hold_frames):
                written = _copy_frame(last_src, out_dir, written)
        clip = index.get(entry.clip_ref)
        if clip is None:
            raise GlossLookupError(f"clip {entry.clip_ref!r} vanished between plan and concat")
        src_dir = index.base / clip.frame_dir
        for i in range(clip.num_frames):
            src = frame_path(src_dir, i)
            written = _copy_frame(src, out_dir, written)
            last_src = src
    if written != manifest.total_frames:
        raise InputError(
            f"assembled {written} frames but manifest counted {manifest.total_frames}")
    with open(out_dir.parent / f"{video_id}.plan.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    if written == 0:
        return None
    result = ManifestEntry(video_id, out_dir.name, written, 0, "test")
    save_manifest(out_dir.parent / f"{video_id}.jsonl", [result])
    return result


def _copy_frame(src: Path, out_dir: Path, written: int) -> int:
    dst = out_dir / f"frame_{written:05d}{src.suffix}"
    try:
        shutil.copyfile(src, dst)
    except OSError as exc:
        raise FrameIOError(f"{src}: {exc}") from exc
    return written + 1


# -- recognition ------------------------------------------------------------------------


@dataclass(frozen=True)
class RecognizeConfig:
    """Window cutting for continuous videos; None = one window over all."""

    window: int | None = None
    stride: int | None = None
    collapse_repeats: bool = True


def recognize(entry: ManifestEntry, model, lex: Lexicon, rules: list[ReorderRule],
              sample_spec: SampleSpec, base: Path | str = ".",
              label_map: dict[str, int] | None = None,
              cfg: RecognizeConfig = RecognizeConfig(),
              size: tuple[int, int] | None = None) -> dict:
    """Video -> {text, glosses, windows}: the two-phase path made observable.

    Phase one treats the classifier as a tokenizer emitting gloss ids per
    window; phase two maps the gloss sequence to natural-order text.
    """
    inv_labels = _gloss_by_class(model, lex, label_map)
    windows = _cut_windows(entry.num_frames, cfg)
    gloss_ids: list[str] = []
    details: list[dict] = []
    for w_start, w_len in windows:
        indices = [w_start + i for i in segment_sample(w_len, sample_spec)]
        clip = read_clip(entry, indices, base=base, size=size)
        logits = model.forward(clip[None].astype(np.float32, copy=False)).numpy()[0]
        cls = int(np.argmax(logits))
        gloss_ids.append(inv_labels[cls])
        details.append({"start": w_start, "length": w_len, "class": cls,
                        "gloss": inv_labels[cls]})
    if cfg.collapse_repeats:
        collapsed = [g for i, g in enumerate(gloss_ids) if i == 0 or g != gloss_ids[i - 1]]
    else:
        collapsed = gloss_ids
    from .gloss import tokens_from_gloss_ids

    seq = tokens_from_gloss_ids(collapsed, lex)
    text = glosses_to_text(seq, lex, rules)
    return {"text": text, "glosses": collapsed, "windows": details,
            "trace": [s.to_dict() for s in seq.trace]}


def _gloss_by_class(model, lex: Lexicon, label_map: dict[str, int] | None) -> dict[int, str]:
    """class index -> gloss id; label map must agree with the lexicon."""
    k = model.spec.num_classes
    if label_map is None:
        raise ConfigError("recognize requires a label map (gloss -> class index)")
    inv: dict[int, str] = {}
    for gloss_id, cls in label_map.items():
        if not 0 <= cls < k:
            raise ConfigError(f"label map class {cls} out of range for {k}-way model")
        if cls in inv:
            raise ConfigError(f"label map maps two glosses to class {cls}")
        inv[cls] = gloss_id
    missing = [gid for gid in inv.values()
               if not gid.startswith("#") and lex.lookup_gloss(gid) is None]
    if missing:
        raise ConfigError(f"label map glosses not in lexicon: {sorted(missing)}")
    if len(inv) != k:
        raise ConfigError(f"label map covers {len(inv)} of {k} classes")
    return inv


def _cut_windows(num_frames: int, cfg: RecognizeConfig) -> list[tuple[int, int]]:
    if num_frames < 1:
        raise InputError("empty video: no frames to recognize")
    if cfg.window is None:
        return [(0, num_frames)]
    if cfg.window < 1:
        raise ConfigError(f"window must be >= 1, got {cfg.window}")
    stride = cfg.stride if cfg.stride is not None else cfg.window
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    windows = []
    start = 0
    while start < num_frames:
        length = min(cfg.window, num_frames - start)
        windows.append((start, length))
        if start + cfg.window >= num_frames:
            break
        start += stride
    return windows
