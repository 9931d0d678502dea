"""JSON-lines video manifests.

One object per line::

    {"video_id": "Arson009", "label": "abnormal", "class_name": "Arson",
     "frames": ["Arson009/000001.jpg", ...], "fps_native": 1.0, "duration_s": 93.0}

Frame paths are resolved against the frames root (the manifest's directory by
default). ``frame_dir`` may replace ``frames``; the directory's image files
are then listed in name order. Every frame must exist when the manifest is
loaded so that missing files surface before any backend call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

LABELS = ("normal", "abnormal")
NORMAL_CLASS = "Normal"
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


@dataclass
class VideoRecord:
    video_id: str
    label: str
    class_name: str
    frames: list[Path] = field(default_factory=list)
    duration_s: float | None = None
    fps_native: float | None = None
    dataset: str = ""

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ManifestError("empty video_id")
        if self.label not in LABELS:
            raise ManifestError(f"{self.video_id}: label must be one of {LABELS}, got {self.label!r}")
        if (self.label == "normal") != (self.class_name == NORMAL_CLASS):
            raise ManifestError(f"{self.video_id}: label {self.label!r} inconsistent with class {self.class_name!r}")
        if not self.frames:
            raise ManifestError(f"{self.video_id}: no frames")
        self.frames = [Path(f) for f in self.frames]

    @property
    def y(self) -> int:
        return int(self.label == "abnormal")

    def to_dict(self, root: Path | None = None) -> dict:
        frames = [str(f.relative_to(root)) if root and f.is_relative_to(root) else str(f) for f in self.frames]
        out = {"video_id": self.video_id, "label": self.label, "class_name": self.class_name, "frames": frames}
        if self.duration_s is not None:
            out["duration_s"] = self.duration_s
        if self.fps_native is not None:
            out["fps_native"] = self.fps_native
        if self.dataset:
            out["dataset"] = self.dataset
        return out


def _record_from(obj: dict, root: Path, lineno: int) -> VideoRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = {"video_id", "label"} - obj.keys()
    if missing:
        raise ManifestError(f"line {lineno}: missing {sorted(missing)}")
    label = str(obj["label"]).lower()
    class_name = obj.get("class_name") or (NORMAL_CLASS if label == "normal" else "")
    if "frames" in obj:
        frames = [root / f for f in obj["frames"]]
    elif "frame_dir" in obj:
        d = root / obj["frame_dir"]
        if not d.is_dir():
            raise ManifestError(f"line {lineno}: frame_dir {d} does not exist")
        frames = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        raise ManifestError(f"line {lineno}: needs 'frames' or 'frame_dir'")
    try:
        return VideoRecord(
            video_id=str(obj["video_id"]),
            label=label,
            class_name=class_name,
            frames=frames,
            duration_s=obj.get("duration_s"),
            fps_native=obj.get("fps_native"),
            dataset=obj.get("dataset", ""),
        )
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def load_manifest(path: str | Path, frames_root: str | Path | None = None, check_files: bool = True) -> list[VideoRecord]:
    path = Path(path)
    root = Path(frames_root) if frames_root is not None else path.parent
    records: list[VideoRecord] = []
    seen: set[str] = set()
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            rec = _record_from(obj, root, lineno)
            if rec.video_id in seen:
                raise ManifestError(f"line {lineno}: duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    if check_files:
        for rec in records:
            for f in rec.frames:
                if not f.is_file():
                    raise ManifestError(f"{rec.video_id}: frame file missing: {f}")
    return records


def write_manifest(records: list[VideoRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            resolved = VideoRecord(**{**rec.__dict__, "frames": [f.resolve() for f in rec.frames]})
            fh.write(json.dumps(resolved.to_dict(root), ensure_ascii=False) + "\n")


def classes_in(records: list[VideoRecord]) -> list[str]:
    return list(dict.fromkeys(r.class_name for r in records if r.label == "abnormal"))
