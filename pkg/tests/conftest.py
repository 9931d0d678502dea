from __future__ import annotations

import json
from pathlib import Path

import pytest

from vadprompt.client import ScriptedOracle, VLMClient, parse_ground_truth
from vadprompt.manifest import load_manifest


def write_synthetic_manifest(
    root: Path,
    n_abnormal: int,
    n_normal: int,
    classes: tuple[str, ...] = ("Arson",),
    frames_per_video: int = 2,
    name: str = "manifest.jsonl",
) -> Path:
    """Manifest whose frame files hold distinct bytes, so every video has its own cache key.

    Abnormal videos cycle through ``classes``. Frame files are not real images;
    only the scripted oracle (which never decodes them) should consume them.
    """
    lines = []
    specs = [("abnormal", classes[i % len(classes)]) for i in range(n_abnormal)]
    specs += [("normal", "Normal")] * n_normal
    for i, (label, cls) in enumerate(specs):
        vid = f"{cls.replace(' ', '')}_{i:04d}" if label == "abnormal" else f"Normal_{i:04d}"
        folder = root / "frames" / vid
        folder.mkdir(parents=True, exist_ok=True)
        frames = []
        for j in range(frames_per_video):
            f = folder / f"{j:05d}.jpg"
            f.write_bytes(f"{vid}:{j}".encode())
            frames.append(f"frames/{vid}/{j:05d}.jpg")
        lines.append(json.dumps({"video_id": vid, "label": label, "class_name": cls, "frames": frames}))
    path = root / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def small_manifest(tmp_path):
    path = write_synthetic_manifest(tmp_path, 6, 6, classes=("Arson", "Stealing", "Robbery"))
    return path, load_manifest(path)


def oracle_client(records, cache=None, **oracle_kwargs) -> VLMClient:
    return VLMClient(ScriptedOracle(parse_ground_truth(records), **oracle_kwargs), cache=cache)


# criterion number -> (title, "PASS" | "FAIL", detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({detail})")
