"""Per-video inference: frame sampling, prompt rendering, answer parsing, scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .client import ChatRequest, Decoding, VLMClient
from .compression import CompactPromptSet
from .errors import BackendError, MalformedFile, ModeSetMismatch
from .manifest import VideoRecord
from .prompt_pool import PromptPool, render_full_pool_prompt
from .templates import (
    ABSTRACT_PROMPT,
    CLASS_LABEL_PLAIN,
    CLASS_LABEL_WITH_GROUPS,
    FLAT_TEMPLATE,
    GROUPED_TEMPLATE,
)

log = logging.getLogger(__name__)

MODE_KINDS = ("askhint", "abstract", "class_label", "full_pool")
PARSE_STATUSES = ("clean", "recovered", "failed")
SCORE_RULES = ("binary", "confidence")


@dataclass(frozen=True)
class PromptMode:
    kind: str
    target: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown prompt mode {self.kind!r}")
        if self.target is not None and self.kind != "class_label":
            raise ValueError("only class_label takes a target class")

    @classmethod
    def parse(cls, text: str) -> PromptMode:
        """``askhint``, ``abstract``, ``full_pool``, ``class_label`` or ``class_label:<Class>``."""
        kind, _, target = text.partition(":")
        return cls(kind.strip(), target.strip() or None)

    def __str__(self) -> str:
        return f"{self.kind}:{self.target}" if self.target else self.kind


@dataclass
class Verdict:
    video_id: str
    decision: str
    group: str | None
    rationale: str
    score: float
    raw_text: str
    parse_status: str
    prompt_hash: str = ""
    model_id: str = ""
    error: str | None = None

    def __post_init__(self) -> None:
        if self.decision == "normal":
            self.group = None

    FIELDS = ("video_id", "decision", "group", "rationale", "score", "parse_status", "raw_text", "prompt_hash", "model_id")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.FIELDS}
        if self.error:
            out["error"] = self.error
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> Verdict:
        return cls(**{k: obj.get(k) for k in cls.FIELDS}, error=obj.get("error"))


def render_answer(decision: str, group: str | None = None, reason: str = "") -> str:
    """The answer line a well-behaved model would produce."""
    if decision == "abnormal":
        head = f"Abnormal Event → {group}." if group else "Abnormal Event."
    else:
        head = "Normal Event."
    return f"{head} {reason}".rstrip()


# --- frame sampling --------------------------------------------------------------------


def sample_frame_indices(
    n_frames: int, max_frames: int, fps_native: float | None = None, duration_s: float | None = None
) -> list[int]:
    """Indices into a video's frame list.

    Short videos (at most ``max_frames`` frames when taken at 1 fps) return
    every 1-fps frame. Longer ones return ``max_frames`` indices spread
    uniformly over ``[0, n_frames - 1]``, both endpoints included. Without an
    fps (or duration to derive it from), frames are assumed to already be 1 fps.
    """
    if n_frames < 1:
        raise ValueError("video has no frames")
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    fps = fps_native
    if fps is None and duration_s:
        fps = n_frames / duration_s
    if fps is None or fps <= 1.0:
        one_fps = list(range(n_frames))
    else:
        n1 = math.ceil(n_frames / fps)
        one_fps = [math.floor(k * fps) for k in range(n1)]  # frame on screen at second k
    if len(one_fps) <= max_frames:
        return one_fps
    if max_frames == 1:
        return [0]
    step = (n_frames - 1) / (max_frames - 1)
    return [int(round(i * step)) for i in range(max_frames)]


def sample_frames(record: VideoRecord, max_frames: int) -> list[Path]:
    idx = sample_frame_indices(len(record.frames), max_frames, record.fps_native, record.duration_s)
    return [record.frames[i] for i in idx]


# --- prompts ----------------------------------------------------------------------------


def render_inference_prompt(mode: PromptMode, qset: CompactPromptSet | PromptPool | None = None) -> str:
    if mode.kind == "askhint":
        if not isinstance(qset, CompactPromptSet):
            raise ModeSetMismatch("askhint mode needs a compact prompt set")
        if len(qset.groups) == 1:
            qs = qset.questions
            lines = "\n".join(f"- Q{i}: {q.text}" for i, q in enumerate(qs, start=1))
            qrange = f"Q1-Q{len(qs)}" if len(qs) > 1 else "Q1"
            return FLAT_TEMPLATE.format(questions=lines, qrange=qrange)
        blocks = []
        for g in qset.groups:
            blocks.append(f"- {g.name}\n" + "\n".join(f"  - {q.text}" for q in g.questions))
        return GROUPED_TEMPLATE.format(groups="\n".join(blocks))
    if mode.kind == "abstract":
        return ABSTRACT_PROMPT
    if mode.kind == "class_label":
        if not mode.target:
            raise ModeSetMismatch("class_label prompt needs a target class")
        if isinstance(qset, CompactPromptSet):
            groups = "\n".join(f"- {name}" for name in qset.group_names)
            return CLASS_LABEL_WITH_GROUPS.format(groups=groups, target=mode.target)
        return CLASS_LABEL_PLAIN.format(target=mode.target)
    if not isinstance(qset, PromptPool):
        raise ModeSetMismatch("full_pool mode needs the full prompt pool")
    return render_full_pool_prompt(qset)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


# --- answer parsing ---------------------------------------------------------------------

_LEAD = re.compile(r"^[\s\"'`*#>\-•]*(?:(?:final\s+)?answer\s*[:\-]\s*)?[\s\"'`*]*", re.I)
_EVENT = re.compile(r"\b(?P<kind>abnormal|normal)[\s*_]+event\b[*_\"']*", re.I)
_ARROW = re.compile(r"^\s*(?:→|->|=>|⇒|—|–|-)\s*")
_GROUP_END = re.compile(r"\.(?=\s|$)|\n")
_YESNO = re.compile(r"\b(?P<word>yes|no)\b", re.I)
_KEYWORD = re.compile(r"\b(?P<word>abnormal|normal)\b", re.I)
_FINAL_LABEL = re.compile(r"[\"']?final[_\\ ]*label[\"']?\s*[:=]\s*[\"']?(?P<value>yes|no)\b", re.I)


def _as_text(model_text: str | bytes | None) -> str:
    if model_text is None:
        return ""
    if isinstance(model_text, bytes):
        return model_text.decode("utf-8", errors="replace")
    return str(model_text)


def _from_event(text: str, m: re.Match, groups: Sequence[str] | None) -> tuple[str, str | None, str]:
    decision = m.group("kind").lower()
    tail = text[m.end():]
    group = None
    arrow = _ARROW.match(tail)
    if arrow and decision == "abnormal":
        rest = tail[arrow.end():]
        end = _GROUP_END.search(rest)
        raw_group = rest[: end.start()] if end else rest
        tail = rest[end.end():] if end else ""
        group = raw_group.strip().strip("[]*_\"'").strip() or None
        if group and groups:
            lookup = {g.casefold(): g for g in groups}
            group = lookup.get(group.casefold(), group)
    elif arrow:
        tail = tail[arrow.end():]
    rationale = tail.lstrip(" .:;,-").strip()
    return decision, group, rationale


def _json_label(text: str) -> tuple[str | None, bool]:
    """(decision, whole_text_is_json) from a ``final_label`` field."""
    stripped = text.strip()
    fenced = re.fullmatch(r"```(?:json)?\s*(.*?)\s*```", stripped, re.S)
    candidate = fenced.group(1) if fenced else stripped
    try:
        obj = json.loads(candidate)
    except (ValueError, RecursionError):
        obj = None
    if isinstance(obj, dict):
        for k, v in obj.items():
            if str(k).lower().replace(" ", "_") == "final_label" and isinstance(v, str):
                word = v.strip().lower()
                if word in ("yes", "no"):
                    return ("abnormal" if word == "yes" else "normal"), fenced is None
    m = _FINAL_LABEL.search(text)
    if m:
        return ("abnormal" if m.group("value").lower() == "yes" else "normal"), False
    return None, False


def parse_verdict(
    video_id: str,
    model_text: str | bytes | None,
    mode: PromptMode | str = "askhint",
    groups: Sequence[str] | None = None,
) -> Verdict:
    """Never raises; parse quality is reported in ``parse_status``.

    Clean parses: the answer opens with the expected form (``Normal Event.`` /
    ``Abnormal Event → <Group>.``; ``Yes``/``No`` for abstract and class-label
    prompts; a bare JSON ``final_label`` object for the full pool). Otherwise
    the first event phrase anywhere, then a ``final_label`` field, then the
    first yes/no (Yes/No prompts only), then the first "abnormal"/"normal"
    keyword are tried, marked ``recovered``. Nothing found: ``failed``,
    decision normal, score 0.
    """
    kind = mode.kind if isinstance(mode, PromptMode) else str(mode).partition(":")[0]
    text = _as_text(model_text)

    def make(decision: str, group: str | None, rationale: str, status: str) -> Verdict:
        score = 1.0 if decision == "abnormal" and status != "failed" else 0.0
        return Verdict(video_id, decision, group, rationale, score, text, status)

    try:
        body = _LEAD.sub("", text, count=1)
        if kind == "full_pool":
            decision, whole = _json_label(text)
            if decision:
                return make(decision, None, "", "clean" if whole else "recovered")
        elif kind in ("abstract", "class_label"):
            m = re.match(r"(?P<word>yes|no)\b[\s.,:;!\-]*", body, re.I)
            if m:
                decision = "abnormal" if m.group("word").lower() == "yes" else "normal"
                return make(decision, None, body[m.end():].strip(), "clean")
        else:
            m = _EVENT.match(body)
            if m:
                return make(*_from_event(body, m, groups), "clean")

        m = _EVENT.search(text)
        if m:
            return make(*_from_event(text, m, groups), "recovered")
        decision, _ = _json_label(text)
        if decision:
            return make(decision, None, "", "recovered")
        if kind in ("abstract", "class_label"):
            m = _YESNO.search(text)
            if m:
                decision = "abnormal" if m.group("word").lower() == "yes" else "normal"
                return make(decision, None, text[m.end():].strip(" .:;,-\n"), "recovered")
        m = _KEYWORD.search(text)
        if m:
            return make(m.group("word").lower(), None, text.strip(), "recovered")
    except Exception:  # parser must never take a batch down
        log.exception("parser error on video %s", video_id)
    return make("normal", None, "", "failed")


def verdict_to_score(verdict: Verdict, rule: str = "binary", token_logprobs: list[dict] | None = None) -> float:
    """Binary: abnormal 1.0, normal 0.0, failed parse 0.0.

    Confidence: normalised probability mass of abnormal-leaning tokens ("Ab...",
    "Yes") against normal-leaning ones ("Normal", "No") at the first generated
    position where either appears; binary when the backend gave no likelihoods.
    """
    if rule not in SCORE_RULES:
        raise ValueError(f"unknown score rule {rule!r}")
    if verdict.parse_status == "failed":
        return 0.0
    binary = 1.0 if verdict.decision == "abnormal" else 0.0
    if rule == "binary" or not token_logprobs:
        return binary
    for entry in token_logprobs[:32]:
        candidates = entry.get("top") or {entry.get("token", ""): entry.get("logprob", 0.0)}
        p_abn = p_norm = 0.0
        for token, lp in candidates.items():
            t = token.strip().strip("\"'{}:,").lower()
            if not t:
                continue
            if t.startswith(("ab", "yes")):
                p_abn += math.exp(lp)
            elif t.startswith(("normal", "no")):
                p_norm += math.exp(lp)
        if p_abn + p_norm > 0:
            return p_abn / (p_abn + p_norm)
    return binary


# --- running --------------------------------------------------------------------------


@dataclass
class InferenceConfig:
    model_id: str = "Qwen2.5-VL-7B-Instruct"
    max_frames: int = 128
    decoding: Decoding = field(default_factory=Decoding)
    score_rule: str = "binary"
    # class_label mode without a target asks once per class; abnormal if any answer is Yes
    class_label_targets: list[str] | None = None
    window_s: float | None = None
    stride_s: float | None = None

    def __post_init__(self) -> None:
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        if self.score_rule not in SCORE_RULES:
            raise ValueError(f"unknown score rule {self.score_rule!r}")
        if (self.window_s is None) != (self.stride_s is None):
            raise ValueError("window_s and stride_s go together")


def _windows(record: VideoRecord, window_s: float, stride_s: float) -> list[VideoRecord]:
    n = len(record.frames)
    fps = record.fps_native or (n / record.duration_s if record.duration_s else 1.0)
    per_window = max(1, int(round(window_s * fps)))
    step = max(1, int(round(stride_s * fps)))
    starts = list(range(0, max(1, n - per_window + 1), step))
    if starts[-1] + per_window < n:
        starts.append(n - per_window)
    return [
        VideoRecord(record.video_id, record.label, record.class_name, record.frames[s:s + per_window], None, record.fps_native)
        for s in starts
    ]


def _single_call(
    client: VLMClient, record: VideoRecord, mode: PromptMode, qset, config: InferenceConfig
) -> Verdict:
    frames = sample_frames(record, config.max_frames)
    prompt = render_inference_prompt(mode, qset)
    request = ChatRequest(config.model_id, prompt, tuple(frames), config.decoding, video_id=record.video_id)
    try:
        response = client.chat(request)
    except BackendError as exc:
        exc.video_id = record.video_id
        raise
    groups = qset.group_names if isinstance(qset, CompactPromptSet) else None
    verdict = parse_verdict(record.video_id, response.text, mode, groups)
    verdict.score = verdict_to_score(verdict, config.score_rule, response.token_logprobs)
    verdict.prompt_hash = prompt_hash(prompt)
    verdict.model_id = config.model_id
    return verdict


def _combine(video_id: str, parts: list[tuple[str, Verdict]]) -> Verdict:
    """Any-abnormal aggregation over sub-queries (classes or windows)."""
    order = {"clean": 0, "recovered": 1, "failed": 2}
    hits = [(tag, v) for tag, v in parts if v.decision == "abnormal"]
    first = hits[0] if hits else None
    return Verdict(
        video_id=video_id,
        decision="abnormal" if hits else "normal",
        group=(first[1].group or first[0]) if first else None,
        rationale=first[1].rationale if first else parts[0][1].rationale,
        score=max(v.score for _, v in parts),
        raw_text="\n".join(f"[{tag}] {v.raw_text}" for tag, v in parts),
        parse_status=max((v.parse_status for _, v in parts), key=order.__getitem__),
        prompt_hash=prompt_hash("|".join(v.prompt_hash for _, v in parts)),
        model_id=parts[0][1].model_id,
    )


def infer_video(
    client: VLMClient,
    record: VideoRecord,
    mode: PromptMode,
    qset: CompactPromptSet | PromptPool | None,
    config: InferenceConfig,
) -> Verdict:
    """sample -> render -> chat -> parse -> score for one video. Raises BackendError."""
    if mode.kind == "class_label" and mode.target is None:
        targets = config.class_label_targets
        if not targets:
            if isinstance(qset, PromptPool):
                targets = qset.classes
            else:
                raise ModeSetMismatch("class_label mode needs a target or class_label_targets")
        parts = [(t, infer_video(client, record, PromptMode("class_label", t), qset, config)) for t in targets]
        return _combine(record.video_id, parts)
    if config.window_s is not None:
        windows = _windows(record, config.window_s, config.stride_s)
        if len(windows) > 1:
            unwindowed = InferenceConfig(**{**config.__dict__, "window_s": None, "stride_s": None})
            parts = [
                (f"window {i}", _single_call(client, w, mode, qset, unwindowed)) for i, w in enumerate(windows)
            ]
            return _combine(record.video_id, parts)
    return _single_call(client, record, mode, qset, config)


def backend_failure(record: VideoRecord, exc: BackendError, config: InferenceConfig) -> Verdict:
    return Verdict(
        video_id=record.video_id,
        decision="normal",
        group=None,
        rationale="",
        score=0.0,
        raw_text="",
        parse_status="failed",
        prompt_hash="",
        model_id=config.model_id,
        error=f"{type(exc).__name__}: {exc}",
    )


def infer_batch(
    client: VLMClient,
    records: Sequence[VideoRecord],
    mode: PromptMode,
    qset: CompactPromptSet | PromptPool | None,
    config: InferenceConfig,
    concurrency: int = 4,
) -> list[Verdict]:
    """Verdicts in manifest order; backend failures become failed verdicts."""

    def run(record: VideoRecord) -> Verdict:
        try:
            return infer_video(client, record, mode, qset, config)
        except BackendError as exc:
            log.warning("video %s failed after retries: %s", record.video_id, exc)
            return backend_failure(record, exc, config)

    if concurrency <= 1:
        return [run(r) for r in records]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(run, records))


def dumps_verdicts(verdicts: Sequence[Verdict]) -> str:
    return "".join(json.dumps(v.to_dict(), ensure_ascii=False) + "\n" for v in verdicts)


def write_verdicts(verdicts: Sequence[Verdict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_verdicts(verdicts), encoding="utf-8")


def read_verdicts(path: str | Path) -> list[Verdict]:
    path = Path(path)
    if not path.is_file():
        raise MalformedFile(f"verdicts file not found: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Verdict.from_dict(json.loads(line)))
            except (ValueError, TypeError, AttributeError) as exc:
                raise MalformedFile(f"bad verdict record: {exc}", lineno) from exc
    return out
