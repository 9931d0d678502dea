"""Chat and embedding backends.

``VLMClient`` is what the rest of the package talks to. It wraps one backend
(live HTTP, replay-only, or the scripted oracle used in tests) with a
content-addressed response cache and a bound on in-flight requests.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Protocol

import httpx
import numpy as np
from PIL import Image, UnidentifiedImageError

from . import rng
from .errors import BackendError, CacheMiss, HttpStatus, InputError, MalformedResponse, Timeout, UnknownVideo
from .templates import MARK_COMPRESSION, MARK_GENERATION, class_label_target, prompt_kind

log = logging.getLogger(__name__)

CACHE_FORMAT = 1


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 256
    seed: int | None = 0
    image_max_edge: int = 448
    logprobs: bool = False

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@lru_cache(maxsize=65536)
def _file_digest(path: str, mtime_ns: int, size: int) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def frame_digest(path: str | Path) -> str:
    st = os.stat(path)
    return _file_digest(str(path), st.st_mtime_ns, st.st_size)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    prompt: str
    frames: tuple[Path, ...] = ()
    decoding: Decoding = field(default_factory=Decoding)
    # routing hint for the scripted oracle; deliberately not part of the cache key
    video_id: str | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt is empty")

    def cache_key(self) -> str:
        material = {
            "format": CACHE_FORMAT,
            "model_id": self.model_id,
            "decoding": asdict(self.decoding),
            "prompt_sha256": hashlib.sha256(self.prompt.encode("utf-8")).hexdigest(),
            "frames": [frame_digest(f) for f in self.frames],
        }
        blob = json.dumps(material, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ChatResponse:
    text: str
    # per generated token: {"token", "logprob", "top": {token: logprob}}
    token_logprobs: list[dict[str, Any]] | None = None
    cached: bool = False


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: list[str]) -> list[np.ndarray]: ...


class ResponseCache:
    """Directory of ``<digest>.json`` files; concurrent reads, serialized writes."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        p = self.path(key)
        try:
            record = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            log.warning("ignoring corrupt cache entry %s", p)
            return None
        return ChatResponse(record["text"], record.get("token_logprobs"), cached=True)

    def put(self, key: str, request: ChatRequest, response: ChatResponse) -> None:
        record = {
            "key": key,
            "model_id": request.model_id,
            "prompt_sha256": hashlib.sha256(request.prompt.encode("utf-8")).hexdigest(),
            "n_frames": len(request.frames),
            "text": response.text,
            "token_logprobs": response.token_logprobs,
        }
        data = json.dumps(record, sort_keys=True, indent=1, ensure_ascii=False)
        with self._write_lock:
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, self.path(key))


def encode_frame(path: Path, max_edge: int) -> str:
    """JPEG data URL, longest edge capped at ``max_edge``."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if max(img.size) > max_edge:
                img.thumbnail((max_edge, max_edge))
            buf = io.BytesIO()
            img.save(buf, format="JPEG", quality=90)
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read frame {path}: {exc}") from exc
    return "data:image/jpeg;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


_RETRYABLE = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpBackend:
    """Chat-completions style JSON endpoint (OpenAI-compatible servers, vLLM, TGI...)."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        chat_path: str = "/v1/chat/completions",
        embed_path: str = "/v1/embeddings",
        embed_model: str | None = None,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.http = httpx.Client(base_url=base_url, headers=headers, timeout=timeout, transport=transport)
        self.chat_path = chat_path
        self.embed_path = embed_path
        self.embed_model = embed_model
        self.retries = max(1, retries)
        self.backoff = backoff
        self.sleep = sleep

    def _post(self, path: str, payload: dict, key: str | None) -> dict:
        last: BackendError | None = None
        for attempt in range(self.retries):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.http.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = Timeout(f"timeout after attempt {attempt + 1}: {exc}", cache_key=key)
                continue
            except httpx.TransportError as exc:
                last = BackendError(f"transport error: {exc}", cache_key=key)
                continue
            if resp.status_code >= 400:
                last = HttpStatus(resp.status_code, cache_key=key, body=resp.text[:500])
                if resp.status_code in _RETRYABLE:
                    continue
                raise last
            try:
                return resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"response is not JSON: {exc}", cache_key=key) from exc
        assert last is not None
        raise last

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        d = request.decoding
        content: list[dict] = [
            {"type": "image_url", "image_url": {"url": encode_frame(f, d.image_max_edge)}} for f in request.frames
        ]
        content.append({"type": "text", "text": request.prompt})
        payload: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": d.temperature,
            "max_tokens": d.max_tokens,
        }
        if d.seed is not None:
            payload["seed"] = d.seed
        if d.logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = 5
        body = self._post(self.chat_path, payload, key)
        try:
            choice = body["choices"][0]
            message = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat response shape: {exc!r}", cache_key=key) from exc
        if isinstance(message, list):
            message = "".join(p.get("text", "") for p in message if isinstance(p, dict))
        if not isinstance(message, str):
            raise MalformedResponse("message content is not text", cache_key=key)
        return ChatResponse(message, _parse_logprobs(choice.get("logprobs")))

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("texts is empty")
        payload = {"model": self.embed_model, "input": list(texts)}
        body = self._post(self.embed_path, payload, None)
        try:
            data = sorted(body["data"], key=lambda item: item.get("index", 0))
            vectors = [np.asarray(item["embedding"], dtype=float) for item in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected embedding response shape: {exc!r}") from exc
        if len(vectors) != len(texts) or len({v.shape for v in vectors}) != 1:
            raise MalformedResponse("embedding count or dimension mismatch")
        return vectors


def _parse_logprobs(block: Any) -> list[dict[str, Any]] | None:
    if not isinstance(block, dict) or not isinstance(block.get("content"), list):
        return None
    out = []
    for item in block["content"]:
        try:
            top = {t["token"]: float(t["logprob"]) for t in item.get("top_logprobs") or []}
            out.append({"token": item["token"], "logprob": float(item["logprob"]), "top": top})
        except (KeyError, TypeError, ValueError):
            return None
    return out


class ReplayBackend:
    """Never touches the network; every request must already be cached."""

    def chat(self, request: ChatRequest) -> ChatResponse:
        raise CacheMiss("replay mode: response not in cache", cache_key=request.cache_key())

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        raise CacheMiss("replay mode: embeddings are not cached")


class VLMClient:
    """Cache-first client shared by concurrent inference tasks."""

    def __init__(
        self,
        backend: Backend,
        cache: ResponseCache | None = None,
        max_in_flight: int = 4,
        embedder: Callable[[list[str]], list[np.ndarray]] | None = None,
    ) -> None:
        self.backend = backend
        self.cache = cache
        self.embedder = embedder
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._key_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._memo: dict[str, ChatResponse] = {}
        self.live_calls = 0

    @property
    def replay(self) -> bool:
        return isinstance(self.backend, ReplayBackend)

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        with self._lock_for(key):
            if self.cache is not None:
                hit = self.cache.get(key)
                if hit is not None:
                    return hit
            elif key in self._memo:
                memo = self._memo[key]
                return ChatResponse(memo.text, memo.token_logprobs, cached=True)
            with self._slots:
                self.live_calls += 1
                response = self.backend.chat(request)
            if self.cache is not None:
                self.cache.put(key, request, response)
            else:
                self._memo[key] = response
            return response

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if self.embedder is not None:
            return self.embedder(texts)
        with self._slots:
            return self.backend.embed(texts)


# --- offline test backends ------------------------------------------------------------


_STOPWORDS = frozenset(
    "a an the is are was were be been do does did you see there any or and of to in on at by for with "
    "someone people person their them this that it its as from into out than".split()
)


class HashEmbedder:
    """Deterministic bag-of-words embedder: each word hashes to a Gaussian direction.

    Vectors are unit norm, equal texts map to equal vectors, and texts sharing
    content words land close together, which is enough for offline clustering.
    """

    def __init__(self, dim: int = 64, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed

    @lru_cache(maxsize=8192)
    def _direction(self, token: str) -> np.ndarray:
        v = rng.normals(rng.stream(self.seed, "embed", token), self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, texts: list[str]) -> list[np.ndarray]:
        return self.embed(texts)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("texts is empty")
        out = []
        for text in texts:
            tokens = [t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in _STOPWORDS]
            if not tokens:
                tokens = ["\x00" + text]
            v = np.sum([self._direction(t) for t in tokens], axis=0)
            norm = np.linalg.norm(v)
            out.append(v / norm if norm > 0 else self._direction("\x00" + text))
        return out


_DISTRACTORS_BEFORE = [
    "Let me look at the frames carefully.",
    "I reviewed the sequence of frames from start to end.",
    "The camera shows an indoor scene with several people.",
    "Here is my assessment of the clip.",
    "Looking at the provided frames, I considered each guiding question.",
    "The footage is from a fixed surveillance camera.",
]
_DISTRACTORS_AFTER = [
    "Let me know if you need more detail.",
    "This conclusion is based on the visible evidence.",
    "The lighting makes some details hard to see.",
    "I hope this helps.",
]


@dataclass
class Truth:
    label: str
    class_name: str = ""


class ScriptedOracle:
    """Answers from ground truth, flipping each answer with probability ``flip_p``.

    Flip draws come from a Philox stream keyed by (seed, video id) and, unless
    ``independent_per_prompt`` is off, by the prompt digest too. Mode- and
    class-specific flip rates override ``flip_p`` (class first). The oracle also
    answers the two meta-prompts so offline pipelines can run end to end.
    """

    def __init__(
        self,
        ground_truth: Mapping[str, Truth | str | tuple[str, str]],
        flip_p: float = 0.0,
        seed: int = 0,
        answer_style: str = "canonical",
        mode_flip_p: Mapping[str, float] | None = None,
        class_flip_p: Mapping[str, float] | None = None,
        groups: Mapping[str, str] | None = None,
        independent_per_prompt: bool = True,
    ) -> None:
        if not 0.0 <= flip_p <= 1.0:
            raise ValueError("flip_p must be in [0, 1]")
        if answer_style not in ("canonical", "json", "noisy"):
            raise ValueError(f"unknown answer_style {answer_style!r}")
        self.truth = {vid: _as_truth(t) for vid, t in ground_truth.items()}
        self.flip_p = flip_p
        self.seed = seed
        self.answer_style = answer_style
        self.mode_flip_p = dict(mode_flip_p or {})
        self.class_flip_p = {k.casefold(): v for k, v in (class_flip_p or {}).items()}
        self.groups = {k.casefold(): v for k, v in (groups or {}).items()}
        self.independent_per_prompt = independent_per_prompt

    def chat(self, request: ChatRequest) -> ChatResponse:
        if request.video_id is None:
            if MARK_COMPRESSION in request.prompt and MARK_GENERATION not in request.prompt:
                return ChatResponse(_answer_compression(request.prompt))
            if MARK_GENERATION in request.prompt:
                return ChatResponse(_answer_generation(request.prompt))
            raise MalformedResponse("scripted oracle cannot answer a prompt without a video id")
        truth = self.truth.get(request.video_id)
        if truth is None:
            raise UnknownVideo(request.video_id)
        kind = prompt_kind(request.prompt)
        abnormal = truth.label == "abnormal"
        if kind == "class_label":
            target = class_label_target(request.prompt) or ""
            abnormal = abnormal and " ".join(target.split()).casefold() == " ".join(truth.class_name.split()).casefold()
        p = self.class_flip_p.get(truth.class_name.casefold(), self.mode_flip_p.get(kind, self.flip_p))
        labels = [request.video_id]
        if self.independent_per_prompt:
            labels.append(hashlib.sha256(request.prompt.encode("utf-8")).hexdigest())
        flipped = rng.uniform(rng.stream(self.seed, "oracle", *labels)) < p
        decision = abnormal != flipped
        text = self._render(kind, decision, truth)
        logprobs = None
        if request.decoding.logprobs:
            p_abn = 0.9 if decision else 0.1
            first = "Abnormal" if decision else "Normal"
            logprobs = [
                {
                    "token": first,
                    "logprob": math.log(max(p_abn, 1 - p_abn)),
                    "top": {"Abnormal": math.log(p_abn), "Normal": math.log(1 - p_abn)},
                }
            ]
        return ChatResponse(text, logprobs)

    def _render(self, kind: str, abnormal: bool, truth: Truth) -> str:
        if self.answer_style == "json" or kind == "full_pool":
            return json.dumps({"final_label": "Yes" if abnormal else "no"})
        if kind in ("abstract", "class_label"):
            answer = "Yes. People are fighting near the entrance." if abnormal else "No. People walk calmly."
        elif abnormal:
            group = self.groups.get(truth.class_name.casefold())
            head = f"Abnormal Event → {group}." if group else "Abnormal Event."
            answer = f"{head} A person attacks another and takes their bag."
        else:
            answer = "Normal Event. People walking through a hallway."
        if self.answer_style == "noisy":
            h = int(hashlib.sha256(answer.encode() + str(self.seed).encode()).hexdigest(), 16)
            before = _DISTRACTORS_BEFORE[h % len(_DISTRACTORS_BEFORE)]
            after = _DISTRACTORS_AFTER[(h // 7) % len(_DISTRACTORS_AFTER)]
            answer = f"{before}\n{answer}\n{after}"
        return answer

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return HashEmbedder().embed(texts)


def _as_truth(value: Truth | str | tuple[str, str]) -> Truth:
    if isinstance(value, Truth):
        return value
    if isinstance(value, str):
        return Truth(value)
    return Truth(value[0], value[1])


def _answer_generation(prompt: str) -> str:
    section = prompt.split(MARK_GENERATION, 1)[1]
    classes = []
    for line in section.splitlines()[1:]:
        line = line.strip()
        if not line:
            break
        classes.append(line.lstrip("-* ").strip())
    blocks = []
    for c in classes:
        low = c.lower()
        blocks.append(
            f"{c}:\n1. Do you see {low} taking place?\n2. Is anyone actively involved in {low}?\n"
            f"3. Are there visible traces of {low} in the scene?"
        )
    return "\n\n".join(blocks) + "\n"


def _answer_compression(prompt: str) -> str:
    """Deterministic stand-in for a model summarising the class blocks."""
    body = prompt.split("Class-Specific Guiding Questions:", 1)[-1].split("Your task is", 1)[0]
    classes: list[tuple[str, list[str]]] = []
    for line in body.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.endswith(":") and not line[0].isdigit():
            classes.append((line[:-1], []))
        elif classes:
            classes[-1][1].append(re.sub(r"^\d+\.\s*", "", line))
    m = re.search(r"exactly (\d+) generalized", prompt)
    total = int(m.group(1)) if m else 6
    m = re.search(r"Use exactly (\d+) groups", prompt)
    n_groups = int(m.group(1)) if m else max(math.ceil(total / 3), min(3, total // 2))
    n_groups = max(1, min(n_groups, len(classes), total))
    sizes = [total // n_groups + (1 if i < total % n_groups else 0) for i in range(n_groups)]
    members: list[list[tuple[str, list[str]]]] = [[] for _ in range(n_groups)]
    for i, cls in enumerate(classes):
        members[i % n_groups].append(cls)
    lines = ["Grouped Guiding Questions:", ""]
    for g in range(n_groups):
        names = [c for c, _ in members[g]]
        pool = [q for _, qs in members[g] for q in qs] or [q for _, qs in classes for q in qs]
        lines.append(f"Group {g + 1}: {' and '.join(names[:2])} Cues")
        for j in range(sizes[g]):
            lines.append(f"{j + 1}. {pool[j % len(pool)]}")
        lines.append("")
    lines.append("Summary: Questions grouped by shared actions.")
    return "\n".join(lines) + "\n"


def parse_ground_truth(records: Sequence[Any]) -> dict[str, Truth]:
    """Ground-truth map from manifest records (anything with video_id/label/class_name)."""
    return {r.video_id: Truth(r.label, r.class_name) for r in records}
