"""Class-wise pool of fine-grained Yes/No guiding questions.

The pool maps each anomaly class to a short list of action-centric questions.
It can be produced by a model (``render_generation_metaprompt`` +
``parse_generated_pool``), stored as a diff-friendly text file, and rendered as
the monolithic "answer everything" baseline prompt.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import EmptyClassList, MalformedFile, MissingClass, NoQuestions

# list markers a model may put in front of a question: "1.", "2)", "-", "*", "Q3:", "(a)"
_LIST_MARKER = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|\(?[a-zA-Z][.)]|Q\d+\s*[:.)])\s*")
_MARKDOWN = re.compile(r"[*_`#]+")

_NUMBER_WORDS = {1: "ONE", 2: "TWO", 3: "THREE", 4: "FOUR", 5: "FIVE", 6: "SIX"}


def normalize_name(name: str) -> str:
    """Case-fold and collapse internal whitespace for class-name matching."""
    return " ".join(name.split()).casefold()


def normalize_question(text: str) -> str:
    text = _LIST_MARKER.sub("", text.strip(), count=1)
    text = _MARKDOWN.sub("", text).strip()
    text = " ".join(text.split())
    if text and not text.endswith("?"):
        text = text.rstrip(".;:,") + "?"
    return text


@dataclass(frozen=True)
class GuidingQuestion:
    text: str
    source_class: str = ""

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("question text is empty")
        if not self.text.rstrip().endswith("?"):
            raise ValueError(f"question must end with '?': {self.text!r}")


@dataclass
class PromptPool:
    classes: list[str]
    questions: dict[str, list[GuidingQuestion]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for name in self.classes:
            key = normalize_name(name)
            if key in seen:
                raise MalformedFile(f"duplicate class {name!r}")
            seen.add(key)
            if not self.questions.get(name):
                raise NoQuestions(name)

    @classmethod
    def from_dict(cls, mapping: dict[str, list[str]]) -> PromptPool:
        return cls(
            classes=list(mapping),
            questions={c: [GuidingQuestion(normalize_question(q), c) for q in qs] for c, qs in mapping.items()},
        )

    def to_dict(self) -> dict[str, list[str]]:
        return {c: [q.text for q in self.questions[c]] for c in self.classes}

    def flat(self) -> list[GuidingQuestion]:
        return [q for c in self.classes for q in self.questions[c]]

    def subset(self, classes: list[str]) -> PromptPool:
        wanted = {normalize_name(c) for c in classes}
        keep = [c for c in self.classes if normalize_name(c) in wanted]
        missing = wanted - {normalize_name(c) for c in keep}
        if missing:
            raise MissingClass(sorted(missing)[0])
        return PromptPool(keep, {c: list(self.questions[c]) for c in keep})

    def __len__(self) -> int:
        return sum(len(v) for v in self.questions.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PromptPool):
            return NotImplemented
        return self.to_dict() == other.to_dict() and list(self.classes) == list(other.classes)


def render_generation_metaprompt(classes: list[str], min_q: int = 3, max_q: int = 5) -> str:
    """Meta-prompt asking a model to write ``min_q``-``max_q`` questions per class.

    Step 2 (grouping) is included so a single transcript can serve both stages,
    but only the Step 1 block is consumed by :func:`parse_generated_pool`.
    """
    if not classes:
        raise EmptyClassList()
    if not 1 <= min_q <= max_q:
        raise ValueError(f"need 1 <= min_q <= max_q, got {min_q}, {max_q}")
    count = f"{min_q}-{max_q}" if min_q != max_q else str(min_q)
    class_lines = "\n".join(f"- {c}" for c in classes)
    return (
        "You are an expert in video anomaly detection using Vision-Language Models.\n"
        "Your task has two steps:\n"
        "\n"
        "Step 1: Generate class-specific guiding questions\n"
        f"For each anomaly class in the list, generate {count} short, Yes/No guiding questions.\n"
        "- The questions must be action-centric and context-aware (e.g., \"Do you see people fighting?\").\n"
        "- They should help a model distinguish the target anomaly class from others and from ordinary scenes.\n"
        "- Output each class with its list of questions, using the class name as a header line "
        "followed by a numbered list.\n"
        "\n"
        "Anomaly Classes:\n"
        f"{class_lines}\n"
        "\n"
        "Step 2: Summarize and Conclude\n"
        "Your task is to summarize and group these guiding questions into a compact set.\n"
        "Steps:\n"
        "1. Read all the class-specific guiding questions.\n"
        "2. Cluster them into major groups based on similar actions or themes.\n"
        "3. For each group, summarize the questions and generate 2-3 generalized guiding questions "
        "in Yes/No format, capturing the common patterns from the original class prompts.\n"
        "4. Avoid vague words like \"abnormal\" - use action- or object-specific terms "
        "(e.g., \"fighting,\" \"stealing,\" \"breaking,\" \"explosion\").\n"
        "5. Provide a compact final set of grouped guiding questions.\n"
    )


def _match_header(line: str, lookup: dict[str, str]) -> str | None:
    """Return the canonical class name if ``line`` is a class header."""
    stripped = _MARKDOWN.sub("", line).strip()
    stripped = re.sub(r"^\(?\d+[.)]\s*", "", stripped)
    stripped = re.sub(r"^(?:class|anomaly class)\s*[:\-]\s*", "", stripped, flags=re.I)
    stripped = stripped.rstrip(":").strip()
    return lookup.get(normalize_name(stripped))


def parse_generated_pool(model_text: str, expected_classes: list[str]) -> PromptPool:
    """Parse a model's per-class question listing.

    A header is any line naming an expected class (markdown, numbering and a
    trailing colon are tolerated). Following lines count as questions when they
    carry a list marker or end with "?"; other prose is skipped. Parsing stops
    at a "Step 2" or "Grouped Guiding Questions" heading.
    """
    if not model_text or not model_text.strip():
        raise MalformedFile("model text is empty")
    if not expected_classes:
        raise EmptyClassList()
    lookup = {normalize_name(c): c for c in expected_classes}
    found: dict[str, list[GuidingQuestion]] = {}
    current: str | None = None
    for raw in model_text.splitlines():
        line = raw.strip()
        if not line:
            continue
        plain = _MARKDOWN.sub("", line).strip().casefold()
        if plain.startswith("step 2") or plain.startswith("grouped guiding questions"):
            break
        header = _match_header(line, lookup)
        if header is not None:
            current = header
            found.setdefault(current, [])
            continue
        if current is None:
            continue
        if not (_LIST_MARKER.match(line) or line.endswith("?")):
            continue
        text = normalize_question(line)
        if text and text != "?":
            found[current].append(GuidingQuestion(text, current))
    for name in expected_classes:
        if name not in found:
            raise MissingClass(name)
        if not found[name]:
            raise NoQuestions(name)
    return PromptPool(list(expected_classes), {c: found[c] for c in expected_classes})


def dumps_pool(pool: PromptPool) -> str:
    lines: list[str] = []
    for name in pool.classes:
        if lines:
            lines.append("")
        lines.append(f"## {name}")
        lines.extend(q.text for q in pool.questions[name])
    return "\n".join(lines) + "\n"


def save_pool(pool: PromptPool) -> bytes:
    return dumps_pool(pool).encode("utf-8")


def load_pool(data: bytes | str) -> PromptPool:
    """Strict reader for the ``## <Class>`` text format."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    classes: list[str] = []
    questions: dict[str, list[GuidingQuestion]] = {}
    seen: set[str] = set()
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#!"):
            continue
        if line.startswith("## "):
            name = line[3:].strip()
            if not name:
                raise MalformedFile("empty class header", lineno)
            if normalize_name(name) in seen:
                raise MalformedFile(f"duplicate class header {name!r}", lineno)
            seen.add(normalize_name(name))
            classes.append(name)
            questions[name] = []
            current = name
            continue
        if current is None:
            raise MalformedFile("question before any '## <Class>' header", lineno)
        try:
            questions[current].append(GuidingQuestion(normalize_question(line), current))
        except ValueError as exc:
            raise MalformedFile(str(exc), lineno) from exc
    if not classes:
        raise MalformedFile("no class headers found")
    for name in classes:
        if not questions[name]:
            raise NoQuestions(name)
    return PromptPool(classes, questions)


def write_pool(pool: PromptPool, path: str | Path) -> Path:
    """Write the text file plus a ``.json`` mirror next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_pool(pool))
    path.with_suffix(".json").write_text(json.dumps(pool.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_pool(path: str | Path) -> PromptPool:
    path = Path(path)
    if path.suffix == ".json":
        return PromptPool.from_dict(json.loads(path.read_text(encoding="utf-8")))
    return load_pool(path.read_bytes())


def render_full_pool_prompt(pool: PromptPool) -> str:
    """Monolithic baseline: every class and question, strict JSON answer."""
    n = len(pool.classes)
    sizes = {len(pool.questions[c]) for c in pool.classes}
    if len(sizes) == 1:
        k = sizes.pop()
        how_many = f"{_NUMBER_WORDS.get(k, str(k))} class-specific diagnostic questions"
        qrange = f"Q1-Q{k}"
    else:
        how_many = "ALL of its class-specific diagnostic questions"
        qrange = "its questions"
    blocks = []
    for i, name in enumerate(pool.classes, start=1):
        qs = "\n".join(f"Q{j}: {q.text}" for j, q in enumerate(pool.questions[name], start=1))
        blocks.append(f"{i}) {name}\n{qs}")
    body = "\n\n".join(blocks)
    return (
        "You are analyzing ONE surveillance video.\n"
        f"For EACH of the {n} classes below, answer {how_many} with \"Yes\" or \"No\". "
        "Then give a short reason (<12 words) and a confidence score in [0,1] for that class's "
        "overall decision (\"answer\": Yes/No).\n"
        "Finally, output the final answer on whether there is an anomaly event. Answering \"yes\" or \"no\".\n"
        "\n"
        "CLASSES AND QUESTIONS\n"
        "\n"
        f"{body}\n"
        "\n"
        "OUTPUT FORMAT (STRICT):\n"
        "Return ONLY raw JSON (no markdown, no extra text) with this schema:\n"
        "{\n"
        "  \"final_label\": \"Yes\" or \"no\"\n"
        "}\n"
        "\n"
        "RULES:\n"
        f"- Evaluate ALL {n} classes and ALL their questions.\n"
        f"- \"answer\" is your overall Yes/No for that class, consistent with {qrange}.\n"
        "- Confidence reflects visual evidence strength for that class.\n"
        "- Keep reasons short (<12 words).\n"
        "- Output valid JSON only.\n"
    )


PRESETS = {
    "ucf_crime_q": "ucf_crime_q.txt",
    "ucf_crime_qstar": "ucf_crime_qstar.txt",
    "xd_violence_qstar": "xd_violence_qstar.txt",
}


def preset_text(name: str) -> str:
    filename = PRESETS.get(name, name)
    return resources.files("vadprompt").joinpath("presets", filename).read_text(encoding="utf-8")


def load_preset_pool(name: str = "ucf_crime_q") -> PromptPool:
    return load_pool(preset_text(name))


UCF_CRIME_CLASSES = [
    "Abuse",
    "Arrest",
    "Arson",
    "Assault",
    "Burglary",
    "Explosion",
    "Fighting",
    "Road Accidents",
    "Robbery",
    "Shooting",
    "Shoplifting",
    "Stealing",
    "Vandalism",
]

# classes picked as representatives of each similarity cluster for cross-class transfer
UCF_SEEN_CLASSES = ["Arson", "Road Accidents", "Explosion", "Robbery", "Arrest", "Assault", "Stealing"]
