"""Compress a class-wise question pool into a small grouped question set.

Two routes produce a :class:`CompactPromptSet`:

* ``vlm``: render a grouping/summarising meta-prompt, send it to a model and
  parse the "Group N: <name>" answer (:func:`render_compression_metaprompt`,
  :func:`parse_compact_set`).
* ``embedding``: average question embeddings per class, build the class cosine
  similarity matrix, cluster it agglomeratively and keep the questions closest
  to each cluster centroid (:func:`compress_by_embedding`).

:func:`select_random_subset` is the random baseline for budget ablations.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import rng
from .errors import (
    BudgetOutOfRange,
    DimensionMismatch,
    GroupSizeViolation,
    InvalidStop,
    MalformedFile,
    MissingEmbedding,
    NoGroupsFound,
)
from .prompt_pool import _LIST_MARKER, _MARKDOWN, GuidingQuestion, PromptPool, normalize_name, normalize_question

log = logging.getLogger(__name__)

ORIGINS = ("vlm_summarized", "random_subset", "preset", "manual", "embedding_selected")
LINKAGES = ("average", "complete", "single")
NORMAL_CLASS_NAMES = {"normal", "normal event", "normal events"}


@dataclass
class QuestionGroup:
    name: str
    questions: list[GuidingQuestion]
    classes: list[str] = field(default_factory=list)


@dataclass
class CompactPromptSet:
    groups: list[QuestionGroup]
    origin: str = "manual"
    summary: str = ""

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if not self.groups:
            raise NoGroupsFound()
        for g in self.groups:
            n = len(g.questions)
            if n < 1 or (self.origin == "vlm_summarized" and not 2 <= n <= 3):
                raise GroupSizeViolation(g.name, n)

    @property
    def questions(self) -> list[GuidingQuestion]:
        return [q for g in self.groups for q in g.questions]

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    def __len__(self) -> int:
        return len(self.questions)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "summary": self.summary,
            "groups": [
                {"name": g.name, "classes": list(g.classes), "questions": [q.text for q in g.questions]}
                for g in self.groups
            ],
        }


def without_normal(pool: PromptPool) -> PromptPool:
    """Drop the "Normal Event" block; compression only groups anomaly classes."""
    keep = [c for c in pool.classes if normalize_name(c) not in NORMAL_CLASS_NAMES]
    return PromptPool(keep, {c: pool.questions[c] for c in keep})


# --- embeddings and similarity -------------------------------------------------------


def average_class_embedding(
    pool: PromptPool, per_question_embeddings: Mapping[str, Sequence[float]]
) -> dict[str, np.ndarray]:
    """Component-wise mean of each class's question embeddings (keyed by question text)."""
    dim: int | None = None
    out: dict[str, np.ndarray] = {}
    for name in pool.classes:
        vecs = []
        for q in pool.questions[name]:
            if q.text not in per_question_embeddings:
                raise MissingEmbedding(q.text)
            v = np.asarray(per_question_embeddings[q.text], dtype=float)
            if v.ndim != 1:
                raise DimensionMismatch(f"embedding for {q.text!r} is not a vector")
            if dim is None:
                dim = v.shape[0]
            elif v.shape[0] != dim:
                raise DimensionMismatch(f"expected dimension {dim}, got {v.shape[0]} for {q.text!r}")
            vecs.append(v)
        out[name] = np.mean(np.stack(vecs), axis=0)
    return out


@dataclass
class ClassSimilarityMatrix:
    class_names: list[str]
    values: np.ndarray
    zero_norm: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", *self.class_names])
        for name, row in zip(self.class_names, self.values):
            writer.writerow([name, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()


def cosine_similarity_matrix(class_embeddings: Mapping[str, Sequence[float]]) -> ClassSimilarityMatrix:
    """Pairwise cosine similarity, class order preserved.

    Zero-norm vectors get similarity 0 to everything else and 1 to themselves.
    Each pair is computed once and mirrored so the matrix is exactly symmetric.
    """
    names = list(class_embeddings)
    if len(names) < 2:
        raise ValueError("need at least two classes")
    vecs = [np.asarray(class_embeddings[n], dtype=float) for n in names]
    if len({v.shape for v in vecs}) != 1:
        raise DimensionMismatch("class embeddings differ in dimension")
    if not all(np.all(np.isfinite(v)) for v in vecs):
        raise ValueError("non-finite embedding entries")
    norms = [math.sqrt(float(np.dot(v, v))) for v in vecs]
    zero = [names[i] for i, nv in enumerate(norms) if nv == 0.0]
    if zero:
        log.warning("zero-norm class embeddings, similarity set to 0: %s", ", ".join(zero))
    n = len(names)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                s = 0.0
            else:
                s = float(np.dot(vecs[i], vecs[j])) / (norms[i] * norms[j])
                s = min(1.0, max(-1.0, s))
            sim[i, j] = sim[j, i] = s
    return ClassSimilarityMatrix(names, sim, zero)


# --- agglomerative clustering ---------------------------------------------------------


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass
class Dendrogram:
    labels: list[str]
    merges: list[Merge]

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "merges": [{"left": m.left, "right": m.right, "height": m.height, "size": m.size} for m in self.merges],
            "newick": self.to_newick(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_newick(self) -> str:
        n = len(self.labels)
        heights = {i: 0.0 for i in range(n)}
        children: dict[int, tuple[int, int]] = {}
        for k, m in enumerate(self.merges):
            heights[n + k] = m.height
            children[n + k] = (m.left, m.right)

        def name(i: int) -> str:
            label = self.labels[i]
            if re.search(r"[\s(),:;'\[\]]", label):
                return "'" + label.replace("'", "''") + "'"
            return label

        def render(node: int, parent_height: float) -> str:
            length = f":{parent_height - heights[node]:.6f}"
            if node < n:
                return name(node) + length
            a, b = children[node]
            return f"({render(a, heights[node])},{render(b, heights[node])})" + length

        if not self.merges:
            return ",".join(name(i) for i in range(n)) + ";"
        root = n + len(self.merges) - 1
        a, b = children[root]
        return f"({render(a, heights[root])},{render(b, heights[root])});"

    def cophenetic(self) -> np.ndarray:
        """Merge height at which each pair of leaves first shares a cluster."""
        n = len(self.labels)
        members: dict[int, list[int]] = {i: [i] for i in range(n)}
        out = np.zeros((n, n))
        for k, m in enumerate(self.merges):
            for a in members[m.left]:
                for b in members[m.right]:
                    out[a, b] = out[b, a] = m.height
            members[n + k] = members.pop(m.left) + members.pop(m.right)
        return out


def agglomerative_cluster(
    matrix: ClassSimilarityMatrix,
    linkage: str = "average",
    k: int | None = None,
    threshold: float | None = None,
) -> tuple[dict[str, int], Dendrogram]:
    """Bottom-up clustering on distance ``1 - similarity``.

    The full dendrogram (n-1 merges) is always built; the returned assignment
    is the state after the first ``n - k`` merges, or after every merge whose
    height is <= ``threshold``. Equal merge distances are resolved by the
    lexicographically smallest pair of (smallest member name) keys, which makes
    the result independent of input order. Linkage distances are recomputed
    from the original pairwise distances in name order for the same reason.

    Cluster ids in the assignment are numbered by their smallest member name.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    names = list(matrix.class_names)
    n = len(names)
    if (k is None) == (threshold is None):
        raise InvalidStop("give exactly one of k or threshold")
    if k is not None and not 1 <= k <= n:
        raise InvalidStop(f"k={k} outside [1, {n}]")
    dist = 1.0 - np.asarray(matrix.values, dtype=float)

    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    # members sorted by name so reductions run in an order-independent sequence
    def key(cid: int) -> str:
        return names[clusters[cid][0]]

    def linkage_distance(a: int, b: int) -> float:
        if key(a) > key(b):
            a, b = b, a
        values = [dist[i, j] for i in clusters[a] for j in clusters[b]]
        if linkage == "average":
            # correctly rounded mean: equal inputs give back that value bit for bit
            return float(sum(map(Fraction, values)) / len(values))
        if linkage == "complete":
            return max(values)
        return min(values)

    pair_dist: dict[tuple[int, int], float] = {}
    for a in range(n):
        for b in range(a + 1, n):
            pair_dist[(a, b)] = linkage_distance(a, b)

    merges: list[Merge] = []
    next_id = n
    while len(clusters) > 1:
        best = min(pair_dist, key=lambda p: (pair_dist[p], tuple(sorted((key(p[0]), key(p[1]))))))
        a, b = best
        if key(a) > key(b):
            a, b = b, a
        height = pair_dist[best]
        merged = sorted(clusters[a] + clusters[b], key=lambda i: names[i])
        merges.append(Merge(a, b, height, len(merged)))
        del clusters[a], clusters[b]
        pair_dist = {p: d for p, d in pair_dist.items() if a not in p and b not in p}
        clusters[next_id] = merged
        for other in clusters:
            if other != next_id:
                pair_dist[(other, next_id)] = linkage_distance(other, next_id)
        next_id += 1

    if k is not None:
        n_merges = n - k
    else:
        n_merges = 0
        for m in merges:
            if m.height > threshold:
                break
            n_merges += 1

    groups: dict[int, list[int]] = {i: [i] for i in range(n)}
    for step, m in enumerate(merges[:n_merges]):
        groups[n + step] = groups.pop(m.left) + groups.pop(m.right)
    ordered = sorted(groups.values(), key=lambda members: min(names[i] for i in members))
    assignment = {names[i]: cid for cid, members in enumerate(ordered) for i in members}
    return assignment, Dendrogram(names, merges)


def clusters_from_assignment(assignment: Mapping[str, int], order: Sequence[str]) -> list[list[str]]:
    groups: dict[int, list[str]] = {}
    for name in order:
        groups.setdefault(assignment[name], []).append(name)
    return [groups[c] for c in sorted(groups)]


def compress_by_embedding(
    pool: PromptPool,
    embed: Callable[[list[str]], list[np.ndarray]],
    k: int | None = 3,
    threshold: float | None = None,
    linkage: str = "average",
    per_group: int = 2,
) -> tuple[CompactPromptSet, ClassSimilarityMatrix, Dendrogram]:
    """Offline route: cluster classes, keep the ``per_group`` questions nearest each centroid."""
    texts = list(dict.fromkeys(q.text for q in pool.flat()))
    vectors = embed(texts)
    by_text = dict(zip(texts, (np.asarray(v, dtype=float) for v in vectors)))
    class_vecs = average_class_embedding(pool, by_text)
    matrix = cosine_similarity_matrix(class_vecs)
    assignment, dendrogram = agglomerative_cluster(matrix, linkage=linkage, k=k, threshold=threshold)
    groups = []
    for members in clusters_from_assignment(assignment, pool.classes):
        centroid = np.mean([class_vecs[c] for c in members], axis=0)
        cnorm = float(np.linalg.norm(centroid))
        candidates: list[tuple[float, str, GuidingQuestion]] = []
        seen: set[str] = set()
        for c in members:
            for q in pool.questions[c]:
                if q.text in seen:
                    continue
                seen.add(q.text)
                v = by_text[q.text]
                vn = float(np.linalg.norm(v))
                score = float(np.dot(v, centroid)) / (vn * cnorm) if vn and cnorm else 0.0
                candidates.append((-score, q.text, q))
        candidates.sort(key=lambda t: (t[0], t[1]))
        chosen = [GuidingQuestion(q.text, "") for _, _, q in candidates[:per_group]]
        groups.append(QuestionGroup(" / ".join(members), chosen, list(members)))
    return CompactPromptSet(groups, origin="embedding_selected"), matrix, dendrogram


# --- VLM route ------------------------------------------------------------------------


def render_compression_metaprompt(
    pool: PromptPool, n_groups: int | None = None, total_questions: int | None = None
) -> str:
    """Grouping/summarising meta-prompt over every class block of ``pool``.

    ``total_questions`` forces a budget (used by the question-count ablation);
    ``n_groups`` fixes the number of groups in the output skeleton (default 3).
    """
    blocks = []
    for name in pool.classes:
        qs = "\n".join(f"{i}. {q.text}" for i, q in enumerate(pool.questions[name], start=1))
        blocks.append(f"{name}:\n{qs}")
    skeleton_groups = n_groups or 3
    skeleton = "\n\n".join(f"Group {i}: [Group Name]\n1. ...\n2. ...\n3. ..." for i in range(1, skeleton_groups + 1))
    constraints = []
    if n_groups is not None:
        constraints.append(f"- Use exactly {n_groups} groups.")
    if total_questions is not None:
        constraints.append(
            f"- Produce exactly {total_questions} generalized guiding questions in total across all groups."
        )
    constraint_text = ("\nConstraints:\n" + "\n".join(constraints) + "\n") if constraints else ""
    return (
        "You are an expert in video anomaly detection using Vision-Language Models.\n"
        "Below are class-specific Yes/No guiding questions for each anomaly class.\n"
        "\n"
        "Class-Specific Guiding Questions:\n"
        "\n"
        + "\n\n".join(blocks)
        + "\n\n"
        "Your task is to summarize and group these guiding questions into a compact set.\n"
        "Steps:\n"
        "1. Read all the class-specific guiding questions.\n"
        "2. Cluster them into major groups based on similar actions or themes.\n"
        "3. For each group, summarize the questions and generate 2-3 generalized guiding questions "
        "in Yes/No format, capturing the common patterns from the original class prompts.\n"
        "4. Avoid vague words like \"abnormal\" - use action- or object-specific terms "
        "(e.g., \"fighting,\" \"stealing,\" \"breaking,\" \"explosion\").\n"
        "5. Provide a compact final set of grouped guiding questions.\n"
        f"{constraint_text}"
        "\n"
        "Output Format:\n"
        "\n"
        "Grouped Guiding Questions:\n"
        "\n"
        f"{skeleton}\n"
        "\n"
        "Summary: [One sentence explaining what these grouped guiding questions aim to achieve]\n"
    )


_GROUP_HEADING = re.compile(r"^group\s*(?:\d+)?\s*(?:[:.)\-–—]\s*)?(?P<name>.*)$", re.I)
_CLASSES_LINE = re.compile(r"^(?:classes|members|covers)\s*:\s*(?P<rest>.*)$", re.I)
_ORIGIN_LINE = re.compile(r"^origin\s*:\s*(?P<origin>\w+)\s*$", re.I)
_SUMMARY_LINE = re.compile(r"^summary\s*:\s*(?P<rest>.*)$", re.I)


def parse_compact_set(model_text: str, strict: bool = True, origin: str = "vlm_summarized") -> CompactPromptSet:
    """Parse "Group N: <name>" blocks of numbered questions.

    Strict mode enforces 2-3 questions per group; lenient mode truncates groups
    to 3 and drops empty ones. An ``Origin:`` line overrides ``origin`` (used by
    the canonical file format written by :func:`dumps_compact_set`).
    """
    if not model_text or not model_text.strip():
        raise NoGroupsFound()
    groups: list[QuestionGroup] = []
    summary = ""
    current: QuestionGroup | None = None
    for raw in model_text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if m := _ORIGIN_LINE.match(line):
            origin = m.group("origin").lower()
            continue
        plain = _MARKDOWN.sub("", line).strip()
        if m := _ORIGIN_LINE.match(plain):
            origin = m.group("origin").lower()
            continue
        if m := _SUMMARY_LINE.match(plain):
            summary = m.group("rest").strip()
            current = None
            continue
        if plain.casefold().startswith("grouped guiding questions"):
            continue
        m = _GROUP_HEADING.match(plain)
        if m and not plain.endswith("?"):
            name = m.group("name").strip().strip("[]").strip().rstrip(":").strip()
            current = QuestionGroup(name or f"Group {len(groups) + 1}", [])
            groups.append(current)
            continue
        if current is None:
            continue
        if m := _CLASSES_LINE.match(plain):
            current.classes = [c.strip() for c in m.group("rest").split(",") if c.strip()]
            continue
        if not (_LIST_MARKER.match(line) or line.endswith("?")):
            continue
        text = normalize_question(line)
        if text and text != "?" and text != "...?":
            current.questions.append(GuidingQuestion(text, ""))
    if not groups:
        raise NoGroupsFound()
    if origin not in ORIGINS:
        raise MalformedFile(f"unknown origin {origin!r}")
    enforce = strict and origin == "vlm_summarized"
    if enforce:
        for g in groups:
            if not 2 <= len(g.questions) <= 3:
                raise GroupSizeViolation(g.name, len(g.questions))
    else:
        groups = [g for g in groups if g.questions]
        if origin == "vlm_summarized":
            for g in groups:
                if len(g.questions) > 3:
                    log.warning("group %r has %d questions, keeping the first 3", g.name, len(g.questions))
                    g.questions = g.questions[:3]
            if any(len(g.questions) < 2 for g in groups):
                # a one-question group cannot satisfy the vlm_summarized contract
                origin = "manual"
        if not groups:
            raise NoGroupsFound()
    return CompactPromptSet(groups, origin=origin, summary=summary)


def dumps_compact_set(qset: CompactPromptSet) -> str:
    lines = [f"Origin: {qset.origin}", "Grouped Guiding Questions:"]
    for i, g in enumerate(qset.groups, start=1):
        lines += ["", f"Group {i}: {g.name}"]
        if g.classes:
            lines.append("Classes: " + ", ".join(g.classes))
        lines += [f"{j}. {q.text}" for j, q in enumerate(g.questions, start=1)]
    if qset.summary:
        lines += ["", f"Summary: {qset.summary}"]
    return "\n".join(lines) + "\n"


def loads_compact_set(text: str) -> CompactPromptSet:
    return parse_compact_set(text, strict=True, origin="manual")


def select_random_subset(pool: PromptPool, budget: int, seed: int) -> CompactPromptSet:
    """Uniform draw without replacement from the flattened pool (pinned Philox stream)."""
    flat = pool.flat()
    if not 1 <= budget <= len(flat):
        raise BudgetOutOfRange(f"budget {budget} outside [1, {len(flat)}]")
    picked = sorted(rng.sample_indices(len(flat), budget, seed, "random_subset"))
    questions = [GuidingQuestion(flat[i].text, flat[i].source_class) for i in picked]
    classes = list(dict.fromkeys(q.source_class for q in questions))
    return CompactPromptSet([QuestionGroup("random", questions, classes)], origin="random_subset")


def compress_with_vlm(
    pool: PromptPool,
    ask: Callable[[str], str],
    total_questions: int | None = None,
    n_groups: int | None = None,
    strict: bool = True,
) -> tuple[CompactPromptSet, str]:
    """Send the grouping meta-prompt through ``ask`` and parse the reply.

    Returns the set and the raw transcript (kept for audit and ``--from-text`` replays).
    """
    transcript = ask(render_compression_metaprompt(pool, n_groups=n_groups, total_questions=total_questions))
    return parse_compact_set(transcript, strict=strict), transcript
