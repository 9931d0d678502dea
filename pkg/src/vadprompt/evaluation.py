"""Metrics and experiment harnesses."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .client import ChatRequest, VLMClient
from .compression import (
    CompactPromptSet,
    QuestionGroup,
    compress_by_embedding,
    compress_with_vlm,
    select_random_subset,
    without_normal,
)
from .errors import DegenerateLabels, EmptySeenSet, MissingClass, MissingVerdict, UnknownDataset
from .inference import InferenceConfig, PromptMode, Verdict, infer_batch
from .manifest import VideoRecord
from .prompt_pool import PromptPool, normalize_name

log = logging.getLogger(__name__)


def compute_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC-AUC as the Mann-Whitney statistic, ties credited 0.5.

    Average ranks over the pooled scores; U is the abnormal rank sum minus its
    minimum possible value.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and equally long")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels()
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # tie blocks get the mean of the 1-based ranks they span
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(s)]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_accuracies(
    verdicts: Sequence[Verdict], manifest: Sequence[VideoRecord]
) -> tuple[float | None, float | None]:
    """(crime accuracy, normal accuracy); None where the label is absent."""
    by_id = {v.video_id: v for v in verdicts}
    hits = {"abnormal": 0, "normal": 0}
    totals = {"abnormal": 0, "normal": 0}
    for rec in manifest:
        v = by_id.get(rec.video_id)
        if v is None:
            raise MissingVerdict(rec.video_id)
        totals[rec.label] += 1
        hits[rec.label] += v.decision == rec.label
    crime = hits["abnormal"] / totals["abnormal"] if totals["abnormal"] else None
    normal = hits["normal"] / totals["normal"] if totals["normal"] else None
    return crime, normal


def fingerprint(**parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def config_fingerprint(
    mode: PromptMode, qset: CompactPromptSet | PromptPool | None, config: InferenceConfig, seed: int | None
) -> str:
    if isinstance(qset, CompactPromptSet):
        prompt_set = qset.to_dict()
    elif isinstance(qset, PromptPool):
        prompt_set = qset.to_dict()
    else:
        prompt_set = None
    return fingerprint(
        prompt_set=prompt_set,
        mode=str(mode),
        model_id=config.model_id,
        max_frames=config.max_frames,
        seed=seed,
        decoding=asdict(config.decoding),
        score_rule=config.score_rule,
        class_label_targets=config.class_label_targets,
        window=[config.window_s, config.stride_s],
    )


@dataclass
class EvalConfig:
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    concurrency: int = 4
    seed: int = 0
    auc_level: str = "video"  # "frame" repeats each video's score over its frames

    def __post_init__(self) -> None:
        if self.auc_level not in ("video", "frame"):
            raise ValueError("auc_level must be 'video' or 'frame'")


@dataclass
class EvalReport:
    auc: float | None
    crime_acc: float | None
    normal_acc: float | None
    n_videos: dict[str, int]
    failed_parses: int
    config_fingerprint: str
    per_video: list[Verdict]
    label: str = ""
    backend_errors: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "auc": self.auc,
            "crime_acc": self.crime_acc,
            "normal_acc": self.normal_acc,
            "n_videos": self.n_videos,
            "failed_parses": self.failed_parses,
            "backend_errors": self.backend_errors,
            "config_fingerprint": self.config_fingerprint,
            "notes": self.notes,
            "per_video": [v.to_dict() for v in self.per_video],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def summary_row(self) -> dict:
        return {
            "label": self.label,
            "auc": self.auc,
            "crime_acc": self.crime_acc,
            "normal_acc": self.normal_acc,
            "videos": sum(self.n_videos.values()),
            "failed_parses": self.failed_parses,
        }

    def to_table(self) -> str:
        rows = [
            ("AUC (%)", pct(self.auc)),
            ("Crime Acc (%)", pct(self.crime_acc)),
            ("Normal Acc (%)", pct(self.normal_acc)),
            ("abnormal videos", str(self.n_videos.get("abnormal", 0))),
            ("normal videos", str(self.n_videos.get("normal", 0))),
            ("failed parses", str(self.failed_parses)),
            ("backend errors", str(self.backend_errors)),
            ("fingerprint", self.config_fingerprint[:16]),
        ]
        title = [self.label] if self.label else []
        return "\n".join(title + format_table(["metric", "value"], rows)) + "\n"


def pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return [line(header), line(["-" * w for w in widths]), *(line(r) for r in rows)]


def build_report(
    verdicts: Sequence[Verdict],
    manifest: Sequence[VideoRecord],
    config_fp: str,
    label: str = "",
    auc_level: str = "video",
) -> EvalReport:
    by_id = {v.video_id: v for v in verdicts}
    ordered = []
    for rec in manifest:
        if rec.video_id not in by_id:
            raise MissingVerdict(rec.video_id)
        ordered.append(by_id[rec.video_id])
    crime, normal = compute_accuracies(ordered, manifest)
    counts = {"abnormal": sum(r.label == "abnormal" for r in manifest), "normal": sum(r.label == "normal" for r in manifest)}
    notes = []
    auc = None
    if counts["abnormal"] and counts["normal"]:
        if auc_level == "frame":
            scores = [v.score for v, r in zip(ordered, manifest) for _ in r.frames]
            labels = [r.y for r in manifest for _ in r.frames]
        else:
            scores = [v.score for v in ordered]
            labels = [r.y for r in manifest]
        auc = compute_auc(scores, labels)
    else:
        notes.append("AUC undefined: manifest lacks one of the labels")
    failed = sum(v.parse_status == "failed" for v in ordered)
    errors = sum(bool(v.error) for v in ordered)
    if failed:
        notes.append(f"{failed} verdicts failed to parse and were scored as normal")
    return EvalReport(auc, crime, normal, counts, failed, config_fp, list(ordered), label, errors, notes)


def run_benchmark(
    manifest: Sequence[VideoRecord],
    mode: PromptMode,
    promptset: CompactPromptSet | PromptPool | None,
    client: VLMClient,
    config: EvalConfig,
    label: str = "",
) -> EvalReport:
    if not manifest:
        raise ValueError("manifest is empty")
    verdicts = infer_batch(client, manifest, mode, promptset, config.inference, config.concurrency)
    fp = config_fingerprint(mode, promptset, config.inference, config.seed)
    report = build_report(verdicts, manifest, fp, label or str(mode), config.auc_level)
    if config.inference.score_rule == "confidence" and all(v.score in (0.0, 1.0) for v in verdicts):
        report.notes.append("confidence score rule fell back to binary scores (no token likelihoods)")
    return report


def vlm_asker(client: VLMClient, config: InferenceConfig):
    """Text-only chat call used for meta-prompts."""

    def ask(prompt: str) -> str:
        return client.chat(ChatRequest(config.model_id, prompt, (), config.decoding)).text

    return ask


# --- question-count ablation -------------------------------------------------------------


@dataclass
class AblationRow:
    count: int
    selection: str
    n_questions: int
    auc: float | None
    crime_acc: float | None
    normal_acc: float | None
    fingerprint: str
    backend_errors: int = 0


def run_question_count_ablation(
    pool: PromptPool,
    counts: Sequence[int],
    selection: str,
    manifest: Sequence[VideoRecord],
    client: VLMClient,
    config: EvalConfig,
    seed: int | None = None,
) -> list[AblationRow]:
    """One row per budget. ``selection`` is ``askhint_summarized`` or ``random``.

    Summarised sets come from re-rendering the grouping meta-prompt with the
    budget as a hard question count; random sets draw from the whole pool.
    """
    if selection not in ("askhint_summarized", "random"):
        raise ValueError(f"unknown selection {selection!r}")
    seed = config.seed if seed is None else seed
    rows = []
    for count in counts:
        if selection == "random":
            qset = select_random_subset(pool, count, seed)
        else:
            qset, _ = compress_with_vlm(
                without_normal(pool), vlm_asker(client, config.inference), total_questions=count, strict=False
            )
        report = run_benchmark(manifest, PromptMode("askhint"), qset, client, config, label=f"{selection}@{count}")
        rows.append(
            AblationRow(
                count, selection, len(qset), report.auc, report.crime_acc, report.normal_acc,
                report.config_fingerprint, report.backend_errors,
            )
        )
    return rows


def budget_ablation_csv(rows: Sequence[AblationRow]) -> str:
    """Columns: questions, summarized AUC / Crime Acc, random AUC / Crime Acc (percent)."""
    by = {(r.count, r.selection): r for r in rows}
    counts = sorted({r.count for r in rows})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["questions", "askhint_auc", "askhint_crime_acc", "random_auc", "random_crime_acc"])
    for c in counts:
        a = by.get((c, "askhint_summarized"))
        r = by.get((c, "random"))
        w.writerow([
            c,
            pct(a.auc) if a else "-",
            pct(a.crime_acc) if a else "-",
            pct(r.auc) if r else "-",
            pct(r.crime_acc) if r else "-",
        ])
    return buf.getvalue()


# --- transfer ------------------------------------------------------------------------------


@dataclass
class TransferSpec:
    prompt_source: str
    eval_target: str
    seen_classes: list[str] | None = None


def run_cross_dataset(
    spec: TransferSpec,
    manifests: Mapping[str, Sequence[VideoRecord]],
    promptsets: Mapping[str, CompactPromptSet],
    client: VLMClient,
    config: EvalConfig,
) -> EvalReport:
    """Evaluate the target dataset with the source dataset's grouped questions."""
    if spec.prompt_source not in promptsets:
        raise UnknownDataset(spec.prompt_source)
    if spec.eval_target not in manifests:
        raise UnknownDataset(spec.eval_target)
    label = f"prompts={spec.prompt_source} eval={spec.eval_target}"
    return run_benchmark(
        manifests[spec.eval_target], PromptMode("askhint"), promptsets[spec.prompt_source], client, config, label
    )


def cross_dataset_csv(reports: Mapping[tuple[str, str], EvalReport]) -> str:
    """Rows: evaluation dataset; columns: prompt source. Keys are (source, target)."""
    sources = sorted({s for s, _ in reports})
    targets = sorted({t for _, t in reports})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", *(f"prompts_{s}" for s in sources)])
    for t in targets:
        w.writerow([t, *(pct(reports[(s, t)].auc) if (s, t) in reports else "-" for s in sources)])
    return buf.getvalue()


@dataclass
class CrossClassResult:
    seen_classes: list[str]
    unseen_classes: list[str]
    all_auc: float | None
    seen_acc: float | None
    unseen_acc: float | None
    report: EvalReport
    qset: CompactPromptSet
    baseline: CrossClassResult | None = None

    def to_dict(self) -> dict:
        out = {
            "seen_classes": self.seen_classes,
            "unseen_classes": self.unseen_classes,
            "all_auc": self.all_auc,
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "prompt_set": self.qset.to_dict() if self.qset else None,
            "report": self.report.to_dict(),
        }
        if self.baseline is not None:
            out["abstract_baseline"] = {
                "all_auc": self.baseline.all_auc,
                "seen_acc": self.baseline.seen_acc,
                "unseen_acc": self.baseline.unseen_acc,
                "config_fingerprint": self.baseline.report.config_fingerprint,
            }
        return out


def _split_acc(report: EvalReport, manifest: Sequence[VideoRecord], classes: set[str]) -> float | None:
    by_id = {v.video_id: v for v in report.per_video}
    picked = [r for r in manifest if r.label == "abnormal" and normalize_name(r.class_name) in classes]
    if not picked:
        return None
    return sum(by_id[r.video_id].decision == "abnormal" for r in picked) / len(picked)


def run_cross_class(
    manifest: Sequence[VideoRecord],
    seen_classes: Sequence[str],
    pool: PromptPool,
    client: VLMClient,
    config: EvalConfig,
    compress: str = "vlm",
    embedder=None,
    with_baseline: bool = True,
) -> CrossClassResult:
    """Compress only the seen classes' questions, evaluate on every video.

    Crime accuracy is split into seen-class and unseen-class abnormal videos.
    """
    if not seen_classes:
        raise EmptySeenSet()
    manifest_classes = {normalize_name(r.class_name) for r in manifest if r.label == "abnormal"}
    for c in seen_classes:
        if normalize_name(c) not in manifest_classes:
            raise MissingClass(c)
    seen_pool = without_normal(pool.subset(list(seen_classes)))
    if compress == "embedding":
        qset, _, _ = compress_by_embedding(seen_pool, embedder or client.embed, k=min(3, len(seen_pool.classes)))
    else:
        qset, _ = compress_with_vlm(seen_pool, vlm_asker(client, config.inference), strict=False)
    seen = {normalize_name(c) for c in seen_classes}
    unseen_names = sorted({r.class_name for r in manifest if r.label == "abnormal" and normalize_name(r.class_name) not in seen})

    def result(report: EvalReport, qs) -> CrossClassResult:
        return CrossClassResult(
            seen_classes=list(seen_classes),
            unseen_classes=unseen_names,
            all_auc=report.auc,
            seen_acc=_split_acc(report, manifest, seen),
            unseen_acc=_split_acc(report, manifest, {normalize_name(c) for c in unseen_names}),
            report=report,
            qset=qs,
        )

    main = result(run_benchmark(manifest, PromptMode("askhint"), qset, client, config, "cross-class seen prompts"), qset)
    if with_baseline:
        base = run_benchmark(manifest, PromptMode("abstract"), None, client, config, "cross-class abstract")
        main.baseline = result(base, None)
    return main


def cross_class_csv(result: CrossClassResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "askhint", "abstract"])
    b = result.baseline
    w.writerow(["all_test_auc", pct(result.all_auc), pct(b.all_auc) if b else "-"])
    w.writerow(["seen_classes_acc", pct(result.seen_acc), pct(b.seen_acc) if b else "-"])
    w.writerow(["unseen_classes_acc", pct(result.unseen_acc), pct(b.unseen_acc) if b else "-"])
    return buf.getvalue()


# --- granularity study ------------------------------------------------------------------------

GRANULARITY_MODES = ("abstract", "class_label", "fine_grained")


@dataclass
class GranularityRow:
    class_name: str
    mode: str
    auc: float | None
    crime_acc: float | None
    normal_acc: float | None
    n_abnormal: int
    n_normal: int
    backend_errors: int = 0


def run_granularity_study(
    manifest: Sequence[VideoRecord],
    pool: PromptPool,
    client: VLMClient,
    config: EvalConfig,
    modes: Sequence[str] = GRANULARITY_MODES,
    class_label_groups: CompactPromptSet | None = None,
) -> list[GranularityRow]:
    """Per category: its abnormal videos plus every normal video, once per prompt mode.

    ``fine_grained`` asks that class's own pool questions; ``class_label`` asks
    whether the video shows the class; ``abstract`` asks about anomalies at large.
    """
    normals = [r for r in manifest if r.label == "normal"]
    lookup = {normalize_name(c): c for c in pool.classes}
    rows = []
    for cls in dict.fromkeys(r.class_name for r in manifest if r.label == "abnormal"):
        pool_name = lookup.get(normalize_name(cls))
        if pool_name is None and "fine_grained" in modes:
            raise MissingClass(cls)
        subset = [r for r in manifest if r.label == "abnormal" and r.class_name == cls] + normals
        for mode_name in modes:
            if mode_name == "abstract":
                mode, qset = PromptMode("abstract"), None
            elif mode_name == "class_label":
                mode, qset = PromptMode("class_label", cls), class_label_groups
            elif mode_name == "fine_grained":
                group = QuestionGroup(pool_name, list(pool.questions[pool_name]), [pool_name])
                mode, qset = PromptMode("askhint"), CompactPromptSet([group], origin="manual")
            else:
                raise ValueError(f"unknown granularity mode {mode_name!r}")
            report = run_benchmark(subset, mode, qset, client, config, f"{cls}/{mode_name}")
            rows.append(
                GranularityRow(
                    cls, mode_name, report.auc, report.crime_acc, report.normal_acc,
                    report.n_videos["abnormal"], report.n_videos["normal"], report.backend_errors,
                )
            )
    return rows


def granularity_csv(rows: Sequence[GranularityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "mode", "auc", "crime_acc", "normal_acc", "n_abnormal", "n_normal"])
    for r in rows:
        w.writerow([r.class_name, r.mode, pct(r.auc), pct(r.crime_acc), pct(r.normal_acc), r.n_abnormal, r.n_normal])
    return buf.getvalue()


def rows_table(rows: Sequence, fields: Sequence[str]) -> str:
    body = [[pct(getattr(r, f)) if isinstance(getattr(r, f), float) else str(getattr(r, f)) for f in fields] for r in rows]
    return "\n".join(format_table(list(fields), body)) + "\n"
