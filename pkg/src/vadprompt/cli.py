"""``vadprompt`` command line.

Exit codes: 0 success, 2 input or validation error, 3 backend failure after retries.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import compression, evaluation, inference, prompt_pool
from .client import ChatRequest, Truth, VLMClient, parse_ground_truth
from .compression import CompactPromptSet, dumps_compact_set, loads_compact_set
from .config import RunConfig, build_client, build_embedder, load_config
from .errors import BackendError, ConfigError, InputError
from .inference import PromptMode
from .manifest import VideoRecord, load_manifest
from .prompt_pool import PRESETS, UCF_SEEN_CLASSES, PromptPool

log = logging.getLogger("vadprompt")

SEEN_PRESETS = {"ucf": UCF_SEEN_CLASSES}
EXIT_INPUT = 2
EXIT_BACKEND = 3


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")
    return path


def _load_pool(ref: str) -> PromptPool:
    if ref in PRESETS:
        return prompt_pool.load_preset_pool(ref)
    path = Path(ref)
    if not path.exists():
        raise InputError(f"pool file not found: {ref}")
    return prompt_pool.read_pool(path)


def _load_qset(ref: str) -> CompactPromptSet:
    if ref in PRESETS:
        return loads_compact_set(prompt_pool.preset_text(ref))
    path = Path(ref)
    if not path.exists():
        raise InputError(f"prompt set file not found: {ref}")
    return loads_compact_set(path.read_text(encoding="utf-8"))


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc


def _client(cfg: RunConfig, *manifests: list[VideoRecord]) -> VLMClient:
    # the oracle backend needs ground truth; real backends ignore it
    truth: dict[str, Truth] = {}
    for records in manifests:
        truth.update(parse_ground_truth(records))
    return build_client(cfg, truth)


def _qset_for_mode(cfg: RunConfig, mode: PromptMode):
    if mode.kind == "askhint":
        return _load_qset(cfg.promptset)
    if mode.kind == "full_pool":
        return _load_pool(cfg.pool)
    if mode.kind == "class_label" and cfg.promptset:
        return _load_qset(cfg.promptset)
    return None


def _out_dir(cfg: RunConfig, arg: str | None) -> Path:
    return Path(arg or cfg.output_dir)


def _ask(client: VLMClient, cfg: RunConfig, prompt: str) -> str:
    return client.chat(ChatRequest(cfg.model_id, prompt, (), cfg.decoding())).text


def _named_paths(items: list[str], flag: str) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise InputError(f"{flag} expects NAME=PATH, got {item!r}")
        out[name] = path
    return out


# --- commands ------------------------------------------------------------------------


def cmd_generate_pool(args, cfg: RunConfig) -> int:
    classes = [ln.strip() for ln in _read_text(args.classes).splitlines() if ln.strip()]
    prompt = prompt_pool.render_generation_metaprompt(classes, args.min_q, args.max_q)
    out = Path(args.out)
    if args.from_text:
        transcript = _read_text(args.from_text)
    else:
        transcript = _ask(_client(cfg), cfg, prompt)
        _write(out.with_suffix(".transcript.txt"), transcript)
    pool = prompt_pool.parse_generated_pool(transcript, classes)
    prompt_pool.write_pool(pool, out)
    print(f"wrote {out} and {out.with_suffix('.json')}")
    for name in pool.classes:
        print(f"  {name}: {len(pool.questions[name])} questions")
    print(f"  total: {len(pool)}")
    return 0


def cmd_compress(args, cfg: RunConfig) -> int:
    pool = _load_pool(args.pool)
    work = pool if args.keep_normal else compression.without_normal(pool)
    out = Path(args.out)
    k = None if args.threshold is not None else args.k
    by_embedding, matrix, dendrogram = compression.compress_by_embedding(
        work, build_embedder(cfg), k=k, threshold=args.threshold, linkage=args.linkage, per_group=args.per_group
    )
    if args.mode == "embedding":
        qset = by_embedding
    else:
        if args.from_text:
            transcript = _read_text(args.from_text)
        else:
            prompt = compression.render_compression_metaprompt(work, n_groups=args.groups, total_questions=args.total)
            transcript = _ask(_client(cfg), cfg, prompt)
            _write(out.with_suffix(".transcript.txt"), transcript)
        qset = compression.parse_compact_set(transcript, strict=not args.lenient)
    _write(out, dumps_compact_set(qset))
    _write(Path(args.heatmap) if args.heatmap else out.with_suffix(".heatmap.csv"), matrix.to_csv())
    tree = Path(args.dendrogram) if args.dendrogram else out.with_suffix(".dendrogram.json")
    _write(tree, dendrogram.to_json())
    _write(tree.with_suffix(".nwk"), dendrogram.to_newick() + "\n")
    for i, g in enumerate(qset.groups, start=1):
        print(f"  group {i}: {g.name} ({len(g.questions)} questions)")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    records = load_manifest(args.manifest, cfg.frames_root)
    mode = PromptMode.parse(cfg.mode)
    qset = _qset_for_mode(cfg, mode)
    client = _client(cfg, records)
    verdicts = inference.infer_batch(client, records, mode, qset, cfg.inference(), cfg.concurrency)
    out = Path(args.out) if args.out else _out_dir(cfg, None) / "verdicts.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    inference.write_verdicts(verdicts, out)
    print(f"wrote {out} ({len(verdicts)} verdicts)")
    failed = sum(v.parse_status == "failed" for v in verdicts)
    errors = sum(bool(v.error) for v in verdicts)
    if failed:
        print(f"  {failed} verdicts failed to parse and were scored as normal")
    if errors:
        print(f"{errors} videos failed at the backend", file=sys.stderr)
        return EXIT_BACKEND
    return 0


def _ablation_inputs(items: list[str]) -> list[tuple[int, str, str]]:
    out = []
    for item in items:
        head, _, path = item.partition("=")
        count, _, selection = head.partition(":")
        if not path or not selection or not count.isdigit():
            raise InputError(f"--ablation expects COUNT:SELECTION=PATH, got {item!r}")
        out.append((int(count), selection, path))
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not args.verdicts and not args.ablation:
        raise InputError("evaluate needs --verdicts, --ablation, or both")
    records = load_manifest(args.manifest, cfg.frames_root, check_files=False)
    out_dir = _out_dir(cfg, args.out_dir)
    if args.verdicts:
        verdicts = inference.read_verdicts(args.verdicts)
        fp = evaluation.fingerprint(
            prompt_hashes=sorted({v.prompt_hash for v in verdicts}),
            model_ids=sorted({v.model_id for v in verdicts}),
            auc_level=cfg.auc_level,
        )
        report = evaluation.build_report(verdicts, records, fp, args.name, cfg.auc_level)
        _write(out_dir / f"{args.name}.json", report.to_json())
        _write(out_dir / f"{args.name}.txt", report.to_table())
        print(report.to_table(), end="")
    if args.ablation:
        rows = []
        for count, selection, path in _ablation_inputs(args.ablation):
            verdicts = inference.read_verdicts(path)
            fp = evaluation.fingerprint(prompt_hashes=sorted({v.prompt_hash for v in verdicts}))
            rep = evaluation.build_report(verdicts, records, fp, f"{selection}@{count}", cfg.auc_level)
            rows.append(
                evaluation.AblationRow(count, selection, count, rep.auc, rep.crime_acc, rep.normal_acc, fp, rep.backend_errors)
            )
        _write(out_dir / "budget_ablation.csv", evaluation.budget_ablation_csv(rows))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    records = load_manifest(args.manifest, cfg.frames_root)
    pool = _load_pool(args.pool or cfg.pool)
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError as exc:
        raise InputError(f"--counts must be comma-separated integers, got {args.counts!r}") from exc
    selections = ["askhint_summarized", "random"] if args.selection == "both" else [args.selection]
    client = _client(cfg, records)
    rows = []
    for selection in selections:
        rows += evaluation.run_question_count_ablation(pool, counts, selection, records, client, cfg.eval_config())
    out_dir = _out_dir(cfg, args.out_dir)
    _write(out_dir / "budget_ablation.csv", evaluation.budget_ablation_csv(rows))
    _write(out_dir / "ablation.json", json.dumps([asdict(r) for r in rows], indent=2) + "\n")
    print(evaluation.rows_table(rows, ["count", "selection", "n_questions", "auc", "crime_acc", "normal_acc"]), end="")
    return EXIT_BACKEND if any(r.backend_errors for r in rows) else 0


def cmd_transfer(args, cfg: RunConfig) -> int:
    out_dir = _out_dir(cfg, args.out_dir)
    manifests = {n: load_manifest(p, cfg.frames_root) for n, p in _named_paths(args.manifest, "--manifest").items()}
    if not manifests:
        raise InputError("transfer needs at least one --manifest NAME=PATH")
    if args.kind == "dataset":
        qsets = {n: _load_qset(ref) for n, ref in _named_paths(args.prompts, "--prompts").items()}
        if not qsets:
            raise InputError("dataset transfer needs at least one --prompts NAME=PATH")
        if args.source or args.target:
            pairs = [(args.source, args.target)]
        else:
            pairs = [(s, t) for s in qsets for t in manifests]
        client = _client(cfg, *manifests.values())
        reports = {}
        for source, target in pairs:
            spec = evaluation.TransferSpec(source, target)
            rep = evaluation.run_cross_dataset(spec, manifests, qsets, client, cfg.eval_config())
            reports[(source, target)] = rep
            _write(out_dir / f"transfer_{source}_to_{target}.json", rep.to_json())
        _write(out_dir / "cross_dataset.csv", evaluation.cross_dataset_csv(reports))
        print(evaluation.cross_dataset_csv(reports), end="")
        errors = sum(r.backend_errors for r in reports.values())
    else:
        if len(manifests) != 1:
            raise InputError("class transfer takes exactly one --manifest")
        (records,) = manifests.values()
        pool = _load_pool(args.pool or cfg.pool)
        seen = SEEN_PRESETS.get(args.seen) or [c.strip() for c in args.seen.split(",") if c.strip()]
        client = _client(cfg, records)
        result = evaluation.run_cross_class(
            records, seen, pool, client, cfg.eval_config(), compress=args.compress, embedder=build_embedder(cfg)
        )
        _write(out_dir / "cross_class_report.json", json.dumps(result.to_dict(), indent=2, ensure_ascii=False) + "\n")
        _write(out_dir / "cross_class.csv", evaluation.cross_class_csv(result))
        _write(out_dir / "seen_prompt_set.txt", dumps_compact_set(result.qset))
        print(evaluation.cross_class_csv(result), end="")
        errors = result.report.backend_errors
    return EXIT_BACKEND if errors else 0


def cmd_granularity(args, cfg: RunConfig) -> int:
    records = load_manifest(args.manifest, cfg.frames_root)
    pool = _load_pool(args.pool or cfg.pool)
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else list(evaluation.GRANULARITY_MODES)
    unknown = set(modes) - set(evaluation.GRANULARITY_MODES)
    if unknown:
        raise InputError(f"unknown granularity modes: {sorted(unknown)}")
    groups = _load_qset(args.group_knowledge) if args.group_knowledge else None
    client = _client(cfg, records)
    rows = evaluation.run_granularity_study(records, pool, client, cfg.eval_config(), modes, groups)
    out_dir = _out_dir(cfg, args.out_dir)
    _write(out_dir / "granularity.csv", evaluation.granularity_csv(rows))
    print(evaluation.rows_table(rows, ["class_name", "mode", "auc", "crime_acc", "normal_acc"]), end="")
    return EXIT_BACKEND if any(r.backend_errors for r in rows) else 0


# --- parser -------------------------------------------------------------------------------

# flag dest -> RunConfig key
_CONFIG_FLAGS = {
    "backend": "backend",
    "model_id": "model_id",
    "base_url": "base_url",
    "cache_dir": "cache_dir",
    "seed": "seed",
    "max_frames": "max_frames",
    "concurrency": "concurrency",
    "output_dir": "output_dir",
    "frames_root": "frames_root",
    "prompt_mode": "mode",
    "promptset": "promptset",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--backend", choices=["http", "replay", "oracle"])
    common.add_argument("--model-id")
    common.add_argument("--base-url")
    common.add_argument("--cache-dir")
    common.add_argument("--output-dir")
    common.add_argument("--frames-root")
    common.add_argument("--seed", type=int)
    common.add_argument("--max-frames", type=int)
    common.add_argument("--concurrency", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    prompting = argparse.ArgumentParser(add_help=False)
    prompting.add_argument("--prompt-mode", help="askhint | abstract | full_pool | class_label[:Class]")
    prompting.add_argument("--promptset", help="compact set file or preset name")

    parser = argparse.ArgumentParser(prog="vadprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-pool", parents=[common], help="generate the class-wise question pool")
    p.add_argument("--classes", required=True, help="text file, one class name per line")
    p.add_argument("--out", required=True)
    p.add_argument("--from-text", help="parse a saved model transcript instead of calling the backend")
    p.add_argument("--min-q", type=int, default=3)
    p.add_argument("--max-q", type=int, default=5)
    p.set_defaults(func=cmd_generate_pool)

    p = sub.add_parser("compress", parents=[common], help="compress a pool into grouped questions")
    p.add_argument("--pool", required=True, help="pool file or preset name")
    p.add_argument("--mode", choices=["vlm", "embedding"], default="embedding")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--threshold", type=float, help="cut the dendrogram at this distance instead of k")
    p.add_argument("--linkage", choices=list(compression.LINKAGES), default="average")
    p.add_argument("--per-group", type=int, default=2)
    p.add_argument("--groups", type=int, help="vlm mode: fix the number of groups")
    p.add_argument("--total", type=int, help="vlm mode: fix the total number of questions")
    p.add_argument("--lenient", action="store_true", help="vlm mode: clamp bad group sizes instead of failing")
    p.add_argument("--keep-normal", action="store_true", help="also cluster the Normal Event block")
    p.add_argument("--from-text", help="vlm mode: parse a saved transcript")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap")
    p.add_argument("--dendrogram")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("infer", parents=[common, prompting], help="run inference over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="score verdicts against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--verdicts")
    p.add_argument("--ablation", action="append", default=[], metavar="COUNT:SELECTION=PATH")
    p.add_argument("--name", default="report")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="question-count ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool")
    p.add_argument("--counts", default="3,6,9,12")
    p.add_argument("--selection", choices=["askhint_summarized", "random", "both"], default="both")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", parents=[common], help="cross-dataset or cross-class transfer")
    p.add_argument("kind", choices=["dataset", "class"])
    p.add_argument("--manifest", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--prompts", action="append", default=[], metavar="NAME=PATH", help="compact set per source dataset")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--pool")
    p.add_argument("--seen", default="ucf", help="'ucf' preset or comma-separated class names")
    p.add_argument("--compress", choices=["vlm", "embedding"], default="vlm")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("granularity", parents=[common], help="per-class prompt granularity study")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool")
    p.add_argument("--modes", help="comma-separated subset of abstract,class_label,fine_grained")
    p.add_argument("--group-knowledge", help="compact set whose group names go into the class-label prompt")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_granularity)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for dest, key in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = config_from_args(args)
        return args.func(args, cfg)
    except (InputError, ValueError) as exc:
        # library ValueErrors are argument validation failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
