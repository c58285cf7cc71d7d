"""``m3pipe`` command line: translate -> qa -> filter -> mix -> eval -> report.

Progress goes to stderr; every command prints one JSON run summary on
stdout. Exit codes: 0 success, 1 validation failure, 2 transport failure,
3 integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from m3pipe import __version__
from m3pipe.backends import make_backend
from m3pipe.config import CONFIG_FILENAME, PipelineConfig, load_config
from m3pipe.errors import M3Error, ValidationError
from m3pipe.records import LANGUAGES, Manifest, parse_languages

log = logging.getLogger("m3pipe")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRANSPORT = 2
EXIT_INTEGRITY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS, help=f"JSON config file (default ./{CONFIG_FILENAME} if present)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--parallelism", type=int, default=argparse.SUPPRESS)
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="m3pipe", description=__doc__, parents=[common],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"m3pipe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("translate", parents=[common], help="translate an English manifest into target languages")
    p.add_argument("--manifest", required=True)
    p.add_argument("--targets", help="comma-separated tags or 'all' (default: config languages)")
    p.add_argument("--backend", help="translation backend URL, or mock://")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--out", help="output directory (default: <manifest dir>/translated)")
    p.add_argument("--name", help="output dataset name (default: source name)")

    p = sub.add_parser("qa", parents=[common], help="back-translation validation of an English eval set")
    p.add_argument("--dataset", required=True, help="English evalitem manifest")
    p.add_argument("--targets")
    p.add_argument("--backend", help="translation backend URL")
    p.add_argument("--eval-backend", help="generation backend URL used to score both versions")
    p.add_argument("--template", help="prompt template file")
    p.add_argument("--threshold", type=float, help="flag threshold in percentage points")
    p.add_argument("--out", required=True, help="report path (markdown)")

    p = sub.add_parser("filter", parents=[common], help="keep image-text pairs with cosine >= threshold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embed-backend")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="output directory (default: manifest dir)")
    p.add_argument("--name", help="output dataset name (default: <dataset>-filtered)")
    p.add_argument("--min-caption-chars", type=int, default=0, help="optional stub-caption cutoff (e.g. 16)")

    p = sub.add_parser("mix", parents=[common], help="build a seeded training mixture")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", help="table2-row1 .. table2-row7")
    g.add_argument("--spec", help="mixture spec JSON file")
    p.add_argument("--data", default=".", help="directory holding the component manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--virtual", action="store_true", help="write index lists instead of copying records")
    p.add_argument("--shard-size", type=int)

    p = sub.add_parser("eval", parents=[common], help="score a model on multiple-choice items")
    p.add_argument("--items", required=True, nargs="+", help="evalitem manifest(s)")
    p.add_argument("--backend", help="generation backend URL, or mock://constant/<answer>")
    p.add_argument("--template", help="prompt template file with {question} and {options}")
    p.add_argument("--langs", default="all", help="'all' or comma-separated tags, English included")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--out", required=True, help="results directory")

    p = sub.add_parser("report", parents=[common], help="render a comparison table from eval results")
    p.add_argument("--results", required=True, nargs="+", help="results.json files or result directories")
    p.add_argument("--labels", action="append", help="row labels, cells separated by '|'; once per result")
    p.add_argument("--headers", default="Model", help="label column headers separated by '|'")
    p.add_argument("--style", default="markdown", choices=["markdown", "latex", "plain"])
    p.add_argument("--out", help="write the table here instead of only the summary")

    p = sub.add_parser("validate-manifest", parents=[common], help="check shard counts and checksums")
    p.add_argument("manifests", nargs="+")
    return parser


# --------------------------------------------------------------------------
# commands


def _config(args: argparse.Namespace) -> PipelineConfig:
    path = getattr(args, "config", None)
    if path is None and Path(CONFIG_FILENAME).exists():
        path = CONFIG_FILENAME
    overrides = {"seed": getattr(args, "seed", None), "parallelism": getattr(args, "parallelism", None)}
    return load_config(path, cli_overrides=overrides)


def _targets(value: str | None, cfg: PipelineConfig) -> tuple[str, ...]:
    return parse_languages(value) if value else tuple(lang for lang in cfg.languages if lang != "en")


def _read_template(path: str | None) -> str | None:
    return Path(path).read_text(encoding="utf-8") if path else None


def cmd_translate(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.translate import TranslationJobConfig, run_job

    url = args.backend or cfg.translate_url
    backend = make_backend(url, "translate", **cfg.http_kwargs())
    manifest = Path(args.manifest)
    job = TranslationJobConfig(
        source_manifest=manifest,
        target_languages=_targets(args.targets, cfg),
        out_dir=Path(args.out) if args.out else manifest.parent / "translated",
        checkpoint_dir=Path(args.checkpoint_dir or cfg.checkpoint_dir),
        backend_url=url,
        placeholder_patterns=cfg.placeholder_patterns,
        parallelism=cfg.parallelism,
        batch_size=cfg.batch_size,
        dataset_name=args.name,
    )
    res = run_job(job, backend)
    return {
        "job_config_hash": res.config_hash,
        "input_count": res.input_count,
        "outputs": {lang: str(m.path) for lang, m in res.manifests.items()},
        "counts": {lang: m.total_count for lang, m in res.manifests.items()},
        "dead_letters": res.dead_letters,
        "shards_processed": res.shards_processed,
        "shards_already_done": res.resumed_shards,
    }


def cmd_qa(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.evaluation import DEFAULT_TEMPLATE, run_eval
    from m3pipe.qa import build_report, corpus_chrf, round_trip

    manifest = Manifest.load(args.dataset)
    if manifest.record_type != "evalitem" or manifest.language != "en":
        raise ValidationError(f"{args.dataset}: qa needs an English evalitem manifest")
    items = list(manifest.iter_records())
    translator = make_backend(args.backend or cfg.translate_url, "translate", **cfg.http_kwargs())
    generator = make_backend(args.eval_backend or cfg.generate_url, "generate", **cfg.http_kwargs())
    template = _read_template(args.template) or DEFAULT_TEMPLATE
    threshold = cfg.flag_threshold if args.threshold is None else args.threshold
    kw = {"max_tokens": cfg.max_tokens, "parallelism": cfg.parallelism}
    original = run_eval(items, generator, template, **kw)
    back, chrfs = {}, {}
    for lang in _targets(args.targets, cfg):
        rt = round_trip(items, lang, translator, cfg.placeholder_patterns)
        chrfs[lang] = corpus_chrf(items, rt)
        back[lang] = run_eval(rt, generator, template, **kw)  # type: ignore[arg-type]
        log.info("qa %s: chrF %.4f", lang, chrfs[lang])
    report = build_report(original, back, threshold, chrfs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.render(), encoding="utf-8")
    flagged = sorted(k for k, v in report.verdicts.items() if v == "flagged")
    summary = {
        "report": str(out),
        "items": len(items),
        "verdicts": report.verdicts,
        "deltas": {r.label: r.delta for r in report.rows},
        "chrf": chrfs,
    }
    if flagged:
        summary["exit_code"] = EXIT_VALIDATION
    return summary


def cmd_filter(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.curation import filter_dataset

    embedder = make_backend(args.embed_backend or cfg.embed_url, "embed", **cfg.http_kwargs())
    threshold = cfg.filter_threshold if args.threshold is None else args.threshold
    res = filter_dataset(
        args.manifest, embedder, threshold, args.out,
        out_name=args.name, batch_size=cfg.batch_size, min_chars=args.min_caption_chars,
    )
    return {"output": str(res.kept.path), "stats": res.stats.to_dict()}


def cmd_mix(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.mixture import MixtureSpec, build_mixture, get_preset

    if args.preset:
        preset = get_preset(args.preset, cfg.seed)
        specs = [preset.stage2] + ([preset.stage3] if preset.stage3 else [])
    else:
        spec = MixtureSpec.load(args.spec)
        specs = [spec.with_seed(cfg.seed) if getattr(args, "seed", None) is not None else spec]
    outputs = {}
    for spec in specs:
        manifest, report = build_mixture(
            spec, args.data, args.out, shard_size=args.shard_size or cfg.shard_size, virtual=args.virtual
        )
        outputs[spec.name] = {
            "manifest": str(manifest.path) if manifest else None,
            "total": report.total,
            "shards": [s.sha256 for s in manifest.shards] if manifest else [],
            "components": report.components,
        }
    return {"mixtures": outputs}


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.evaluation import DEFAULT_TEMPLATE, run_eval

    langs = LANGUAGES if args.langs.strip() == "all" else parse_languages(args.langs)
    items = []
    for path in args.items:
        m = Manifest.load(path)
        if m.record_type != "evalitem":
            raise ValidationError(f"{path}: expected evalitem records, got {m.record_type}")
        items.extend(r for r in m.iter_records() if r.language in langs)
    generator = make_backend(args.backend or cfg.generate_url, "generate", **cfg.http_kwargs())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_eval(
        items, generator, _read_template(args.template) or DEFAULT_TEMPLATE,
        max_tokens=args.max_tokens or cfg.max_tokens, parallelism=cfg.parallelism,
        log_path=out / "items.jsonl",
    )
    result.save(out / "results.json")
    d = result.to_dict()
    return {"results": str(out / "results.json"), "items": len(items), **d}


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    from m3pipe.evaluation import ComparisonRow, EvalResult, render_comparison

    headers = tuple(h.strip() for h in args.headers.split("|"))
    labels = args.labels or []
    if labels and len(labels) != len(args.results):
        raise ValidationError(f"got {len(labels)} --labels for {len(args.results)} results")
    rows = []
    for i, path in enumerate(args.results):
        p = Path(path)
        if p.is_dir():
            p = p / "results.json"
        cells = tuple(c.strip() for c in labels[i].split("|")) if labels else (p.parent.name,)
        rows.append(ComparisonRow(cells, EvalResult.load(p)))
    table = render_comparison(rows, headers, args.style)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stderr.write(table)
    return {"rows": len(rows), "table": table, "out": args.out}


def cmd_validate(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    checked = {}
    for path in args.manifests:
        m = Manifest.load(path)
        m.validate()
        checked[path] = m.total_count
    return {"valid": checked}


COMMANDS = {
    "translate": cmd_translate,
    "qa": cmd_qa,
    "filter": cmd_filter,
    "mix": cmd_mix,
    "eval": cmd_eval,
    "report": cmd_report,
    "validate-manifest": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = time.time()
    summary: dict[str, Any] = {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:])}
    code = EXIT_OK
    try:
        cfg = _config(args)
        summary["config_hash"] = cfg.config_hash
        summary.update(COMMANDS[args.command](args, cfg))
        code = summary.pop("exit_code", EXIT_OK)
    except M3Error as exc:
        log.error("%s", exc)
        summary["error"] = f"{type(exc).__name__}: {exc}"
        code = exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        summary["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_VALIDATION
    summary["exit_code"] = code
    summary["seconds"] = round(time.time() - started, 3)
    sys.stdout.write(json.dumps(summary, ensure_ascii=False, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
