"""Command-line entry point: generate, split, train, evaluate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from . import __version__
from .config import RunConfig
from .data import GRADE_TOKENS, ManifestError, load_manifest, relocate, save_manifest, write_images
from .evaluation import EvalReport, evaluate_records, load_baselines, render_table
from .partitioning import filter_gradable, split_patients
from .prompting import Prompter
from .synthetic import generate_synthetic
from .training import TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ctxvlf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML/JSON run config")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out", default=default, help="output directory (env CTXVLF_OUTPUT_ROOT)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxvlf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--patients", type=int)
    g.add_argument("--exams-min", type=int)
    g.add_argument("--exams-max", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--signal", type=float, help="grade signal strength in [0, 1]")
    g.add_argument("--prior-correlation", type=float)
    g.add_argument("--prior-band", type=int)
    g.add_argument("--ungradable-fraction", type=float)
    g.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    s = sub.add_parser("split", parents=[common], help="patient-disjoint train/validation(/test) split")
    s.add_argument("--manifest")
    s.add_argument("--train-ratio", type=float)
    s.add_argument("--test-ratio", type=float)

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--train-manifest")
    t.add_argument("--val-manifest")
    t.add_argument("--variant")
    t.add_argument("--components", help="comma-separated sub-variants for --variant combined")
    t.add_argument("--context-fraction", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="zero-shot per-class AUC")
    e.add_argument("--checkpoint", action="append", dest="checkpoints")
    e.add_argument("--manifest", action="append", dest="manifests", metavar="NAME=PATH")
    e.add_argument("--classes", help=f"comma-separated; default {','.join(GRADE_TOKENS)}")
    e.add_argument("--baseline", dest="baselines", help="static comparison rows (YAML/JSON)")

    r = sub.add_parser("report", parents=[common], help="render saved reports as a table")
    r.add_argument("--report", action="append", dest="reports", required=True)
    r.add_argument("--baseline", dest="baselines")
    return parser


def _set(tree: dict, dotted: str, value) -> None:
    if value is None:
        return
    keys = dotted.split(".")
    for k in keys[:-1]:
        tree = tree.setdefault(k, {})
    tree[keys[-1]] = value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then flag overrides (flags win), validated as a whole."""
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    tree = base.model_dump(mode="json")
    a = vars(args)
    _set(tree, "seed", a.get("seed"))
    _set(tree, "out", a.get("out"))
    if args.command == "generate":
        _set(tree, "synthetic.n_patients", a.get("patients"))
        if a.get("exams_min") is not None or a.get("exams_max") is not None:
            lo, hi = tree["synthetic"]["exams_per_patient"]
            tree["synthetic"]["exams_per_patient"] = [a.get("exams_min") or lo, a.get("exams_max") or hi]
        if a.get("image_size") is not None:
            tree["synthetic"]["image_size"] = [a["image_size"], a["image_size"]]
        _set(tree, "synthetic.grade_signal_strength", a.get("signal"))
        _set(tree, "synthetic.prior_correlation", a.get("prior_correlation"))
        _set(tree, "synthetic.prior_band", a.get("prior_band"))
        _set(tree, "synthetic.ungradable_fraction", a.get("ungradable_fraction"))
    elif args.command == "split":
        _set(tree, "split.manifest", a.get("manifest"))
        _set(tree, "split.train_ratio", a.get("train_ratio"))
        _set(tree, "split.test_ratio", a.get("test_ratio"))
    elif args.command == "train":
        _set(tree, "train_manifest", a.get("train_manifest"))
        _set(tree, "val_manifest", a.get("val_manifest"))
        _set(tree, "variant.variant", a.get("variant"))
        if a.get("components"):
            tree["variant"]["components"] = [c.strip() for c in a["components"].split(",") if c.strip()]
        _set(tree, "variant.context_fraction", a.get("context_fraction"))
        _set(tree, "train.epochs", a.get("epochs"))
        _set(tree, "train.lr", a.get("lr"))
        _set(tree, "train.batch_size", a.get("batch_size"))
    elif args.command == "evaluate":
        _set(tree, "evaluate.checkpoints", a.get("checkpoints"))
        if a.get("manifests"):
            pairs = {}
            for item in a["manifests"]:
                name, sep, path = item.partition("=")
                if not sep:
                    name, path = Path(item).stem, item
                pairs[name] = path
            tree["evaluate"]["manifests"] = pairs
        if a.get("classes"):
            tree["evaluate"]["classes"] = [c.strip() for c in a["classes"].split(",") if c.strip()]
        _set(tree, "evaluate.baselines", a.get("baselines"))
    return RunConfig.model_validate(tree)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prompter(cfg: RunConfig) -> Prompter:
    return Prompter.from_files(cfg.templates, cfg.augmentations)


def cmd_generate(cfg: RunConfig, force: bool = False) -> int:
    out = cfg.output_dir()
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    spec = cfg.synthetic_spec()
    records = generate_synthetic(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_images(records, out)
    save_manifest(records, out / "manifest.jsonl")
    (out / "config.yaml").write_text(cfg.model_copy(update={"out": None}).dumps(), encoding="utf-8")
    hist = Counter()
    for r in records:
        for d in (r.diagnosis_left, r.diagnosis_right):
            hist[d.dr_grade.token] += 1
    print(f"patients: {spec.n_patients}")
    print(f"exams: {len(records)}")
    print(f"images: {sum(len(r.images) for r in records)}")
    print("eye grade histogram: " + ", ".join(f"{g}={hist[g]}" for g in GRADE_TOKENS))
    print(f"manifest: {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_split(cfg: RunConfig) -> int:
    if not cfg.split.manifest:
        raise UsageError("split needs --manifest")
    records = load_manifest(cfg.split.manifest)
    plan = split_patients(records, cfg.split.train_ratio, cfg.seed, cfg.split.test_ratio)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "split.json")
    outputs = {
        "train": plan.select(records, "train"),
        "validation": filter_gradable(plan.select(records, "validation")),
        "test": plan.select(records, "test"),
    }
    for name, recs in outputs.items():
        if name == "test" and not plan.test:
            continue
        target = out / f"{name}.jsonl"
        save_manifest(relocate(recs, out), target)
        print(f"{name}: {len(getattr(plan, name))} patients, {len(recs)} exams -> {target}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.train_manifest or not cfg.val_manifest:
        raise UsageError("train needs --train-manifest and --val-manifest (or config entries)")
    train_records = load_manifest(cfg.train_manifest)
    val_records = load_manifest(cfg.val_manifest)
    tcfg = cfg.train_config()
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "run_log.jsonl"
    print(f"variant {cfg.variant.variant}, epochs {tcfg.epochs}, lr {tcfg.lr:g}, seed {tcfg.seed}")

    with open(log_path, "w", encoding="utf-8") as fh:
        def emit(event: dict) -> None:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            if event["event"] == "epoch":
                print(f"epoch {event['epoch']:>3}  loss {event['loss']:.4f}  lr {event['lr']:.2e}  "
                      f"val macro AUC {event['val_macro_auc']:.4f}")
            elif event["event"] == "skips" and event["total"]:
                print(f"warning: skipped {event['total']} samples {event['reasons']}")

        emit({"event": "config", "epochs": tcfg.epochs, "lr": tcfg.lr, "batch_size": tcfg.batch_size,
              "seed": tcfg.seed, "variant": cfg.variant.model_dump(mode="json"),
              "train_manifest": cfg.train_manifest, "val_manifest": cfg.val_manifest})
        result = train(cfg.variant, tcfg, train_records, val_records, cfg.encoder, _prompter(cfg), on_event=emit)
        ckpt = out / "checkpoint.pt"
        save_checkpoint(ckpt, result.model, cfg.variant, tcfg, best_epoch=result.best_epoch,
                        val_macro_auc=result.best_val_auc)
        digest = _sha256(ckpt)
        emit({"event": "selected", "best_epoch": result.best_epoch, "val_macro_auc": result.best_val_auc,
              "checkpoint": str(ckpt), "checkpoint_sha256": digest})
    print(f"selected epoch {result.best_epoch} (val macro AUC {result.best_val_auc:.4f})")
    print(f"checkpoint: {ckpt} sha256 {digest}")
    return EXIT_OK


def evaluate_checkpoint(path: str, manifests: dict, classes: Sequence[str], prompter: Prompter,
                        include_ungradable: bool = False, model_id: Optional[str] = None) -> EvalReport:
    ckpt = load_checkpoint(path)
    results = {name: evaluate_records(ckpt.model, ckpt.variant, load_manifest(mpath), classes, prompter,
                                      include_ungradable)
               for name, mpath in manifests.items()}
    return EvalReport(model_id=model_id or Path(path).parent.name or Path(path).stem,
                      config_hash=ckpt.config_hash, results=results)


def _write_reports(reports: list, out: Path, table_rows: list) -> str:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "reports.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = render_table(table_rows)
    (out / "table.txt").write_text(table, encoding="utf-8")
    return table


def load_reports(path: str) -> list[EvalReport]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return [EvalReport.from_json(o) for o in (obj if isinstance(obj, list) else [obj])]


def cmd_evaluate(cfg: RunConfig) -> int:
    ev = cfg.evaluate
    if not ev.checkpoints or not ev.manifests:
        raise UsageError("evaluate needs at least one --checkpoint and one --manifest")
    prompter = _prompter(cfg)
    reports = []
    seen = Counter()
    for ck in ev.checkpoints:
        rep = evaluate_checkpoint(ck, ev.manifests, ev.classes, prompter, ev.include_ungradable)
        seen[rep.model_id] += 1
        if seen[rep.model_id] > 1:
            rep.model_id = f"{rep.model_id}#{seen[rep.model_id]}"
        reports.append(rep)
    baselines = load_baselines(ev.baselines) if ev.baselines else []
    table = _write_reports(reports, cfg.output_dir(), baselines + reports)
    print(table, end="")
    return EXIT_OK


def cmd_report(cfg: RunConfig, report_paths: Sequence[str], baselines: Optional[str]) -> int:
    reports = [rep for p in report_paths for rep in load_reports(p)]
    rows = (load_baselines(baselines) if baselines else []) + reports
    table = render_table(rows)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg, force=args.force)
        if args.command == "split":
            return cmd_split(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_report(cfg, args.reports, args.baselines)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"])
            print(f"config error: {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
