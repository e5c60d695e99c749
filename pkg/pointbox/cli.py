# cli.py
"""
Command-line entry point.

    python -m pointbox <subcommand> [--config FILE] [--set key=value ...] [--seed N] [--out DIR]

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 configuration. Failures
print one line `error: <category>: <message>` on stderr.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import student_model, teacher_model
from .bench import load_result, plan_cells, run_benchmark
from .config import load_run_config, save_resolved_config, validate_run_config
from .data import generate_synthetic, load_manifest, load_samples, load_split, make_split, save_manifest, save_split
from .evalsuite import evaluate, gts_from_manifest, load_detections, save_detections, write_report
from .pipeline import (
    PSEUDO_MANIFEST, STEP1_CKPT, STEP2_CKPT, evaluate_teacher, generate_pseudo_labels, load_cell_data,
    predict_student, refine_teacher_step2, train_student_step3, train_teacher_step1,
)
from .report_gen import emit_report
from .utils import ConfigError, PointboxError, parse_csv_list, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (default: $POINTBOX_CONFIG)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--log-level", default=None)
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="pointbox", description="Point-supervised weakly semi-supervised detection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("split", parents=[common], help="write a train/test + labeled/weak split")
    p.add_argument("--manifest")
    p.add_argument("--fraction", type=float)

    for name, text in (("train-teacher", "step 1"), ("refine-teacher", "step 2"),
                       ("pseudo-label", "teacher boxes for weak points"), ("train-student", "step 3")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest")
        p.add_argument("--split")
        p.add_argument("--fraction", type=float)
        p.add_argument("--variant")
        if name in ("refine-teacher", "pseudo-label"):
            p.add_argument("--ckpt", help="teacher checkpoint")
        if name == "train-student":
            p.add_argument("--pseudo", help="pseudo-label manifest")

    p = sub.add_parser("eval", parents=[common], help="score detections or a student checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dets", help="detections file")
    src.add_argument("--ckpt", help="student checkpoint (scored on the split's test images)")
    src.add_argument("--teacher", help="teacher checkpoint (point-conditioned, test images)")
    p.add_argument("--gt", help="ground-truth manifest")
    p.add_argument("--split")

    p = sub.add_parser("bench", parents=[common], help="fraction sweep")
    p.add_argument("--manifest")
    p.add_argument("--fractions")
    p.add_argument("--seeds")
    p.add_argument("--variants")
    p.add_argument("--workers", type=int)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("report", parents=[common], help="tables and plots from a bench directory")
    p.add_argument("--results", help="bench output directory (default: --out)")
    return parser


def _fields(args):
    """Dedicated flags that map onto config keys."""
    mapping = {
        "seed": "seed",
        "manifest": "data.manifest",
        "gt": "data.manifest",
        "split": "data.split",
        "fraction": "fraction",
        "variant": "variant",
    }
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


INPUT_FLAGS = ("ckpt", "teacher", "pseudo", "dets", "results")


def _invocation(args):
    """Subcommand plus the file inputs that are not config keys."""
    inputs = {name: str(Path(getattr(args, name)).resolve()) for name in INPUT_FLAGS if getattr(args, name, None)}
    return {"command": args.command, "inputs": inputs}


# --- subcommands ---

def cmd_gen_data(args, cfg, out):
    manifest = generate_synthetic(cfg.synthetic, cfg.seed, out, workers=args.workers, point_cfg=cfg.point_sampling)
    print(f"{len(manifest.entries)} images -> {out / 'manifest.json'}")


def cmd_split(args, cfg, out):
    manifest = load_manifest(cfg.data.manifest)
    plan = make_split(manifest, cfg.fraction, cfg.seed)
    save_split(plan, out / "split.json")
    print(f"labeled {len(plan.fully_labeled)}, weak {len(plan.weak)}, test {len(plan.test)} -> {out / 'split.json'}")


def cmd_train_teacher(args, cfg, out):
    print(train_teacher_step1(cfg, load_cell_data(cfg), out))


def cmd_refine_teacher(args, cfg, out):
    ckpt = args.ckpt or out / STEP1_CKPT
    print(refine_teacher_step2(cfg, load_cell_data(cfg), ckpt, out))


def cmd_pseudo_label(args, cfg, out):
    data = load_cell_data(cfg)
    teacher = teacher_model.load_checkpoint(args.ckpt or out / STEP2_CKPT)
    pseudo = generate_pseudo_labels(teacher, data.manifest, data.split.weak, data.root)
    save_manifest(pseudo, out / PSEUDO_MANIFEST)
    print(f"{sum(len(e.objects) for e in pseudo.entries)} pseudo boxes -> {out / PSEUDO_MANIFEST}")


def cmd_train_student(args, cfg, out):
    data = load_cell_data(cfg)
    pseudo = load_manifest(args.pseudo, check_images=False) if args.pseudo else None
    print(train_student_step3(cfg, data, pseudo, out))


def cmd_eval(args, cfg, out):
    manifest_path = Path(cfg.data.manifest)
    if args.dets:
        manifest = load_manifest(manifest_path, check_images=False)
        ids = load_split(cfg.data.split).test if cfg.data.split else None
        gts = gts_from_manifest(manifest, ids)
        dets = load_detections(args.dets, image_ids=gts)
        report = evaluate(dets, gts, cfg.eval, num_classes=len(manifest.classes))
    elif args.teacher:
        data = load_cell_data(cfg)
        report = evaluate_teacher(teacher_model.load_checkpoint(args.teacher), data, cfg)
    else:
        manifest = load_manifest(manifest_path)
        ids = load_split(cfg.data.split).test if cfg.data.split else [e.id for e in manifest.entries]
        model = student_model.load_checkpoint(args.ckpt)
        dets = predict_student(model, load_samples(manifest, manifest_path.parent, ids))
        save_detections(out / "detections.json", dets)
        report = evaluate(dets, gts_from_manifest(manifest, ids), cfg.eval, num_classes=len(manifest.classes))
    write_report(report, out)
    print(f"mAP {report.map:.4f}")


def cmd_bench(args, cfg, out):
    try:
        fractions = parse_csv_list(args.fractions, float) or None
        seeds = parse_csv_list(args.seeds, int) or None
    except ValueError as e:
        raise ConfigError(f"bench: {e}") from e
    variants = parse_csv_list(args.variants) or None
    if variants or fractions or seeds:
        # re-validate through the schema so bad values surface as config errors
        doc = cfg.model_dump(mode="json")
        doc["bench"].update({k: v for k, v in (("fractions", fractions), ("seeds", seeds), ("variants", variants)) if v})
        cfg = validate_run_config(doc)
        save_resolved_config(cfg, out, _invocation(args))
    cells = plan_cells(cfg.bench.fractions, cfg.bench.seeds, cfg.bench.variants)
    if args.dry_run:
        for v, f, s in cells:
            print(f"{v}\t{f:g}\t{s}")
        print(f"{len(cells)} cells")
        return
    result = run_benchmark(cfg, out, workers=args.workers)
    print(f"{len(result.ok())}/{len(cells)} cells ok -> {out}")
    if result.failed():
        raise PointboxError(f"{len(result.failed())} benchmark cell(s) failed; see {out / 'results.jsonl'}")


def cmd_report(args, cfg, out):
    result = load_result(args.results or out)
    if not result.records:
        raise PointboxError(f"no benchmark records under {args.results or out}")
    paths = emit_report(result, out)
    for name, path in paths.items():
        print(f"{name}\t{path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train-teacher": cmd_train_teacher,
    "refine-teacher": cmd_refine_teacher,
    "pseudo-label": cmd_pseudo_label,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _fail(category, message, code):
    sys.stderr.write(f"error: {category}: {message}\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except SystemExit as e:  # --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_level)
    try:
        cfg = load_run_config(args.config, args.overrides, **_fields(args))
        out = Path(args.out or (cfg.data.root if args.command == "gen-data" else "runs"))
        save_resolved_config(cfg, out, _invocation(args))
        COMMANDS[args.command](args, cfg, out)
    except ConfigError as e:
        return _fail(e.category, e, EXIT_CONFIG)
    except PointboxError as e:
        return _fail(e.category, e, EXIT_RUNTIME)
    except Exception as e:
        logger.debug("unhandled error", exc_info=True)
        return _fail("runtime", f"{type(e).__name__}: {e}", EXIT_RUNTIME)
    return EXIT_OK
