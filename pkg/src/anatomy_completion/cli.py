"""Command line interface for anatomy-completion experiments."""

from __future__ import annotations

import argparse
import difflib
import logging
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import PROJECT_ROOT, __version__
from .checkpoint import load_checkpoint
from .config import (
    CONFIG_PATH,
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_experiment,
    load_presets,
    parse_overrides,
    write_experiment,
)
from .corpus import (
    MULTICLASS_ANATOMIES,
    TEST,
    TRAIN,
    CorpusManifest,
    RemovalMode,
    RemovalPolicy,
    build_corpus,
    load_manifest,
    select_classes,
    write_corpus,
)
from .doctor import doctor
from .errors import CompletionError, DataError, EvaluationError, TrainingError, UsageError
from .evalkit import (
    ALTERNATIVES,
    EvalReport,
    compare,
    compare_all,
    complete_pair,
    evaluate,
    evaluate_single_anatomy,
    read_comparisons,
    read_report,
    render_slices,
    write_comparisons,
    write_report,
)
from .ingest import (
    NIFTI_SUFFIXES,
    _parse_json,
    is_nifti,
    load_nifti_subject,
    load_subjects,
    merge_classes,
    read_sidecar,
    read_volume_cache,
    save_nifti,
)
from .network import completion_labels, compose_completion, forward, residual_only
from .paths import RunPaths
from .phantom import PhantomSpec, default_phantom_spec, generate_phantoms, load_phantom_spec, validate_spec
from .render import PLANE_AXES
from .report import build_report, class_table, pvalue_table, write_report_md
from .trainer import run_ablation_suite, train
from .utils import canonical_json, parse_shape, select_device, sha256_bytes, write_stamp
from .voxel import BinaryVolume, FractionReference, LabelVolume, binarize, nearest_resample, resample_labels, upscale_binary

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
PHANTOM_SPEC_PATH = PROJECT_ROOT / "config" / "phantom.json"
DEFAULT_PRESET = "phantom_agg_res"
SPLITS = (TRAIN, TEST, "all")


@dataclass
class Outcome:
    """Where a subcommand wrote its artifacts, for the reproducibility stamp."""

    directory: Path
    config_hash: str = ""
    seeds: Dict[str, int] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)


def _known_options(parser: argparse.ArgumentParser) -> List[str]:
    options: List[str] = []
    for action in parser._actions:
        options.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            options.extend(action.choices)
            for sub in action.choices.values():
                options.extend(_known_options(sub))
    return sorted(set(options))


def _suggestion(parser: argparse.ArgumentParser, message: str) -> str:
    tokens: List[str] = []
    unknown = re.search(r"unrecognized arguments: (.+)$", message)
    if unknown:
        tokens = [t.split("=", 1)[0] for t in unknown.group(1).split() if t.startswith("-")]
    choice = re.search(r"invalid choice: '([^']+)'", message)
    if choice:
        tokens.append(choice.group(1))
    known = _known_options(parser)
    for token in tokens:
        hint = difflib.get_close_matches(token, known, n=1)
        if hint:
            return f" Did you mean '{hint[0]}'?"
    return ""


class CliParser(argparse.ArgumentParser):
    """Argument parser that raises ``UsageError`` instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}.{_suggestion(self, message)}")


def _rel(path: Path) -> Path:
    path = Path(path)
    try:
        return path.resolve().relative_to(PROJECT_ROOT)
    except ValueError:
        return path


def _wrote(path: Path) -> None:
    print(f"Wrote: {_rel(path)}")


def _names(value: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in (value or "").split(",") if item.strip())


def _floats(value: str) -> Tuple[float, ...]:
    try:
        return tuple(float(item) for item in _names(value))
    except ValueError as exc:
        raise UsageError(f"Expected comma-separated numbers, got '{value}'") from exc


def _path(value: str) -> Path:
    return Path(value).expanduser()


def _experiment(args: argparse.Namespace, *, required: bool = True) -> Optional[ExperimentConfig]:
    """Experiment from ``--config``/``--preset`` with ``--set`` overrides applied."""

    preset = getattr(args, "preset", "") or None
    if not required and not preset and not args.config:
        return None
    config = load_experiment(args.config or None, preset=preset)
    if args.overrides:
        config = apply_overrides(config, parse_overrides(args.overrides))
    config.validate()
    return config


def _manifest(args: argparse.Namespace, config: Optional[ExperimentConfig] = None) -> CorpusManifest:
    if getattr(args, "manifest", ""):
        return load_manifest(_path(args.manifest))
    if getattr(args, "run", ""):
        return load_manifest(RunPaths(args.run).manifest_path)
    if config is not None and config.corpus:
        candidate = Path(config.corpus).expanduser()
        if not candidate.is_absolute():
            candidate = (PROJECT_ROOT / candidate).resolve()
        return load_manifest(candidate)
    raise UsageError("No corpus given: pass --manifest or --run, or set 'corpus' in the experiment config")


def _checkpoint_dir(args: argparse.Namespace, manifest: CorpusManifest) -> Path:
    if getattr(args, "checkpoint_dir", ""):
        return _path(args.checkpoint_dir)
    if getattr(args, "run", ""):
        return RunPaths(args.run).checkpoints_dir
    if manifest.root is None:
        raise UsageError("Pass --checkpoint-dir; the corpus is not stored on disk")
    return manifest.root.parent / "checkpoints"


def _output_dir(args: argparse.Namespace, attr: str, run_attr: str) -> Path:
    value = getattr(args, attr, "")
    if value:
        return _path(value)
    if getattr(args, "run", ""):
        return getattr(RunPaths(args.run), run_attr)
    raise UsageError(f"Pass --{attr.replace('_', '-')} or --run")


def _removal_policy(args: argparse.Namespace, base: RemovalPolicy) -> RemovalPolicy:
    changes: Dict[str, Any] = {}
    if args.thresholds:
        changes["thresholds"] = _floats(args.thresholds)
    if args.protected:
        changes["protected_names"] = _names(args.protected)
    if args.mode:
        changes["mode"] = RemovalMode(args.mode)
    if args.reference:
        changes["reference"] = FractionReference(args.reference)
    if args.instances is not None:
        changes["instances_per_subject"] = args.instances
    if args.seed is not None:
        changes["seed"] = args.seed
    return replace(base, **changes)


def _corpus_settings(
    args: argparse.Namespace, base: RemovalPolicy
) -> Tuple[RemovalPolicy, float, Optional[Tuple[int, int, int]], str]:
    """Removal policy, split fraction, target grid and settings hash for a corpus command."""

    config = _experiment(args, required=False)
    split = 0.8
    shape: Optional[Tuple[int, int, int]] = None
    if config is not None:
        base = config.removal
        split = config.split_fraction
        shape = config.dae.input_shape
    policy = _removal_policy(args, base)
    if args.split is not None:
        split = args.split
    if args.shape:
        shape = parse_shape(args.shape)
    settings = {"policy": policy.to_dict(), "split_fraction": split, "target_shape": list(shape) if shape else None}
    digest = config_hash(config) if config is not None else sha256_bytes(canonical_json(settings).encode("utf-8"))
    return policy, split, shape, digest


def _report_corpus(manifest: CorpusManifest, path: Path) -> None:
    _wrote(path)
    print(
        f"  {len(manifest.pairs)} pair(s); {len(manifest.subjects(TRAIN))} train / "
        f"{len(manifest.subjects(TEST))} test subject(s)"
    )
    for subject_id, reason in sorted(manifest.skipped.items()):
        print(f"  skipped {subject_id}: {reason}")


def cmd_init(args: argparse.Namespace) -> Optional[Outcome]:
    paths = RunPaths(args.run)
    if paths.config_path.exists() and not args.force:
        print(f"Run '{_rel(paths.root)}' already has {paths.config_path.name}. Use --force to replace it.")
        return None
    config = load_presets(args.config or None).get(args.preset)
    if args.overrides:
        config = apply_overrides(config, parse_overrides(args.overrides))
    config.corpus = str(paths.manifest_path)
    paths.ensure()
    write_experiment(config, paths.config_path)
    print(f"Initialized run '{_rel(paths.root)}' from preset '{args.preset}'")
    print(f"- Config: {_rel(paths.config_path)}")
    for label, p in (
        ("Corpus dir", paths.corpus_dir),
        ("Checkpoints dir", paths.checkpoints_dir),
        ("Reports dir", paths.reports_dir),
        ("Renders dir", paths.renders_dir),
    ):
        print(f"- {label}: {_rel(p)}")
    return None


def cmd_doctor(args: argparse.Namespace) -> Optional[Outcome]:
    run_dir = _path(args.run) if args.run else None
    issues = doctor(config_path=args.config or CONFIG_PATH, run_dir=run_dir, verbose=args.verbose)
    if issues:
        print(f"\nFound {issues} issue(s). Fix the hints above and rerun `anatomy-complete doctor`.")
    else:
        print("\nEnvironment looks ready. Run `anatomy-complete synth --run <dir>` to build a phantom corpus.")
    return None


def _load_phantom_spec(args: argparse.Namespace) -> PhantomSpec:
    if args.spec:
        spec = load_phantom_spec(_path(args.spec))
    elif PHANTOM_SPEC_PATH.exists():
        spec = load_phantom_spec(PHANTOM_SPEC_PATH)
    else:
        spec = default_phantom_spec()
    if args.grid:
        spec = spec.with_shape(parse_shape(args.grid))
    validate_spec(spec)
    return spec


def cmd_synth(args: argparse.Namespace) -> Outcome:
    spec = _load_phantom_spec(args)
    base = RemovalPolicy(reference=FractionReference.LARGEST_CLASS, protected_names=tuple(spec.protected_names))
    policy, split, shape, digest = _corpus_settings(args, base)
    out_dir = _output_dir(args, "out", "corpus_dir")
    phantom_seed = args.seed if args.seed is not None else policy.seed
    subjects = generate_phantoms(spec, args.count, seed=phantom_seed)
    manifest = build_corpus(subjects, policy, split, target_shape=shape)
    path = write_corpus(manifest, out_dir)
    _report_corpus(manifest, path)
    return Outcome(
        out_dir,
        config_hash=digest,
        seeds={"phantom": phantom_seed, "removal": policy.seed},
        extra={"manifest_checksum": manifest.checksum(), "phantom_spec": spec.to_dict()},
    )


def cmd_prepare(args: argparse.Namespace) -> Outcome:
    policy, split, shape, digest = _corpus_settings(args, RemovalPolicy())
    out_dir = _output_dir(args, "out", "corpus_dir")
    subjects = load_subjects(_path(args.input))
    if args.merge:
        groups = _parse_json(_path(args.merge))
        if not isinstance(groups, dict):
            raise DataError(f"{args.merge} must map group names to lists of patterns")
        subjects = {sid: merge_classes(vol, groups) for sid, vol in subjects.items()}
    names = MULTICLASS_ANATOMIES if args.select == "multiclass" else _names(args.select)
    if names:
        subjects = {sid: select_classes(vol, names) for sid, vol in subjects.items()}
    manifest = build_corpus(subjects, policy, split, target_shape=shape)
    path = write_corpus(manifest, out_dir)
    _report_corpus(manifest, path)
    return Outcome(
        out_dir,
        config_hash=digest,
        seeds={"removal": policy.seed},
        extra={"manifest_checksum": manifest.checksum()},
    )


def cmd_train(args: argparse.Namespace) -> Outcome:
    config = _experiment(args)
    manifest = _manifest(args, config)
    out_dir = _checkpoint_dir(args, manifest)
    record = train(config, manifest=manifest, checkpoint_dir=out_dir)
    _wrote(Path(record.checkpoint))
    if record.final_loss is not None:
        print(f"  final loss {record.final_loss:.6f} after {len(record.losses)} epoch(s)")
    return Outcome(
        out_dir,
        config_hash=record.config_hash,
        seeds={"seed": config.seed},
        extra={"preset": config.preset, "manifest_checksum": record.manifest_checksum},
    )


def _print_summary(report: EvalReport) -> None:
    for test_set, (mean, sd) in sorted(report.test_set_means().items()):
        spread = "" if np.isnan(sd) else f" (SD {sd:.3f})"
        print(f"  {test_set}: mean DSC {mean:.3f}{spread}")
    for key, reason in sorted(report.errors.items()):
        print(f"  skipped {key}: {reason}")


def cmd_ablate(args: argparse.Namespace) -> Outcome:
    config = _experiment(args)
    manifest = _manifest(args, config)
    out_dir = _checkpoint_dir(args, manifest)
    reports_dir = _path(args.reports) if args.reports else out_dir.parent / "reports"
    suite = run_ablation_suite(config, manifest=manifest, checkpoint_dir=out_dir)
    device = select_device()
    reports: Dict[str, EvalReport] = {}
    for name, record in suite.records.items():
        report = evaluate(record.checkpoint, manifest, device=device)
        csv_path, _ = write_report(report, reports_dir, name)
        _wrote(csv_path)
        reports[name] = report
    comparisons = compare_all(reports, paired=not args.unpaired, alternative=args.alternative)
    _wrote(write_comparisons(comparisons, reports_dir / "comparisons.json"))
    _wrote(build_report(reports, comparisons, reports_dir / "ablation.md", title=f"Ablation ({config.preset})"))
    if suite.partial:
        for name, reason in sorted(suite.failures.items()):
            print(f"  failed {name}: {reason}")
        raise TrainingError(f"{len(suite.failures)} ablation member(s) failed; the suite is partial")
    return Outcome(
        reports_dir,
        config_hash=config_hash(config),
        seeds={"seed": config.seed},
        extra={"manifest_checksum": manifest.checksum(), "members": sorted(suite.records)},
    )


def _load_input(path: Path, assume_shape: str) -> Tuple[LabelVolume, Tuple[int, int, int]]:
    """Input labels at their stored grid, plus the original grid to write back to."""

    if is_nifti(path) or path.is_dir():
        vol = load_nifti_subject(path)
        return vol, vol.shape
    if path.suffix != ".json":
        raise UsageError(f"Unsupported input '{path}': expected NIfTI, a mask folder, or a volume cache sidecar")
    sidecar = read_sidecar(path)
    vol = read_volume_cache(path)
    if isinstance(vol, BinaryVolume):
        vol = LabelVolume(data=vol.data, spacing=vol.spacing, class_table={1: "foreground"})
    original = sidecar.get("original_shape")
    if original is None:
        if not assume_shape:
            raise DataError(f"{path} carries no original-resolution metadata; pass --assume-shape L,W,H")
        original = parse_shape(assume_shape)
    return vol, tuple(int(s) for s in original)


def _residual_path(path: Path) -> Path:
    name = path.name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)] + "_residual" + suffix)
    return path.with_name(name + "_residual.nii.gz")


def cmd_complete(args: argparse.Namespace) -> Outcome:
    ckpt = load_checkpoint(_path(args.checkpoint), device=select_device())
    dae = ckpt.dae_config
    vol, original = _load_input(_path(args.input), args.assume_shape)
    native = resample_labels(vol, original)
    net_input = resample_labels(vol, dae.input_shape)
    given = binarize(native)

    if dae.is_binary:
        x = binarize(net_input)
        completion = upscale_binary(compose_completion(x, forward(ckpt.model, x), dae.threshold), original)
        if dae.residual:
            completion = BinaryVolume(data=completion.mask | given.mask, spacing=given.spacing)
        table = {1: "foreground"}
        completed = completion.data
        added = residual_only(given, completion).data
    else:
        labels = nearest_resample(completion_labels(forward(ckpt.model, net_input)), original)
        table = {cid: native.class_table.get(cid, f"class_{cid}") for cid in range(1, dae.num_classes)}
        completed = labels
        added = labels * residual_only(given, BinaryVolume(data=labels != 0, spacing=given.spacing)).data

    output = _path(args.output)
    residual = _path(args.residual_output) if args.residual_output else _residual_path(output)
    for data, target in ((completed, output), (added, residual)):
        save_nifti(LabelVolume(data=data, spacing=native.spacing, class_table=table, affine=native.affine), target)
        _wrote(target)
    share = float(np.count_nonzero(added)) / added.size
    print(f"  reconstructed {int(np.count_nonzero(added))} voxel(s), {share:.4%} of the grid")
    return Outcome(
        output.parent,
        config_hash=ckpt.config_hash,
        seeds={"seed": ckpt.seed},
        extra={"checkpoint_sha256": ckpt.digest, "experiment": ckpt.experiment},
    )


def cmd_evaluate(args: argparse.Namespace) -> Outcome:
    device = select_device()
    ckpt = load_checkpoint(_path(args.checkpoint), device=device)
    manifest = _manifest(args)
    split = None if args.split == "all" else args.split
    out_dir = _path(args.out) if args.out else (manifest.root or Path.cwd()).parent / "reports"
    stem = args.stem or ckpt.experiment or _path(args.checkpoint).stem
    if args.single_anatomy:
        render_dir = _path(args.render_dir) if args.render_dir else None
        report, panels = evaluate_single_anatomy(
            ckpt, manifest, render_dir=render_dir, plane=args.plane, split=split, device=device
        )
        for panel in panels:
            _wrote(panel.path)
        stem = f"{stem}_single_anatomy"
    else:
        report = evaluate(ckpt, manifest, _names(args.test_sets) or None, split=split, device=device)
    csv_path, json_path = write_report(report, out_dir, stem)
    _wrote(csv_path)
    _wrote(json_path)
    if args.single_anatomy or not ckpt.dae_config.is_binary:
        md_path = write_report_md(class_table(report), out_dir / f"{stem}.md")
        _wrote(md_path)
    _print_summary(report)
    for note in report.notes:
        print(f"  note: {note}")
    return Outcome(
        out_dir,
        config_hash=ckpt.config_hash,
        seeds={"seed": ckpt.seed},
        extra={"checkpoint_sha256": ckpt.digest, "manifest_checksum": manifest.checksum()},
    )


def cmd_compare(args: argparse.Namespace) -> Outcome:
    path_a, path_b = _path(args.a), _path(args.b)
    report_a, report_b = read_report(path_a), read_report(path_b)
    names = (
        args.name_a or report_a.metadata.get("experiment") or path_a.stem,
        args.name_b or report_b.metadata.get("experiment") or path_b.stem,
    )
    result = compare(report_a, report_b, paired=not args.unpaired, alternative=args.alternative, names=names)
    out = _path(args.out) if args.out else path_a.parent / f"compare_{names[0]}_vs_{names[1]}.json"
    _wrote(write_comparisons([result], out))
    table = pvalue_table([result], test_sets=[e.test_set for e in result.entries])
    _wrote(write_report_md(table, out.with_suffix(".md")))
    print(table, end="")
    return Outcome(
        out.parent,
        extra={
            "a": report_a.metadata.get("config_hash", ""),
            "b": report_b.metadata.get("config_hash", ""),
            "test": result.test,
            "alternative": result.alternative,
        },
    )


def cmd_render(args: argparse.Namespace) -> Outcome:
    ckpt = load_checkpoint(_path(args.checkpoint), device=select_device())
    if not ckpt.dae_config.is_binary:
        raise EvaluationError("Rendering needs a binary checkpoint")
    manifest = _manifest(args)
    record = next(
        (r for r in manifest.pairs if r.subject_id == args.subject and r.variant_id == args.variant),
        None,
    )
    if record is None:
        raise DataError(f"Corpus has no pair {args.subject}/v{args.variant:02d}")
    pair = manifest.pair(record)
    out = _output_dir(args, "out", "renders_dir")
    if out.suffix != ".png":
        out = out / f"{ckpt.experiment or 'completion'}_{args.subject}_v{args.variant:02d}_{args.plane}.png"
    slices = [int(s) for s in _names(args.slices)] or None
    result = render_slices(
        pair,
        complete_pair(ckpt, pair),
        args.plane,
        out,
        slices=slices,
        count=args.count,
        title=f"{ckpt.experiment} {args.subject}/v{args.variant:02d}",
    )
    _wrote(result.path)
    for name, count in result.counts.items():
        print(f"  {name.replace('_', ' ')}: {count}")
    return Outcome(out.parent, config_hash=ckpt.config_hash, seeds={"seed": ckpt.seed})


def cmd_report(args: argparse.Namespace) -> Outcome:
    reports_dir = _output_dir(args, "reports", "reports_dir")
    reports = {
        path.stem: read_report(path)
        for path in sorted(reports_dir.glob("*.csv"))
        if not path.stem.endswith("_single_anatomy")
    }
    if not reports:
        raise DataError(f"No report CSV files in {reports_dir}")
    comparisons_path = reports_dir / "comparisons.json"
    comparisons = read_comparisons(comparisons_path) if comparisons_path.exists() else []
    out = _path(args.out) if args.out else reports_dir / "ablation.md"
    _wrote(build_report(reports, comparisons, out))
    return Outcome(out.parent)


def _add_global_options(parser: argparse.ArgumentParser, *, suppress: bool) -> None:
    """Options accepted both before and after the subcommand."""

    def default(value: Any) -> Any:
        return argparse.SUPPRESS if suppress else value

    parser.add_argument(
        "--config",
        default=default(""),
        help=f"Experiment presets or a standalone experiment file (default: {_rel(CONFIG_PATH)})",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        metavar="KEY=VALUE",
        default=default([]),
        help="Override a config value with a dotted key, e.g. --set epochs=5 --set dae.threshold=0.4",
    )
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, default=default("INFO"))


def _add_removal_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--preset", default="", help="Take removal policy, split and grid from this experiment preset.")
    sp.add_argument("--thresholds", default="", help="Comma-separated incompleteness thresholds, e.g. 0.1,0.2,0.4.")
    sp.add_argument("--protected", default="", help="Comma-separated anatomy names or patterns never removed.")
    sp.add_argument("--mode", choices=[m.value for m in RemovalMode], default="")
    sp.add_argument("--reference", choices=[r.value for r in FractionReference], default="")
    sp.add_argument("--instances", type=int, default=None, help="Variants per threshold (or per subject).")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--split", type=float, default=None, help="Share of subjects assigned to training.")
    sp.add_argument("--shape", default="", help="Network grid, e.g. 128 or 256,256,128 (default: native grid).")
    sp.add_argument("--out", default="", help="Corpus directory (default: <run>/corpus).")
    sp.add_argument("--run", default="", help="Run directory created by `init`.")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="anatomy-complete", description="Anatomy completion with denoising auto-encoders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def add(name: str, help_text: str, func: Any) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        _add_global_options(sp, suppress=True)
        sp.set_defaults(func=func)
        return sp

    sp = add("init", "Create a run directory with a starter experiment config", cmd_init)
    sp.add_argument("--run", required=True, help="Run directory to create.")
    sp.add_argument("--preset", default=DEFAULT_PRESET, help="Preset copied into the run config.")
    sp.add_argument("--force", action="store_true", help="Replace an existing run config.")

    sp = add("doctor", "Check interpreter, packages, device, config, and run files", cmd_doctor)
    sp.add_argument("--run", default="", help="Also check this run directory.")
    sp.add_argument("--verbose", action="store_true", help="Show informational checks.")

    sp = add("synth", "Generate phantom subjects and build a completion corpus", cmd_synth)
    sp.add_argument("--count", type=int, default=10, help="Number of phantom subjects.")
    sp.add_argument("--spec", default="", help=f"Phantom spec (default: {_rel(PHANTOM_SPEC_PATH)}).")
    sp.add_argument("--grid", default="", help="Phantom grid shape, overriding the spec.")
    _add_removal_options(sp)

    sp = add("prepare", "Build a completion corpus from NIfTI segmentations", cmd_prepare)
    sp.add_argument("--input", required=True, help="Folder of label NIfTI files or per-subject mask folders.")
    sp.add_argument("--merge", default="", help="JSON file mapping group names to source-name patterns.")
    sp.add_argument("--select", default="", help="Comma-separated anatomies to keep, or 'multiclass'.")
    _add_removal_options(sp)

    sp = add("train", "Train one experiment", cmd_train)
    sp.add_argument("--preset", default="", help="Preset name in the presets file.")
    sp.add_argument("--manifest", default="", help="Corpus manifest (default: the config's corpus).")
    sp.add_argument("--run", default="", help="Run directory created by `init`.")
    sp.add_argument("--checkpoint-dir", default="", help="Where checkpoints go (default: next to the corpus).")

    sp = add("ablate", "Train, evaluate, and compare the four binary methods", cmd_ablate)
    sp.add_argument("--preset", default="", help="Preset the four methods are derived from.")
    sp.add_argument("--manifest", default="")
    sp.add_argument("--run", default="")
    sp.add_argument("--checkpoint-dir", default="")
    sp.add_argument("--reports", default="", help="Where reports go (default: next to the checkpoints).")
    sp.add_argument("--unpaired", action="store_true", help="Use Welch's t-test instead of the paired test.")
    sp.add_argument("--alternative", choices=ALTERNATIVES, default="two-sided")

    sp = add("complete", "Complete one segmentation and write it at its original resolution", cmd_complete)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="NIfTI file, mask folder, or volume cache sidecar (.json).")
    sp.add_argument("--output", required=True, help="Completed NIfTI path.")
    sp.add_argument("--residual-output", default="", help="Reconstructed-only NIfTI (default: <output>_residual).")
    sp.add_argument("--assume-shape", default="", help="Original grid for inputs that do not record one.")

    sp = add("evaluate", "Score a checkpoint on a corpus", cmd_evaluate)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", choices=SPLITS, default=TEST)
    sp.add_argument("--test-sets", default="", help="Comma-separated test sets to keep (default: all).")
    sp.add_argument("--single-anatomy", action="store_true", help="Per-anatomy scores on a single_anatomy corpus.")
    sp.add_argument("--render-dir", default="", help="With --single-anatomy, write one panel per anatomy here.")
    sp.add_argument("--plane", choices=list(PLANE_AXES), default="coronal")
    sp.add_argument("--out", default="", help="Report directory (default: next to the corpus).")
    sp.add_argument("--stem", default="", help="Report file stem (default: experiment name).")

    sp = add("compare", "t-test per-instance DSC of two evaluation reports", cmd_compare)
    sp.add_argument("--a", required=True, help="Report CSV of model A.")
    sp.add_argument("--b", required=True, help="Report CSV of model B.")
    sp.add_argument("--name-a", default="")
    sp.add_argument("--name-b", default="")
    sp.add_argument("--unpaired", action="store_true", help="Use Welch's t-test instead of the paired test.")
    sp.add_argument("--alternative", choices=ALTERNATIVES, default="two-sided")
    sp.add_argument("--out", default="", help="Comparison JSON path.")

    sp = add("render", "Render a completion montage for one corpus pair", cmd_render)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", default="")
    sp.add_argument("--run", default="")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--variant", type=int, default=1)
    sp.add_argument("--plane", choices=list(PLANE_AXES), default="coronal")
    sp.add_argument("--slices", default="", help="Comma-separated slice indices (default: evenly spaced).")
    sp.add_argument("--count", type=int, default=4, help="Number of slices when --slices is not given.")
    sp.add_argument("--out", default="", help="PNG path or directory (default: <run>/renders).")

    sp = add("report", "Rebuild the Markdown results tables from saved reports", cmd_report)
    sp.add_argument("--reports", default="", help="Report directory (default: <run>/reports).")
    sp.add_argument("--run", default="")
    sp.add_argument("--out", default="", help="Markdown path (default: <reports>/ablation.md).")

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
        if args.overrides:
            parse_overrides(args.overrides)
        outcome = args.func(args)
        if outcome is not None:
            stamp = write_stamp(
                outcome.directory,
                command=args.command,
                config_hash=outcome.config_hash,
                seeds=outcome.seeds,
                extra=outcome.extra,
            )
            logger.debug("Stamped %s", stamp)
    except CompletionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    except Exception:  # noqa: BLE001
        logger.exception("Unexpected failure")
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
