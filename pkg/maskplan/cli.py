"""Command-line pipeline: worlds, datasets, training, planning, scoring and ablations."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .ablation import AblationConfig, run_ablation
from .artifacts import atomic_write_text, read_jsonl, write_csv, write_json_artifact, write_jsonl
from .checkpoint import load_checkpoint
from .classifier import ClassifierConfig, ClassifierTrainConfig, load_classifier, save_classifier, train_classifier
from .configuration import LOG_ENV, RunConfig, config_dict, config_hash, dump_key_values, load_config_file, resolve_config
from .diffusion import make_schedule
from .masking import SOFT, StateLayout, build_task_masks, load_mask_table, mask_table, save_mask_table
from .planner import (
    CLASSIFIER_TASKS,
    ORACLE_TASKS,
    SAMPLERS,
    TABLE_COLUMNS,
    EvalConfig,
    PlanningContext,
    PlanSample,
    SamplerConfig,
    normalize_sampler,
    sample_plans,
    score_against,
)
from .trainer import TrainConfig, train_diffusion
from .unet import UNetConfig, load_unet
from .world import PROTOCOLS, PlanInstance, WorldSpec, generate_world, load_dataset, load_world, sample_dataset, save_dataset, save_world, split_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad command-line usage; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _configure_logging() -> None:
    raw = os.environ.get(LOG_ENV, "INFO").strip()
    level: Any = int(raw) if raw.isdigit() else logging.getLevelName(raw.upper())
    unknown = not isinstance(level, int)
    logging.basicConfig(
        level=logging.INFO if unknown else level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
    )
    if unknown:
        logger.warning("Unknown %s level %r, using INFO", LOG_ENV, raw)


def _common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    parser.add_argument("--config", type=Path, default=None, help="JSON or key=value config file")
    parser.add_argument("--out", type=Path, required=out_required, default=None, help="output path")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sampling workers")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskplan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"maskplan {__version__}")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)
    sub.required = True

    world = sub.add_parser("gen-world", help="generate a synthetic world")
    _common(world)
    world.add_argument("--horizon", type=int, choices=(3, 4, 5, 6), default=None)

    data = sub.add_parser("gen-data", help="sample plan instances from a world")
    _common(data)
    data.add_argument("--world", type=Path, required=True)
    data.add_argument("--videos", type=int, required=True)
    data.add_argument("--protocol", default="sliding", help=f"one of {PROTOCOLS} (or sliding / one)")
    data.add_argument("--split", type=float, default=None, help="train ratio; tags every instance")

    clf = sub.add_parser("train-classifier", help="train the task classifier")
    _common(clf)
    clf.add_argument("--world", type=Path, required=True)
    clf.add_argument("--data", type=Path, required=True)
    clf.add_argument("--variant", choices=("mlp", "transformer"), default=None)
    clf.add_argument("--no-text", action="store_true", help="zero the caption channels")

    diff = sub.add_parser("train-diffusion", help="train the masked denoiser")
    _common(diff)
    diff.add_argument("--world", type=Path, required=True)
    diff.add_argument("--data", type=Path, required=True)
    diff.add_argument("--mask", choices=("hard", "soft", "none"), default=None)
    diff.add_argument("--classifier", type=Path, default=None, help="needed for soft masks and eval_SR")

    plan = sub.add_parser("plan", help="sample plans for a dataset")
    _common(plan)
    plan.add_argument("--data", type=Path, required=True)
    plan.add_argument("--model", type=Path, required=True)
    plan.add_argument("--masks", type=Path, required=True)
    plan.add_argument("--classifier", type=Path, default=None)
    plan.add_argument("--oracle-task", action="store_true", help="condition on ground-truth tasks")
    plan.add_argument("--mask", choices=("hard", "soft", "none"), default=None)
    plan.add_argument("--sampler", choices=SAMPLERS + ("det",), default=None)
    plan.add_argument("--ddim-steps", type=int, default=None)
    plan.add_argument("--eta", type=float, default=None)
    plan.add_argument("--horizon", type=int, choices=(3, 4, 5, 6), default=None)
    plan.add_argument("--samples", type=int, default=1, help="plans drawn per instance")

    ev = sub.add_parser("eval", help="score plans against ground truth")
    _common(ev)
    ev.add_argument("--plans", type=Path, nargs="+", required=True)
    ev.add_argument("--gt", type=Path, required=True)
    ev.add_argument("--distribution", action="store_true", help="also score plan distributions")
    ev.add_argument("--table", type=Path, default=None, help="results table CSV, one row per sampler")
    ev.add_argument("--horizon", type=int, choices=(3, 4, 5, 6), default=None)

    ablate = sub.add_parser("ablate", help="mask kind x action-space size sweep")
    _common(ablate)

    inspect = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    _common(inspect, out_required=False)
    inspect.add_argument("path", type=Path)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(subcommand=args.subcommand, config_path=args.config, out=args.out, seed=args.seed, jobs=args.jobs)


def _snapshot(run: RunConfig, sections: Mapping[str, Any], directory: bool = False) -> str:
    """Write the resolved config next to the outputs; returns its hash."""
    payload = {"subcommand": run.subcommand, **{name: config_dict(cfg) for name, cfg in sections.items()}}
    digest = config_hash(payload)
    if run.out is not None:
        text = f"# maskplan {__version__} {run.subcommand} config={digest}\n"
        text += "".join(dump_key_values(cfg, name) for name, cfg in sections.items())
        path = run.out / "run.config" if directory else Path(f"{run.out}.config")
        atomic_write_text(path, text)
    return digest


def _seed(run: RunConfig) -> Dict[str, Any]:
    return {"seed": run.seed} if run.seed is not None else {}


def _training_split(instances: Sequence[PlanInstance]) -> List[PlanInstance]:
    return [x for x in instances if x.split != "test"]


def _cmd_gen_world(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    overrides = {**_seed(run), **({"horizon": args.horizon} if args.horizon else {})}
    spec = resolve_config(WorldSpec, file_values, overrides, section="world")
    digest = _snapshot(run, {"world": spec})
    world = generate_world(spec)
    save_world(args.out, world, config_hash=digest)
    logger.info("World with %d tasks / %d actions written to %s", world.num_tasks, world.num_actions, args.out)


def _cmd_gen_data(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    world = load_world(args.world)
    seed = run.seed if run.seed is not None else world.spec.seed
    digest = _snapshot(run, {"world": world.spec})
    instances = sample_dataset(world, args.videos, args.protocol, seed=seed)
    if args.split is not None:
        train, test = split_dataset(instances, args.split, seed)
        instances = train + test
    count = save_dataset(args.out, instances, config_hash=digest)
    logger.info("Wrote %d plan instances to %s", count, args.out)


def _cmd_train_classifier(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    world = load_world(args.world)
    overrides: Dict[str, Any] = {
        "obs_dim": world.spec.obs_dim,
        "num_tasks": world.num_tasks,
        "visual_dim": world.spec.visual_dim,
        **_seed(run),
    }
    if args.variant:
        overrides["variant"] = args.variant
    if args.no_text:
        overrides["use_text"] = False
    config = resolve_config(ClassifierConfig, file_values, overrides, section="classifier")
    train_config = resolve_config(ClassifierTrainConfig, file_values, _seed(run), section="classifier_train")
    digest = _snapshot(run, {"classifier": config, "classifier_train": train_config})
    instances = load_dataset(args.data)
    held_out = [x for x in instances if x.split == "test"]
    model, report = train_classifier(_training_split(instances), config, train_config, held_out or None, progress=True)
    save_classifier(args.out, model, {"report": report.to_dict()}, config_hash=digest)
    write_json_artifact(Path(f"{args.out}.report.json"), {"report": report.to_dict()}, config_hash=digest)


def _cmd_train_diffusion(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    world = load_world(args.world)
    layout = StateLayout.for_world(world)
    train_overrides = {**_seed(run), **({"mask": args.mask} if args.mask else {})}
    cfg = resolve_config(TrainConfig, file_values, train_overrides, section="train")
    unet_cfg = resolve_config(UNetConfig, file_values, {"input_dim": layout.dim, **_seed(run)}, section="unet")
    digest = _snapshot(run, {"train": cfg, "unet": unet_cfg}, directory=True)
    instances = load_dataset(args.data)
    train = _training_split(instances)
    held_out = [x for x in instances if x.split == "test"]
    masks = build_task_masks(train, layout.num_tasks, layout.num_actions)
    save_mask_table(args.out / "masks.json", masks, config_hash=digest)
    classifier = load_classifier(args.classifier)[0] if args.classifier else None
    posteriors = None
    if cfg.mask == SOFT:
        if classifier is None:
            raise UsageError("--mask soft needs --classifier")
        posteriors = classifier.classify(
            np.stack([x.obs_start for x in train]), np.stack([x.obs_goal for x in train])
        ).posterior
    train_diffusion(
        train,
        layout,
        mask_table(masks),
        unet_cfg,
        cfg,
        out_dir=args.out,
        posteriors=posteriors,
        classifier=classifier,
        eval_instances=held_out,
        config_hash=digest,
        progress=True,
    )


def _planning_context(args: argparse.Namespace) -> PlanningContext:
    model, extra = load_unet(args.model)
    if "layout" not in extra or "schedule" not in extra:
        raise ValueError(f"{args.model} carries no layout/schedule; was it written by train-diffusion?")
    layout = StateLayout(**extra["layout"])
    schedule = make_schedule(**extra["schedule"])
    masks = load_mask_table(args.masks)
    classifier = load_classifier(args.classifier)[0] if args.classifier else None
    return PlanningContext(model=model, schedule=schedule, layout=layout, table=mask_table(masks), classifier=classifier)


def _cmd_plan(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    overrides: Dict[str, Any] = {"jobs": run.jobs, **_seed(run)}
    for flag, name in (("sampler", "sampler"), ("ddim_steps", "ddim_steps"), ("eta", "eta"), ("mask", "mask")):
        if getattr(args, flag) is not None:
            overrides[name] = getattr(args, flag)
    if "sampler" in overrides:
        overrides["sampler"] = normalize_sampler(overrides["sampler"])
    if args.oracle_task:
        overrides["task_source"] = ORACLE_TASKS
    cfg = resolve_config(SamplerConfig, file_values, overrides, section="sampler")
    if cfg.task_source == CLASSIFIER_TASKS and args.classifier is None:
        raise UsageError("plan needs --classifier unless --oracle-task is given")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    digest = _snapshot(run, {"sampler": cfg})
    ctx = _planning_context(args)
    instances = load_dataset(args.data)
    if any(x.split == "test" for x in instances):
        instances = [x for x in instances if x.split == "test"]
    if args.horizon is not None:
        instances = [x for x in instances if x.horizon == args.horizon]
    jobs = [x for x in instances for _ in range(args.samples)]
    indices = [i for _ in instances for i in range(args.samples)]
    samples = sample_plans(jobs, ctx, cfg, sample_indices=indices)
    count = write_jsonl(args.out, (s.to_record() for s in samples), config_hash=digest)
    logger.info("Wrote %d plans for %d instances to %s", count, len(instances), args.out)


def _cmd_eval(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    gt = load_dataset(args.gt)
    if args.horizon is not None:
        gt = [x for x in gt if x.horizon == args.horizon]
    keys = {x.key for x in gt}
    by_sampler: Dict[str, List[PlanSample]] = defaultdict(list)
    for path in args.plans:
        for record in read_jsonl(path):
            sample = PlanSample.from_record(record)
            if sample.key in keys:
                by_sampler[sample.sampler].append(sample)
    if not by_sampler:
        raise ValueError("no plans matched the ground-truth instances")
    epsilon = resolve_config(EvalConfig, file_values, {}, section="eval").epsilon
    digest = config_hash(
        {
            "subcommand": run.subcommand,
            "plans": [str(p) for p in args.plans],
            "gt": str(args.gt),
            "distribution": args.distribution,
            "horizon": args.horizon,
            "epsilon": epsilon,
        }
    )
    reports = {}
    for sampler in sorted(by_sampler):
        samples = by_sampler[sampler]
        matched = [x for x in gt if x.key in {s.key for s in samples}]
        reports[sampler] = score_against(samples, matched, distribution=args.distribution, epsilon=epsilon)
    first = reports[sorted(reports)[0]]
    payload = {**first.to_dict(), "by_sampler": {name: report.to_dict() for name, report in reports.items()}}
    write_json_artifact(args.out, payload, config_hash=digest)
    atomic_write_text(Path(f"{args.out}.config"), f"# maskplan {__version__} eval config={digest}\neval.epsilon={epsilon}\n")
    if args.table is not None:
        rows = [[name, *report.row()] for name, report in sorted(reports.items())]
        write_csv(args.table, ("model",) + TABLE_COLUMNS, rows, config_hash=digest)
    for name, report in sorted(reports.items()):
        logger.info("%s: %s", name, json.dumps(report.to_dict()["metrics"], sort_keys=True))


def _cmd_ablate(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    overrides = {"seeds": (run.seed,)} if run.seed is not None else {}
    cfg = resolve_config(AblationConfig, file_values, overrides, section="ablation")
    digest = _snapshot(run, {"ablation": cfg}, directory=True)
    report = run_ablation(cfg, args.out, config_hash=digest, progress=True)
    for size, gap in sorted(report.gaps().items()):
        logger.info("L_a=%d hard-none SR gap %.4f", size, gap)


def _cmd_inspect(args: argparse.Namespace, run: RunConfig, file_values: Dict[str, Any]) -> None:
    checkpoint = load_checkpoint(args.path)
    header = {"magic": checkpoint.magic.decode("ascii"), **checkpoint.header}
    if args.out is not None:
        write_json_artifact(args.out, {"checkpoint": header}, config_hash=header.get("config_hash"))
    sys.stdout.write(json.dumps(header, indent=2, sort_keys=True) + "\n")


_COMMANDS = {
    "gen-world": _cmd_gen_world,
    "gen-data": _cmd_gen_data,
    "train-classifier": _cmd_train_classifier,
    "train-diffusion": _cmd_train_diffusion,
    "plan": _cmd_plan,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "inspect-checkpoint": _cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        run = _run_config(args)
        file_values = load_config_file(run.config_path)
        _COMMANDS[args.subcommand](args, run, file_values)
    except UsageError as exc:
        logger.error("%s", exc)
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        logger.error("%s failed: %s", type(exc).__name__, exc)
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK
