"""Command line entry point.

Every subcommand reads an optional JSON ``--config`` and then applies the
flag overrides on top. Keys that are not experiment fields (``tasks``,
``methods``, ``seeds``, ``m_values``, ``pretrain``) drive the sweeps.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, tasks
from .backbone import load_backbone, save_backbone
from .reparam import load_prompt

DEFAULT_SWEEP = {
    "tasks": list(tasks.TASK_NAMES),
    "methods": ["simple", "residual", "superpos"],
    "seeds": [0, 1, 2],
    "m_values": [1, 16, 128],
}


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise SystemExit(f"{args.config}: top level must be a JSON object")
    sweeps = {"seed": "seeds", "task": "tasks", "method": "methods", "m": "m_values"}
    for key in ("seed", "task", "method", "m", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
            # a flag also narrows the matching sweep to that single value
            if key in sweeps:
                cfg[sweeps[key]] = [val]
    if getattr(args, "no_dropout", False):
        cfg["dropout"] = False
    if getattr(args, "backbone", None):
        cfg["backbone_path"] = args.backbone
    return cfg


def _experiment(cfg: dict) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.from_dict(cfg)


def _sweep(cfg: dict, key: str) -> list:
    return list(cfg.get(key, DEFAULT_SWEEP[key]))


def _backbone(cfg: dict):
    path = cfg.get("backbone_path")
    if not path:
        raise SystemExit("no backbone checkpoint: set backbone_path in the config or pass --backbone")
    return load_backbone(path)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    settings = dict(cfg.get("pretrain", {}))
    if args.seed is not None:
        settings["seed"] = args.seed
    bb, report = harness.build_backbone(settings, cfg.get("backbone"), log_every=args.log_every)
    out = _out(args, "backbone.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(bb, out)
    print(f"saved {out}  weights_hash={report.weights_hash}  "
          f"masked_acc={report.masked_accuracy:.4f} (chance {report.chance:.4f})")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    exp = _experiment(cfg)
    out = _out(args, "runs/run")
    result = harness.run_experiment(exp, _backbone(cfg), out_dir=out)
    print(f"{exp.task}/{harness.condition_label(exp.method, exp.dropout)} seed={exp.seed}: "
          f"best_val={result.best_val_score:.2f}@{result.best_epoch} test={result.test_score:.2f}"
          f"{'  FAILED: ' + result.failure if result.failed else ''}")
    print(f"artifacts in {out}")
    return 1 if result.failed else 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    base = _experiment(cfg)
    comp = harness.compare_methods(_sweep(cfg, "tasks"), _sweep(cfg, "methods"), _sweep(cfg, "seeds"),
                                   base, _backbone(cfg), _out(args, "runs/compare"),
                                   n_jobs=args.jobs)
    for label, avg in comp.averages.items():
        print(f"{label:<24} {avg:6.2f}")
    return 0


def cmd_ablate_m(args) -> int:
    cfg = _load_config(args)
    base = _experiment(cfg)
    series = harness.run_m_ablation(_sweep(cfg, "tasks"), _sweep(cfg, "m_values"), _sweep(cfg, "seeds"),
                                    base, _backbone(cfg), _out(args, "runs/ablate_m"), n_jobs=args.jobs)
    for m, score in series.items():
        print(f"m={m:<5} {score:6.2f}")
    return 0


def cmd_ablate_dropout(args) -> int:
    cfg = _load_config(args)
    base = _experiment(cfg)
    report = harness.run_dropout_comparison(_sweep(cfg, "tasks"), _sweep(cfg, "methods"),
                                            _sweep(cfg, "seeds"), base, _backbone(cfg),
                                            _out(args, "runs/ablate_dropout"), n_jobs=args.jobs)
    for method, d in report["deltas_nodrop_minus_drop"].items():
        print(f"{method:<16} score {d['score_delta']:+6.2f}  epochs-to-90% {d['steps_to_0.9_delta']:+6.2f}")
    return 0


def cmd_analyze_prompts(args) -> int:
    root = Path(args.out or "runs")
    files = [root] if root.is_file() else sorted(root.rglob("prompt.json"))
    if not files:
        raise SystemExit(f"no prompt.json under {root}")
    for f in files:
        params, _ = load_prompt(f)
        try:
            sim = harness.prompt_similarity_matrix(params)
        except harness.ExperimentError:
            continue
        target = f.with_name("similarity.json")
        target.write_text(json.dumps({"matrix": sim.matrix.data.tolist(),
                                      "zero_prompts": sim.zero_prompts}, indent=1))
        print(f"{target}")
    return 0


def cmd_stability(args) -> int:
    path = Path(args.out or "runs/compare")
    if path.is_dir():
        path = path / "summary.json"
    table = json.loads(path.read_text())["table"]
    _, text = harness.stability_report(table)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptlab", description="Soft-prompt tuning experiments on a small frozen encoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "pretrain": (cmd_pretrain, "pretrain a backbone on the grammar corpus and save it"),
        "run": (cmd_run, "train one prompt on one task"),
        "compare": (cmd_compare, "methods x tasks x seeds score table"),
        "ablate-m": (cmd_ablate_m, "SuperPos score as a function of m"),
        "ablate-dropout": (cmd_ablate_dropout, "every method with and without backbone dropout"),
        "analyze-prompts": (cmd_analyze_prompts, "cosine similarity of learned superposition weights"),
        "stability": (cmd_stability, "standardized overall scores from a compare summary"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON file with settings")
        p.add_argument("--seed", type=int)
        p.add_argument("--task", choices=tasks.TASK_NAMES)
        p.add_argument("--method", choices=harness.HARNESS_METHODS)
        p.add_argument("--no-dropout", action="store_true")
        p.add_argument("--m", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output path (input path for analyze-prompts/stability)")
        p.add_argument("--backbone", help="backbone checkpoint (.npz)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        p.add_argument("--log-every", type=int, default=250)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
