"""Experiment orchestration: single runs, method comparisons, ablations, reports.

Every run is a pure function of its :class:`ExperimentConfig` and the frozen
backbone; artifacts written by two runs of the same config are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import (Backbone, BackboneConfig, FrozenBackbone, PretrainReport, freeze, init_backbone,
                       label_logits, load_backbone, pad_batch, predicted_token, pretrain, weights_hash)
from .metrics import EvalResult, evaluate_predictions, score_for_table, standardized_overall_scores
from .optim import AdamW, AdamWConfig, ParamGroup
from .reparam import (SuperPosParams, count_trainable, expected_trainable, init_prompt,
                      prompt_to_dict)
from .tasks import (Dataset, Example, TaskSpec, decode_prediction, generate_pretrain_corpus,
                    generate_task, make_task_spec, target_token)

log = logging.getLogger(__name__)

HARNESS_METHODS = ("simple", "superpos", "softmax_mixture", "residual", "full_finetune")

# (learning rate, weight decay) per method
METHOD_DEFAULTS = {
    "simple": (0.01, 0.01),
    "residual": (0.3, 0.01),
    "superpos": (0.01, 1e-5),
    "softmax_mixture": (0.01, 1e-5),
    "full_finetune": (1e-5, 0.0),
}


# the recipe behind the reference desk backbone
DEFAULT_PRETRAIN = {"steps": 2000, "corpus_size": 20000, "corpus_seed": 0, "lr": 2e-3,
                    "weight_decay": 0.01, "batch_size": 32, "seed": 0}


class ExperimentError(RuntimeError):
    pass


def build_backbone(settings: dict | None = None, backbone_config: dict | None = None,
                   log_every: int = 0) -> tuple[FrozenBackbone, PretrainReport]:
    """Pretrain a fresh backbone on the grammar corpus and freeze it.

    ``settings`` overrides :data:`DEFAULT_PRETRAIN`; masked-token accuracy is
    measured on 256 held-out sequences from the next corpus seed.
    """
    s = {**DEFAULT_PRETRAIN, **(settings or {})}
    cfg = BackboneConfig(**{**(backbone_config or {}), "seed": s["seed"]})
    bb = init_backbone(cfg)
    corpus = generate_pretrain_corpus(s["corpus_seed"], s["corpus_size"], cfg.vocab_size)
    held_out = generate_pretrain_corpus(s["corpus_seed"] + 1, 256, cfg.vocab_size)
    report = pretrain(bb, corpus, s["steps"], lr=s["lr"], weight_decay=s["weight_decay"],
                      batch_size=s["batch_size"], seed=s["seed"], eval_corpus=held_out,
                      log_every=log_every)
    return freeze(bb), report


@dataclass
class ExperimentConfig:
    method: str = "superpos"
    task: str = "parity"
    dropout: bool = True
    n: int = 10
    m: int = 128
    bottleneck: int = 128
    lr: float | None = None
    weight_decay: float | None = None
    epochs: int = 80
    batch_size: int = 32
    seed: int = 0
    backbone_path: str | None = None
    task_seed: int = 0
    task_sizes: tuple[int, int, int] = (256, 256, 512)
    coef_init: str = "onehot"
    shared_e: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.method not in HARNESS_METHODS:
            raise ExperimentError(f"unknown method {self.method!r}; choose from {HARNESS_METHODS}")
        self.task_sizes = tuple(self.task_sizes)
        if self.epochs < 0 or self.batch_size < 1 or self.n < 0:
            raise ExperimentError("epochs, batch_size and n must be non-negative (batch_size >= 1)")

    @property
    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else METHOD_DEFAULTS[self.method][0]

    @property
    def resolved_weight_decay(self) -> float:
        return self.weight_decay if self.weight_decay is not None else METHOD_DEFAULTS[self.method][1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_sizes"] = list(self.task_sizes)
        d["resolved_lr"] = self.resolved_lr
        d["resolved_weight_decay"] = self.resolved_weight_decay
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_score: float
    invalid_frac: float


@dataclass
class RunResult:
    config: ExperimentConfig
    curve: list[EpochRecord]
    best_val_score: float
    best_epoch: int
    test: EvalResult
    test_score: float
    weights_hash_before: str
    weights_hash_after: str
    trainable_params: int
    expected_trainable_params: int
    wall_clock: float = 0.0
    failed: bool = False
    failure: str | None = None
    prompt: object = field(default=None, repr=False)

    def steps_to_fraction(self, f: float = 0.9) -> int:
        """First epoch (1-based) whose validation score reaches ``f`` x best.

        Returns 0 for a run without epochs.
        """
        if not self.curve:
            return 0
        target = f * self.best_val_score
        for rec in self.curve:
            if rec.val_score >= target:
                return rec.epoch
        return self.curve[-1].epoch

    def summary(self) -> dict:
        """Everything that goes into ``result.json``; wall-clock stays out so reruns match."""
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "best_val_score": self.best_val_score,
            "best_epoch": self.best_epoch,
            "test": self.test.to_dict(),
            "test_score": self.test_score,
            "steps_to_fraction_0.9": self.steps_to_fraction(0.9),
            "weights_hash": {"before": self.weights_hash_before, "after": self.weights_hash_after},
            "parameter_counts": {"trainable": self.trainable_params,
                                 "expected": self.expected_trainable_params},
            "failed": self.failed,
            "failure": self.failure,
        }


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

def _batches(examples: Sequence[Example], spec: TaskSpec):
    ids, valid = pad_batch([e.tokens for e in examples])
    targets = np.array([target_token(spec, e) for e in examples], dtype=np.int64)
    return ids, valid, targets


def evaluate(bb, prompt, examples: Sequence[Example], spec: TaskSpec,
             batch_size: int = 32) -> EvalResult:
    """Greedy label-token prediction with dropout off and no tape."""
    preds: list = [None] * len(examples)
    P = prompt.materialize() if prompt is not None else None
    # length-sorted batches keep padding small; predictions go back in input order
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].tokens))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        ids, valid = pad_batch([examples[i].tokens for i in chunk])
        logits = label_logits(bb, P, ids, valid, training=False)
        for i, t in zip(chunk, predicted_token(logits.data)):
            preds[i] = decode_prediction(spec, int(t))
    return evaluate_predictions(spec.metrics, preds, [e.target for e in examples])


def _trainables(cfg: ExperimentConfig, bb: FrozenBackbone, rng: np.random.Generator):
    """Returns (prompt or None, model backbone, optimizer groups)."""
    lr, wd = cfg.resolved_lr, cfg.resolved_weight_decay
    if cfg.method == "full_finetune":
        model = bb.unfrozen()
        model.dropout_enabled = cfg.dropout
        return None, model, [ParamGroup(model.parameters(), lr, wd)]
    prompt = init_prompt(cfg.method, bb, cfg.n, rng, m=cfg.m, bottleneck=cfg.bottleneck,
                         coef_init=cfg.coef_init, shared_e=cfg.shared_e)
    groups = [ParamGroup(ts, lr, wd if decay else 0.0) for ts, decay in prompt.param_groups()]
    return prompt, bb.with_dropout(cfg.dropout), groups


def _snapshot(tensors: Sequence[Tensor]) -> list[np.ndarray]:
    return [t.data.copy() for t in tensors]


def _restore(tensors: Sequence[Tensor], saved: Sequence[np.ndarray]) -> None:
    for t, s in zip(tensors, saved):
        t.data[...] = s


def run_experiment(config: ExperimentConfig, backbone: FrozenBackbone | None = None,
                   dataset: Dataset | None = None, out_dir: str | Path | None = None) -> RunResult:
    """Train one prompt (or the whole model) on one task and evaluate it.

    The weights hash of the frozen backbone is checked after training; a
    prompt-tuning run that changed it is marked failed.
    """
    start = time.perf_counter()
    cfg = config
    if backbone is None:
        if not cfg.backbone_path or not Path(cfg.backbone_path).exists():
            raise FileNotFoundError(f"backbone checkpoint not found: {cfg.backbone_path}")
        backbone = load_backbone(cfg.backbone_path)
    V = backbone.config.vocab_size
    spec = make_task_spec(cfg.task, V, cfg.task_seed, cfg.task_sizes)
    data = dataset or generate_task(spec)
    spec = data.spec or spec
    hash_before = weights_hash(backbone)

    rng = np.random.default_rng(cfg.seed)
    prompt, model, groups = _trainables(cfg, backbone, rng)
    opt = AdamW(groups, AdamWConfig(lr=cfg.resolved_lr, max_grad_norm=cfg.max_grad_norm))
    tensors = opt.tensors
    if prompt is not None:
        n_trainable = count_trainable(prompt)
        n_expected = expected_trainable(cfg.method, backbone.config.model_dim, cfg.n, cfg.m,
                                        cfg.bottleneck, cfg.shared_e)
    else:
        n_trainable = n_expected = model.num_parameters()
    log.info("%s/%s seed=%d trainable=%d", cfg.task, cfg.method, cfg.seed, n_trainable)

    train = list(data.train)
    curve: list[EpochRecord] = []
    best_score, best_epoch = -np.inf, 0
    best_state = _snapshot(tensors)
    failure = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for b, s in enumerate(range(0, len(train), cfg.batch_size)):
            batch = [train[i] for i in order[s:s + cfg.batch_size]]
            ids, valid, targets = _batches(batch, spec)
            opt.zero_grad()
            with ad.Tape(seed=int(np.random.SeedSequence([cfg.seed, epoch, b]).generate_state(1)[0])) as tape:
                P = prompt.materialize() if prompt is not None else None
                loss = ad.cross_entropy(label_logits(model, P, ids, valid, training=True), targets)
                if not np.isfinite(loss.data):
                    failure = f"non-finite loss at epoch {epoch}, batch {b}"
                    break
                ad.backpropagate(loss, tape)
            try:
                opt.step()
            except FloatingPointError as exc:
                failure = f"epoch {epoch}: {exc}"
                break
            losses.append(float(loss.data))
        if failure:
            break
        val = evaluate(model, prompt, data.val, spec)
        score = score_for_table(val)
        curve.append(EpochRecord(epoch, float(np.mean(losses)), score, val.invalid_fraction))
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = _snapshot(tensors)

    _restore(tensors, best_state)
    test = evaluate(model, prompt, data.test, spec)
    if not curve:
        best_score = score_for_table(evaluate(model, prompt, data.val, spec))
    hash_after = weights_hash(backbone)
    if prompt is not None and hash_after != hash_before and failure is None:
        failure = "frozen backbone weights changed during prompt tuning"
    result = RunResult(
        config=cfg, curve=curve, best_val_score=float(best_score), best_epoch=best_epoch,
        test=test, test_score=score_for_table(test) if failure is None else 0.0,
        weights_hash_before=hash_before, weights_hash_after=hash_after,
        trainable_params=n_trainable, expected_trainable_params=n_expected,
        wall_clock=time.perf_counter() - start, failed=failure is not None, failure=failure,
        prompt=prompt,
    )
    if out_dir is not None:
        write_run_artifacts(result, out_dir)
    return result


def curve_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_score", "invalid_frac"])
    for r in result.curve:
        w.writerow([r.epoch, f"{r.train_loss:.17g}", f"{r.val_score:.17g}", f"{r.invalid_frac:.17g}"])
    return buf.getvalue()


def write_run_artifacts(result: RunResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve_csv(result))
    (out / "result.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": result.wall_clock}))
    if result.prompt is not None:
        (out / "prompt.json").write_text(json.dumps(prompt_to_dict(result.prompt, result.config.seed)))
    return out


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _run_job(args):
    cfg, backbone, out_dir = args
    return run_experiment(cfg, backbone, out_dir=out_dir)


def run_many(configs: Sequence[ExperimentConfig], backbone: FrozenBackbone | None = None,
             out_dirs: Sequence[str | Path | None] | None = None,
             n_jobs: int = 1) -> list[RunResult]:
    """Run independent configs, optionally in worker processes; order is preserved."""
    out_dirs = list(out_dirs) if out_dirs is not None else [None] * len(configs)
    jobs = [(c, backbone, d) for c, d in zip(configs, out_dirs)]
    if n_jobs <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, jobs))


def condition_label(method: str, dropout: bool) -> str:
    return f"{method}{'' if dropout else '-nodrop'}"


@dataclass
class Comparison:
    """Seed-averaged score table plus every underlying run."""

    table: dict[str, dict[str, float]]
    runs: dict[tuple[str, str, int], RunResult]
    failed: list[tuple[str, str, int]]

    @property
    def averages(self) -> dict[str, float]:
        return {m: float(np.mean(list(row.values()))) for m, row in self.table.items()}

    def summary(self) -> dict:
        return {
            "table": self.table,
            "avg": self.averages,
            "failed": [list(k) for k in self.failed],
            "runs": {"/".join(map(str, k)): r.summary() for k, r in sorted(self.runs.items())},
        }


def compare_methods(tasks: Sequence[str], methods: Sequence[str], seeds: Sequence[int],
                    base: ExperimentConfig | None = None, backbone: FrozenBackbone | None = None,
                    out_dir: str | Path | None = None, dropout_conditions: Sequence[bool] | None = None,
                    n_jobs: int = 1) -> Comparison:
    """Run every (method, dropout, task, seed) cell and average ``test_score`` over seeds.

    Failed runs count as 0 and are listed in ``failed``.
    """
    if not tasks or not methods:
        raise ExperimentError("need at least one task and one method")
    base = base or ExperimentConfig()
    drops = list(dropout_conditions) if dropout_conditions is not None else [base.dropout]
    if backbone is None and base.backbone_path:
        backbone = load_backbone(base.backbone_path)
    keys, configs, dirs = [], [], []
    for method in methods:
        for d in drops:
            label = condition_label(method, d)
            for task in tasks:
                for seed in seeds:
                    keys.append((label, task, seed))
                    configs.append(replace(base, method=method, dropout=d, task=task, seed=seed))
                    dirs.append(Path(out_dir) / task / label / f"seed{seed}" if out_dir else None)
    results = run_many(configs, backbone, dirs, n_jobs)
    runs = dict(zip(keys, results))
    table: dict[str, dict[str, float]] = {}
    failed = []
    for (label, task, seed), r in runs.items():
        if r.failed:
            failed.append((label, task, seed))
    for label in dict.fromkeys(k[0] for k in keys):
        table[label] = {}
        for task in tasks:
            scores = [runs[(label, task, s)].test_score for s in seeds]
            table[label][task] = float(np.mean(scores))
    comp = Comparison(table, runs, failed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        summary = comp.summary()
        summary["seeds"] = list(seeds)
        summary["base_config"] = base.to_dict()
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return comp


def _mean_over(runs, label, attr):
    vals = [getattr(r, attr) if attr != "steps" else r.steps_to_fraction(0.9)
            for (lab, _, _), r in runs.items() if lab == label]
    return float(np.mean(vals))


def dropout_deltas(comp: Comparison, methods: Sequence[str], first: bool = False,
                   second: bool = True) -> dict[str, dict[str, float]]:
    """Per-method ``mean(condition first) - mean(condition second)`` of score and convergence epoch.

    With the defaults this is no-dropout minus dropout; swapping the two
    conditions negates every entry.
    """
    out = {}
    for m in methods:
        a, b = condition_label(m, first), condition_label(m, second)
        out[m] = {
            "score_delta": _mean_over(comp.runs, a, "test_score") - _mean_over(comp.runs, b, "test_score"),
            "steps_to_0.9_delta": _mean_over(comp.runs, a, "steps") - _mean_over(comp.runs, b, "steps"),
        }
    return out


def run_dropout_comparison(tasks: Sequence[str], methods: Sequence[str], seeds: Sequence[int],
                           base: ExperimentConfig | None = None,
                           backbone: FrozenBackbone | None = None,
                           out_dir: str | Path | None = None, n_jobs: int = 1) -> dict:
    comp = compare_methods(tasks, methods, seeds, base, backbone, out_dir, (True, False), n_jobs)
    report = {
        "table": comp.table,
        "deltas_nodrop_minus_drop": dropout_deltas(comp, methods),
        "mean_score": {lab: _mean_over(comp.runs, lab, "test_score") for lab in comp.table},
        "mean_steps_to_0.9": {lab: _mean_over(comp.runs, lab, "steps") for lab in comp.table},
        "failed": [list(k) for k in comp.failed],
    }
    if out_dir is not None:
        (Path(out_dir) / "dropout_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    report["comparison"] = comp
    return report


def run_m_ablation(tasks: Sequence[str], m_values: Sequence[int], seeds: Sequence[int],
                   base: ExperimentConfig | None = None, backbone: FrozenBackbone | None = None,
                   out_dir: str | Path | None = None, n_jobs: int = 1) -> dict[int, float]:
    """Suite-mean best validation score of SuperPos per ``m``; only ``m`` varies."""
    base = replace(base or ExperimentConfig(), method="superpos")
    if backbone is None and base.backbone_path:
        backbone = load_backbone(base.backbone_path)
    V = backbone.config.vocab_size if backbone is not None else None
    for m in m_values:
        if m < 1 or (V is not None and m > V):
            raise ExperimentError(f"m={m} outside [1, V]")
    configs, dirs, keys = [], [], []
    for m in m_values:
        for task in tasks:
            for seed in seeds:
                keys.append(m)
                configs.append(replace(base, m=m, task=task, seed=seed))
                dirs.append(Path(out_dir) / f"m{m}" / task / f"seed{seed}" if out_dir else None)
    results = run_many(configs, backbone, dirs, n_jobs)
    series = {m: float(np.mean([r.best_val_score for k, r in zip(keys, results) if k == m]))
              for m in m_values}
    if out_dir is not None:
        lines = ["m,best_score"] + [f"{m},{s:.17g}" for m, s in series.items()]
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "m_series.csv").write_text("\n".join(lines) + "\n")
    return series


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------

@dataclass
class SimilarityResult:
    matrix: Tensor
    zero_prompts: list[int]


def prompt_similarity_matrix(params: SuperPosParams) -> SimilarityResult:
    """Cosine similarity between the learned superposition weight vectors.

    A zero weight vector has similarity 0 with every other prompt (its
    diagonal entry stays 1) and is listed in ``zero_prompts``.
    """
    if not isinstance(params, SuperPosParams):
        raise ExperimentError("similarity analysis needs superpos or softmax_mixture params")
    C = np.stack([c.data for c in params.coef_list])
    norms = np.linalg.norm(C, axis=1)
    zero = [i for i, v in enumerate(norms) if v == 0.0]
    safe = np.where(norms == 0.0, 1.0, norms)
    U = C / safe[:, None]
    S = U @ U.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    for i in zero:
        S[i, :] = 0.0
        S[:, i] = 0.0
        S[i, i] = 1.0
    return SimilarityResult(Tensor(S), zero)


def stability_report(table: dict[str, dict[str, float | None]]) -> tuple[dict[str, tuple[float, float]], str]:
    """Standardized overall scores per method and a printable table."""
    stats = standardized_overall_scores(table)
    width = max(len(m) for m in stats)
    lines = [f"{'method':<{width}}  mean±std"]
    for m, (mu, sd) in stats.items():
        lines.append(f"{m:<{width}}  {mu:.1f}±{sd:.1f}")
    return stats, "\n".join(lines)
