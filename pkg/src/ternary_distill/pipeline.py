"""Teacher fine-tuning, ternary conversion, continued pretraining, distillation.

Every random draw comes from a ``numpy.random.Generator`` seeded from
``TrainConfig.seed`` plus a fixed per-stage offset, so each stage is
reproducible on its own and a full run is reproducible end to end.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .data import Batch, CorpusDataset, TaskDataset, iterate_minibatches
from .losses import DistillConfig, LossConfigError, ce_loss, layer_relation_loss, logits_kl, total_loss
from .model import BitModel, ContractError, ModelConfig, code_distribution_tv, export_weight_histogram, generate_batch, resolve_layer, to_quantized

log = logging.getLogger(__name__)

_SEED_OFFSETS = {"teacher": 0, "stage2": 1, "stage3": 2, "init": 3, "base": 4}


class TrainingDiverged(RuntimeError):
    pass


class StageOrderError(ContractError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 7
    batch_size: int = 32
    base_lr: float = 3e-4
    teacher_lr: float = 3e-4
    stage2_lr: float = 3e-4
    stage3_lr: float = 1e-4
    warmup_steps: int = 20
    base_steps: int = 2000
    teacher_steps: int = 300
    stage2_steps: int = 200
    stage3_steps: int = 60
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("batch_size", "log_every"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("base_steps", "teacher_steps", "stage2_steps", "stage3_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, _SEED_OFFSETS[stage]])


class AdamW:
    """Adam with decoupled weight decay over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data -= np.float32(lr * self.wd) * p.data
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * upd).astype(np.float32)


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warmup to ``base`` then constant."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    return base


def _clip_grads(params, max_norm: float) -> float:
    norm = ad.parameters_grad_norm(params)
    if max_norm and norm > max_norm:
        s = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


@dataclass
class TrainLog:
    """Per-interval rows: epoch, split, l_ce, l_ld, l_ad, total, accuracy."""

    rows: list[dict] = field(default_factory=list)

    def add(self, epoch, split, l_ce, l_ld=0.0, l_ad=0.0, total=None, accuracy=float("nan")):
        total = l_ce if total is None else total
        self.rows.append(dict(epoch=epoch, split=split, l_ce=l_ce, l_ld=l_ld, l_ad=l_ad, total=total, accuracy=accuracy))

    def extend(self, other: TrainLog) -> None:
        self.rows.extend(other.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "l_ce", "l_ld", "l_ad", "total", "accuracy"])
        for r in self.rows:
            w.writerow([r["epoch"], r["split"]] + [f"{r[k]:.6g}" for k in ("l_ce", "l_ld", "l_ad", "total", "accuracy")])
        return buf.getvalue()

    def medians(self, split: str, key: str = "total") -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split]


def _train(
    model: BitModel,
    n_items: int,
    get_batch,
    loss_fn,
    steps: int,
    lr: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
    split: str,
    trainlog: TrainLog,
) -> None:
    params = model.trainable()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    window: list[tuple[float, float, float, float]] = []
    batches = iter(())
    for step in range(steps):
        idx = next(batches, None)
        if idx is None:
            batches = iterate_minibatches(n_items, cfg.batch_size, rng)
            idx = next(batches)
        model.zero_grad()
        try:
            br = loss_fn(get_batch(idx))
        except FloatingPointError as e:
            raise TrainingDiverged(f"{split}: step {step}: {e}") from None
        if not np.isfinite(br.total):
            raise TrainingDiverged(f"{split}: non-finite loss at step {step} (ce={br.l_ce} ld={br.l_ld} ad={br.l_ad})")
        br.objective.backward()
        _clip_grads(params, cfg.grad_clip)
        opt.step(lr_at(step, lr, cfg.warmup_steps))
        window.append((br.l_ce, br.l_ld, br.l_ad, br.total))
        if (step + 1) % cfg.log_every == 0 or step + 1 == steps:
            med = np.median(np.asarray(window), axis=0)
            trainlog.add((step + 1) / cfg.log_every, split, *map(float, med))
            log.info("%s step %d total=%.4f", split, step + 1, med[3])
            window = []


# -- evaluation -------------------------------------------------------------------------


@dataclass
class EvalMetrics:
    accuracy: float
    n: int
    confusion: dict[tuple[str, str], int]
    predictions: list[str]
    loss: float = float("nan")

    def to_text(self, prefix: str = "") -> str:
        lines = [f"{prefix}accuracy={self.accuracy:.6f}", f"{prefix}n={self.n}", f"{prefix}loss={self.loss:.6f}"]
        for (t, p), c in sorted(self.confusion.items()):
            lines.append(f"{prefix}confusion[{t}->{p}]={c}")
        return "\n".join(lines) + "\n"


def task_loss(model: BitModel, task: TaskDataset, batch_size: int = 256) -> float:
    """Answer-token cross-entropy averaged over items."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(task), batch_size):
            b = task.batch(range(s, min(s + batch_size, len(task))))
            logits, _ = model.forward(b.ids)
            n = int(b.mask.sum())
            total += ce_loss(logits, b.targets, b.mask).item() * n
            count += n
    return total / count


def evaluate(model: BitModel, task: TaskDataset, batch_size: int = 256) -> EvalMetrics:
    """Greedy-decode each answer and score exact match."""
    max_ans = max(len(it.answer) for it in task.items)
    preds: list[str] = []
    for s in range(0, len(task), batch_size):
        idx = range(s, min(s + batch_size, len(task)))
        prompts = [task.prompt(i) for i in idx]
        outs = generate_batch(model, prompts, max_ans)
        for i, p, o in zip(idx, prompts, outs):
            ans = o[len(p) : len(p) + len(task.items[i].answer)]
            preds.append(bytes(t if t < 256 else 0xFF for t in ans).decode("latin-1"))
    confusion: dict[tuple[str, str], int] = {}
    correct = 0
    for it, p in zip(task.items, preds):
        t = it.answer.decode("latin-1")
        confusion[(t, p)] = confusion.get((t, p), 0) + 1
        correct += t == p
    return EvalMetrics(correct / len(task), len(task), confusion, preds, task_loss(model, task, batch_size))


def corpus_loss(model: BitModel, corpus: CorpusDataset, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(corpus), batch_size):
            b = corpus.batch(np.arange(s, min(s + batch_size, len(corpus))))
            logits, _ = model.forward(b.ids)
            total += ce_loss(logits, b.targets).item() * b.ids.size
            count += b.ids.size
    return total / count


# -- stages -----------------------------------------------------------------------------


def _ce_step(model: BitModel):
    def fn(b: Batch):
        logits, _ = model.forward(b.ids)
        return total_loss(ce_loss(logits, b.targets, b.mask), 0.0, 0.0, DistillConfig(gamma_loss=0.0))

    return fn


def pretrain_base(model_cfg: ModelConfig, corpus: CorpusDataset, cfg: TrainConfig, trainlog: TrainLog | None = None) -> BitModel:
    """Train a full-precision LM from scratch on the corpus.

    This stands in for an off-the-shelf pretrained checkpoint: the teacher is
    fine-tuned from it, and students are converted from it.
    """
    if model_cfg.quantized or model_cfg.subln_enabled:
        raise ContractError("the base model is a plain full-precision model")
    trainlog = trainlog if trainlog is not None else TrainLog()
    model = BitModel(model_cfg, seed=int(cfg.rng("init").integers(2**31)))
    _train(model, len(corpus), corpus.batch, _ce_step(model), cfg.base_steps, cfg.base_lr, cfg, cfg.rng("base"), "base", trainlog)
    return model


def train_teacher(
    model_cfg: ModelConfig,
    task: TaskDataset,
    cfg: TrainConfig,
    heldout: TaskDataset | None = None,
    trainlog: TrainLog | None = None,
    init: BitModel | None = None,
) -> tuple[BitModel, EvalMetrics | None]:
    """Fine-tune a full-precision model on the task's answer tokens.

    Starts from ``init`` (normally the pretrained base) or from a fresh
    initialization when none is given.
    """
    if model_cfg.quantized:
        raise ContractError("teacher must be a full-precision model")
    trainlog = trainlog if trainlog is not None else TrainLog()
    model = init.copy() if init is not None else BitModel(model_cfg, seed=int(cfg.rng("init").integers(2**31)))
    _train(model, len(task), task.batch, _ce_step(model), cfg.teacher_steps, cfg.teacher_lr, cfg, cfg.rng("teacher"), "teacher", trainlog)
    metrics = evaluate(model, heldout) if heldout is not None else None
    if metrics is not None:
        trainlog.add(trainlog.rows[-1]["epoch"] if trainlog.rows else 0, "teacher_heldout", metrics.loss, accuracy=metrics.accuracy)
    return model, metrics


def stage1(checkpoint: BitModel, subln: bool = True) -> BitModel:
    """Ternary QAT student from a full-precision checkpoint.

    ``subln=False`` gives the plain BitNet-SFT starting point.
    """
    return to_quantized(checkpoint, subln=subln)


@dataclass
class Stage2Report:
    loss_before: float
    loss_after: float
    hist_before: dict
    hist_after: dict

    @property
    def code_tv(self) -> float:
        return code_distribution_tv(self.hist_before, self.hist_after)


def stage2(
    student: BitModel,
    corpus: CorpusDataset,
    cfg: TrainConfig,
    heldout: CorpusDataset | None = None,
    trainlog: TrainLog | None = None,
    bins: int = 60,
) -> tuple[BitModel, Stage2Report]:
    """Continued LM training of the quantized student on a small corpus."""
    _require_converted(student)
    trainlog = trainlog if trainlog is not None else TrainLog()
    model = student.copy()
    probe = heldout if heldout is not None else corpus
    before = corpus_loss(model, probe)
    hist_before = export_weight_histogram(model, bins)
    _train(model, len(corpus), corpus.batch, _ce_step(model), cfg.stage2_steps, cfg.stage2_lr, cfg, cfg.rng("stage2"), "stage2", trainlog)
    after = corpus_loss(model, probe)
    trainlog.add(trainlog.rows[-1]["epoch"] if cfg.stage2_steps else 0, "stage2_heldout", after)
    return model, Stage2Report(before, after, hist_before, export_weight_histogram(model, bins))


def _require_converted(student: BitModel) -> None:
    if not student.config.quantized:
        raise StageOrderError("student has not been through stage1 conversion (quantized flag unset)")
    if student.is_packed:
        raise StageOrderError("student is a frozen packed model and cannot be trained")


def stage3(
    student: BitModel,
    teacher: BitModel | None,
    task: TaskDataset,
    distill: DistillConfig,
    cfg: TrainConfig,
    trainlog: TrainLog | None = None,
) -> BitModel:
    """Task fine-tuning with CE + lambda * logits KL + gamma * relation KL.

    With both weights zero this is plain QAT fine-tuning and no teacher is needed.
    """
    _require_converted(student)
    trainlog = trainlog if trainlog is not None else TrainLog()
    use_ld, use_ad = distill.lambda_ld > 0, distill.gamma_loss > 0
    if (use_ld or use_ad) and teacher is None:
        raise ContractError("distillation weights are nonzero but no teacher was given")
    n_layers = student.config.n_layers
    layers: list[int] = []
    layers_t: list[int] = []
    if use_ad:
        try:
            layers = [resolve_layer(i, n_layers) for i in distill.distill_layers]
            layers_t = [resolve_layer(i, teacher.config.n_layers) for i in distill.distill_layers]
        except ContractError as e:
            raise LossConfigError(str(e)) from None
    model = student.copy()

    def fn(b: Batch):
        if use_ld or use_ad:
            with no_grad():
                t_logits, t_states = teacher.forward(b.ids, capture_layers=layers_t)
        logits, states = model.forward(b.ids, capture_layers=layers)
        l_ce = ce_loss(logits, b.targets, b.mask)
        l_ld = logits_kl(t_logits, logits, distill.tau, b.mask) if use_ld else 0.0
        l_ad = 0.0
        if use_ad:
            t_map = {s: t_states[t] for s, t in zip(layers, layers_t)}
            l_ad = layer_relation_loss(states, t_map, replace(distill, distill_layers=tuple(layers)), n_layers)
        return total_loss(l_ce, l_ld, l_ad, distill)

    _train(model, len(task), task.batch, fn, cfg.stage3_steps, cfg.stage3_lr, cfg, cfg.rng("stage3"), "stage3", trainlog)
    return model


# -- orchestration ------------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """One row of an ablation grid."""

    name: str
    subln: bool = True
    stage2: bool = True
    logits_distill: bool = True
    attention_distill: bool = True


STAGE_GRID = (
    Variant("bitnet_sft", subln=False, stage2=False, logits_distill=False, attention_distill=False),
    Variant("md", subln=True, stage2=False, logits_distill=False, attention_distill=False),
    Variant("md_ct", subln=True, stage2=True, logits_distill=False, attention_distill=False),
    Variant("md_df", subln=True, stage2=False),
    Variant("md_ct_df", subln=True, stage2=True),
)

LOSS_GRID = (
    Variant("no_distill", logits_distill=False, attention_distill=False),
    Variant("ld_only", attention_distill=False),
    Variant("ad_only", logits_distill=False),
    Variant("ld_ad"),
)

PRESETS = {"stages": STAGE_GRID, "losses": LOSS_GRID}


def _mark(flag: bool) -> str:
    return "Y" if flag else "N"


@dataclass
class AblationRow:
    variant: Variant
    accuracy: float
    loss: float

    def flags(self) -> dict[str, str]:
        v = self.variant
        return {
            "subln": _mark(v.subln),
            "stage2": _mark(v.stage2),
            "ld": _mark(v.logits_distill),
            "ad": _mark(v.attention_distill),
        }


@dataclass
class AblationResult:
    teacher_accuracy: float
    rows: list[AblationRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "subln", "stage2", "ld", "ad", "accuracy", "loss"])
        for r in self.rows:
            f = r.flags()
            w.writerow([r.variant.name, f["subln"], f["stage2"], f["ld"], f["ad"], f"{r.accuracy:.6f}", f"{r.loss:.6f}"])
        return buf.getvalue()

    def accuracy(self, name: str) -> float:
        return next(r.accuracy for r in self.rows if r.variant.name == name)


def run_variant(
    variant: Variant,
    base: BitModel,
    teacher: BitModel,
    train: TaskDataset,
    corpus: CorpusDataset,
    distill: DistillConfig,
    cfg: TrainConfig,
    trainlog: TrainLog | None = None,
    cache: dict | None = None,
) -> BitModel:
    """Build one student from ``base`` along the stage path of ``variant``.

    ``cache`` shares stage-1/stage-2 results between variants with the same prefix.
    """
    cache = cache if cache is not None else {}
    key = (variant.subln, variant.stage2)
    if key not in cache:
        student = stage1(base, subln=variant.subln)
        if variant.stage2:
            student, _ = stage2(student, corpus, cfg, trainlog=trainlog)
        cache[key] = student
    d = replace(
        distill,
        lambda_ld=distill.lambda_ld if variant.logits_distill else 0.0,
        gamma_loss=distill.gamma_loss if variant.attention_distill else 0.0,
    )
    return stage3(cache[key], teacher, train, d, cfg, trainlog)


def run_ablation(
    variants,
    base: BitModel,
    teacher: BitModel,
    train: TaskDataset,
    heldout: TaskDataset,
    corpus: CorpusDataset,
    distill: DistillConfig,
    cfg: TrainConfig,
    trainlog: TrainLog | None = None,
) -> AblationResult:
    cache: dict = {}
    rows = []
    for v in variants:
        student = run_variant(v, base, teacher, train, corpus, distill, cfg, trainlog, cache)
        m = evaluate(student, heldout)
        log.info("variant %s accuracy=%.4f", v.name, m.accuracy)
        rows.append(AblationRow(v, m.accuracy, m.loss))
    return AblationResult(evaluate(teacher, heldout).accuracy, rows)


def layer_sweep(
    layers,
    base: BitModel,
    teacher: BitModel,
    train: TaskDataset,
    heldout: TaskDataset,
    corpus: CorpusDataset,
    distill: DistillConfig,
    cfg: TrainConfig,
) -> list[tuple[int, float]]:
    """Held-out accuracy of the full recipe with relation loss at one layer each."""
    cache: dict = {}
    out = []
    for layer in layers:
        d = replace(distill, distill_layers=(layer,), alphas=None)
        student = run_variant(Variant("layer"), base, teacher, train, corpus, d, cfg, cache=cache)
        out.append((layer, evaluate(student, heldout).accuracy))
    return out


@dataclass
class ToyData:
    train: TaskDataset
    heldout: TaskDataset
    corpus: CorpusDataset
    corpus_heldout: CorpusDataset | None = None


def toy_data(seed: int, n_train: int = 256, n_heldout: int = 480, length: int = 8, corpus_docs: int = 4000) -> ToyData:
    """Synthetic task split plus the unlabelled corpus, all derived from ``seed``.

    The held-out corpus comes from its own seed, so it never overlaps the
    training windows.
    """
    from .data import make_toy_corpus, make_toy_task

    task = make_toy_task(seed, n_train + n_heldout, length=length)
    train, heldout = task.split(n_heldout / (n_train + n_heldout))
    corpus = make_toy_corpus(seed + 1, n_docs=corpus_docs, length=length)
    probe = make_toy_corpus(seed + 2, n_docs=max(100, corpus_docs // 10), length=length)
    return ToyData(train, heldout, corpus, probe)


@dataclass
class PipelineResult:
    base: BitModel
    teacher: BitModel
    student: BitModel
    teacher_metrics: EvalMetrics
    student_metrics: EvalMetrics
    stage2_report: Stage2Report | None
    trainlog: TrainLog

    def metrics(self) -> dict:
        d = {
            "teacher_accuracy": self.teacher_metrics.accuracy,
            "teacher_loss": self.teacher_metrics.loss,
            "student_accuracy": self.student_metrics.accuracy,
            "student_loss": self.student_metrics.loss,
        }
        if self.stage2_report is not None:
            d["stage2_lm_loss_before"] = self.stage2_report.loss_before
            d["stage2_lm_loss_after"] = self.stage2_report.loss_after
            d["stage2_code_tv"] = self.stage2_report.code_tv
        return d


def run_pipeline(
    model_cfg: ModelConfig,
    data: ToyData,
    distill: DistillConfig,
    cfg: TrainConfig,
    variant: Variant = Variant("full"),
) -> PipelineResult:
    """Base LM, teacher fine-tune, then the student path described by ``variant``."""
    trainlog = TrainLog()
    base = pretrain_base(model_cfg, data.corpus, cfg, trainlog)
    teacher, tm = train_teacher(model_cfg, data.train, cfg, data.heldout, trainlog, init=base)
    student = stage1(base, subln=variant.subln)
    report = None
    if variant.stage2:
        student, report = stage2(student, data.corpus, cfg, data.corpus_heldout, trainlog)
    d = replace(
        distill,
        lambda_ld=distill.lambda_ld if variant.logits_distill else 0.0,
        gamma_loss=distill.gamma_loss if variant.attention_distill else 0.0,
    )
    student = stage3(student, teacher, data.train, d, cfg, trainlog)
    sm = evaluate(student, data.heldout)
    trainlog.add(trainlog.rows[-1]["epoch"], "student_heldout", sm.loss, accuracy=sm.accuracy)
    return PipelineResult(base, teacher, student, tm, sm, report, trainlog)


def metrics_text(d: dict) -> str:
    """key=value lines in insertion order."""
    out = []
    for k, v in d.items():
        out.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(out) + "\n"
