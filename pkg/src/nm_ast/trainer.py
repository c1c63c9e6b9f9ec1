"""Dense pretraining, sparse retraining and the ablation suite."""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, check_architecture
from .config import RunConfig
from .corpus import BatchSampler, Corpus
from .distill import DistillConfig, combined_loss, distillation_term
from .errors import TrainingDiverged
from .model import Transformer, perplexity
from .optim import SparseAdamW, clip_global_norm, lr_at
from .sparsity import FlipStats, check_pattern, mask_distance, select_mask_magnitude

log = logging.getLogger(__name__)

CSV_HEADER = "step,split,metric,value,layer"


@dataclass
class RunMetrics:
    """Ordered metric rows ``(step, split, metric, value, layer)``.

    Wall-clock time is kept in ``wall_clock`` only, so the CSV is a
    deterministic function of the run.
    """

    rows: list = field(default_factory=list)
    flips: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def log(self, step: int, split: str, metric: str, value: float, layer: str = "") -> None:
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("metric steps must be non-decreasing")
        self.rows.append((int(step), split, metric, float(value), layer))

    def record_flips(self, layer: str, stats: FlipStats) -> None:
        self.flips.setdefault(layer, []).append(stats)
        self.log(stats.step, "mask", "flip_rate", stats.flip_rate, layer)
        self.log(stats.step, "mask", "initial_flip_rate", stats.initial_flip_rate, layer)
        # running sum of per-refresh flip rates, i.e. the total flipped ratio so far
        total = sum(s.flip_rate for s in self.flips[layer])
        self.log(stats.step, "mask", "cumulative_flip_rate", total, layer)

    def series(self, split: str, metric: str, layer: str = "") -> list[tuple[int, float]]:
        return [(r[0], r[3]) for r in self.rows if r[1] == split and r[2] == metric and r[4] == layer]

    def last(self, split: str, metric: str, layer: str = "") -> float:
        s = self.series(split, metric, layer)
        if not s:
            raise KeyError(f"no {split}/{metric} rows")
        return s[-1][1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for step, split, metric, value, layer in self.rows:
            buf.write(f"{step},{split},{metric},{value!r},{layer}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics: RunMetrics
    config: RunConfig

    @property
    def model(self) -> Transformer:
        return self.checkpoint.model

    @property
    def final_ppl(self) -> float:
        return self.metrics.last("val", "ppl_export")


def _layer_stats(model: Transformer) -> dict:
    stats = {}
    for name, t in model.trainable().items():
        g = t.grad
        stats[name] = {
            "w_absmax": float(np.max(np.abs(t.data))) if t.data.size else 0.0,
            "w_nonfinite": float(np.count_nonzero(~np.isfinite(t.data))),
            "g_norm": float(np.linalg.norm(g)) if g is not None else 0.0,
            "g_nonfinite": float(np.count_nonzero(~np.isfinite(g))) if g is not None else 0.0,
        }
    return stats


def _task_and_distill(student: Transformer, teacher: Transformer | None, x, y, dcfg: DistillConfig):
    alpha = dcfg.alpha
    need_states = dcfg.needs_states and alpha > 0
    out = student.forward(x, return_states=need_states)
    task = ad.cross_entropy(out.logits, y)
    if alpha == 0 or teacher is None:
        return task, task
    with ad.no_grad():
        t_out = teacher.forward(x, return_states=need_states)
    term = distillation_term(dcfg, t_out, out)
    return combined_loss(task, term, alpha), task


def _optimizer(cfg: RunConfig) -> SparseAdamW:
    return SparseAdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.moment_order)


def _evaluate(model: Transformer, corpus: Corpus, cfg: RunConfig) -> float:
    return perplexity(model, corpus.val, cfg.seq_len, cfg.eval_batch_size)


def pretrain_dense(cfg: RunConfig, corpus: Corpus) -> RunResult:
    """Train the dense teacher from scratch with cross-entropy."""
    start = time.perf_counter()
    model = Transformer.init(cfg.model_config(), cfg.seed)
    sampler = BatchSampler(corpus.train, cfg.batch_size, cfg.seq_len, cfg.seed, "pretrain")
    opt = _optimizer(cfg)
    metrics = RunMetrics()
    total = cfg.pretrain_steps
    metrics.log(0, "val", "ppl", _evaluate(model, corpus, cfg))
    for t in range(total):
        x, y = sampler.batch(t)
        model.zero_grad()
        loss = ad.cross_entropy(model.forward(x).logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(t, _layer_stats(model))
        loss.backward()
        params = model.trainable()
        clip_global_norm([p.grad for p in params.values() if p.grad is not None], cfg.grad_clip)
        lr = lr_at(t + 1, cfg.pretrain_lr, total, cfg.warmup_frac, cfg.final_lr_frac)
        for name, p in params.items():
            if p.grad is not None:
                opt.step(name, p.data, p.grad, lr)
        metrics.log(t + 1, "train", "loss", value)
        metrics.log(t + 1, "train", "lr", lr)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == total:
            metrics.log(t + 1, "val", "ppl", _evaluate(model, corpus, cfg))
            log.info("pretrain step %d loss %.4f val ppl %.3f", t + 1, value, metrics.last("val", "ppl"))
    model.zero_grad()
    metrics.wall_clock = time.perf_counter() - start
    ckpt = Checkpoint(model, total, cfg.seed, "dense_pretrain", 0.0,
                      {"val_ppl": metrics.last("val", "ppl"), "config": cfg.to_dict()})
    return RunResult(ckpt, metrics, cfg)


def _refresh(student: Transformer, pattern, masks0: dict, metrics: RunMetrics, step: int) -> None:
    flipped = changed0 = entries = 0
    for name, lin in student.masked_layers().items():
        new = select_mask_magnitude(lin.weight.data, pattern)
        d_prev = mask_distance(new, lin.mask)
        d_init = mask_distance(new, masks0[name])
        size = new.array.size
        metrics.record_flips(name, FlipStats(step, d_prev / size, d_init / size))
        flipped += d_prev
        changed0 += d_init
        entries += size
        lin.set_mask(new)
    metrics.record_flips("all", FlipStats(step, flipped / entries, changed0 / entries))


def retrain_sparse(cfg: RunConfig, teacher: Transformer, corpus: Corpus,
                   on_refresh=None) -> RunResult:
    """Prune a copy of ``teacher`` to ``cfg.pattern`` and retrain it.

    ``on_refresh(step, model)`` is called after every mask refresh, mainly so
    tests can inspect the masks in flight.
    """
    start = time.perf_counter()
    check_architecture(teacher, cfg.model_config())
    if teacher.is_sparse:
        raise ValueError("teacher must be dense")
    pattern = cfg.nm_pattern()
    teacher = teacher.copy().freeze()
    student = teacher.copy()
    for t in student.all_tensors().values():
        t.requires_grad = True
    student.sparsify(pattern)
    masks0 = {n: lin.mask.copy() for n, lin in student.masked_layers().items()}
    if cfg.effective_slorb():
        student.enable_slorb(cfg.slorb_k, cfg.slorb_init, cfg.slorb_train_projection, cfg.seed)

    total = cfg.effective_steps()
    refresh = cfg.effective_refresh()
    dcfg = cfg.distill_config()
    schedule = cfg.decay_schedule()
    train = corpus.train[:cfg.retrain_tokens] if cfg.retrain_tokens else corpus.train
    sampler = BatchSampler(train, cfg.batch_size, cfg.seq_len, cfg.seed, "retrain")
    opt = _optimizer(cfg)
    metrics = RunMetrics()
    metrics.log(0, "val", "ppl", _evaluate(student, corpus, cfg))
    masked = {n + ".w": lin for n, lin in student.masked_layers().items()}

    for t in range(total):
        if t > 0 and refresh != math.inf and t % refresh == 0:
            _refresh(student, pattern, masks0, metrics, t)
            if on_refresh is not None:
                on_refresh(t, student)
        x, y = sampler.batch(t)
        student.zero_grad()
        loss, task = _task_and_distill(student, teacher, x, y, dcfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(t, _layer_stats(student))
        loss.backward()
        params = student.trainable()
        clip_global_norm([p.grad for p in params.values() if p.grad is not None], cfg.grad_clip)
        lr = lr_at(t + 1, cfg.lr, total, cfg.warmup_frac, cfg.final_lr_frac)
        lam = schedule(t)
        for name, p in params.items():
            if p.grad is None:
                continue
            lin = masked.get(name)
            if lin is not None:
                opt.step(name, p.data, p.grad, lr, mask=lin.mask, lam=lam)
            else:
                # dense parameters and the adapter tensors take the undecayed step
                opt.step(name, p.data, p.grad, lr)
        metrics.log(t + 1, "train", "loss", value)
        if dcfg.alpha > 0:
            metrics.log(t + 1, "train", "task_loss", float(task.data))
        metrics.log(t + 1, "train", "lambda", lam)
        metrics.log(t + 1, "train", "lr", lr)
        if (t + 1) % cfg.eval_every == 0 or t + 1 == total:
            metrics.log(t + 1, "val", "ppl", _evaluate(student, corpus, cfg))
            log.info("%s step %d loss %.4f val ppl %.3f", cfg.mode, t + 1, value, metrics.last("val", "ppl"))

    if total > 0 and refresh != math.inf:
        _refresh(student, pattern, masks0, metrics, total)
        if on_refresh is not None:
            on_refresh(total, student)
    for lin in student.masked_layers().values():
        check_pattern(lin.mask.array, pattern)
    student.apply_masks_permanently()
    student.zero_grad()
    metrics.log(total, "val", "ppl_export", _evaluate(student, corpus, cfg))
    metrics.wall_clock = time.perf_counter() - start
    ckpt = Checkpoint(student, total, cfg.seed, cfg.mode, schedule.max_decay,
                      {"val_ppl": metrics.last("val", "ppl_export"), "config": cfg.to_dict()})
    return RunResult(ckpt, metrics, cfg)


def one_shot(cfg: RunConfig, teacher: Transformer, corpus: Corpus) -> RunResult:
    return retrain_sparse(cfg.replace(mode="one_shot"), teacher, corpus)


ABLATION_MODES = ("ast", "fixed_mask", "static_srste", "no_distill", "naive")
ABLATION_VARIANTS = ("forward_kl", "reverse_kl", "tinybert", "mobilebert", "squarehead")


@dataclass
class AblationRow:
    group: str
    name: str
    steps: int
    ppl: float
    config: dict


def run_ablation_suite(cfg: RunConfig, teacher: Transformer, corpus: Corpus,
                       cache: dict | None = None) -> list[AblationRow]:
    """Five component ablations and five distillation variants at equal budgets.

    ``cache`` maps a canonical config JSON to a finished :class:`RunResult`;
    identical configurations (the AST row and the forward-KL row) are run once.
    """
    cache = {} if cache is None else cache

    def run(c: RunConfig) -> RunResult:
        key = c.to_json()
        if key not in cache:
            cache[key] = retrain_sparse(c, teacher, corpus)
        return cache[key]

    rows = []
    for mode in ABLATION_MODES:
        c = cfg.replace(mode=mode)
        r = run(c)
        rows.append(AblationRow("components", mode, c.effective_steps(), r.final_ppl, c.to_dict()))
    for variant in ABLATION_VARIANTS:
        c = cfg.replace(mode="ast", distill_variant=variant)
        r = run(c)
        rows.append(AblationRow("distillation", variant, c.effective_steps(), r.final_ppl, c.to_dict()))
    return rows


def format_report(rows: list[AblationRow]) -> str:
    lines = ["group,name,steps,val_ppl,config"]
    for r in rows:
        echoed = ";".join(f"{k}={v}" for k, v in sorted(r.config.items()))
        lines.append(f"{r.group},{r.name},{r.steps},{r.ppl!r},{echoed}")
    return "\n".join(lines) + "\n"
