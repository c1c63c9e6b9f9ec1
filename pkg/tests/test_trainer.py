import math

import numpy as np
import pytest

from nm_ast.config import RunConfig
from nm_ast.corpus import Corpus, synthetic_corpus
from nm_ast.errors import ArchitectureMismatch, TrainingDiverged
from nm_ast.sparsity import check_pattern
from nm_ast.trainer import (
    ABLATION_MODES,
    ABLATION_VARIANTS,
    CSV_HEADER,
    RunMetrics,
    format_report,
    pretrain_dense,
    retrain_sparse,
    run_ablation_suite,
)

TINY = RunConfig(d_model=16, n_heads=2, context_length=16, seq_len=16, batch_size=4, pretrain_steps=60,
                 pretrain_lr=1e-2, steps=40, lr=3e-3, refresh_interval=5, eval_every=10, eval_batch_size=8,
                 slorb_k=4, max_decay=1e-3)


@pytest.fixture(scope="module")
def corpus():
    return Corpus.from_bytes(synthetic_corpus(12_000, seed=0))


@pytest.fixture(scope="module")
def teacher(corpus):
    return pretrain_dense(TINY, corpus)


def test_pretrain_learns(teacher):
    ppl = teacher.metrics.series("val", "ppl")
    assert ppl[0][0] == 0 and ppl[-1][0] == TINY.pretrain_steps
    assert ppl[-1][1] < ppl[0][1] / 3
    assert teacher.checkpoint.extra["val_ppl"] == ppl[-1][1]
    assert not teacher.model.is_sparse


def test_retrain_is_deterministic_and_leaves_teacher_alone(teacher, corpus):
    before = {n: t.data.copy() for n, t in teacher.model.params.items()}
    a = retrain_sparse(TINY, teacher.model, corpus)
    b = retrain_sparse(TINY, teacher.model, corpus)
    assert a.metrics.to_csv() == b.metrics.to_csv()
    for n, t in teacher.model.params.items():
        np.testing.assert_array_equal(t.data, before[n])
    for name, lin in a.model.masked_layers().items():
        np.testing.assert_array_equal(lin.weight.data, b.model.linears[name].weight.data)


def test_flip_rows_every_refresh_and_schedule_logged(teacher, corpus):
    seen = []

    def hook(step, model):
        seen.append(step)
        for lin in model.masked_layers().values():
            check_pattern(lin.mask.array, TINY.nm_pattern())

    r = retrain_sparse(TINY, teacher.model, corpus, on_refresh=hook)
    assert seen == list(range(5, 41, 5))
    flips = r.metrics.series("mask", "flip_rate", "all")
    assert [s for s, _ in flips] == seen
    assert all(0 <= v <= 1 for _, v in flips)
    cum = [v for _, v in r.metrics.series("mask", "cumulative_flip_rate", "all")]
    np.testing.assert_allclose(cum, np.cumsum([v for _, v in flips]))
    lam = r.metrics.series("train", "lambda")
    sched = TINY.decay_schedule()
    assert [v for _, v in lam] == [sched(t) for t in range(40)]
    assert r.checkpoint.mode == "ast" and r.checkpoint.max_decay == pytest.approx(1e-3)
    # exported weights are hard-masked
    for lin in r.model.masked_layers().values():
        assert np.all(lin.weight.data[~lin.mask.array] == 0)


def test_modes_change_behaviour(teacher, corpus):
    fixed = retrain_sparse(TINY.replace(mode="fixed_mask"), teacher.model, corpus)
    assert fixed.metrics.series("mask", "flip_rate", "all") == []
    nd = retrain_sparse(TINY.replace(mode="no_distill"), teacher.model, corpus)
    assert nd.checkpoint.step == 53
    assert nd.metrics.series("train", "task_loss") == []
    one = retrain_sparse(TINY.replace(mode="one_shot"), teacher.model, corpus)
    assert one.checkpoint.step == 0
    boosted = retrain_sparse(TINY.replace(mode="ast_boosted"), teacher.model, corpus)
    assert all(lin.adapter is not None for lin in boosted.model.masked_layers().values())
    assert one.final_ppl > fixed.final_ppl


def test_training_reduces_loss(teacher, corpus):
    r = retrain_sparse(TINY.replace(steps=60), teacher.model, corpus)
    ppl = r.metrics.series("val", "ppl")
    assert ppl[-1][1] < ppl[0][1]


def test_nan_aborts_with_diagnostics(teacher, corpus):
    bad = teacher.model.copy()
    bad.params["wte"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        retrain_sparse(TINY, bad, corpus)
    assert exc.value.step == 0
    assert "wte" in str(exc.value)


def test_rejects_sparse_or_mismatched_teacher(teacher, corpus):
    r = retrain_sparse(TINY.replace(mode="one_shot"), teacher.model, corpus)
    with pytest.raises(ValueError):
        retrain_sparse(TINY, r.model, corpus)
    with pytest.raises(ArchitectureMismatch):
        retrain_sparse(TINY.replace(n_layers=3), teacher.model, corpus)


def test_ablation_suite_rows(teacher, corpus):
    cfg = TINY.replace(steps=10, refresh_interval=5, eval_every=5)
    cache = {}
    rows = run_ablation_suite(cfg, teacher.model, corpus, cache)
    assert [r.name for r in rows] == list(ABLATION_MODES) + list(ABLATION_VARIANTS)
    assert len(cache) == len(rows) - 1  # ast and forward_kl share one run
    assert rows[0].ppl == rows[5].ppl
    assert rows[3].steps == 13
    report = format_report(rows)
    assert report.splitlines()[0] == "group,name,steps,val_ppl,config"
    assert "seed=0" in report and all(math.isfinite(r.ppl) for r in rows)


def test_metrics_csv_schema():
    m = RunMetrics()
    m.log(0, "val", "ppl", 3.5)
    m.log(2, "mask", "flip_rate", 0.1, "h.0.mlp.fc")
    assert m.to_csv() == f"{CSV_HEADER}\n0,val,ppl,3.5,\n2,mask,flip_rate,0.1,h.0.mlp.fc\n"
    with pytest.raises(ValueError):
        m.log(1, "val", "ppl", 1.0)


def test_retrain_tokens_limits_the_retraining_data(teacher, corpus):
    n = 2_000
    tail = np.random.default_rng(0).integers(0, 256, size=corpus.train.size - n).astype(corpus.train.dtype)
    other = Corpus(np.concatenate([corpus.train[:n], tail]), corpus.val)
    cfg = TINY.replace(steps=10, retrain_tokens=n)
    a = retrain_sparse(cfg, teacher.model, corpus)
    b = retrain_sparse(cfg, teacher.model, other)
    assert a.metrics.to_csv() == b.metrics.to_csv()
    full = TINY.replace(steps=10)
    assert retrain_sparse(full, teacher.model, corpus).metrics.to_csv() != \
        retrain_sparse(full, teacher.model, other).metrics.to_csv()
