from __future__ import annotations

import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from ternary_distill.autodiff import Tensor
from ternary_distill.checkpoint import dumps
from ternary_distill.data import make_toy_task
from ternary_distill.losses import DistillConfig, LossConfigError
from ternary_distill.model import BitModel, ContractError, ModelConfig, freeze_packed
from ternary_distill.pipeline import (
    PRESETS,
    STAGE_GRID,
    AdamW,
    StageOrderError,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    Variant,
    evaluate,
    lr_at,
    pretrain_base,
    run_ablation,
    run_pipeline,
    stage1,
    stage2,
    stage3,
    toy_data,
    train_teacher,
)

MODEL = ModelConfig(d_model=16, n_layers=2, n_heads=2, ffn_hidden=24, max_seq_len=16)
QUICK = TrainConfig(
    seed=3, batch_size=8, base_steps=6, teacher_steps=6, stage2_steps=4, stage3_steps=4, warmup_steps=2, log_every=2
)


@pytest.fixture(scope="module")
def data():
    return toy_data(5, n_train=64, n_heldout=40, length=4, corpus_docs=60)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(MODEL, data.train, QUICK)[0]


def test_lr_schedule():
    assert [lr_at(s, 1.0, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert lr_at(0, 2e-4, 0) == 2e-4


def test_adamw_first_step_and_decay():
    p = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
    p.grad = np.array([0.5, -3.0], np.float32)
    AdamW([p], eps=0.0).step(0.1)
    # Bias-corrected first step moves each coordinate by lr * sign(grad).
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    q = Tensor(np.array([2.0], np.float32), requires_grad=True)
    q.grad = np.zeros(1, np.float32)
    AdamW([q], weight_decay=0.5).step(0.1)
    np.testing.assert_allclose(q.data, [1.9], atol=1e-6)


def test_adamw_minimizes_quadratic():
    p = Tensor(np.array([3.0, -4.0], np.float32), requires_grad=True)
    opt = AdamW([p])
    for _ in range(600):
        p.grad = 2 * p.data
        opt.step(0.05)
    assert np.abs(p.data).max() < 0.05


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(stage3_steps=-1)


def test_stage_order_errors(data, teacher):
    with pytest.raises(StageOrderError):
        stage2(BitModel(MODEL), data.corpus, QUICK)
    with pytest.raises(StageOrderError):
        stage3(BitModel(MODEL), teacher, data.train, DistillConfig(), QUICK)
    with pytest.raises(StageOrderError):
        stage3(freeze_packed(stage1(teacher)), teacher, data.train, DistillConfig(), QUICK)
    with pytest.raises(ContractError):
        train_teacher(stage1(teacher).config, data.train, QUICK)
    with pytest.raises(ContractError):
        pretrain_base(stage1(teacher).config, data.corpus, QUICK)


def test_stage3_keeps_teacher_frozen_and_changes_student(data, teacher):
    before = dumps(teacher)
    student = stage1(teacher)
    out = stage3(student, teacher, data.train, DistillConfig(distill_layers=(0, -1)), QUICK)
    assert dumps(teacher) == before
    assert dumps(out) != dumps(student)


def test_stage3_layer_errors_and_missing_teacher(data, teacher):
    student = stage1(teacher)
    with pytest.raises(LossConfigError):
        stage3(student, teacher, data.train, DistillConfig(distill_layers=(5,)), QUICK)
    with pytest.raises(ContractError):
        stage3(student, None, data.train, DistillConfig(), QUICK)
    plain = stage3(student, None, data.train, DistillConfig(lambda_ld=0.0, gamma_loss=0.0), QUICK)
    assert plain.config == student.config


def test_gradients_reach_subln_gains(data, teacher):
    student = stage1(teacher)
    out = stage3(student, teacher, data.train, DistillConfig(), QUICK)
    for i in range(MODEL.n_layers):
        for k in ("attn_subln", "ffn_subln"):
            assert not np.all(out.params[f"layers.{i}.{k}"].data == 1.0)


def test_nan_aborts_training(data, teacher):
    bad = teacher.copy()
    bad.params["lm_head"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        stage3(stage1(bad), teacher, data.train, DistillConfig(), QUICK)


class _Constant(BitModel):
    """Always predicts the same next token."""

    def __init__(self, cfg, token):
        super().__init__(cfg)
        self.token = token

    def forward(self, ids, capture_layers=()):
        out = np.zeros(ids.shape + (self.config.vocab_size,), np.float32)
        out[..., self.token] = 1.0
        return Tensor(out), None


def test_evaluate_constant_predictor():
    task = make_toy_task(1, 200, length=4)
    m = evaluate(_Constant(MODEL, ord("y")), task)
    assert m.accuracy == 0.5
    assert m.confusion == {("y", "y"): 100, ("n", "y"): 100}


def test_evaluate_recount(data, teacher):
    m = evaluate(teacher, data.heldout)
    recount = sum(p == it.answer.decode() for p, it in zip(m.predictions, data.heldout.items))
    assert m.accuracy == recount / len(data.heldout) and m.n == len(data.heldout)
    assert sum(m.confusion.values()) == m.n and np.isfinite(m.loss)


def test_trainlog_csv(data):
    log = TrainLog()
    pretrain_base(MODEL, data.corpus, QUICK, log)
    rows = list(csv.DictReader(io.StringIO(log.to_csv())))
    assert list(rows[0]) == ["epoch", "split", "l_ce", "l_ld", "l_ad", "total", "accuracy"]
    assert len(rows) == QUICK.base_steps // QUICK.log_every
    assert all(r["split"] == "base" and float(r["total"]) > 0 for r in rows)


def test_stage2_report(data, teacher):
    student, rep = stage2(stage1(teacher), data.corpus, QUICK)
    assert np.isfinite(rep.loss_before) and np.isfinite(rep.loss_after)
    assert 0.0 <= rep.code_tv <= 1.0
    assert student.config.quantized


def test_presets():
    assert [v.name for v in STAGE_GRID] == ["bitnet_sft", "md", "md_ct", "md_df", "md_ct_df"]
    assert not STAGE_GRID[0].subln and STAGE_GRID[-1] == Variant("md_ct_df")
    assert len(PRESETS["losses"]) == 4


def test_ablation_csv(data, teacher):
    base = pretrain_base(MODEL, data.corpus, QUICK)
    res = run_ablation(PRESETS["losses"][:2], base, teacher, data.train, data.heldout, data.corpus, DistillConfig(), QUICK)
    lines = res.to_csv().splitlines()
    assert lines[0] == "variant,subln,stage2,ld,ad,accuracy,loss"
    assert lines[1].startswith("no_distill,Y,Y,N,N,") and lines[2].startswith("ld_only,Y,Y,Y,N,")


def test_run_pipeline_is_deterministic(data):
    a = run_pipeline(MODEL, data, DistillConfig(), QUICK)
    b = run_pipeline(MODEL, data, DistillConfig(), QUICK)
    assert dumps(a.student) == dumps(b.student)
    assert a.metrics() == b.metrics()
    c = run_pipeline(MODEL, data, DistillConfig(), replace(QUICK, seed=4))
    assert dumps(c.student) != dumps(a.student)


def test_stage2_lowers_heldout_lm_loss():
    small = toy_data(2, n_train=64, n_heldout=40, length=4, corpus_docs=600)
    cfg = replace(QUICK, base_steps=150, stage2_steps=60, base_lr=3e-3, stage2_lr=1e-3, log_every=50)
    model_cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, ffn_hidden=64, max_seq_len=16)
    base = pretrain_base(model_cfg, small.corpus, cfg)
    _, rep = stage2(stage1(base), small.corpus, cfg, small.corpus_heldout)
    assert rep.loss_after < rep.loss_before
