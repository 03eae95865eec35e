"""
Scaled-down learning experiments on synthetic streams.

Deselected by default; run with `pytest -m acceptance`.
"""

import numpy as np
import pytest
import torch

from app.commands.sweep import summarize_w_pos, sweep_w_pos
from app.models import FeatureDims, Marker, ModelConfig, RunConfig, SimConfig, TaskKind, TrainConfig, TriggerMode, TriggerPolicy
from app.services.backbone import build_model
from app.services.eval_suite import evaluate, separability_accuracy
from app.services.stream_sim import generate_dataset
from app.services.trainer import heldout_timing_loss, train_stage1, train_stage2
from app.services.trigger_engine import get_preset, run_stream

pytestmark = pytest.mark.acceptance

DIMS = FeatureDims()
MODEL = ModelConfig(d_model=32, n_layers=2, n_heads=2, k_layers=2)


def _train(proactive, qa, seed=0):
    config = TrainConfig(steps=300, batch_size=8, learning_rate=1e-3, w_pos=3.0, seed=seed)
    model = build_model(MODEL, DIMS, seed=seed)
    stage1 = train_stage1(model, qa, config.model_copy(update={"steps": 100}))
    stage2 = train_stage2(stage1.model, proactive, qa, config, stage1.stage_completed)
    return stage2.model


def test_alert_end_to_end():
    train = generate_dataset(TaskKind.ALERT, 200, 0, DIMS)
    test = generate_dataset(TaskKind.ALERT, 50, 1, DIMS)
    qa = generate_dataset(TaskKind.REACTIVE_QA, 40, 2, DIMS)
    assert separability_accuracy(test) >= 0.95

    init_loss = heldout_timing_loss(build_model(MODEL, DIMS, seed=0), test, 3.0)
    model = _train(train, qa)
    assert heldout_timing_loss(model, test, 3.0) <= 0.5 * init_loss

    policy = TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=3, threshold=0.5, token_budget=8)
    traces = [run_stream(model, sample, policy) for sample in test]
    assert evaluate("alert", traces, test).metrics["alert_success"] >= 0.85


def test_narration_end_to_end():
    train = generate_dataset(TaskKind.NARRATION, 200, 0, DIMS)
    test = generate_dataset(TaskKind.NARRATION, 50, 1, DIMS)
    qa = generate_dataset(TaskKind.REACTIVE_QA, 40, 2, DIMS)

    model = _train(train, qa)
    policy = get_preset("narration").model_copy(update={"token_budget": 8})
    traces = [run_stream(model, sample, policy) for sample in test]
    assert evaluate("narration", traces, test).metrics["f1"] >= 0.85


def test_w_pos_raises_positive_rate():
    sim = SimConfig(alert_duration_s=20)
    train = generate_dataset(TaskKind.ALERT, 40, 0, DIMS, sim) + generate_dataset(TaskKind.REACTIVE_QA, 10, 1, DIMS, sim)
    held_out = generate_dataset(TaskKind.ALERT, 20, 2, DIMS, sim)
    config = RunConfig(model=MODEL, features=DIMS, train=TrainConfig(steps=60, batch_size=8, learning_rate=1e-3))

    rows = sweep_w_pos(train, held_out, config, [1.0, 3.0, 9.0], [0, 1, 2], workers=3)
    rates = list(summarize_w_pos(rows).values())
    assert rates == sorted(rates)


def test_decoding_budget_fuzz():
    model = build_model(ModelConfig(d_model=16, n_layers=1, n_heads=2, k_layers=1), FeatureDims(d_v=2, d_a=2), dtype=torch.float64)
    with torch.no_grad():
        model.speak_head.mlp[2].weight.zero_()
        model.speak_head.mlp[2].bias.fill_(50.0)
    sample = generate_dataset(TaskKind.ALERT, 1, 0, FeatureDims(d_v=2, d_a=2), SimConfig(alert_duration_s=8))[0]
    rng = np.random.default_rng(0)

    for _ in range(1000):
        length = int(rng.integers(1, 150))
        policy = TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=1, token_budget=25)

        def decode(logits, emitted, length=length):
            return len(emitted) % 64 if len(emitted) < length else int(Marker.IM_END)

        trace = run_stream(model, sample, policy, decoder=decode)
        assert all(len(span.tokens) <= 25 for span in trace.responses)
        closed = [span.complete for span in trace.responses]
        assert all(not c for c in closed[:-1])
