import json
import logging

import numpy as np
import pytest
import torch

from seulab import pipeline
from seulab.pipeline import (
    CreateConfig,
    ModelConfig,
    SearchConfig,
    SeuConfig,
    TrainConfig,
    create_task_model,
    half_split,
    run_sequence,
    search_eu,
    train_task_model,
)
from seulab.search_space import EDGES, OP_NAMES, CellArchitecture, CellShapePlan, random_architecture
from seulab.supermodel import ModelStateError, SuperModel, TaskModelRef
from seulab.tasks import SequenceSpec, TaskSpec

PLAN = CellShapePlan.build((1, 8, 8), 3, 4)


def toy_task(task_id=1, n=160, seed=0):
    """Label = which half of the image is brighter: learnable in a few epochs."""
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 1, 8, 8, generator=g)
    y = (x[..., :4].mean(dim=(1, 2, 3)) > x[..., 4:].mean(dim=(1, 2, 3))).long()
    x[..., :4] += (2 * y.float() - 1)[:, None, None, None]
    h = n // 2
    return TaskSpec(task_id, 2, x[:h], y[:h], x[h:], y[h:])


def planted_evaluator(edge=(1, 3), op="max_pool_3x3"):
    return lambda arch: 0.5 + 0.1 * (arch.edges[edge] == op)


# -- search -------------------------------------------------------------------

def test_search_rejects_zero_samples():
    with pytest.raises(ValueError):
        search_eu(None, SearchConfig(samples=0), np.random.default_rng(0), evaluator=planted_evaluator())


def test_search_single_sample_gives_valid_genotype():
    arch = search_eu(None, SearchConfig(samples=1), np.random.default_rng(0), evaluator=lambda a: 0.3)
    assert len(arch.ops) == len(EDGES) and set(arch.edges.values()) <= set(OP_NAMES)


def test_search_is_deterministic():
    cfg = SearchConfig(samples=30)
    a = search_eu(None, cfg, np.random.default_rng(4), evaluator=planted_evaluator())
    b = search_eu(None, cfg, np.random.default_rng(4), evaluator=planted_evaluator())
    assert a == b


def test_search_recovers_planted_op():
    cfg = SearchConfig(samples=100)
    hits = sum(search_eu(None, cfg, np.random.default_rng(s), evaluator=planted_evaluator()).edges[(1, 3)]
               == "max_pool_3x3" for s in range(5))
    assert hits >= 4


def test_search_with_proxy_training_runs():
    task = toy_task(n=64)
    cfg = SearchConfig(samples=2, depth=2, channels=4, batch_size=16)
    arch, state = search_eu(task, cfg, np.random.default_rng(0), seed=1, return_state=True)
    assert isinstance(arch, CellArchitecture)
    assert all(int(e.sum()) == 2 for e in state.epochs)


def test_search_requires_data_without_evaluator():
    with pytest.raises(ValueError):
        search_eu(None, SearchConfig(samples=1), np.random.default_rng(0))


# -- creation -----------------------------------------------------------------

def test_half_split_disjoint_cover():
    a, b = half_split(11, seed=3)
    assert len(a) == 5 and len(b) == 6
    assert sorted(torch.cat([a, b]).tolist()) == list(range(11))
    assert torch.equal(a, half_split(11, seed=3)[0])
    with pytest.raises(ValueError):
        half_split(1, 0)


def test_first_task_has_single_choice_per_layer():
    model = SuperModel(PLAN)
    model.expand(random_architecture(np.random.default_rng(0)), 1)
    ref, state = create_task_model(model, toy_task(), CreateConfig(epochs=2, batch_size=32),
                                   np.random.default_rng(0), return_state=True)
    assert ref == TaskModelRef((0, 0, 0), 1)
    assert all(p.tolist() == [1.0] for p in state.probs)


def test_create_requires_pending_expansion():
    with pytest.raises(ModelStateError):
        create_task_model(SuperModel(PLAN), toy_task(), CreateConfig(epochs=1), np.random.default_rng(0))


def test_create_too_few_samples():
    model = SuperModel(PLAN)
    model.expand(random_architecture(np.random.default_rng(0)), 1)
    with pytest.raises(ValueError):
        create_task_model(model, toy_task(n=2), CreateConfig(epochs=1), np.random.default_rng(0))


def _model_with_frozen_task(arch_seed=0, seed=0):
    model = SuperModel(PLAN, seed=seed)
    model.expand(random_architecture(np.random.default_rng(arch_seed)), 1)
    model.add_head(1, 2)
    ref = TaskModelRef((0, 0, 0), 1)
    model.prune_unselected(ref)
    model.freeze_task(1)
    return model


def test_create_prefers_trainable_new_over_poisoned_old():
    # a zeroed final cell feeds the head nothing, so only the last layer decides;
    # dominance needs fewer tries, so the signal only shows after many rounds
    new_last = 0
    for seed in range(5):
        model = _model_with_frozen_task(seed=seed)
        with torch.no_grad():
            for j in range(PLAN.n_layers):
                for p in model.slot(j, 0).cell.parameters():
                    p.zero_()
        model.expand(CellArchitecture.uniform("sep_conv_3x3"), 2)
        ref = create_task_model(model, toy_task(2, seed=seed), CreateConfig(epochs=60, batch_size=32, alpha=0.1),
                                np.random.default_rng(seed))
        new_last += ref.slots[-1] == 1
    assert new_last >= 3


def test_create_touches_only_new_slots_and_head():
    model = _model_with_frozen_task()
    frozen = model.slot_hashes()
    model.expand(random_architecture(np.random.default_rng(1)), 2)
    create_task_model(model, toy_task(2), CreateConfig(epochs=4, batch_size=32), np.random.default_rng(0))
    after = model.slot_hashes()
    assert all(after[k] == v for k, v in frozen.items())
    assert model.head_hashes()[1] == _model_with_frozen_task().head_hashes()[1]


def test_create_progress_lines(caplog):
    model = SuperModel(PLAN)
    model.expand(random_architecture(np.random.default_rng(0)), 1)
    with caplog.at_level(logging.INFO, logger="seulab.progress"):
        create_task_model(model, toy_task(), CreateConfig(epochs=3), np.random.default_rng(0),
                          evaluator=lambda ref: 0.7)
    lines = [json.loads(r.getMessage()) for r in caplog.records if r.name == "seulab.progress"]
    assert [l["round"] for l in lines] == [0, 1, 2]
    assert all(l["stage"] == "create" and l["accuracy"] == 0.7 for l in lines)


# -- final training -----------------------------------------------------------

def test_train_all_old_ref_changes_only_head():
    model = _model_with_frozen_task()
    model.expand(random_architecture(np.random.default_rng(1)), 2)
    model.add_head(2, 2)
    ref = TaskModelRef((0, 0, 0), 2)
    model.prune_unselected(ref)
    slots, heads = model.slot_hashes(), model.head_hashes()
    history = train_task_model(model, ref, toy_task(2), TrainConfig(epochs=3, batch_size=32))
    assert model.slot_hashes() == slots
    after = model.head_hashes()
    assert after[1] == heads[1] and after[2] != heads[2]
    assert len(history["loss"]) == 3


def test_train_loss_decreases_and_lr_anneals():
    model = SuperModel(PLAN)
    model.expand(CellArchitecture.uniform("sep_conv_3x3"), 1)
    model.add_head(1, 2)
    ref = TaskModelRef((0, 0, 0), 1)
    model.prune_unselected(ref)
    history = train_task_model(model, ref, toy_task(), TrainConfig(epochs=10, batch_size=16))
    assert history["loss"][-1] < history["loss"][0]
    assert history["lr"][0] == pytest.approx(0.025)
    assert history["lr"][-1] < 0.001
    assert all(a >= b for a, b in zip(history["lr"], history["lr"][1:]))


def test_train_stage_guards():
    model = SuperModel(PLAN)
    model.expand(random_architecture(np.random.default_rng(0)), 1)
    model.add_head(1, 2)
    ref = TaskModelRef((0, 0, 0), 1)
    with pytest.raises(ModelStateError):
        train_task_model(model, ref, toy_task(), TrainConfig(epochs=1))
    model.prune_unselected(ref)
    empty = toy_task()
    empty.train_x, empty.train_y = empty.train_x[:0], empty.train_y[:0]
    with pytest.raises(ValueError):
        train_task_model(model, ref, empty, TrainConfig(epochs=1))


def test_pruning_keeps_creation_weights():
    model = _model_with_frozen_task()
    model.expand(random_architecture(np.random.default_rng(1)), 2)
    ref = create_task_model(model, toy_task(2), CreateConfig(epochs=4, batch_size=32), np.random.default_rng(0))
    before = model.slot_hashes()
    model.prune_unselected(ref)
    after = model.slot_hashes()
    for j, k in enumerate(ref.slots):
        assert after[(j, k)] == before[(j, k)]


# -- whole sequence -----------------------------------------------------------

TINY = SeuConfig(
    model=ModelConfig(n_layers=3, init_channels=4),
    search=SearchConfig(samples=2, depth=2, channels=4, batch_size=32),
    create=CreateConfig(epochs=3, batch_size=32),
    train=TrainConfig(epochs=2, batch_size=32),
)


def test_run_sequence_stages_and_record(tmp_path):
    seq = SequenceSpec([toy_task(1, seed=1), toy_task(2, seed=2)], 0, {"kind": "toy"})
    stages = []
    record, model = run_sequence(seq, TINY, seed=0, out_dir=tmp_path,
                                 callback=lambda stage, t, m: stages.append((stage, t)))
    order = ["expanded", "created", "pruned", "trained", "frozen", "evaluated"]
    assert stages == [(s, t) for t in (1, 2) for s in order]
    assert record.complete and record.n_tasks == 2
    assert record.accuracy_matrix[1][0] == record.accuracy_matrix[0][0]
    assert record.param_counts[-1] == model.param_count()
    assert (tmp_path / "run_record.json").exists() and (tmp_path / "checkpoint" / "manifest.json").exists()


def test_run_sequence_failure_saves_partial_record(tmp_path):
    seq = SequenceSpec([toy_task(1), toy_task(2)], 0, {"kind": "toy"})

    def boom(stage, t, m):
        if t == 2 and stage == "created":
            raise RuntimeError("interrupted")

    with pytest.raises(RuntimeError):
        run_sequence(seq, TINY, out_dir=tmp_path, callback=boom)
    saved = json.loads((tmp_path / "run_record.json").read_text())
    assert saved["complete"] is False and "interrupted" in saved["error"]
    assert len(saved["accuracy_matrix"]) == 1


def test_run_sequence_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        run_sequence(SequenceSpec([], 0, {}), TINY)
    bad = SeuConfig(model=TINY.model, search=SearchConfig(samples=0))
    with pytest.raises(ValueError):
        run_sequence(SequenceSpec([toy_task()], 0, {}), bad)
