import dataclasses

import numpy as np
import pytest
import torch

from saddel import model as model_io
from saddel.data import Batch, CorpusTask, Item, load_corpus
from saddel.losses import full_pit_loss, orpit_loss
from saddel.model import Separator, SeparatorConfig, count_parameters
from saddel.synth import TaskConfig
from saddel.train import (
    TrainConfig,
    TrainingDiverged,
    ValidationSet,
    a2pit_val_scores,
    batch_rng,
    build_model,
    orpit_val_scores,
    parameter_report,
    read_log,
    run_training,
    train_a2pit,
    train_cascade,
    train_saddel,
)

TINY = SeparatorConfig(encoder_basis_count=16, block_channels=8, hidden_channels=16, blocks_per_repeat=2, repeats=1)


def cfg(**kw):
    base = dict(strategy="saddel", tasks=("2sp", "1sp+n"), batch_size=2, segment_seconds=0.1, steps=6,
                validate_every=0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpora(small_corpus):
    return load_corpus(small_corpus)


def comparable(records):
    return [dataclasses.replace(r, wall_time=0.0) for r in records]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tasks=())
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="magic")
    assert TrainConfig(strategy="baseline_ss").tasks == ("2sp+n", "3sp+n")


def test_identical_seeds_identical_logs(corpora):
    a = train_saddel(build_model(TINY, 1), corpora, cfg())
    b = train_saddel(build_model(TINY, 1), corpora, cfg())
    assert comparable(a.log) == comparable(b.log)
    steps = [r.step for r in a.log]
    assert steps == sorted(steps) == list(range(1, 7))


def test_single_task_matches_plain_loop(corpora):
    """Reference loop written independently of the trainer."""
    c = cfg(tasks=("2sp",), grad_clip=None)
    result = train_saddel(build_model(TINY, 2), corpora, c)
    model = build_model(TINY, 2)
    opt = torch.optim.Adam(model.parameters(), lr=c.lr)
    expected = []
    for step in range(1, c.steps + 1):
        batch = corpora["2sp"].sample_batch(batch_rng(c.seed, step, 0), c.batch_size, c.segment)
        out = model(batch.mixture)
        loss = orpit_loss(out[:, 0], out[:, 1], batch.sources).loss.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        expected.append(loss.item())
    assert [r.loss for r in result.log] == expected


def test_one_update_per_step_and_mean_loss(corpora):
    c = cfg(tasks=("1sp+n", "2sp", "3sp", "2sp+n", "3sp+n"), steps=4)
    result = train_saddel(build_model(TINY, 4), corpora, c)
    state = result.optimizer.state_dict()["state"]
    assert {int(s["step"]) for s in state.values()} == {4}
    for r in result.log:
        assert len(r.task_losses) == 5
        assert abs(r.loss - np.mean(list(r.task_losses.values()))) < 1e-9


def test_resume_is_exact(corpora, tmp_path):
    full = train_saddel(build_model(TINY, 5), corpora, cfg(steps=100))
    first = train_saddel(build_model(TINY, 5), corpora, cfg(steps=50), out_dir=tmp_path)
    ckpt = model_io.load_checkpoint(tmp_path / "model.pt")
    resumed = train_saddel(ckpt.build(), corpora, cfg(steps=100), resume=ckpt)
    for (name, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), name
    assert comparable(first.log + resumed.log) == comparable(full.log)


def test_log_file_round_trip(corpora, tmp_path):
    result = train_saddel(build_model(TINY, 6), corpora, cfg(steps=3), out_dir=tmp_path)
    assert read_log(tmp_path / "train_log.jsonl") == result.log
    meta = model_io.load_checkpoint(tmp_path / "model.pt").metadata
    assert meta["strategy"] == "saddel" and meta["train_config"]["steps"] == 3


def test_missing_corpus_rejected(corpora):
    with pytest.raises(ValueError):
        train_saddel(build_model(TINY), {"2sp": corpora["2sp"]}, cfg())
    with pytest.raises(ValueError):
        CorpusTask(TaskConfig.from_tag("2sp"), [])


def test_three_heads_rejected_for_orpit(corpora):
    with pytest.raises(ValueError):
        train_saddel(build_model(dataclasses.replace(TINY, num_output_heads=3)), corpora, cfg())


def test_divergence_aborts_with_record():
    n = np.full(1600, np.nan, dtype=np.float32)
    bad = CorpusTask(TaskConfig.from_tag("2sp"), [Item("x", n, np.stack([n, n]), None)])
    with pytest.raises(TrainingDiverged) as info:
        train_saddel(build_model(TINY), {"2sp": bad}, cfg(tasks=("2sp",)))
    assert info.value.record["step"] == 1


def test_validation_and_checkpoint_reload(corpora, tmp_path):
    val = ValidationSet(corpora, max_items=2)
    c = cfg(steps=4, validate_every=2)
    result = train_saddel(build_model(TINY, 7), corpora, c, validation=val, out_dir=tmp_path)
    assert [r.step for r in result.log if r.val_si_snri] == [2, 4]
    logged = result.log[-1].val_si_snri
    reloaded = model_io.load(tmp_path / "model.pt")
    again, _ = val.evaluate(reloaded, orpit_val_scores, c.tasks)
    for tag in logged:
        assert abs(again[tag] - logged[tag]) < 1e-4


def test_lr_halves_after_plateau(corpora):
    val = ValidationSet(corpora, max_items=1)
    # a vanishing learning rate cannot improve the validation loss
    c = cfg(steps=8, validate_every=1, lr=1e-12, plateau_patience=3)
    result = train_saddel(build_model(TINY, 8), corpora, c, validation=val)
    lrs = [r.lr for r in result.log]
    assert lrs[0] == 1e-12 and min(lrs) < 1e-12


def test_cascade_identity_stage_reduces_to_ss(corpora):
    c = cfg(strategy="cascade", tasks=("2sp",), steps=5)
    casc = train_cascade(None, build_model(TINY, 9), corpora, c)
    plain = train_saddel(build_model(TINY, 9), corpora, dataclasses.replace(c, strategy="saddel"))
    assert [r.loss for r in casc.log] == [r.loss for r in plain.log]


def test_cascade_trains_both_stages(corpora, tmp_path):
    c = cfg(strategy="cascade", tasks=("2sp+n",), steps=3)
    sd, ss = build_model(TINY, 10), build_model(TINY, 11)
    before = [p.detach().clone() for p in sd.parameters()]
    result = train_cascade(sd, ss, corpora, c, out_dir=tmp_path)
    assert any(not torch.equal(a, b) for a, b in zip(before, sd.parameters()))
    assert (tmp_path / "sd.pt").exists() and (tmp_path / "ss.pt").exists()
    assert all(np.isfinite(r.loss) and "2sp+n/sd_loss" in r.extras for r in result.log)


def test_cascade_parameter_count_is_double():
    config = SeparatorConfig()
    report = parameter_report(train_cascade.__globals__["CascadeSeparator"](Separator(config), Separator(config)))
    single = count_parameters(Separator(config))
    assert abs(report["total"] / single - 2.0) < 0.05


def full_pit_step(model, batch: Batch):
    perm, loss = full_pit_loss(model(batch.mixture), batch.sources)
    return loss.mean(), {}


def test_a2pit_with_matching_heads_equals_full_pit(corpora):
    c = cfg(strategy="a2pit", tasks=("2sp",), steps=5)
    a = train_a2pit(build_model(TINY, 12), corpora, c)
    ref, _, _ = run_training(build_model(TINY, 12), corpora, c, full_pit_step)
    assert [r.loss for r in a.log] == pytest.approx([r.loss for r in ref], abs=1e-12)


def test_a2pit_rejects_too_few_heads(corpora):
    with pytest.raises(ValueError):
        train_a2pit(build_model(TINY), corpora, cfg(strategy="a2pit", tasks=("3sp",)))


def test_a2pit_redundant_heads_drift_to_mixture(corpora):
    config = dataclasses.replace(TINY, num_output_heads=3)
    c = cfg(strategy="a2pit", tasks=("1sp+n",), steps=150, lr=3e-3)
    result = train_a2pit(build_model(config, 13), corpora, c)
    sim = [r.extras["1sp+n/autoencode_si_snr"] for r in result.log]
    assert np.mean(sim[-20:]) > np.mean(sim[:20]) + 1.0
    val = ValidationSet(corpora, max_items=1)
    scores, _ = val.evaluate(result.model, a2pit_val_scores, c.tasks)
    assert np.isfinite(scores["1sp+n"])
