import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asr_engine import checkpoint, dsl, trainer
from asr_engine.archive_io import load_matrix_ark
from asr_engine.config import parse_config
from asr_engine.errors import CheckpointError, DataError, NumericError
from asr_engine.synthetic import config_text
from asr_engine.trainer import (PriorVector, estimate_priors, forward_export, forward_posteriors, prior_normalize,
                                recover, save_state, train, training_priors, validate)

from helpers import LIGRU_ARCHS, LIGRU_MODEL, MLP_ARCH, MLP_MODEL


class Killed(BaseException):
    pass


def experiment(manifest, archs=MLP_ARCH, model=MLP_MODEL, n_epochs=2, n_chunks=1, seed=0, **exp):
    text = config_text(manifest, "exp", archs, model, n_epochs=n_epochs, seed=seed, n_chunks=n_chunks,
                       exp=exp or None)
    cfg = parse_config(text)
    bundle = trainer.load_data(cfg)
    return cfg, bundle, dsl.parse_and_build(cfg, bundle.stream_dims)


def kill_after_saves(monkeypatch, n):
    real = trainer.save_state
    calls = []

    def dying(path, state):
        out = real(path, state)
        calls.append(path)
        if len(calls) == n:
            raise Killed
        return out

    monkeypatch.setattr(trainer, "save_state", dying)


# Priors.

def test_priors_hand_example_and_absent_class():
    p = estimate_priors([np.array([0, 0, 0, 1])], 2)
    assert np.allclose(p.probs, [4 / 6, 2 / 6])
    q = estimate_priors([np.array([0, 0, 1])], 3)
    assert q.probs[2] == pytest.approx(1 / 6) and q.counts.tolist() == [2, 1, 0]
    u = estimate_priors([np.arange(5).repeat(7)], 5)
    assert np.allclose(u.probs, 0.2)


@settings(max_examples=40, deadline=None)
@given(seqs=st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=30), min_size=1, max_size=5))
def test_priors_positive_and_normalized(seqs):
    p = estimate_priors([np.array(s) for s in seqs], 7)
    assert np.all(p.probs > 0) and abs(p.probs.sum() - 1) < 1e-6


def test_priors_reject_empty_and_out_of_range():
    with pytest.raises(DataError):
        estimate_priors([np.array([], dtype=int)], 3)
    with pytest.raises(DataError):
        estimate_priors([np.array([3])], 3)


def test_prior_normalization_hand_example():
    probs = np.array([0.25, 0.75])
    priors = PriorVector(probs, 1.0, np.zeros(2))
    (out,) = prior_normalize({"u": np.log(np.array([[0.5, 0.5]]))}, priors).values()
    assert out[0] == pytest.approx([math.log(2), math.log(2 / 3)], abs=1e-12)
    assert out[0, 0] > out[0, 1]
    with pytest.raises(DataError):
        prior_normalize({"u": np.zeros((2, 3))}, priors)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), classes=st.integers(2, 9))
def test_uniform_priors_preserve_argmax(seed, classes):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((20, classes)) * 5
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    uniform = PriorVector(np.full(classes, 1 / classes), 1.0, np.zeros(classes))
    out = prior_normalize({"u": logp}, uniform)["u"]
    assert np.array_equal(out.argmax(1), logp.argmax(1))
    assert np.allclose(out - logp, math.log(classes))


# Checkpoints.

def test_recover_of_save_is_identity(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, LIGRU_ARCHS, LIGRU_MODEL, n_epochs=1)
    state, _ = train(cfg, graph, bundle)
    path = save_state(tmp_path / "s.ckpt", state)
    back = recover(path)
    assert back.meta() == json.loads(json.dumps(state.meta()))
    assert back.tensors().keys() == state.tensors().keys()
    for k, v in state.tensors().items():
        assert np.array_equal(back.tensors()[k], v) and back.tensors()[k].dtype == v.dtype
    assert checkpoint.encode(back.tensors(), back.meta()) == checkpoint.encode(state.tensors(), state.meta())


def test_corrupt_checkpoint_raises_before_any_state(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=1)
    state, _ = train(cfg, graph, bundle)
    path = save_state(tmp_path / "s.ckpt", state)
    blob = bytearray(path.read_bytes())
    for pos in (3, 20, len(blob) // 2, len(blob) - 5):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            recover(path)
    path.write_bytes(bytes(blob[:-40]))
    with pytest.raises(CheckpointError):
        recover(path)


# Training behaviour.

def test_mlp_learns_the_default_corpus(default_corpus):
    cfg, bundle, graph = experiment(default_corpus, n_epochs=10, batch_size_train=128)
    _, reports = train(cfg, graph, bundle)
    assert reports[-1].train_error < 0.05
    assert all(0 <= r.train_error <= 1 and 0 <= r.valid_error <= 1 for r in reports)


def test_twenty_four_epochs_give_twenty_four_reports(small_corpus):
    arch = MLP_ARCH.replace("64,8", "8").replace("relu,softmax", "softmax")
    cfg, bundle, graph = experiment(small_corpus, arch, n_epochs=24, batch_size_train=512)
    _, reports = train(cfg, graph, bundle)
    assert [r.epoch for r in reports] == list(range(24))


@pytest.mark.parametrize("archs,model,exp", [
    (MLP_ARCH, MLP_MODEL, {"batch_size_train": 128}),
    (LIGRU_ARCHS.replace("arch_lr = 0.002\n", ""), LIGRU_MODEL, {"batch_size_train": 8}),
], ids=["mlp", "ligru"])
def test_training_loss_decreases_over_first_epochs(default_corpus, archs, model, exp):
    cfg, bundle, graph = experiment(default_corpus, archs, model, n_epochs=3, **exp)
    _, reports = train(cfg, graph, bundle)
    losses = [r.train_loss for r in reports]
    assert losses[0] >= losses[1] >= losses[2]


def test_validation_does_not_mutate_state(small_corpus):
    cfg, bundle, graph = experiment(small_corpus, LIGRU_ARCHS, LIGRU_MODEL, n_epochs=1)
    registry = dsl.build_architectures(graph, cfg, 0)
    train(cfg, graph, bundle, registry=registry)
    before = {n: {k: v.copy() for k, v in a.state_arrays().items()} for n, a in registry.items()}
    first = validate(cfg, graph, registry, bundle)
    second = validate(cfg, graph, registry, bundle)
    assert first == second
    for n, a in registry.items():
        assert all(np.array_equal(before[n][k], v) for k, v in a.state_arrays().items())


def test_training_is_deterministic(small_corpus):
    runs = []
    for seed in (5, 5, 6):
        cfg, bundle, graph = experiment(small_corpus, LIGRU_ARCHS, LIGRU_MODEL, n_epochs=2, n_chunks=2, seed=seed)
        state, reports = train(cfg, graph, bundle)
        runs.append((checkpoint.encode(state.tensors(), state.meta()), [r.record() for r in reports]))
    assert runs[0] == runs[1]
    assert runs[0][0] != runs[2][0]


def test_resume_processes_each_remaining_chunk_once(small_corpus, tmp_path, monkeypatch):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=2, n_chunks=3)
    seen = []
    real = trainer._train_batches

    def spy(cfg_, graph_, chunk, epoch, seed):
        seen.append((epoch, chunk.chunk_index))
        return real(cfg_, graph_, chunk, epoch, seed)

    monkeypatch.setattr(trainer, "_train_batches", spy)
    train(cfg, graph, bundle, exp_dir=tmp_path, stop_after_chunks=2)
    assert seen == [(0, 0), (0, 1)]
    seen.clear()
    train(cfg, graph, bundle, exp_dir=tmp_path, resume=True)
    assert seen == [(0, 2), (1, 0), (1, 1), (1, 2)]


def test_kill_between_checkpoint_and_results_line_is_repaired(small_corpus, tmp_path, monkeypatch):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=2)
    # Saves: chunk 0, validation 0, ... The second save closes epoch 0.
    kill_after_saves(monkeypatch, 2)
    with pytest.raises(Killed):
        train(cfg, graph, bundle, exp_dir=tmp_path)
    assert not (tmp_path / "res.res").exists()
    monkeypatch.undo()
    train(cfg, graph, bundle, exp_dir=tmp_path, resume=True)
    lines = (tmp_path / "res.res").read_text().splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["ep=000", "ep=001"]


def test_resume_after_finish_is_idempotent(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=1)
    train(cfg, graph, bundle, exp_dir=tmp_path)
    final = (tmp_path / "checkpoints" / "final.ckpt").read_bytes()
    res = (tmp_path / "res.res").read_text()
    train(cfg, graph, bundle, exp_dir=tmp_path, resume=True)
    assert (tmp_path / "checkpoints" / "final.ckpt").read_bytes() == final
    assert (tmp_path / "res.res").read_text() == res


def test_non_finite_input_aborts_and_keeps_last_good_checkpoint(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=1, n_chunks=3)
    chunks = trainer.epoch_chunks(bundle, 0, cfg.exp.seed)
    victim = chunks[1].records[0]
    victim.features["mfcc"][0, 0] = np.nan
    with pytest.raises(NumericError):
        train(cfg, graph, bundle, exp_dir=tmp_path)
    state = recover(tmp_path / "checkpoints" / "state.ckpt")
    assert (state.epoch, state.next_chunk) == (0, 1)
    assert all(np.isfinite(v).all() for v in state.tensors().values())


def test_resume_with_a_different_seed_is_refused(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=2)
    train(cfg, graph, bundle, exp_dir=tmp_path, stop_after_chunks=1)
    with pytest.raises(CheckpointError, match="seed"):
        train(cfg, graph, bundle, exp_dir=tmp_path, resume=True, seed=99)


def test_lr_trajectory_follows_scripted_validation_metrics(small_corpus, monkeypatch):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=4)
    metrics = iter([0.40, 0.40 * 0.95, 0.40 * 0.95 * 0.9995, 0.40 * 0.95 * 0.9995 * 1.01])
    monkeypatch.setattr(trainer, "validate", lambda *a, **k: (1.0, next(metrics)))
    state, reports = train(cfg, graph, bundle)
    lr = 0.001
    assert [r.lr["MLP_layers"] for r in reports] == [lr, lr, lr / 2, lr / 4]
    assert len(state.events) == 2


def test_multitask_terms_and_doubled_loss():
    archs = "[architecture1]\narch_name = head\narch_class = MLP\ndnn_lay = 8\ndnn_act = softmax\n"
    from helpers import inline_config
    model = "out=compute(head,mfcc)\na=cost_nll(out,lab_cd)\nb=cost_nll(out,lab_twin)\nb_w=mult_scalar(1.0,b)\n" \
            "loss=sum(a,b_w)"
    cfg = parse_config(inline_config(archs, model, labels=(("lab_cd", 8), ("lab_twin", 8))))
    graph = dsl.parse_and_build(cfg, {"mfcc": 5})
    reg = dsl.build_architectures(graph, cfg, 0)
    rng = np.random.default_rng(0)
    y = rng.integers(0, 8, 12)
    res = dsl.evaluate(graph, {"mfcc": rng.standard_normal((12, 5))}, {"lab_cd": y, "lab_twin": y.copy()},
                       np.ones(12), reg, "eval")
    terms = trainer.multitask_terms(graph, res)
    assert terms["a"] == terms["b"]
    assert trainer.multitask_loss(graph, res) == 2 * terms["a"]


# Forward export.

def test_forward_export_round_trip(small_corpus, tmp_path):
    cfg, bundle, graph = experiment(small_corpus, n_epochs=1)
    registry = dsl.build_architectures(graph, cfg, 0)
    train(cfg, graph, bundle, registry=registry)
    priors = training_priors(graph, bundle, 8)
    dataset = bundle.forward[0]
    ark = forward_export(registry, graph, dataset, priors, tmp_path, dict(cfg.decoding))
    assert ark.name == "test_out.ark"
    back = load_matrix_ark(ark)
    expected = prior_normalize(forward_posteriors(graph, registry, dataset[1]), priors)
    assert sorted(back) == sorted(r.utt_id for r in dataset[1])
    for rec in dataset[1]:
        m = back[rec.utt_id]
        assert m.shape == (rec.frames, 8) and m.dtype == np.float32
        assert np.array_equal(m, expected[rec.utt_id].astype(np.float32))
    meta = json.loads(ark.with_suffix(".json").read_text())
    assert meta["label_stream"] == "lab_cd" and meta["decoding"] == {"beam": "13.0"}
    assert np.allclose(meta["priors"], priors.probs)
