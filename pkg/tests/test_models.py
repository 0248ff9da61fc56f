import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asr_engine.nn import Tape, Tensor
from asr_engine.nn import autograd as ag
from asr_engine.nn.layers import (RunningStats, batch_norm, glorot_init, make_dropout_mask,
                                  orthogonal_init)
from asr_engine.nn.models import HyperparamError, make_architecture, reversal_permutation

from helpers import (FD_TOL, MICRO, MICRO_INPUT, RECURRENT, analytic_grads, fd_errors, hyper,
                     micro_arch, micro_batch, untied_micro_batch)


# Initialization.

def test_glorot_bound_at_equal_fans_of_three():
    w = glorot_init(3, 3, 0)
    assert w.shape == (3, 3)
    assert np.all(np.abs(w) <= 1.0)


def test_glorot_large_draw_mean_within_three_sigma():
    w = glorot_init(1000, 1000, 1)
    limit = np.sqrt(6 / 2000)
    sigma_of_mean = limit / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma_of_mean
    assert np.abs(w).max() <= limit


def test_glorot_is_seeded():
    assert np.array_equal(glorot_init(4, 5, 7), glorot_init(4, 5, 7))
    assert not np.array_equal(glorot_init(4, 5, 7), glorot_init(4, 5, 8))


def test_orthogonal_unit_and_sixty_four():
    assert abs(orthogonal_init(1, 0)[0, 0]) == pytest.approx(1.0)
    m = orthogonal_init(64, 0)
    assert np.abs(m.T @ m - np.eye(64)).max() < 1e-5
    assert abs(abs(np.linalg.det(m)) - 1.0) < 1e-4


# Dropout.

def test_dropout_keep_one_is_identity():
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert np.array_equal(make_dropout_mask((4, 3), 1.0, 0).apply(x), x)


def test_dropout_preserves_expectation_monte_carlo():
    x = np.array([0.5, -1.5, 2.0])
    draws = make_dropout_mask((100_000, 3), 0.7, 3).values * x
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 0.01 * np.abs(x))


def test_recurrent_dropout_mask_shared_across_time():
    arch = micro_arch("LiGRU", drop="0.5")
    seen = []
    import asr_engine.nn.layers as layers
    real = layers.make_dropout_mask

    def spy(shape, keep, seed):
        m = real(shape, keep, seed)
        seen.append((shape, m))
        return m

    import asr_engine.nn.models as models
    models.make_dropout_mask = spy
    try:
        x, mask = micro_batch("LiGRU", np.random.default_rng(0), t_len=5)
        arch(x, mask, np.random.default_rng(1))
    finally:
        models.make_dropout_mask = real
    # One mask per layer per forward pass, shaped (batch, hidden), reused at every step.
    assert [s for s, _ in seen] == [(3, 5), (3, 3)]


# Batch norm.

def test_batch_norm_on_standardized_batch_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 4))
    x = (x - x.mean(0)) / x.std(0)
    out = batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), True, RunningStats.fresh(4))
    # The only deviation is the eps=1e-5 inside the square root.
    assert np.all(np.abs(out.data - x) <= 1e-5 * np.maximum(1.0, np.abs(x)))


def test_batch_norm_train_output_zero_mean_and_masked_stats():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 3)) * 4 + 2
    mask = np.ones(30)
    mask[25:] = 0
    x_pad = x.copy()
    x_pad[25:] = 1e3
    stats = RunningStats.fresh(3)
    out = batch_norm(Tensor(x_pad), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, stats, mask)
    assert np.abs(out.data[:25].mean(0)).max() < 1e-5
    ref = batch_norm(Tensor(x[:25]), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, RunningStats.fresh(3))
    assert np.allclose(out.data[:25], ref.data)
    assert np.allclose(stats.mean, 0.1 * x[:25].mean(0))


def test_batch_norm_eval_uses_running_stats_deterministically():
    stats = RunningStats(np.array([1.0, -1.0]), np.array([4.0, 1.0]))
    x = Tensor(np.array([[3.0, 0.0]]))
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    a1 = batch_norm(x, g, b, False, stats).data
    a2 = batch_norm(x, g, b, False, stats).data
    assert np.array_equal(a1, a2)
    assert np.allclose(a1, [[2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(1 + 1e-5)]])
    assert np.array_equal(stats.mean, [1.0, -1.0])


# Forward behaviour.

def test_identity_linear_layer():
    arch = make_architecture("lin", "MLP", hyper("MLP", dnn_lay="3", dnn_act="linear"), 3)
    arch.params["dense0.W"].data = np.eye(3)
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.allclose(arch(x).data, x)


def test_ligru_saturated_update_gate_is_pure_memory():
    arch = make_architecture("mem", "LiGRU", hyper("LiGRU", lay="4"), 2)
    size = 4
    arch.params["l0.U"].data[:] = 0.0
    arch.params["l0.W"].data[:] = 0.0
    arch.params["l0.b"].data[:size] = 50.0  # z = sigmoid(50) ~ 1
    x = np.random.default_rng(0).standard_normal((10, 3, 2))
    out = arch(x, np.ones((10, 3))).data
    # h_0 = 0 and z ~ 1: the state never leaves its initial value.
    assert np.abs(out).max() < 1e-12


@pytest.mark.parametrize("kind", ["MLP", "CNN1D", "SincNet"])
def test_output_is_log_softmax(kind):
    arch = micro_arch(kind)
    assert arch.emits_log_probs
    x, mask = micro_batch(kind, np.random.default_rng(0))
    out = arch.eval()(x, mask).data
    assert np.abs(np.log(np.exp(out).sum(-1))).max() < 1e-5


@pytest.mark.parametrize("kind", RECURRENT)
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_masked_recurrence_matches_per_sequence(kind, seed):
    arch = micro_arch(kind).eval()
    rng = np.random.default_rng(seed)
    x, mask = micro_batch(kind, rng, t_len=7, batch=4)
    lengths = mask.sum(0).astype(int)
    batched = arch(x, mask).data
    for b, n in enumerate(lengths):
        single = arch(x[:n, b:b + 1], np.ones((n, 1))).data
        assert np.abs(batched[:n, b] - single[:, 0]).max() < 1e-5
        # Padded steps carry the last valid forward state unchanged.
        if n < x.shape[0]:
            fwd = batched[:, b, :arch.sizes[-1]]
            assert np.array_equal(fwd[n:], np.repeat(fwd[n - 1:n], x.shape[0] - n, 0))


def test_reversal_permutation_reverses_valid_prefix_only():
    mask = np.array([[1, 1], [1, 1], [1, 0], [0, 0]], dtype=float)
    assert reversal_permutation(mask).T.tolist() == [[2, 1, 0, 3], [1, 0, 2, 3]]


def test_recurrent_requires_time_major_input():
    with pytest.raises(ValueError):
        micro_arch("GRU")(np.zeros((4, 3)), np.ones(4))


def test_input_dim_mismatch_is_reported():
    with pytest.raises(ValueError, match="expected input dim"):
        micro_arch("MLP")(np.zeros((2, 5)))


def test_eval_forward_is_pure():
    arch = micro_arch("LiGRU", drop="0.3")
    x, mask = micro_batch("LiGRU", np.random.default_rng(0))
    arch(x, mask)  # update running stats once
    arch.eval()
    before = {k: v.copy() for k, v in arch.state_arrays().items()}
    a = arch(x, mask).data
    b = arch(x, mask).data
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], v) for k, v in arch.state_arrays().items())


# Gradients against finite differences.

@pytest.mark.parametrize("kind", list(MICRO))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(kind, seed):
    arch = micro_arch(kind, seed=seed, **({"drop": "0.25"} if kind in RECURRENT else {}))
    rng = np.random.default_rng(100 + seed)
    x, mask = untied_micro_batch(kind, arch, rng)
    weights = rng.standard_normal(x.shape[:-1] + (arch.output_dim,))
    errors = fd_errors(arch, x, mask, weights)
    assert max(errors.values()) < FD_TOL, errors


@pytest.mark.parametrize("kind", list(MICRO))
def test_padded_positions_get_zero_input_gradient(kind):
    arch = micro_arch(kind)
    rng = np.random.default_rng(5)
    x, mask = micro_batch(kind, rng)
    weights = rng.standard_normal(x.shape[:-1] + (arch.output_dim,))
    _, grads = analytic_grads(arch, x, mask, weights, wrt_input=True)
    assert np.all(grads["__input__"][mask == 0] == 0.0)


# SincNet.

def test_sincnet_filters_are_band_pass():
    arch = make_architecture("sinc", "SincNet", hyper("SincNet", sinc_N_filt="6", sinc_len_filt="101",
                                                      head_lay="4", head_act="softmax"), 400)
    kernels = arch.kernels().data[:, 0, :]
    f1, f2 = (t.data for t in arch.cutoffs())
    n = np.arange(kernels.shape[1])
    for k, lo, hi in zip(kernels, f1, f2):
        centre = (lo + hi) / 2
        response = abs(np.sum(k * np.exp(-2j * np.pi * centre * n)))
        dc = abs(k.sum())
        assert dc < response


def test_sincnet_cutoffs_ordered_after_arbitrary_params():
    arch = micro_arch("SincNet")
    rng = np.random.default_rng(0)
    arch.params["sinc.low"].data = rng.standard_normal(3) * 1000
    arch.params["sinc.band"].data = rng.standard_normal(3) * 1000
    arch.check_constraints()
    f1, f2 = arch.cutoffs()
    assert np.all(f1.data >= 0) and np.all(f2.data >= f1.data)


def test_sincnet_rejects_even_filter_length():
    with pytest.raises(HyperparamError):
        make_architecture("s", "SincNet", hyper("SincNet", sinc_N_filt="2", sinc_len_filt="4"), 32)


# Parameter accounting.

@pytest.mark.parametrize("d,h", [(3, 5), (50, 32), (1, 1), (7, 64)])
def test_ligru_has_two_thirds_of_gru_parameters(d, h):
    ligru = make_architecture("a", "LiGRU", hyper("LiGRU", lay=str(h), use_batchnorm="true"), d)
    gru = make_architecture("b", "GRU", hyper("GRU", lay=str(h), use_batchnorm="true"), d)
    assert ligru.parameter_count() == 2 * (d * h + h * h + h)
    assert gru.parameter_count() == 3 * (d * h + h * h + h)
    assert 3 * ligru.parameter_count() == 2 * gru.parameter_count()


def test_state_arrays_round_trip():
    a = micro_arch("LiGRU", seed=1)
    b = micro_arch("LiGRU", seed=2)
    b.load_state_arrays(a.state_arrays())
    x, mask = micro_batch("LiGRU", np.random.default_rng(0))
    assert np.array_equal(a.eval()(x, mask).data, b.eval()(x, mask).data)


def test_unknown_activation_rejected():
    with pytest.raises(HyperparamError):
        make_architecture("m", "MLP", hyper("MLP", dnn_lay="3", dnn_act="swish"), 2)
