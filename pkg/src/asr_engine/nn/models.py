"""Acoustic model zoo.

Every architecture follows the same contract: ``__init__`` declares and
initializes parameters, ``forward(x, mask, rng)`` maps inputs with feature
dimension ``input_dim`` on the last axis to outputs with ``output_dim``.

Feed-forward kinds (MLP, CNN1D, SincNet) accept any leading shape and treat
positions independently. Recurrent kinds need time-major ``(T, B, D)`` input
with a ``(T, B)`` validity mask; padded steps carry the state unchanged.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import (
    RunningStats,
    batch_norm,
    count_parameters,
    glorot_init,
    make_dropout_mask,
    new_param,
    orthogonal_init,
)

REQUIRED = object()

ACTIVATIONS = {
    "relu": ag.relu,
    "leaky_relu": ag.leaky_relu,
    "tanh": ag.tanh,
    "sigmoid": ag.sigmoid,
    "linear": lambda x: x,
    "softmax": lambda x: ag.log_softmax(x, axis=-1),
}

COMMON_SCHEMA = {
    "input_dim": ("int", 0),
    "arch_lr": ("float", 0.001),
    "arch_opt": ("str", "rmsprop"),
    "opt_alpha": ("float", 0.95),
    "opt_eps": ("float", 1e-8),
    "arch_halving_factor": ("float", 0.5),
    "arch_improvement_threshold": ("float", 0.001),
    "weight_decay": ("float", 0.0),
}

_DENSE_SCHEMA = {
    "head_lay": ("ints", ()),
    "head_act": ("strs", ()),
    "head_drop": ("floats", ()),
    "head_use_batchnorm": ("bools", ()),
}

_CONV_SCHEMA = {
    "cnn_N_filt": ("ints", ()),
    "cnn_len_filt": ("ints", ()),
    "cnn_max_pool_len": ("ints", ()),
    "cnn_act": ("strs", ()),
    "cnn_drop": ("floats", ()),
    "cnn_use_batchnorm": ("bools", ()),
}


class HyperparamError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(message)


def _broadcast_list(hyper, key, n, default):
    vals = tuple(hyper.get(key) or ())
    if not vals:
        return (default,) * n
    if len(vals) == 1 and n > 1:
        return vals * n
    if len(vals) != n:
        raise HyperparamError(key, f"expected {n} values, got {len(vals)}")
    return vals


def _check_sizes(key, sizes):
    for s in sizes:
        if s < 1:
            raise HyperparamError(key, f"layer sizes must be >= 1, got {s}")


def _check_drops(key, drops):
    for d in drops:
        if not 0.0 <= d < 1.0:
            raise HyperparamError(key, f"dropout must be in [0, 1), got {d}")


def _check_acts(key, acts):
    for a in acts:
        if a not in ACTIVATIONS:
            raise HyperparamError(key, f"unknown activation {a!r}; choose from {sorted(ACTIVATIONS)}")


def _keep_mask(mask, lead_shape):
    if mask is None:
        return np.ones(lead_shape)
    mask = np.asarray(mask, dtype=float)
    if mask.shape != tuple(lead_shape):
        raise ValueError(f"mask shape {mask.shape} does not match input positions {tuple(lead_shape)}")
    return mask


class Architecture:
    kind = "base"
    recurrent = False
    SCHEMA: dict = {}

    def __init__(self, name: str, hyper: dict, input_dim: int, seed: int = 0):
        self.name = name
        self.hyper = dict(hyper)
        self.input_dim = int(input_dim)
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, RunningStats] = {}
        self.training = True
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x494E4954]))
        self.validate(self.hyper)
        self.build()

    # Subclass hooks.

    @classmethod
    def validate(cls, hyper: dict):
        pass

    def build(self):
        raise NotImplementedError

    @property
    def output_dim(self) -> int:
        raise NotImplementedError

    @property
    def emits_log_probs(self) -> bool:
        return False

    def forward(self, x, mask=None, rng=None) -> Tensor:
        raise NotImplementedError

    def check_constraints(self):
        pass

    # Shared machinery.

    def __call__(self, x, mask=None, rng=None):
        x = ag.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"{self.name}: expected input dim {self.input_dim}, got {x.shape[-1]}")
        return self.forward(x, mask, rng)

    def add_param(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = new_param(data, f"{self.name}.{name}")
        return self.params[name]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self, include_batchnorm=False) -> int:
        if include_batchnorm:
            return sum(p.data.size for p in self.params.values())
        return count_parameters(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, s in self.running.items():
            out[f"running_mean/{k}"] = s.mean
            out[f"running_var/{k}"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"{self.name}: state mismatch (missing {missing}, unexpected {extra})")
        for k, p in self.params.items():
            src = arrays[f"param/{k}"]
            if src.shape != p.data.shape:
                raise ValueError(f"{self.name}.{k}: shape {src.shape} != {p.data.shape}")
            p.data = np.array(src, dtype=np.float64)
        for k, s in self.running.items():
            s.mean = np.array(arrays[f"running_mean/{k}"], dtype=np.float64)
            s.var = np.array(arrays[f"running_var/{k}"], dtype=np.float64)

    def _next_rng(self, rng):
        return rng if rng is not None else self._rng


class _DenseStack:
    """affine -> [batch norm] -> activation -> [dropout], per layer."""

    def __init__(self, arch: Architecture, prefix, input_dim, sizes, acts, drops, norms):
        self.arch = arch
        self.layers = []
        fan_in = input_dim
        for i, (size, act, drop, norm) in enumerate(zip(sizes, acts, drops, norms)):
            tag = f"{prefix}{i}"
            w = arch.add_param(f"{tag}.W", glorot_init(fan_in, size, arch._rng))
            b = arch.add_param(f"{tag}.b", np.zeros(size))
            bn = None
            if norm:
                bn = (arch.add_param(f"{tag}.bn_gamma", np.ones(size)),
                      arch.add_param(f"{tag}.bn_beta", np.zeros(size)))
                arch.running[tag] = RunningStats.fresh(size)
            self.layers.append((tag, w, b, bn, act, drop))
            fan_in = size
        self.output_dim = fan_in

    def __call__(self, h, mask, rng):
        arch = self.arch
        for tag, w, b, bn, act, drop in self.layers:
            h = h @ w + b
            if bn is not None:
                h = batch_norm(h, bn[0], bn[1], arch.training, arch.running[tag], mask)
            h = ACTIVATIONS[act](h)
            if drop > 0 and arch.training:
                h = make_dropout_mask(h.shape, 1.0 - drop, rng).apply(h)
        return h


class MLP(Architecture):
    kind = "MLP"
    SCHEMA = {
        "dnn_lay": ("ints", REQUIRED),
        "dnn_act": ("strs", REQUIRED),
        "dnn_drop": ("floats", ()),
        "dnn_use_batchnorm": ("bools", ()),
    }

    @classmethod
    def validate(cls, hyper):
        sizes = tuple(hyper["dnn_lay"])
        if not sizes:
            raise HyperparamError("dnn_lay", "at least one layer is required")
        _check_sizes("dnn_lay", sizes)
        _check_acts("dnn_act", _broadcast_list(hyper, "dnn_act", len(sizes), "relu"))
        _check_drops("dnn_drop", _broadcast_list(hyper, "dnn_drop", len(sizes), 0.0))
        _broadcast_list(hyper, "dnn_use_batchnorm", len(sizes), False)

    def build(self):
        h = self.hyper
        sizes = tuple(h["dnn_lay"])
        n = len(sizes)
        self.acts = _broadcast_list(h, "dnn_act", n, "relu")
        self.stack = _DenseStack(self, "dense", self.input_dim, sizes, self.acts,
                                 _broadcast_list(h, "dnn_drop", n, 0.0),
                                 _broadcast_list(h, "dnn_use_batchnorm", n, False))

    @property
    def output_dim(self):
        return self.stack.output_dim

    @property
    def emits_log_probs(self):
        return self.acts[-1] == "softmax"

    def forward(self, x, mask=None, rng=None):
        mask = _keep_mask(mask, x.shape[:-1])
        return self.stack(x, mask, self._next_rng(rng))


class _Recurrent(Architecture):
    recurrent = True
    gates = 1
    SCHEMA = {
        "lay": ("ints", REQUIRED),
        "drop": ("floats", ()),
        "use_batchnorm": ("bool", False),
        "bidir": ("bool", False),
    }

    @classmethod
    def validate(cls, hyper):
        sizes = tuple(hyper["lay"])
        if not sizes:
            raise HyperparamError("lay", "at least one layer is required")
        _check_sizes("lay", sizes)
        _check_drops("drop", _broadcast_list(hyper, "drop", len(sizes), 0.0))
        if "act" in hyper:
            _check_acts("act", [hyper["act"]])

    def build(self):
        h = self.hyper
        self.sizes = tuple(h["lay"])
        self.drops = _broadcast_list(h, "drop", len(self.sizes), 0.0)
        self.bidir = bool(h.get("bidir", False))
        self.use_bn = bool(h.get("use_batchnorm", False))
        fan_in = self.input_dim
        for i, size in enumerate(self.sizes):
            g = self.gates
            w = np.concatenate([glorot_init(fan_in, size, self._rng) for _ in range(g)], axis=1)
            u = np.concatenate([orthogonal_init(size, self._rng) for _ in range(g)], axis=1)
            self.add_param(f"l{i}.W", w)
            self.add_param(f"l{i}.U", u)
            self.add_param(f"l{i}.b", np.zeros(g * size))
            if self.use_bn:
                self.add_param(f"l{i}.bn_gamma", np.ones(g * size))
                self.add_param(f"l{i}.bn_beta", np.zeros(g * size))
                self.running[f"l{i}"] = RunningStats.fresh(g * size)
            fan_in = size * (2 if self.bidir else 1)

    @property
    def output_dim(self):
        return self.sizes[-1] * (2 if self.bidir else 1)

    def forward(self, x, mask=None, rng=None):
        if x.ndim != 3:
            raise ValueError(f"{self.name}: recurrent input must be (T, B, D), got {x.shape}")
        t_len, batch, _ = x.shape
        mask = _keep_mask(mask, (t_len, batch))
        rng = self._next_rng(rng)
        if self.bidir:
            rev = reversal_permutation(mask)
        for i, size in enumerate(self.sizes):
            if self.bidir:
                x_in = ag.concat([x, ag.permute_time(x, rev)], axis=1)
                m_in = np.concatenate([mask, mask], axis=1)
            else:
                x_in, m_in = x, mask
            proj = x_in @ self.params[f"l{i}.W"] + self.params[f"l{i}.b"]
            if self.use_bn:
                proj = batch_norm(proj, self.params[f"l{i}.bn_gamma"], self.params[f"l{i}.bn_beta"],
                                  self.training, self.running[f"l{i}"], m_in)
            drop = None
            if self.training and self.drops[i] > 0:
                drop = make_dropout_mask((x_in.shape[1], size), 1.0 - self.drops[i], rng)
            y = self.run_cell(proj, m_in, self.params[f"l{i}.U"], size, drop)
            if self.bidir:
                fwd = y[:, :batch]
                bwd = ag.permute_time(y[:, batch:], rev)
                y = ag.concat([fwd, bwd], axis=-1)
            x = y
        return x

    def run_cell(self, proj, mask, u, size, drop):
        raise NotImplementedError

    @staticmethod
    def _steps(mask):
        """Per step: None when every sequence is valid, else (keep, carry) column masks."""
        out = []
        for m in mask:
            if m.all():
                out.append(None)
            else:
                keep = m[:, None]
                out.append((keep, 1.0 - keep))
        return out

    @staticmethod
    def _carry(new, old, step):
        if step is None:
            return new
        keep, carry = step
        return new * keep + old * carry


def reversal_permutation(mask) -> np.ndarray:
    """Index reversing each column's valid prefix while leaving padding in place."""
    mask = np.asarray(mask)
    t_len, batch = mask.shape
    lengths = mask.sum(axis=0).astype(int)
    t = np.arange(t_len)[:, None]
    return np.where(t < lengths[None, :], lengths[None, :] - 1 - t, t)


class RNN(_Recurrent):
    kind = "RNN"
    gates = 1
    SCHEMA = {**_Recurrent.SCHEMA, "act": ("str", "tanh")}

    def run_cell(self, proj, mask, u, size, drop):
        act = ACTIVATIONS[self.hyper.get("act", "tanh")]
        h = Tensor(np.zeros((proj.shape[1], size)))
        outs = []
        for pre, step in zip(ag.unstack(proj), self._steps(mask)):
            hd = drop.apply(h) if drop else h
            h = self._carry(act(pre + hd @ u), h, step)
            outs.append(h)
        return ag.stack(outs)


class LSTM(_Recurrent):
    kind = "LSTM"
    gates = 4

    def run_cell(self, proj, mask, u, size, drop):
        batch = proj.shape[1]
        h = Tensor(np.zeros((batch, size)))
        c = Tensor(np.zeros((batch, size)))
        outs = []
        for pre, step in zip(ag.unstack(proj), self._steps(mask)):
            hd = drop.apply(h) if drop else h
            a = pre + hd @ u
            i_g = ag.sigmoid(a[:, :size])
            f_g = ag.sigmoid(a[:, size:2 * size])
            o_g = ag.sigmoid(a[:, 2 * size:3 * size])
            cand = ag.tanh(a[:, 3 * size:])
            c_new = f_g * c + i_g * cand
            h_new = o_g * ag.tanh(c_new)
            c = self._carry(c_new, c, step)
            h = self._carry(h_new, h, step)
            outs.append(h)
        return ag.stack(outs)


class GRU(_Recurrent):
    kind = "GRU"
    gates = 3

    def run_cell(self, proj, mask, u, size, drop):
        batch = proj.shape[1]
        u_zr = u[:, :2 * size]
        u_h = u[:, 2 * size:]
        pre_zr = ag.unstack(proj[:, :, :2 * size])
        pre_h = ag.unstack(proj[:, :, 2 * size:])
        h = Tensor(np.zeros((batch, size)))
        outs = []
        for pzr, ph, step in zip(pre_zr, pre_h, self._steps(mask)):
            hd = drop.apply(h) if drop else h
            a = pzr + hd @ u_zr
            z = ag.sigmoid(a[:, :size])
            r = ag.sigmoid(a[:, size:])
            cand = ag.tanh(ph + (r * hd) @ u_h)
            h_new = z * h + (1.0 - z) * cand
            h = self._carry(h_new, h, step)
            outs.append(h)
        return ag.stack(outs)


class LiGRU(_Recurrent):
    """Single update gate, ReLU candidate, no reset gate."""

    kind = "LiGRU"
    gates = 2
    SCHEMA = {**_Recurrent.SCHEMA, "act": ("str", "relu")}

    def run_cell(self, proj, mask, u, size, drop):
        act = ACTIVATIONS[self.hyper.get("act", "relu")]
        h = Tensor(np.zeros((proj.shape[1], size)))
        outs = []
        for pre, step in zip(ag.unstack(proj), self._steps(mask)):
            hd = drop.apply(h) if drop else h
            a = pre + hd @ u
            z = ag.sigmoid(a[:, :size])
            cand = act(a[:, size:])
            h_new = z * h + (1.0 - z) * cand
            h = self._carry(h_new, h, step)
            outs.append(h)
        return ag.stack(outs)


def _conv_lists(hyper):
    n = len(tuple(hyper.get("cnn_N_filt") or ()))
    return (
        tuple(hyper.get("cnn_N_filt") or ()),
        _broadcast_list(hyper, "cnn_len_filt", n, 3),
        _broadcast_list(hyper, "cnn_max_pool_len", n, 1),
        _broadcast_list(hyper, "cnn_act", n, "relu"),
        _broadcast_list(hyper, "cnn_drop", n, 0.0),
        _broadcast_list(hyper, "cnn_use_batchnorm", n, False),
    )


def _head_lists(hyper):
    n = len(tuple(hyper.get("head_lay") or ()))
    return (
        tuple(hyper.get("head_lay") or ()),
        _broadcast_list(hyper, "head_act", n, "relu"),
        _broadcast_list(hyper, "head_drop", n, 0.0),
        _broadcast_list(hyper, "head_use_batchnorm", n, False),
    )


class CNN1D(Architecture):
    """1-d convolutions over the context window, then an optional dense head.

    Input rows are spliced frames laid out as ``length`` blocks of
    ``in_channels`` values; convolution runs along the blocks.
    """

    kind = "CNN1D"
    SCHEMA = {"in_channels": ("int", REQUIRED), **_CONV_SCHEMA, **_DENSE_SCHEMA}

    @classmethod
    def validate(cls, hyper):
        filt, lens, pools, acts, drops, _ = _conv_lists(hyper)
        _check_sizes("cnn_N_filt", filt)
        _check_sizes("cnn_len_filt", lens)
        _check_sizes("cnn_max_pool_len", pools)
        _check_acts("cnn_act", acts)
        _check_drops("cnn_drop", drops)
        sizes, hacts, hdrops, _ = _head_lists(hyper)
        _check_sizes("head_lay", sizes)
        _check_acts("head_act", hacts)
        _check_drops("head_drop", hdrops)
        if not filt and cls.kind == "CNN1D":
            raise HyperparamError("cnn_N_filt", "at least one convolution layer is required")

    def _input_geometry(self):
        channels = int(self.hyper["in_channels"])
        if channels < 1 or self.input_dim % channels:
            raise HyperparamError("in_channels",
                                  f"input dim {self.input_dim} is not a multiple of in_channels {channels}")
        return channels, self.input_dim // channels

    def build(self):
        channels, length = self._input_geometry()
        self.conv_layers = []
        channels, length = self._build_front(channels, length)
        filt, lens, pools, acts, drops, norms = _conv_lists(self.hyper)
        for i, (nf, k, pool, act, drop, norm) in enumerate(zip(filt, lens, pools, acts, drops, norms)):
            channels, length = self._add_conv(f"conv{i}", channels, length, nf, k, pool, act, drop, norm)
        self.flat_dim = channels * length
        sizes, hacts, hdrops, hnorms = _head_lists(self.hyper)
        self.head = _DenseStack(self, "head", self.flat_dim, sizes, hacts, hdrops, hnorms)

    def _build_front(self, channels, length):
        return channels, length

    def _add_conv(self, tag, channels, length, nf, k, pool, act, drop, norm):
        if k > length:
            raise HyperparamError("cnn_len_filt", f"{tag}: kernel {k} longer than input length {length}")
        limit = math.sqrt(6.0 / (channels * k + nf * k))
        self.add_param(f"{tag}.W", self._rng.uniform(-limit, limit, size=(nf, channels, k)))
        self.add_param(f"{tag}.b", np.zeros(nf))
        if norm:
            self.add_param(f"{tag}.bn_gamma", np.ones(nf))
            self.add_param(f"{tag}.bn_beta", np.zeros(nf))
            self.running[tag] = RunningStats.fresh(nf)
        length = length - k + 1
        if pool > length:
            raise HyperparamError("cnn_max_pool_len", f"{tag}: pool {pool} longer than {length}")
        self.conv_layers.append((tag, pool, act, drop, norm))
        return nf, length // pool

    @property
    def output_dim(self):
        return self.head.output_dim

    @property
    def emits_log_probs(self):
        acts = _head_lists(self.hyper)[1]
        return bool(acts) and acts[-1] == "softmax"

    def _conv_block(self, h, tag, pool, act, drop, norm, mask, rng, kernel=None):
        _, _, length = h.shape
        w = kernel if kernel is not None else self.params[f"{tag}.W"]
        h = ag.conv1d(h, w)
        if f"{tag}.b" in self.params:
            h = h + self.params[f"{tag}.b"].reshape(1, -1, 1)
        if pool > 1:
            h = ag.maxpool1d(h, pool)
        if norm:
            ht = ag.transpose(h, (0, 2, 1))
            pos_mask = np.repeat(mask[:, None], ht.shape[1], axis=1)
            ht = batch_norm(ht, self.params[f"{tag}.bn_gamma"], self.params[f"{tag}.bn_beta"],
                            self.training, self.running[tag], pos_mask)
            h = ag.transpose(ht, (0, 2, 1))
        h = ACTIVATIONS[act](h)
        if drop > 0 and self.training:
            h = make_dropout_mask(h.shape, 1.0 - drop, rng).apply(h)
        return h

    def _front(self, h, mask, rng):
        return h

    def forward(self, x, mask=None, rng=None):
        lead = x.shape[:-1]
        mask = _keep_mask(mask, lead).reshape(-1)
        rng = self._next_rng(rng)
        channels, length = self._input_geometry()
        h = x.reshape(-1, length, channels)
        h = ag.transpose(h, (0, 2, 1))
        h = self._front(h, mask, rng)
        for tag, pool, act, drop, norm in self.conv_layers:
            h = self._conv_block(h, tag, pool, act, drop, norm, mask, rng)
        h = h.reshape(h.shape[0], -1)
        h = self.head(h, mask, rng)
        return h.reshape(tuple(lead) + (h.shape[-1],))


def _mel(hz):
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _inv_mel(mel):
    return 700.0 * (10 ** (mel / 2595.0) - 1.0)


class SincNet(CNN1D):
    """Raw-waveform front end whose first layer is a bank of learned band-pass sinc filters.

    Each filter is ``2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n)`` under a Hamming
    window. Parameters are in Hz: ``f1 = (|low| + min_low) / fs`` and
    ``f2 = f1 + (|band| + min_band) / fs`` in cycles per sample, so
    ``0 <= f1 <= f2`` holds for any parameter values.
    """

    kind = "SincNet"
    SCHEMA = {
        "sinc_N_filt": ("int", REQUIRED),
        "sinc_len_filt": ("int", REQUIRED),
        "sinc_max_pool_len": ("int", 1),
        "sinc_act": ("str", "leaky_relu"),
        "sinc_use_batchnorm": ("bool", False),
        "sample_rate": ("int", 16000),
        "sinc_min_low_hz": ("float", 50.0),
        "sinc_min_band_hz": ("float", 50.0),
        **_CONV_SCHEMA,
        **_DENSE_SCHEMA,
    }

    @classmethod
    def validate(cls, hyper):
        super().validate(hyper)
        if hyper["sinc_N_filt"] < 1:
            raise HyperparamError("sinc_N_filt", "need at least one filter")
        k = hyper["sinc_len_filt"]
        if k < 3 or k % 2 == 0:
            raise HyperparamError("sinc_len_filt", f"filter length must be odd and >= 3, got {k}")
        _check_acts("sinc_act", [hyper.get("sinc_act", "leaky_relu")])

    def _input_geometry(self):
        return 1, self.input_dim

    def _build_front(self, channels, length):
        h = self.hyper
        n_filt, k = int(h["sinc_N_filt"]), int(h["sinc_len_filt"])
        if k > length:
            raise HyperparamError("sinc_len_filt", f"filter length {k} longer than input {length}")
        fs = float(h.get("sample_rate", 16000))
        self.fs = fs
        self.min_low = float(h.get("sinc_min_low_hz", 50.0))
        self.min_band = float(h.get("sinc_min_band_hz", 50.0))
        high = fs / 2 - (self.min_low + self.min_band)
        edges = _inv_mel(np.linspace(_mel(30.0), _mel(high), n_filt + 1))
        self.add_param("sinc.low", edges[:-1])
        self.add_param("sinc.band", np.diff(edges))
        self.taps = np.arange(k) - (k - 1) / 2
        self.window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(k) / (k - 1))
        self.center = (self.taps == 0).astype(float)
        self.safe_taps = np.where(self.taps == 0, 1.0, self.taps)
        pool = int(h.get("sinc_max_pool_len", 1))
        norm = bool(h.get("sinc_use_batchnorm", False))
        if norm:
            self.add_param("sinc.bn_gamma", np.ones(n_filt))
            self.add_param("sinc.bn_beta", np.zeros(n_filt))
            self.running["sinc"] = RunningStats.fresh(n_filt)
        length = length - k + 1
        if pool > length:
            raise HyperparamError("sinc_max_pool_len", f"pool {pool} longer than {length}")
        self.sinc_layer = ("sinc", pool, h.get("sinc_act", "leaky_relu"), 0.0, norm)
        return n_filt, length // pool

    def cutoffs(self):
        low, band = self.params["sinc.low"], self.params["sinc.band"]
        f1 = (ag.tabs(low) + self.min_low) * (1.0 / self.fs)
        f2 = f1 + (ag.tabs(band) + self.min_band) * (1.0 / self.fs)
        return f1, f2

    def kernels(self) -> Tensor:
        f1, f2 = self.cutoffs()
        f1c, f2c = f1.reshape(-1, 1), f2.reshape(-1, 1)
        two_pi_n = 2 * np.pi * self.taps[None, :]
        body = (ag.sin(f2c * two_pi_n) - ag.sin(f1c * two_pi_n)) * (1.0 / (np.pi * self.safe_taps))
        width = (f2c - f1c) * 2.0
        band_pass = (body + width * self.center) * self.window
        # Unit gain at the centre tap.
        band_pass = band_pass / width
        return band_pass.reshape(band_pass.shape[0], 1, -1)

    def check_constraints(self):
        f1, f2 = self.cutoffs()
        if not ((f1.data >= 0).all() and (f2.data >= f1.data).all()):
            raise AssertionError(f"{self.name}: sinc cutoffs violate 0 <= f1 <= f2")

    def _front(self, h, mask, rng):
        tag, pool, act, drop, norm = self.sinc_layer
        return self._conv_block(h, tag, pool, act, drop, norm, mask, rng, kernel=self.kernels())


KINDS = {cls.kind: cls for cls in (MLP, RNN, LSTM, GRU, LiGRU, CNN1D, SincNet)}


def schema_for(kind: str) -> dict:
    return {**KINDS[kind].SCHEMA, **COMMON_SCHEMA}


def make_architecture(name, kind, hyper, input_dim, seed=0) -> Architecture:
    if kind not in KINDS:
        raise ValueError(f"unknown architecture kind {kind!r}")
    declared = hyper.get("input_dim", 0)
    if declared and declared != input_dim:
        raise HyperparamError("input_dim", f"{name}: declared input_dim {declared} but receives {input_dim}")
    return KINDS[kind](name, hyper, input_dim, seed)
