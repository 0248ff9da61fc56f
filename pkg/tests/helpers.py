"""Shared test utilities: finite-difference checks and tiny architecture factories."""
from __future__ import annotations

import numpy as np

from asr_engine.nn import Tape
from asr_engine.nn import autograd as ag
from asr_engine.nn.gradcheck import numeric_grad, relative_error
from asr_engine.nn.models import REQUIRED, make_architecture, schema_for
from asr_engine.config import convert

FD_EPS = 1e-4
FD_TOL = 1e-3
# Below this gradient norm the comparison is absolute. Central differences on a
# loss of size ~40 quantize at ulp(40)/(2*eps) ~ 4e-11 per entry, so for a few
# hundred entries a group whose true gradient is zero (bias before batch norm)
# shows ~1e-9 of pure round-off.
FD_FLOOR = 1e-6


def hyper(kind, **kw):
    """Schema defaults for ``kind`` with overrides given as raw INI strings or values."""
    out = {}
    schema = schema_for(kind)
    for key, (typ, default) in schema.items():
        if key in kw:
            v = kw[key]
            out[key] = convert(typ, v) if isinstance(v, str) else v
        elif default is not REQUIRED:
            out[key] = default
    return out


# Small configurations of every kind, used by gradient and masking tests.
MICRO = {
    "MLP": dict(dnn_lay="6,4", dnn_act="tanh,softmax", dnn_use_batchnorm="true,false"),
    "RNN": dict(lay="5", use_batchnorm="true"),
    "LSTM": dict(lay="4"),
    "GRU": dict(lay="4", bidir="true"),
    "LiGRU": dict(lay="5,3", use_batchnorm="true", act="tanh"),
    "CNN1D": dict(in_channels="2", cnn_N_filt="3", cnn_len_filt="2", cnn_max_pool_len="2",
                  cnn_use_batchnorm="true", cnn_act="tanh", head_lay="4", head_act="softmax"),
    "SincNet": dict(sinc_N_filt="3", sinc_len_filt="5", sinc_max_pool_len="2", sinc_act="tanh",
                    cnn_N_filt="2", cnn_len_filt="3", head_lay="3", head_act="softmax"),
}
MICRO_INPUT = {"MLP": 3, "RNN": 3, "LSTM": 3, "GRU": 3, "LiGRU": 3, "CNN1D": 8, "SincNet": 16}
RECURRENT = ("RNN", "LSTM", "GRU", "LiGRU")


def micro_arch(kind, seed=0, **extra):
    h = hyper(kind, **{**MICRO[kind], **extra})
    return make_architecture(f"{kind.lower()}_net", kind, h, MICRO_INPUT[kind], seed)


def micro_batch(kind, rng, t_len=6, batch=3, lengths=None):
    """(x, mask) for a micro-batch; time-major with ragged lengths for recurrent kinds."""
    d = MICRO_INPUT[kind]
    if kind in RECURRENT:
        if lengths is None:
            lengths = rng.integers(1, t_len + 1, size=batch)
            lengths[0] = t_len
        lengths = np.asarray(lengths)
        mask = (np.arange(t_len)[:, None] < lengths[None, :]).astype(float)
        x = rng.standard_normal((t_len, len(lengths), d))
        return x, mask
    n = t_len * batch
    mask = np.ones(n)
    mask[-2:] = 0.0
    return rng.standard_normal((n, d)), mask


def loss_fn(arch, x, mask, weights, dropout_seed=0):
    """Masked weighted sum of outputs, fresh dropout RNG each call so FD is consistent."""
    out = arch(x, mask, np.random.default_rng(dropout_seed))
    m = mask[..., None]
    return ag.tsum(out * (weights * m))


def analytic_grads(arch, x, mask, weights, wrt_input=False):
    arch.zero_grad()
    xt = ag.Tensor(np.array(x), requires_grad=wrt_input)
    with Tape() as tape:
        loss = loss_fn(arch, xt, mask, weights)
        tape.backward(loss)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in arch.params.items()}
    if wrt_input:
        grads["__input__"] = xt.grad.copy() if xt.grad is not None else np.zeros_like(x)
    return float(loss.data), grads


def fd_errors(arch, x, mask, weights, eps=FD_EPS):
    """Relative error between analytic and central-difference gradients, per parameter group."""
    _, grads = analytic_grads(arch, x, mask, weights)
    errors = {}
    for name, p in arch.params.items():
        num = numeric_grad(lambda: float(loss_fn(arch, x, mask, weights).data), p.data, eps)
        errors[name] = relative_error(grads[name], num, FD_FLOOR)
    return errors


def maxpool_margin(arch, x, mask):
    """Smallest gap between the two largest entries of any max-pool window in one forward pass.

    Central differences are only meaningful where no window is near a tie.
    """
    import asr_engine.nn.models as models

    gaps = [np.inf]
    original = ag.maxpool1d

    def spy(h, size):
        n, c, length = h.shape
        usable = (length // size) * size
        win = np.sort(h.data[:, :, :usable].reshape(n, c, -1, size), axis=-1)
        if size > 1:
            gaps.append(float((win[..., -1] - win[..., -2]).min()))
        return original(h, size)

    models.ag.maxpool1d = spy
    try:
        arch(x, mask, np.random.default_rng(0))
    finally:
        models.ag.maxpool1d = original
    return min(gaps)


def untied_micro_batch(kind, arch, rng, margin=5e-3, **kw):
    """Draw micro-batches until no max-pool window is within ``margin`` of a tie."""
    for _ in range(100):
        x, mask = micro_batch(kind, rng, **kw)
        if maxpool_margin(arch, x, mask) > margin:
            return x, mask
    raise RuntimeError("could not draw a tie-free micro-batch")


# Three-stream topology: concatenated features through MLP, LiGRU, then an MLP head.
MULTISTREAM_DIMS = {"mfcc": 39, "fbank": 40, "fmllr": 40}
MULTISTREAM_ARCHS = """
[architecture1]
arch_name = MLP_front
arch_class = MLP
dnn_lay = 32
dnn_act = relu
dnn_use_batchnorm = true

[architecture2]
arch_name = LiGRU_layers
arch_class = LiGRU
lay = 32
use_batchnorm = true
drop = 0.2

[architecture3]
arch_name = MLP_head
arch_class = MLP
dnn_lay = 8
dnn_act = softmax
"""
MULTISTREAM_MODEL = """
feats=concatenate(mfcc,fbank,fmllr)
out_front=compute(MLP_front,feats)
out_rec=compute(LiGRU_layers,out_front)
out_cd=compute(MLP_head,out_rec)
loss_final=cost_nll(out_cd,lab_cd)
err_final=cost_err(out_cd,lab_cd)
"""


def inline_config(architectures, model, features=("mfcc",), labels=(("lab_cd", 8), ("lab_mono", 4)),
                  exp_extra=""):
    """Config text whose archive paths are never read; for graph-level tests."""
    feat_lines = "".join(f"\n    {f} path={f}.ark" for f in features)
    lab_lines = "".join(f"\n    {n} path={n}.ark num_states={k}" for n, k in labels)
    datasets = "".join(f"\n[dataset_{r}]\ndata_name = {r}\nrole = {r}\nfeatures ={feat_lines}\nlabels ={lab_lines}\n"
                       for r in ("train", "valid"))
    body = "".join(f"\n    {ln.strip()}" for ln in model.strip().splitlines())
    return (f"[Exp]\nout_folder = exp\nn_epochs = 1\nseed = 0\n{exp_extra}\n{datasets}\n{architectures}\n"
            f"[model]\nmodel ={body}\n\n[decoding]\n")


def mlp_section(index, name, lay, act, **extra):
    lines = [f"[architecture{index}]", f"arch_name = {name}", "arch_class = MLP", f"dnn_lay = {lay}",
             f"dnn_act = {act}"] + [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


MLP_ARCH = """
[architecture1]
arch_name = MLP_layers
arch_class = MLP
dnn_lay = 64,8
dnn_act = relu,softmax
"""
MLP_MODEL = "out=compute(MLP_layers,mfcc)\nloss=cost_nll(out,lab_cd)\nerr=cost_err(out,lab_cd)"

LIGRU_ARCHS = """
[architecture1]
arch_name = ligru
arch_class = LiGRU
lay = 16
use_batchnorm = true
drop = 0.2
arch_lr = 0.002

[architecture2]
arch_name = head_cd
arch_class = MLP
dnn_lay = 8
dnn_act = softmax
arch_lr = 0.002

[architecture3]
arch_name = head_mono
arch_class = MLP
dnn_lay = 4
dnn_act = softmax
arch_lr = 0.002
"""
LIGRU_MODEL = """
hid=compute(ligru,mfcc)
out_cd=compute(head_cd,hid)
out_mono=compute(head_mono,hid)
loss_cd=cost_nll(out_cd,lab_cd)
loss_mono=cost_nll(out_mono,lab_mono)
loss_mono_w=mult_scalar(0.5,loss_mono)
loss=sum(loss_cd,loss_mono_w)
err=cost_err(out_cd,lab_cd)
"""
