"""The [model] composition language.

One statement per line::

    target=func(arg1,arg2,...)

with ``func`` one of compute, concatenate, cost_nll, cost_err, mult_scalar
and sum. Statements are single-assignment, so source order is a topological
order of the resulting DAG.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DimensionError, DSLError, NumericError
from .nn import autograd as ag
from .nn.models import Architecture, make_architecture

FUNCTIONS = ("compute", "concatenate", "cost_nll", "cost_err", "mult_scalar", "sum")
SCALAR = "scalar"

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_STATEMENT = re.compile(rf"\s*({_IDENT})\s*=\s*({_IDENT})\s*\((.*)\)\s*\Z")
_IDENT_RE = re.compile(rf"{_IDENT}\Z")
_NUMBER_RE = re.compile(rf"{_NUMBER}\Z")

Arg = Union[str, float]


@dataclass(frozen=True)
class Statement:
    target: str
    func: str
    args: tuple[Arg, ...]
    line: int = 0


def _parse_args(body: str, line_no: int, offset: int) -> tuple[Arg, ...]:
    if not body.strip():
        raise DSLError("empty argument list", line_no, offset + 1)
    args: list[Arg] = []
    col = offset
    for raw in body.split(","):
        token = raw.strip()
        where = col + (len(raw) - len(raw.lstrip())) + 1
        if "(" in token or ")" in token:
            raise DSLError("nested calls are not supported; assign the inner call to a name first",
                           line_no, where)
        if _IDENT_RE.match(token):
            args.append(token)
        elif _NUMBER_RE.match(token):
            args.append(float(token))
        else:
            raise DSLError(f"invalid argument {token!r}", line_no, where)
        col += len(raw) + 1
    return tuple(args)


def parse_model(text: str) -> list[Statement]:
    """Parse the [model] body into statements in source order."""
    statements: list[Statement] = []
    defined: dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _STATEMENT.match(line)
        if m is None:
            column = len(line) - len(line.lstrip()) + 1
            if "=" not in line:
                raise DSLError("expected target=func(args)", line_no, column)
            eq = line.index("=")
            if not _IDENT_RE.match(line[:eq].strip()):
                raise DSLError(f"invalid target {line[:eq].strip()!r}", line_no, column)
            raise DSLError("expected func(args) after '='", line_no, eq + 2)
        target, func, body = m.groups()
        if func not in FUNCTIONS:
            raise DSLError(f"unknown function {func!r}; expected one of {', '.join(FUNCTIONS)}",
                           line_no, m.start(2) + 1)
        if target in defined:
            raise DSLError(f"{target!r} is already defined on line {defined[target]}",
                           line_no, m.start(1) + 1)
        defined[target] = line_no
        statements.append(Statement(target, func, _parse_args(body, line_no, m.start(3)), line_no))
    if not statements:
        raise DSLError("the model body defines no statements")
    return statements


# Graph construction.

@dataclass(frozen=True)
class NodeInfo:
    name: str
    func: str
    args: tuple[Arg, ...]
    dim: object  # int for per-frame nodes, SCALAR for cost nodes
    log_probs: bool = False
    differentiable: bool = True


@dataclass
class ComputationGraph:
    nodes: list[Statement]
    inputs: tuple[str, ...]
    feature_inputs: tuple[str, ...]
    label_inputs: tuple[str, ...]
    info: dict[str, NodeInfo]
    loss_node: str | None
    metric_nodes: tuple[str, ...]
    output_node: str | None
    output_label: str | None
    arch_input_dims: dict[str, int]
    arch_kinds: dict[str, str] = field(default_factory=dict)
    recurrent: bool = False

    def cost_nodes(self) -> list[str]:
        return [s.target for s in self.nodes if s.func == "cost_nll"]


def _arity(stmt: Statement, low: int, high: int | None):
    n = len(stmt.args)
    if n < low or (high is not None and n > high):
        want = str(low) if high == low else f"{low}+" if high is None else f"{low}-{high}"
        raise DSLError(f"{stmt.func} takes {want} arguments, got {n}", stmt.line)


def _ref(stmt: Statement, arg: Arg, info: Mapping[str, NodeInfo], what="a node or stream") -> NodeInfo:
    if not isinstance(arg, str):
        raise DSLError(f"{stmt.func}: expected {what}, got literal {arg}", stmt.line)
    if arg not in info:
        raise DSLError(f"undefined reference {arg!r}", stmt.line)
    return info[arg]


def build_graph(statements: Sequence[Statement], cfg, stream_dims: Mapping[str, int],
                mode: str = "train") -> ComputationGraph:
    """Resolve names, infer per-node dimensions and pick the loss/metric/output nodes.

    ``stream_dims`` maps feature stream names to their post-splice dimension.
    Label streams and their alphabet sizes come from ``cfg``.
    """
    archs = {a.name: a for a in cfg.architectures}
    label_states = {}
    for d in cfg.datasets:
        for s in d.label_streams:
            label_states[s.name] = s.num_states
    info: dict[str, NodeInfo] = {}
    for name, dim in stream_dims.items():
        info[name] = NodeInfo(name, "input", (), int(dim))
    for name, n in label_states.items():
        info[name] = NodeInfo(name, "label", (), n)
    for name in archs:
        if name in info:
            raise DSLError(f"architecture name {name!r} collides with a stream name")

    arch_dims: dict[str, int] = {}
    arch_probe: dict[str, Architecture] = {}
    used_feats, used_labels, consumed = [], [], set()

    def frame_input(stmt, arg):
        node = _ref(stmt, arg, info)
        if node.func == "label":
            raise DSLError(f"{stmt.func}: label stream {arg!r} cannot be used as a model input", stmt.line)
        if node.dim == SCALAR:
            raise DSLError(f"{stmt.func}: {arg!r} is a scalar cost, not a per-frame tensor", stmt.line)
        if node.func == "input" and arg not in used_feats:
            used_feats.append(arg)
        consumed.add(arg)
        return node

    for stmt in statements:
        if stmt.target in info or stmt.target in archs:
            raise DSLError(f"{stmt.target!r} shadows a stream or architecture name", stmt.line)
        for a in stmt.args:
            if isinstance(a, str) and a not in info and a not in archs:
                raise DSLError(f"undefined reference {a!r}", stmt.line)
        if stmt.func == "compute":
            _arity(stmt, 2, 2)
            arch_name, src = stmt.args
            if not isinstance(arch_name, str) or arch_name not in archs:
                raise DSLError(f"compute: {arch_name!r} is not an architecture name", stmt.line)
            node = frame_input(stmt, src)
            section = archs[arch_name]
            declared = section.hyper.get("input_dim", 0)
            if arch_name in arch_dims and arch_dims[arch_name] != node.dim:
                raise DimensionError(f"compute: {arch_name} already receives {arch_dims[arch_name]}-dim input, "
                                     f"but {src} has dim {node.dim}", stmt.line)
            if declared and declared != node.dim:
                raise DimensionError(f"compute: {arch_name} declares input_dim={declared} but {src} has "
                                     f"dim {node.dim}", stmt.line)
            if arch_name not in arch_probe:
                try:
                    arch_probe[arch_name] = make_architecture(arch_name, section.kind, section.hyper, node.dim)
                except ValueError as exc:
                    raise DimensionError(f"compute: {arch_name}: {exc}", stmt.line) from None
            arch_dims[arch_name] = node.dim
            probe = arch_probe[arch_name]
            info[stmt.target] = NodeInfo(stmt.target, "compute", stmt.args, probe.output_dim,
                                         log_probs=probe.emits_log_probs)
        elif stmt.func == "concatenate":
            _arity(stmt, 2, None)
            dims = [frame_input(stmt, a).dim for a in stmt.args]
            info[stmt.target] = NodeInfo(stmt.target, "concatenate", stmt.args, int(sum(dims)))
        elif stmt.func in ("cost_nll", "cost_err"):
            _arity(stmt, 2, 2)
            scores = frame_input(stmt, stmt.args[0])
            label = _ref(stmt, stmt.args[1], info, "a label stream")
            if label.func != "label":
                raise DSLError(f"{stmt.func}: {stmt.args[1]!r} is not a label stream", stmt.line)
            if scores.dim != label.dim:
                raise DimensionError(f"{stmt.func}: {stmt.args[0]} has dim {scores.dim} but "
                                     f"{stmt.args[1]} has num_states={label.dim}", stmt.line)
            if stmt.func == "cost_nll" and not scores.log_probs:
                raise DSLError(f"cost_nll: {stmt.args[0]!r} must come from an architecture whose last "
                               f"activation is softmax (log-probabilities)", stmt.line)
            if stmt.args[1] not in used_labels:
                used_labels.append(stmt.args[1])
            info[stmt.target] = NodeInfo(stmt.target, stmt.func, stmt.args, SCALAR,
                                         differentiable=stmt.func == "cost_nll")
        elif stmt.func == "mult_scalar":
            _arity(stmt, 2, 2)
            literals = [a for a in stmt.args if not isinstance(a, str)]
            names = [a for a in stmt.args if isinstance(a, str)]
            if len(literals) != 1 or len(names) != 1:
                raise DSLError("mult_scalar takes one numeric literal and one node", stmt.line)
            node = _ref(stmt, names[0], info)
            if node.func == "label":
                raise DSLError("mult_scalar: cannot scale a label stream", stmt.line)
            consumed.add(names[0])
            info[stmt.target] = NodeInfo(stmt.target, "mult_scalar", stmt.args, node.dim,
                                         differentiable=node.differentiable)
        elif stmt.func == "sum":
            _arity(stmt, 2, None)
            nodes = []
            for a in stmt.args:
                node = _ref(stmt, a, info)
                if node.func == "label":
                    raise DSLError("sum: cannot add a label stream", stmt.line)
                nodes.append(node)
                consumed.add(a)
            dims = {n.dim for n in nodes}
            if len(dims) != 1:
                detail = ", ".join(f"{n.name}={n.dim}" for n in nodes)
                raise DimensionError(f"sum: operands disagree in dimension ({detail})", stmt.line)
            info[stmt.target] = NodeInfo(stmt.target, "sum", stmt.args, dims.pop(),
                                         differentiable=all(n.differentiable for n in nodes))

    targets = [s.target for s in statements]
    sinks = [t for t in targets if t not in consumed and info[t].dim == SCALAR]
    metrics = tuple(s.target for s in statements if s.func == "cost_err")
    losses = [t for t in sinks if info[t].func != "cost_err"]
    for t in losses:
        if not info[t].differentiable:
            raise DSLError(f"loss {t!r} combines a cost_err term, which has no gradient",
                           next(s.line for s in statements if s.target == t))
    loss_node = None
    if mode == "train":
        if len(losses) != 1:
            found = ", ".join(losses) or "none"
            raise DSLError(f"expected exactly one loss (an unconsumed cost_nll-derived scalar), found {found}")
        loss_node = losses[0]
    elif len(losses) == 1:
        loss_node = losses[0]

    output_node, output_label = _pick_output(statements, info, cfg.forward_out)
    return ComputationGraph(
        nodes=list(statements),
        inputs=tuple(used_feats + used_labels),
        feature_inputs=tuple(used_feats),
        label_inputs=tuple(used_labels),
        info=info,
        loss_node=loss_node,
        metric_nodes=metrics,
        output_node=output_node,
        output_label=output_label,
        arch_input_dims=arch_dims,
        arch_kinds={n: archs[n].kind for n in arch_dims},
        recurrent=any(p.recurrent for p in arch_probe.values()),
    )


def _pick_output(statements, info, forward_out):
    nll = [s for s in statements if s.func == "cost_nll"]
    if forward_out:
        if forward_out not in info or info[forward_out].func not in ("compute",):
            raise DSLError(f"forward_out {forward_out!r} is not a compute node")
        if not info[forward_out].log_probs:
            raise DSLError(f"forward_out {forward_out!r} does not produce log-probabilities")
        label = next((s.args[1] for s in nll if s.args[0] == forward_out), None)
        return forward_out, label
    if not nll:
        return None, None
    return nll[0].args[0], nll[0].args[1]


def parse_and_build(cfg, stream_dims, mode="train") -> ComputationGraph:
    return build_graph(parse_model(cfg.model_text), cfg, stream_dims, mode)


def build_architectures(graph: ComputationGraph, cfg, seed: int) -> dict[str, Architecture]:
    """Instantiate every architecture the graph uses, each with its own derived seed."""
    registry = {}
    for i, section in enumerate(cfg.architectures):
        if section.name not in graph.arch_input_dims:
            continue
        arch_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        registry[section.name] = make_architecture(section.name, section.kind, section.hyper,
                                                   graph.arch_input_dims[section.name], arch_seed)
    return registry


def dump_graph(graph: ComputationGraph) -> str:
    """Stable text rendering: one tab-separated line per node, then the roles."""
    lines = ["# node\tfunc\targs\tdim"]
    for name in graph.feature_inputs:
        lines.append(f"{name}\tinput\t-\t{graph.info[name].dim}")
    for name in graph.label_inputs:
        lines.append(f"{name}\tlabel\t-\tstates={graph.info[name].dim}")
    for stmt in graph.nodes:
        args = ",".join(a if isinstance(a, str) else repr(a) for a in stmt.args)
        lines.append(f"{stmt.target}\t{stmt.func}\t{args}\t{graph.info[stmt.target].dim}")
    lines.append(f"loss: {graph.loss_node or '-'}")
    lines.append(f"metrics: {','.join(graph.metric_nodes) or '-'}")
    lines.append(f"output: {graph.output_node or '-'}")
    for name, dim in graph.arch_input_dims.items():
        lines.append(f"arch: {name} {graph.arch_kinds[name]} input_dim={dim}")
    return "\n".join(lines) + "\n"


# Evaluation.

@dataclass
class EvalResult:
    values: dict[str, ag.Tensor]
    loss: ag.Tensor | None
    metrics: dict[str, float]
    costs: dict[str, float]
    # (errors, valid frames) behind each cost_err node.
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)


def masked_nll(log_probs: ag.Tensor, labels: np.ndarray, mask: np.ndarray) -> ag.Tensor:
    """Mean negative log-likelihood over valid positions."""
    picked = ag.pick(log_probs, labels)
    total = float(mask.sum())
    if total == 0:
        raise ValueError("no valid frames in batch")
    return ag.neg(ag.tsum(picked * mask)) * (1.0 / total)


def frame_errors(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    wrong = (scores.argmax(axis=-1) != labels) & (mask > 0)
    return int(wrong.sum()), int((mask > 0).sum())


def evaluate(graph: ComputationGraph, features: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray],
             mask: np.ndarray, registry: Mapping[str, Architecture], mode: str = "train",
             rng: np.random.Generator | None = None) -> EvalResult:
    """Run the graph on one minibatch, in statement order.

    In train mode the loss is a differentiable scalar (record a tape around
    this call). In eval mode dropout is off and batch norm uses running stats.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    mask = np.asarray(mask, dtype=np.float64)
    for arch in registry.values():
        arch.train() if mode == "train" else arch.eval()
    if rng is None:
        rng = np.random.default_rng(0)
    values: dict[str, ag.Tensor] = {}
    for name in graph.feature_inputs:
        x = np.asarray(features[name], dtype=np.float64)
        if x.shape[-1] != graph.info[name].dim:
            raise DimensionError(f"stream {name} has dim {x.shape[-1]}, graph expects {graph.info[name].dim}")
        values[name] = ag.Tensor(x)
    costs, metrics, counts = {}, {}, {}
    skipped: set[str] = set()
    for stmt in graph.nodes:
        args = stmt.args
        # Without labels (forward phase) cost nodes and their consumers are skipped.
        if stmt.func in ("cost_nll", "cost_err") and args[1] not in labels:
            skipped.add(stmt.target)
            continue
        if any(a in skipped for a in args if isinstance(a, str)):
            skipped.add(stmt.target)
            continue
        if stmt.func == "compute":
            out = registry[args[0]](values[args[1]], mask, rng)
        elif stmt.func == "concatenate":
            out = ag.concat([values[a] for a in args], axis=-1)
        elif stmt.func == "cost_nll":
            out = masked_nll(values[args[0]], np.asarray(labels[args[1]]), mask)
        elif stmt.func == "cost_err":
            wrong, total = frame_errors(values[args[0]].data, np.asarray(labels[args[1]]), mask)
            counts[stmt.target] = (wrong, total)
            out = ag.Tensor(np.array(wrong / total if total else 0.0))
        elif stmt.func == "mult_scalar":
            scale = next(a for a in args if not isinstance(a, str))
            node = next(a for a in args if isinstance(a, str))
            out = values[node] * scale
        else:
            out = values[args[0]]
            for a in args[1:]:
                out = out + values[a]
        if not np.isfinite(out.data).all():
            raise NumericError(f"non-finite values produced by node {stmt.target!r} (line {stmt.line})")
        values[stmt.target] = out
        scalar = graph.info[stmt.target].dim == SCALAR
        if scalar and stmt.func == "cost_err":
            metrics[stmt.target] = float(out.data)
        elif scalar:
            costs[stmt.target] = float(out.data)
    loss = values.get(graph.loss_node) if graph.loss_node is not None else None
    if mode == "train" and loss is None:
        raise ValueError("train mode needs every label stream the loss depends on")
    return EvalResult(values, loss, metrics, costs, counts)
