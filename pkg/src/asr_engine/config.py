"""INI experiment description: parsing, validation, overrides and re-serialization.

See ``docs/config_reference.md`` for the full key schema.
"""
from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import ConfigError, DataError
from .nn.models import KINDS, REQUIRED, HyperparamError, schema_for
from .optim import Choice, LogUniform, SearchSpace, Uniform

ROLES = ("train", "valid", "forward")
UNSUPPORTED_DEVICES = ("gpu", "cuda", "multi_gpu", "multi-gpu", "multigpu")

EXP_SCHEMA = {
    "out_folder": ("str", REQUIRED),
    "n_epochs": ("int", REQUIRED),
    "seed": ("int", REQUIRED),
    "device": ("str", "cpu"),
    "batch_size_train": ("int", 16),
    "batch_size_valid": ("int", 16),
    "increase_seq_length": ("bool", False),
    "start_seq_len": ("int", 100),
    "max_seq_len": ("int", 5000),
}

DATASET_SCHEMA = {
    "data_name": ("str", REQUIRED),
    "role": ("str", REQUIRED),
    "n_chunks": ("int", 1),
    "features": ("text", REQUIRED),
    "labels": ("text", ""),
}

MODEL_SCHEMA = {
    "model": ("text", REQUIRED),
    "forward_out": ("str", ""),
}

SEARCH_SCHEMA = {
    "n_trials": ("int", 8),
    "params": ("text", REQUIRED),
}

FEATURE_KEYS = {"path": "str", "cw_left": "int", "cw_right": "int", "normalize": "bool"}
LABEL_KEYS = {"path": "str", "num_states": "int"}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _split_list(raw: str) -> list[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def convert(kind: str, raw: str, section=None, key=None) -> Any:
    """Parse one raw INI value into its schema type."""
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if kind in ("str", "text"):
            return raw
        if kind == "ints":
            return tuple(int(p) for p in _split_list(raw))
        if kind == "floats":
            return tuple(float(p) for p in _split_list(raw))
        if kind == "bools":
            return tuple(convert("bool", p, section, key) for p in _split_list(raw))
        if kind == "strs":
            return tuple(_split_list(raw))
    except (ValueError, ConfigError):
        raise ConfigError(f"expected {kind} value, got {raw!r}", section, key) from None
    raise AssertionError(kind)


def render(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "bools":
        return ",".join("true" if v else "false" for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ExpSection:
    out_folder: str
    n_epochs: int
    seed: int
    device: str = "cpu"
    batch_size_train: int = 16
    batch_size_valid: int = 16
    increase_seq_length: bool = False
    start_seq_len: int = 100
    max_seq_len: int = 5000


@dataclass(frozen=True)
class FeatureStream:
    name: str
    path: str
    cw_left: int = 0
    cw_right: int = 0
    normalize: bool = True


@dataclass(frozen=True)
class LabelStream:
    name: str
    path: str
    num_states: int


@dataclass(frozen=True)
class DatasetSection:
    section: str
    name: str
    role: str
    feature_streams: tuple[FeatureStream, ...]
    label_streams: tuple[LabelStream, ...]
    n_chunks: int = 1

    def stream_names(self) -> list[str]:
        return [s.name for s in self.feature_streams] + [s.name for s in self.label_streams]


@dataclass(frozen=True)
class ArchitectureSection:
    section: str
    name: str
    kind: str
    hyperparams: tuple[tuple[str, Any], ...]

    @property
    def hyper(self) -> dict[str, Any]:
        return dict(self.hyperparams)


@dataclass(frozen=True)
class SearchSection:
    n_trials: int
    params: tuple[tuple[str, Any], ...]
    raw_params: str = ""

    def space(self) -> SearchSpace:
        return SearchSpace(self.params)


@dataclass(frozen=True)
class ExperimentConfig:
    exp: ExpSection
    datasets: tuple[DatasetSection, ...]
    architectures: tuple[ArchitectureSection, ...]
    model_text: str
    forward_out: str = ""
    decoding: tuple[tuple[str, str], ...] = ()
    search: SearchSection | None = None
    base_dir: str = field(default=".", compare=False)

    def datasets_with_role(self, role: str) -> list[DatasetSection]:
        return [d for d in self.datasets if d.role == role]

    def architecture(self, name: str) -> ArchitectureSection:
        for a in self.architectures:
            if a.name == name:
                return a
        raise KeyError(name)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def exp_dir(self) -> Path:
        out = Path(self.exp.out_folder)
        root = os.environ.get("ASR_ENGINE_EXP_ROOT")
        if root:
            return Path(root) / (out.name if out.is_absolute() else out)
        return self.resolve(self.exp.out_folder)

    def label_stream(self, name: str) -> LabelStream:
        for d in self.datasets:
            for s in d.label_streams:
                if s.name == name:
                    return s
        raise KeyError(name)

    def feature_stream(self, name: str) -> FeatureStream:
        for d in self.datasets:
            for s in d.feature_streams:
                if s.name == name:
                    return s
        raise KeyError(name)


# Parsing.

def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=None,
        delimiters=("=",), empty_lines_in_values=False, strict=True,
    )
    parser.optionxform = str
    return parser


def _section_kind(name: str) -> str:
    lower = name.lower()
    if lower == "exp":
        return "exp"
    if lower == "model":
        return "model"
    if lower == "decoding":
        return "decoding"
    if lower == "search":
        return "search"
    if lower.startswith("dataset"):
        return "dataset"
    if lower.startswith("architecture"):
        return "architecture"
    raise ConfigError(f"unknown section prefix; expected Exp, dataset*, architecture*, model, decoding or search",
                      name)


def _section_schema(parser, section: str) -> dict:
    kind = _section_kind(section)
    if kind == "exp":
        return EXP_SCHEMA
    if kind == "dataset":
        return DATASET_SCHEMA
    if kind == "model":
        return MODEL_SCHEMA
    if kind == "search":
        return SEARCH_SCHEMA
    if kind == "architecture":
        arch_class = parser[section].get("arch_class", "").strip()
        if arch_class not in KINDS:
            raise ConfigError(f"arch_class must be one of {sorted(KINDS)}, got {arch_class!r}",
                              section, "arch_class")
        return {"arch_name": ("str", REQUIRED), "arch_class": ("str", REQUIRED), **schema_for(arch_class)}
    return {}


def _typed_section(parser, section: str, schema: dict) -> dict[str, Any]:
    body = parser[section]
    unknown = [k for k in body if k not in schema]
    if unknown:
        raise ConfigError(f"unknown key (allowed: {', '.join(schema)})", section, unknown[0])
    out = {}
    for key, (kind, default) in schema.items():
        if key in body:
            out[key] = convert(kind, body[key], section, key)
        elif default is REQUIRED:
            raise ConfigError("missing required key", section, key)
        else:
            out[key] = default
    return out


def _parse_stream_line(line: str, allowed: dict, section: str, key: str) -> dict[str, Any]:
    tokens = line.split()
    name = tokens[0]
    if not _NAME.match(name):
        raise ConfigError(f"invalid stream name {name!r}", section, key)
    out: dict[str, Any] = {"name": name}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ConfigError(f"stream {name}: expected key=value, got {tok!r}", section, key)
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"stream {name}: unknown attribute {k!r} (allowed: {', '.join(allowed)})",
                              section, key)
        out[k] = convert(allowed[k], v, section, key)
    return out


def _lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def _parse_dataset(parser, section: str) -> DatasetSection:
    vals = _typed_section(parser, section, DATASET_SCHEMA)
    role = vals["role"]
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}, got {role!r}", section, "role")
    if vals["n_chunks"] < 1:
        raise ConfigError("n_chunks must be >= 1", section, "n_chunks")
    feats = []
    for line in _lines(vals["features"]):
        entry = _parse_stream_line(line, FEATURE_KEYS, section, "features")
        if "path" not in entry:
            raise ConfigError(f"stream {entry['name']}: path is required", section, "features")
        for side in ("cw_left", "cw_right"):
            if entry.get(side, 0) < 0:
                raise ConfigError(f"stream {entry['name']}: {side} must be >= 0", section, "features")
        feats.append(FeatureStream(**entry))
    if not feats:
        raise ConfigError("at least one feature stream is required", section, "features")
    labels = []
    for line in _lines(vals["labels"]):
        entry = _parse_stream_line(line, LABEL_KEYS, section, "labels")
        if "path" not in entry or "num_states" not in entry:
            raise ConfigError(f"stream {entry['name']}: path and num_states are required", section, "labels")
        if entry["num_states"] < 1:
            raise ConfigError(f"stream {entry['name']}: num_states must be >= 1", section, "labels")
        labels.append(LabelStream(**entry))
    if role != "forward" and not labels:
        raise ConfigError(f"a {role} dataset needs at least one label stream", section, "labels")
    names = [s.name for s in feats] + [s.name for s in labels]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate stream name {dupes[0]!r}", section, "features")
    return DatasetSection(section, vals["data_name"], role, tuple(feats), tuple(labels), vals["n_chunks"])


def _parse_architecture(parser, section: str) -> ArchitectureSection:
    schema = _section_schema(parser, section)
    vals = _typed_section(parser, section, schema)
    name, kind = vals.pop("arch_name"), vals.pop("arch_class")
    if not _NAME.match(name):
        raise ConfigError(f"invalid architecture name {name!r}", section, "arch_name")
    if vals["arch_opt"] != "rmsprop":
        raise ConfigError(f"unsupported optimizer {vals['arch_opt']!r}; only rmsprop is available",
                          section, "arch_opt")
    if not vals["arch_lr"] > 0:
        raise ConfigError("arch_lr must be positive", section, "arch_lr")
    if not 0 < vals["opt_alpha"] < 1:
        raise ConfigError("opt_alpha must be in (0, 1)", section, "opt_alpha")
    try:
        KINDS[kind].validate(vals)
    except HyperparamError as exc:
        raise ConfigError(str(exc), section, exc.key) from None
    return ArchitectureSection(section, name, kind, tuple(vals.items()))


def _parse_domain(line: str, section: str):
    parts = line.split()
    if len(parts) < 3:
        raise ConfigError(f"search parameter needs 'target kind args', got {line!r}", section, "params")
    target, kind, args = parts[0], parts[1], parts[2:]
    try:
        if kind == "uniform" and len(args) == 2:
            return target, Uniform(float(args[0]), float(args[1]))
        if kind == "loguniform" and len(args) == 2:
            return target, LogUniform(float(args[0]), float(args[1]))
        if kind == "choice":
            return target, Choice(tuple(_split_list(" ".join(args))))
    except ValueError as exc:
        raise ConfigError(f"{target}: {exc}", section, "params") from None
    raise ConfigError(f"{target}: unknown or malformed domain {kind!r} (uniform, loguniform, choice)",
                      section, "params")


def load_parser(text: str) -> configparser.ConfigParser:
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"INI syntax error: {exc}") from None
    for section in parser.sections():
        _section_kind(section)
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides: Iterable[str]):
    """Apply ``section.key=value`` overrides; the key must exist in that section's schema."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        sec_name, key = target.split(".", 1)
        matches = [s for s in parser.sections() if s.lower() == sec_name.lower()]
        if not matches:
            raise ConfigError(f"override {item!r}: no such section", sec_name)
        section = matches[0]
        schema = _section_schema(parser, section)
        if _section_kind(section) != "decoding" and key not in schema:
            raise ConfigError(f"override {item!r}: not a schema key", section, key)
        parser[section][key] = value


def config_from_parser(parser: configparser.ConfigParser, base_dir: str = ".") -> ExperimentConfig:
    exp = None
    datasets, archs = [], []
    model_vals = None
    decoding: tuple = ()
    search = None
    for section in parser.sections():
        kind = _section_kind(section)
        if kind == "exp":
            vals = _typed_section(parser, section, EXP_SCHEMA)
            if vals["n_epochs"] < 1:
                raise ConfigError("n_epochs must be >= 1", section, "n_epochs")
            if not -(2 ** 63) <= vals["seed"] < 2 ** 64:
                raise ConfigError("seed must fit in 64 bits", section, "seed")
            device = vals["device"].lower()
            if device in UNSUPPORTED_DEVICES:
                raise ConfigError(f"device {vals['device']!r} is unsupported; this engine runs on cpu only",
                                  section, "device")
            if device != "cpu":
                raise ConfigError(f"unknown device {vals['device']!r}", section, "device")
            for key in ("batch_size_train", "batch_size_valid", "start_seq_len", "max_seq_len"):
                if vals[key] < 1:
                    raise ConfigError(f"{key} must be >= 1", section, key)
            exp = ExpSection(**{**vals, "device": device})
        elif kind == "dataset":
            datasets.append(_parse_dataset(parser, section))
        elif kind == "architecture":
            archs.append(_parse_architecture(parser, section))
        elif kind == "model":
            model_vals = _typed_section(parser, section, MODEL_SCHEMA)
        elif kind == "decoding":
            decoding = tuple((k, v) for k, v in parser[section].items())
        elif kind == "search":
            vals = _typed_section(parser, section, SEARCH_SCHEMA)
            if vals["n_trials"] < 1:
                raise ConfigError("n_trials must be >= 1", section, "n_trials")
            domains = tuple(_parse_domain(line, section) for line in _lines(vals["params"]))
            search = SearchSection(vals["n_trials"], domains, "\n".join(_lines(vals["params"])))
    if exp is None:
        raise ConfigError("missing [Exp] section")
    if model_vals is None:
        raise ConfigError("missing [model] section")
    for role in ("train", "valid"):
        if not any(d.role == role for d in datasets):
            raise ConfigError(f"no dataset with role={role}")
    seen = {}
    for a in archs:
        if a.name in seen:
            raise ConfigError(f"duplicate architecture name {a.name!r} (also in [{seen[a.name]}])",
                              a.section, "arch_name")
        seen[a.name] = a.section
    names = [d.name for d in datasets]
    for d in datasets:
        if names.count(d.name) > 1:
            raise ConfigError(f"duplicate dataset name {d.name!r}", d.section, "data_name")
    _check_stream_consistency(datasets)
    if search is not None:
        for target, _ in search.params:
            _check_search_target(parser, target)
    model_text = "\n".join(_lines(model_vals["model"]))
    return ExperimentConfig(exp, tuple(datasets), tuple(archs), model_text,
                            model_vals["forward_out"], decoding, search, base_dir)


def _check_stream_consistency(datasets: Sequence[DatasetSection]):
    reference = next(d for d in datasets if d.role == "train")
    feats = [s.name for s in reference.feature_streams]
    labels = {s.name: s.num_states for s in reference.label_streams}
    for d in datasets:
        mine = [s.name for s in d.feature_streams]
        if sorted(mine) != sorted(feats):
            raise ConfigError(f"feature streams {mine} differ from [{reference.section}] {feats}",
                              d.section, "features")
        for s in d.label_streams:
            if s.name in labels and labels[s.name] != s.num_states:
                raise ConfigError(f"label stream {s.name}: num_states {s.num_states} differs from "
                                  f"[{reference.section}] ({labels[s.name]})", d.section, "labels")
        if d.role != "forward" and sorted(s.name for s in d.label_streams) != sorted(labels):
            raise ConfigError(f"label streams differ from [{reference.section}]", d.section, "labels")


def _check_search_target(parser, target: str):
    if "." not in target:
        raise ConfigError(f"search target {target!r} must be section.key", "search", "params")
    sec_name, key = target.split(".", 1)
    matches = [s for s in parser.sections() if s.lower() == sec_name.lower()]
    if not matches or key not in _section_schema(parser, matches[0]):
        raise ConfigError(f"search target {target!r} is not a schema key", "search", "params")


def parse_config(text: str, base_dir: str = ".", overrides: Iterable[str] = ()) -> ExperimentConfig:
    parser = load_parser(text)
    apply_overrides(parser, overrides)
    return config_from_parser(parser, base_dir)


def load_config(path: str | os.PathLike, overrides: Iterable[str] = ()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path.parent), overrides)


# Serialization.

def _indent(lines: Iterable[str]) -> str:
    return "".join(f"\n    {ln}" for ln in lines)


def to_ini(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(to_ini(cfg)) == cfg``."""
    out = ["[Exp]"]
    for key, (kind, _) in EXP_SCHEMA.items():
        out.append(f"{key} = {render(kind, getattr(cfg.exp, key))}")
    for d in cfg.datasets:
        out += ["", f"[{d.section}]", f"data_name = {d.name}", f"role = {d.role}", f"n_chunks = {d.n_chunks}"]
        feats = [f"{s.name} path={s.path} cw_left={s.cw_left} cw_right={s.cw_right} "
                 f"normalize={render('bool', s.normalize)}" for s in d.feature_streams]
        out.append("features =" + _indent(feats))
        if d.label_streams:
            labs = [f"{s.name} path={s.path} num_states={s.num_states}" for s in d.label_streams]
            out.append("labels =" + _indent(labs))
    for a in cfg.architectures:
        out += ["", f"[{a.section}]", f"arch_name = {a.name}", f"arch_class = {a.kind}"]
        schema = schema_for(a.kind)
        for key, value in a.hyperparams:
            out.append(f"{key} = {render(schema[key][0], value)}")
    out += ["", "[model]", "model =" + _indent(cfg.model_text.splitlines())]
    if cfg.forward_out:
        out.append(f"forward_out = {cfg.forward_out}")
    if cfg.search is not None:
        out += ["", "[search]", f"n_trials = {cfg.search.n_trials}",
                "params =" + _indent(cfg.search.raw_params.splitlines())]
    out += ["", "[decoding]"]
    out += [f"{k} = {v}" for k, v in cfg.decoding]
    return "\n".join(out) + "\n"


# Data validation.

@dataclass(frozen=True)
class StreamInfo:
    dataset: str
    stream: str
    kind: str
    dim: int
    n_utts: int


@dataclass(frozen=True)
class Finding:
    dataset: str
    stream: str
    utt_id: str
    message: str

    def __str__(self):
        return f"[{self.dataset}] {self.stream} {self.utt_id}: {self.message}"


@dataclass
class DataReport:
    streams: list[StreamInfo]
    findings: list[Finding]

    @property
    def consistent(self) -> bool:
        return not self.findings

    def dims(self, dataset: str | None = None) -> dict[str, int]:
        return {s.stream: s.dim for s in self.streams
                if s.kind == "feature" and (dataset is None or s.dataset == dataset)}


def validate_against_data(cfg: ExperimentConfig, cache: dict | None = None) -> DataReport:
    """Check every archive the config points at. Raises DataError on unreadable files."""
    from .archive_io import load_alignment_ark, load_matrix_ark

    cache = {} if cache is None else cache
    infos, findings = [], []
    for d in cfg.datasets:
        frames: dict[str, dict[str, int]] = {}
        for s in d.feature_streams:
            path = cfg.resolve(s.path)
            mats = cache.get(path) or cache.setdefault(path, load_matrix_ark(path))
            dims = {m.shape[1] for m in mats.values()}
            if len(dims) > 1:
                findings.append(Finding(d.name, s.name, "*", f"inconsistent feature dims {sorted(dims)}"))
            infos.append(StreamInfo(d.name, s.name, "feature", dims.pop() if dims else 0, len(mats)))
            frames[s.name] = {k: m.shape[0] for k, m in mats.items()}
        for s in d.label_streams:
            path = cfg.resolve(s.path)
            alis = cache.get(path) or cache.setdefault(path, load_alignment_ark(path))
            infos.append(StreamInfo(d.name, s.name, "label", s.num_states, len(alis)))
            for utt, ali in alis.items():
                if int(ali.labels.max()) >= s.num_states:
                    findings.append(Finding(d.name, s.name, utt,
                                            f"label {int(ali.labels.max())} >= num_states {s.num_states}"))
            frames[s.name] = {k: len(a) for k, a in alis.items()}
        all_ids = set().union(*(f.keys() for f in frames.values())) if frames else set()
        for utt in sorted(all_ids):
            present = {n: f[utt] for n, f in frames.items() if utt in f}
            for n in frames:
                if n not in present:
                    findings.append(Finding(d.name, n, utt, "utterance missing from this stream"))
            if len(set(present.values())) > 1:
                detail = ", ".join(f"{n}={v}" for n, v in present.items())
                findings.append(Finding(d.name, "*", utt, f"frame count mismatch ({detail})"))
    return DataReport(infos, findings)
