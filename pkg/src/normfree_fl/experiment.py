"""Experiment orchestration: strict YAML configs, multi-seed runs, summaries and comparison tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .datagen import Shard, dirichlet_partition, domain_partition, gen_domains, iid_partition
from .errors import ConstraintViolation, DegenerateBatch, FingerprintMismatch, ParseError, SimError
from .federation import (
    STATEFUL,
    AlgorithmKind,
    AlgorithmSpec,
    ServerState,
    csv_header,
    csv_row,
    evaluate,
    make_clients,
    run_round,
)
from .model import ModelSpec, build_cnn6, to_checkpoint
from .optim import AGC_EPS, OptimSpec
from .tensor_core import RngStream

OUTPUT_ROOT_ENV = "NFFL_OUTPUT_ROOT"

# per-algorithm learning rates for the digit-style preset; overridable per run
DEFAULT_LR = {k: 0.1 for k in AlgorithmKind} | {AlgorithmKind.FedWon: 0.05}
DEFAULT_AGC_LAMBDA = 0.64
AGC_AUTO_MIN_BATCH = 8
DEFAULT_PROX_MU = 0.01
PARTITIONS = ("domain", "iid", "dirichlet")


@dataclass
class DatasetConfig:
    domains: int = 3
    classes: int = 10
    train_per_domain: int = 500
    test_per_domain: int = 100
    image_shape: list = field(default_factory=lambda: [3, 28, 28])
    gap: float = 1.0
    noise: float = 0.1
    jitter: int = 0
    partition: str = "domain"
    clients_per_domain: int = 2
    num_clients: Optional[int] = None  # iid / dirichlet only
    alpha: Optional[float] = None  # dirichlet only


@dataclass
class FederationConfig:
    algorithm: str = "FedWon"
    rounds: int = 100
    fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    freeze_round: Optional[int] = None  # FixBN; defaults to rounds // 2
    prox_mu: Optional[float] = None  # FedProx; defaults to 0.01
    checkpoint_every: int = 0  # 0: final checkpoint only


@dataclass
class ModelConfig:
    width_scale: str = "1/8"
    dropout: float = 0.5
    weight_standardization: bool = True


@dataclass
class OptimConfig:
    lr: Optional[float] = None
    agc: str = "auto"  # auto | on | off
    agc_lambda: float = DEFAULT_AGC_LAMBDA
    agc_eps: float = AGC_EPS


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"
    record_timing: bool = False
    name: Optional[str] = None

    @property
    def kind(self) -> AlgorithmKind:
        return AlgorithmKind(self.federation.algorithm)

    @property
    def agc_enabled(self) -> bool:
        return self.optim.agc == "on"

    def algorithm(self) -> AlgorithmSpec:
        fed, opt = self.federation, self.optim
        optim = OptimSpec(lr=opt.lr, agc_enabled=self.agc_enabled,
                          agc_lambda=opt.agc_lambda, agc_eps=opt.agc_eps,
                          prox_mu=fed.prox_mu or 0.0)
        return AlgorithmSpec(self.kind, optim, freeze_round=fed.freeze_round,
                             weight_standardization=self.model.weight_standardization)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.dataset.image_shape), self.dataset.classes,
                         Fraction(self.model.width_scale), self.model.dropout, self.algorithm().variant)

    @property
    def label(self) -> str:
        return self.name or self.federation.algorithm

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def fingerprint(self) -> str:
        """Hash of everything that determines the outputs (the output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("name")
        return _digest(d)

    def dataset_fingerprint(self) -> str:
        """Hash of the data and evaluation protocol: what must agree for results to be comparable."""
        return _digest({"dataset": asdict(self.dataset), "seeds": list(self.seeds)})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# -- parsing -----------------------------------------------------------------

_SECTIONS = {"dataset": DatasetConfig, "federation": FederationConfig, "model": ModelConfig,
             "optim": OptimConfig}
_TOP_LEVEL = {"seeds", "output_dir", "record_timing", "name"}


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` / ``(key,)`` paths to 1-based line numbers."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for knode, vnode in root.value:
        lines[(knode.value,)] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[(knode.value, k2.value)] = k2.start_mark.line + 1
    return lines


def _parse_error(msg: str, lines: dict, *path) -> ParseError:
    line = lines.get(tuple(path))
    where = ".".join(path)
    prefix = f"line {line}: " if line else ""
    err = ParseError(f"{prefix}{where}: {msg}")
    err.line, err.field = line, where
    return err


def _coerce(value, ftype: str, lines, *path):
    """Type-check one scalar against the dataclass field annotation."""
    if value is None:
        if "Optional" in ftype:
            return None
        raise _parse_error("may not be null", lines, *path)
    base = ftype.replace("Optional[", "").rstrip("]")
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, (str, int, float)) and not isinstance(value, bool),
        "list": isinstance(value, list),
    }[base]
    if not ok:
        raise _parse_error(f"expected {base}, got {type(value).__name__} {value!r}", lines, *path)
    if base == "float":
        return float(value)
    if base == "str":
        return str(value)
    return value


def _build_section(cls, data, lines, name):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise _parse_error("expected a mapping", lines, name)
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            raise _parse_error(f"unknown key {k!r}", lines, name, str(k))
    if cls is OptimConfig and isinstance(data.get("agc"), bool):
        # YAML 1.1 reads bare on/off as booleans
        data = dict(data, agc="on" if data["agc"] else "off")
    kwargs = {k: _coerce(v, str(known[k].type), lines, name, k) for k, v in data.items()}
    return cls(**kwargs)


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse, apply ``section.key=value`` overrides, validate and resolve defaults.

    Raises ParseError for malformed documents, unknown keys or wrong types,
    and ConstraintViolation for combinations the protocol forbids.
    """
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise ParseError(f"{line}malformed document: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ParseError("line 1: top level must be a mapping")
    for item in overrides:
        _apply_override(data, item)
    lines = _key_lines(text)
    for k in data:
        if k not in _SECTIONS and k not in _TOP_LEVEL:
            raise _parse_error(f"unknown key {k!r}", lines, str(k))
    sections = {name: _build_section(cls, data.get(name), lines, name) for name, cls in _SECTIONS.items()}
    top = {}
    if "seeds" in data:
        seeds = data["seeds"]
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = [seeds]
        if not isinstance(seeds, list) or not seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise _parse_error("expected a non-empty list of non-negative integers", lines, "seeds")
        top["seeds"] = list(seeds)
    if "output_dir" in data:
        top["output_dir"] = _coerce(data["output_dir"], "str", lines, "output_dir")
    if "record_timing" in data:
        top["record_timing"] = _coerce(data["record_timing"], "bool", lines, "record_timing")
    if "name" in data:
        top["name"] = _coerce(data["name"], "Optional[str]", lines, "name")
    cfg = ExperimentConfig(**sections, **top)
    return resolve(cfg, lines)


def _apply_override(data: dict, item: str) -> None:
    if "=" not in item:
        raise ParseError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ParseError(f"override {key}: cannot parse value {raw!r}") from exc
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ParseError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value


def resolve(cfg: ExperimentConfig, lines: Optional[dict] = None) -> ExperimentConfig:
    """Validate cross-field rules and fill algorithm-dependent defaults."""
    lines = lines or {}
    ds, fed, mdl, opt = cfg.dataset, cfg.federation, cfg.model, cfg.optim
    try:
        kind = AlgorithmKind(fed.algorithm)
    except ValueError:
        names = ", ".join(k.value for k in AlgorithmKind)
        raise _parse_error(f"unknown algorithm {fed.algorithm!r} (choose from {names})",
                           lines, "federation", "algorithm") from None

    def violation(msg, *path):
        line = lines.get(tuple(path))
        return ConstraintViolation((f"line {line}: " if line else "") + f"{'.'.join(path)}: {msg}")

    if ds.partition not in PARTITIONS:
        raise _parse_error(f"partition must be one of {PARTITIONS}", lines, "dataset", "partition")
    if len(ds.image_shape) != 3 or not all(isinstance(v, int) and v > 0 for v in ds.image_shape):
        raise violation("image_shape must be three positive integers [C, H, W]", "dataset", "image_shape")
    if ds.domains < 1 or ds.classes < 2:
        raise violation("need domains >= 1 and classes >= 2", "dataset", "domains")
    if ds.train_per_domain < 1 or ds.test_per_domain < 1:
        raise violation("per-domain sample counts must be positive", "dataset", "train_per_domain")
    if ds.partition == "domain":
        if ds.num_clients is not None or ds.alpha is not None:
            raise violation("num_clients/alpha apply to iid and dirichlet partitions only", "dataset", "partition")
        if ds.clients_per_domain < 1 or ds.train_per_domain % ds.clients_per_domain:
            raise violation("train_per_domain must split evenly into clients_per_domain shards",
                            "dataset", "clients_per_domain")
    else:
        n = ds.num_clients if ds.num_clients is not None else ds.domains * ds.clients_per_domain
        if n < 1 or n > ds.domains * ds.train_per_domain:
            raise violation("num_clients must be between 1 and the number of training samples",
                            "dataset", "num_clients")
        alpha = ds.alpha
        if ds.partition == "dirichlet":
            alpha = 0.5 if alpha is None else alpha
            if alpha <= 0:
                raise violation("alpha must be positive", "dataset", "alpha")
        elif alpha is not None:
            raise violation("alpha applies to the dirichlet partition only", "dataset", "alpha")
        ds = replace(ds, num_clients=n, alpha=alpha)

    if fed.rounds < 0 or fed.local_epochs < 0:
        raise violation("rounds and local_epochs must be non-negative", "federation", "rounds")
    if fed.batch_size < 1:
        raise violation("batch_size must be >= 1", "federation", "batch_size")
    if not 0.0 < fed.fraction <= 1.0:
        raise violation("fraction must be in (0, 1]", "federation", "fraction")
    if kind in STATEFUL and fed.fraction < 1.0:
        raise violation(f"{kind.value} keeps per-client state, so every client must join every round "
                        "(fraction must be 1)", "federation", "fraction")
    uses_bn = kind not in (AlgorithmKind.FedAvgGN, AlgorithmKind.FedAvgLN, AlgorithmKind.FedWon)
    if uses_bn and fed.batch_size < 2:
        line = lines.get(("federation", "batch_size"))
        raise DegenerateBatch((f"line {line}: " if line else "")
                              + f"federation.batch_size: {kind.value} uses batch norm and needs batch_size >= 2")
    if fed.checkpoint_every < 0:
        raise violation("checkpoint_every must be non-negative", "federation", "checkpoint_every")
    freeze, mu = fed.freeze_round, fed.prox_mu
    if kind is AlgorithmKind.FixBN:
        freeze = fed.rounds // 2 if freeze is None else freeze
        if freeze < 0:
            raise violation("freeze_round must be non-negative", "federation", "freeze_round")
    elif freeze is not None:
        raise violation("freeze_round applies to FixBN only", "federation", "freeze_round")
    if kind is AlgorithmKind.FedProx:
        mu = DEFAULT_PROX_MU if mu is None else mu
        if mu < 0:
            raise violation("prox_mu must be non-negative", "federation", "prox_mu")
    elif mu is not None:
        raise violation("prox_mu applies to FedProx only", "federation", "prox_mu")
    fed = replace(fed, algorithm=kind.value, freeze_round=freeze, prox_mu=mu)

    try:
        width = Fraction(str(mdl.width_scale))
    except (ValueError, ZeroDivisionError):
        raise _parse_error(f"not a rational number: {mdl.width_scale!r}", lines, "model", "width_scale") from None
    if width <= 0:
        raise violation("width_scale must be positive", "model", "width_scale")
    if not 0.0 <= mdl.dropout < 1.0:
        raise violation("dropout must be in [0, 1)", "model", "dropout")
    if not mdl.weight_standardization and kind is not AlgorithmKind.FedWon:
        raise violation("weight_standardization=false is only meaningful for FedWon",
                        "model", "weight_standardization")
    mdl = replace(mdl, width_scale=str(width))

    lr = DEFAULT_LR[kind] if opt.lr is None else opt.lr
    if lr <= 0:
        raise violation("lr must be positive", "optim", "lr")
    if opt.agc not in ("auto", "on", "off"):
        raise _parse_error("agc must be auto, on or off", lines, "optim", "agc")
    agc = opt.agc
    if agc == "auto":
        norm_free = kind is AlgorithmKind.FedWon
        agc = "on" if norm_free and fed.batch_size >= AGC_AUTO_MIN_BATCH else "off"
    if opt.agc_lambda <= 0 or opt.agc_eps <= 0:
        raise violation("agc_lambda and agc_eps must be positive", "optim", "agc_lambda")
    opt = replace(opt, lr=float(lr), agc=agc)

    cfg = replace(cfg, dataset=ds, federation=fed, model=mdl, optim=opt)
    try:
        cfg.model_spec()
    except SimError as exc:
        raise violation(str(exc), "model", "width_scale") from None
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), overrides)


# -- running -----------------------------------------------------------------


@dataclass
class RunSummary:
    label: str
    algorithm: str
    seeds: list
    final_acc: list  # per seed, per domain
    domain_mean: list
    domain_std: list
    overall_mean: float
    overall_std: float
    fingerprint: str
    dataset_fingerprint: str
    final_loss: list = field(default_factory=list)  # per seed; nan when no round ran
    output_dir: Optional[str] = None

    @property
    def overall_per_seed(self) -> list:
        return [float(np.mean(a)) for a in self.final_acc]

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("output_dir")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls(**json.loads(text))


def summarize(label: str, algorithm: str, seeds, final_acc, final_loss, fingerprint: str,
              dataset_fingerprint: str) -> RunSummary:
    """Mean and population standard deviation over seeds."""
    acc = np.asarray(final_acc, dtype=np.float64)
    overall = acc.mean(axis=1)
    return RunSummary(label, algorithm, list(seeds), acc.tolist(), acc.mean(axis=0).tolist(),
                      acc.std(axis=0).tolist(), float(overall.mean()), float(overall.std()),
                      fingerprint, dataset_fingerprint, [float(v) for v in final_loss])


def build_federation(cfg: ExperimentConfig, seed: int):
    """Data, clients and initial global model for one seed."""
    ds = cfg.dataset
    root = RngStream(seed)
    domains = gen_domains(ds.domains, ds.classes, ds.train_per_domain, ds.test_per_domain,
                          tuple(ds.image_shape), root.split("data"), gap=ds.gap, noise=ds.noise,
                          jitter=ds.jitter)
    ps = root.split("partition")
    if ds.partition == "domain":
        shards = domain_partition(domains, ds.clients_per_domain, ps)
    else:
        x = np.concatenate([tr.x for tr, _ in domains])
        y = np.concatenate([tr.y for tr, _ in domains])
        if ds.partition == "iid":
            parts = iid_partition(y, ds.num_clients, ps)
        else:
            parts = dirichlet_partition(y, ds.num_clients, ds.alpha, ps)
        pooled = Shard(x, y, -1, "train")
        shards = [pooled.subset(np.sort(p)) for p in parts]
    algo = cfg.algorithm()
    model = build_cnn6(cfg.model_spec(), root.split("model"))
    clients = make_clients(shards, model, algo, root.split("clients"))
    fed = cfg.federation
    return ServerState(model, clients, [te for _, te in domains], algo, root.split("fed"),
                       fraction=fed.fraction, local_epochs=fed.local_epochs, batch_size=fed.batch_size,
                       total_rounds=fed.rounds)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def _contextualize(exc: SimError, seed: int, rnd: Optional[int]) -> SimError:
    where = f"seed {seed}" + (f", round {rnd}" if rnd is not None else ", setup")
    new = type(exc)(f"{where}: {exc}")
    new.seed, new.round = seed, rnd
    return new


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   progress: Optional[Callable[[int, object], None]] = None,
                   keep_states: bool = False):
    """Run every seed; write resolved config, round CSVs, checkpoints and summary.

    Returns the RunSummary, or ``(summary, states)`` with the final
    ServerState per seed when ``keep_states`` is set.
    """
    out = Path(out_dir) if out_dir is not None else output_root() / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    finals, losses, states = [], [], []
    fed = cfg.federation
    for seed in cfg.seeds:
        rnd = None
        try:
            state = build_federation(cfg, seed)
            accs = evaluate(state.global_model, state.clients, state.tests, state.algo)
            loss = float("nan")
            with open(out / f"rounds_seed{seed}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(csv_header(len(state.tests)))
                for rnd in range(fed.rounds):
                    res = run_round(state, rnd)
                    state.global_model, state.clients = res.global_model, res.clients
                    accs, loss = res.record.domain_acc, res.record.mean_loss
                    w.writerow(csv_row(res.record, cfg.record_timing))
                    fh.flush()
                    if progress is not None:
                        progress(seed, res.record)
                    if fed.checkpoint_every and (rnd + 1) % fed.checkpoint_every == 0 and rnd + 1 < fed.rounds:
                        _write_checkpoint(ckpt_dir / f"seed{seed}_round{rnd + 1}.json", state, seed, rnd + 1)
            rnd = None
            _write_checkpoint(ckpt_dir / f"seed{seed}_final.json", state, seed, fed.rounds)
        except SimError as exc:
            raise _contextualize(exc, seed, rnd) from exc
        finals.append(accs)
        losses.append(loss)
        if keep_states:
            states.append(state)
    summary = summarize(cfg.label, fed.algorithm, cfg.seeds, finals, losses, cfg.fingerprint(),
                        cfg.dataset_fingerprint())
    (out / "summary.json").write_text(summary.to_json())
    summary.output_dir = str(out)
    return (summary, states) if keep_states else summary


def _write_checkpoint(path: Path, state: ServerState, seed: int, rounds_done: int) -> None:
    extra = {"seed": seed, "rounds": rounds_done, "algorithm": state.algo.kind.value}
    if state.algo.stateful:
        # personalised entries stay with their clients; record them so the run can be inspected
        extra["client_overlays"] = {
            str(c.client_id): {k: v.tolist() for k, v in c.local_overlay.items()} for c in state.clients
        }
    path.write_text(to_checkpoint(state.global_model, extra))


# -- reporting ---------------------------------------------------------------


@dataclass
class Report:
    text: str
    csv: str


def compare_report(summaries: Sequence[RunSummary]) -> Report:
    """Domains-by-algorithms table of ``mean (std)`` accuracies in percent, plus an ``Average`` row."""
    if not summaries:
        raise FingerprintMismatch("no summaries to compare")
    ref = summaries[0].dataset_fingerprint
    for s in summaries[1:]:
        if s.dataset_fingerprint != ref:
            raise FingerprintMismatch(f"{s.label}: dataset fingerprint {s.dataset_fingerprint} != {ref}")
    n_dom = len(summaries[0].domain_mean)
    rows = [f"Domain {d}" for d in range(n_dom)] + ["Average"]

    def cell(s: RunSummary, r: int):
        if r < n_dom:
            return s.domain_mean[r], s.domain_std[r]
        return s.overall_mean, s.overall_std

    labels = [s.label for s in summaries]
    table = [[""] + labels]
    for r, name in enumerate(rows):
        table.append([name] + [f"{100 * m:.1f} ({100 * sd:.1f})" for m, sd in (cell(s, r) for s in summaries)])
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + [f"{lab}_{stat}" for lab in labels for stat in ("mean", "std")])
    for r, name in enumerate(rows):
        w.writerow([name] + [repr(float(v)) for s in summaries for v in cell(s, r)])
    return Report(text, buf.getvalue())
