"""Configuration, sequential protocol runner and report aggregation."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
import typing
from dataclasses import dataclass, field

import numpy as np

from . import embedding as emb
from . import evaluation as ev
from . import regularizers as reg
from . import translation as tr
from .errors import AggregationError, ConfigError, ZSTCIError
from .stream import load_feature_csv, make_synthetic_stream

log = logging.getLogger(__name__)

METHODS = ("ft", "lwf", "ewc", "mas")
ZSTCI_MODES = ("off", "zs-only", "ur-only", "full")
METHOD_LABELS = {"ft": "E-FT", "lwf": "E-LwF", "ewc": "E-EWC", "mas": "E-MAS"}
MODE_SUFFIX = {"off": "", "zs-only": "+ZS", "ur-only": "+UR", "full": "+ZSTCI"}
ENV_PREFIX = "ZSTCI_"

# tags for the independent RNG streams derived from one master seed
_SPLIT, _INIT, _BATCH, _IMPORTANCE, _TRANSITION = range(5)


def derive_rng(seed, tag, task=0):
    return np.random.default_rng([int(seed), tag, task])


# Trade-off weights for the desk-scale stream. The published weights leave no
# measurable forgetting here, because Adam rescales the penalty gradient to a
# full step once the triplet loss of the new task saturates.
DESK_REG_WEIGHTS = {"ft": 0.0, "lwf": 1e-4, "ewc": 1e7, "mas": 1e-6}


@dataclass
class StreamSection:
    source: str = "synthetic"
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 50
    input_dim: int = 16
    cluster_spread: float = 0.15
    csv_path: str = ""
    csv_header: bool = False
    split_seed: typing.Optional[int] = None


@dataclass
class EmbeddingSection:
    hidden: typing.Tuple[int, ...] = (128,)
    embed_dim: int = 32
    normalize: bool = True
    activation: str = "relu"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    margin: float = 0.3
    mining: str = "all-valid"


@dataclass
class RegularizerSection:
    method: str = "ft"
    weight: typing.Optional[float] = None
    fisher_batches: typing.Optional[int] = None
    mas_batches: typing.Optional[int] = None
    batch_size: typing.Optional[int] = None
    accumulate: bool = False


@dataclass
class TransitionSection:
    # Desk-scale values. The published ones (TransitionConfig defaults) move the
    # residual maps far enough on this stream to destroy old-class prototypes.
    zstci: str = "off"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    gamma_tri: float = 1.0
    beta: float = 0.1
    delta: float = 0.1
    align_weight: float = 1.0
    margin: float = 0.3
    hidden: int = 64
    activation: str = "tanh"
    proto_negatives: str = "random"
    chain: str = "invert"


@dataclass
class RunSection:
    seeds: typing.Tuple[int, ...] = (1,)
    dtype: str = "float64"
    workers: int = 1
    save_snapshots: bool = False


@dataclass
class ExperimentConfig:
    stream: StreamSection = field(default_factory=StreamSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    transition: TransitionSection = field(default_factory=TransitionSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        s, e, r, t, run = self.stream, self.embedding, self.regularizer, self.transition, self.run
        if s.source not in ("synthetic", "csv"):
            raise ConfigError(f"stream.source must be 'synthetic' or 'csv', got {s.source!r}")
        if s.source == "csv" and not s.csv_path:
            raise ConfigError("stream.csv_path is required when stream.source = csv")
        if s.num_tasks < 1:
            raise ConfigError("stream.num_tasks must be >= 1")
        if r.method not in METHODS:
            raise ConfigError(f"regularizer.method must be one of {METHODS}, got {r.method!r}")
        if t.zstci not in ZSTCI_MODES:
            raise ConfigError(f"transition.zstci must be one of {ZSTCI_MODES}, got {t.zstci!r}")
        if run.dtype not in ("float64", "float32"):
            raise ConfigError("run.dtype must be float64 or float32")
        if not run.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if e.embed_dim < 1 or any(h < 1 for h in e.hidden):
            raise ConfigError("embedding layer sizes must be positive")
        if not e.lr > 0 or not t.lr > 0:
            raise ConfigError("learning rates must be positive")
        # construct the per-module configs to reuse their checks
        self.train_config()
        self.transition_config()
        return self

    def reg_weight(self):
        r = self.regularizer
        return r.weight if r.weight is not None else DESK_REG_WEIGHTS[r.method]

    def train_config(self, first_task=False):
        e, r = self.embedding, self.regularizer
        regularizer = "none" if (r.method == "ft" or first_task) else r.method
        return emb.TrainConfig(
            epochs=e.epochs,
            batch_size=e.batch_size,
            lr=e.lr,
            margin=e.margin,
            regularizer=regularizer,
            reg_weight=self.reg_weight() if regularizer != "none" else None,
            mining=e.mining,
        )

    def transition_config(self):
        t = self.transition
        kw = dict(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            gamma_tri=t.gamma_tri,
            beta=t.beta,
            delta=t.delta,
            align_weight=t.align_weight,
            margin=t.margin,
            hidden=t.hidden,
            activation=t.activation,
            proto_negatives=t.proto_negatives,
            chain=t.chain,
        )
        if t.zstci == "zs-only":
            kw.update(gamma_tri=0.0, beta=0.0, delta=0.0)
        elif t.zstci == "ur-only":
            kw.update(align_weight=0.0)
        return tr.TransitionConfig(**kw)

    @property
    def label(self):
        return METHOD_LABELS[self.regularizer.method] + MODE_SUFFIX[self.transition.zstci]

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k not in ("seeds", "workers")}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stream_key(self):
        blob = json.dumps(self.to_dict()["stream"], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **sections):
        """``with_overrides(transition={"zstci": "full"})`` returns a modified copy."""
        cfg = _copy_config(self)
        for section, values in sections.items():
            for key, value in values.items():
                _set_field(cfg, section, key, value)
        return cfg.validate()


# ---------------------------------------------------------------------------
# config text format
# ---------------------------------------------------------------------------

_SECTIONS = ("stream", "embedding", "regularizer", "transition", "run")


def _copy_config(cfg):
    return ExperimentConfig(**{s: dataclasses.replace(getattr(cfg, s)) for s in _SECTIONS})


def _parse_value(hint, text):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _parse_value(inner, text)
    if origin is tuple:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _set_field(cfg, section, key, value):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    if isinstance(value, str):
        try:
            value = _parse_value(hints[key], value)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    setattr(obj, key, value)


def parse_config(text, base=None):
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = _copy_config(base) if base is not None else ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            _set_field(cfg, section, key, value)
    return cfg


def load_config(path=None, env=None, base=None):
    """Read a config file (optional), then apply ``ZSTCI_<SECTION>_<KEY>`` overrides."""
    cfg = _copy_config(base) if base is not None else ExperimentConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), cfg)
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        section, _, key = rest.partition("_")
        if section not in _SECTIONS:
            continue
        _set_field(cfg, section, key, value)
    return cfg


def dump_config(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    config_hash: str
    stream_key: str
    label: str
    method: str
    zstci: str
    seed: int
    accuracy: list
    A: list
    F: list
    status: str = "ok"
    error: str = ""
    exit_code: int = 0
    timings: dict = field(default_factory=dict)

    def record(self):
        """The deterministic part, suitable for byte-identical result files."""
        d = dataclasses.asdict(self)
        d.pop("timings")
        return d

    @classmethod
    def from_record(cls, d):
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


def build_stream(cfg, seed):
    s = cfg.stream
    dtype = np.dtype(cfg.run.dtype)
    split_seed = s.split_seed if s.split_seed is not None else int(derive_rng(seed, _SPLIT).integers(2**31))
    if s.source == "csv":
        return load_feature_csv(s.csv_path, s.num_tasks, split_seed, header=s.csv_header, dtype=dtype)
    return make_synthetic_stream(
        s.num_tasks, s.classes_per_task, s.samples_per_class, s.input_dim, s.cluster_spread, split_seed, dtype=dtype
    )


def _estimate_importance(cfg, model, task, seed):
    r = cfg.regularizer
    rng = derive_rng(seed, _IMPORTANCE, task.index)
    if r.method == "ewc":
        return reg.estimate_fisher(
            model, task, r.fisher_batches, rng, batch_size=r.batch_size, margin=cfg.embedding.margin,
            mining=cfg.embedding.mining,
        )
    return reg.estimate_mas(model, task, r.mas_batches, rng, batch_size=r.batch_size)


def _series(matrix, upto):
    A = [ev.average_incremental_accuracy(matrix, k) for k in range(1, upto + 1)]
    F = [None] + [ev.average_forgetting(matrix, k) for k in range(2, upto + 1)]
    return A, F


def run_single(cfg, seed, snapshot_dir=None):
    """Run the whole sequential protocol once.  Failures are captured in the result."""
    cfg.validate()
    dtype = np.dtype(cfg.run.dtype)
    timings = {"embedding": 0.0, "importance": 0.0, "transition": 0.0, "evaluation": 0.0}
    result = RunResult(
        cfg.hash(), cfg.stream_key(), cfg.label, cfg.regularizer.method, cfg.transition.zstci, int(seed),
        [], [], [], timings=timings,
    )
    matrix = None
    try:
        stream = build_stream(cfg, seed)
        matrix = ev.AccuracyMatrix(stream.num_tasks)
        e = cfg.embedding
        arch = (stream.input_dim, *e.hidden, e.embed_dim)
        model = emb.init_embedding_model(arch, derive_rng(seed, _INIT), e.normalize, e.activation, dtype=dtype)
        memory = tr.PrototypeMemory()
        tcfg = cfg.transition_config()
        use_zstci = cfg.transition.zstci != "off"
        prev_model, importance, prev_pair = None, None, None
        for task in stream:
            t = task.index
            tick = time.perf_counter()
            train_cfg = cfg.train_config(first_task=(t == 1))
            model = emb.train_task(
                model, task, train_cfg, derive_rng(seed, _BATCH, t), prev_model=prev_model, importance=importance
            )
            timings["embedding"] += time.perf_counter() - tick

            new_protos = tr.compute_prototypes(model, task)
            translator = None
            tick = time.perf_counter()
            if use_zstci and t >= 2:
                pair = tr.train_transition(
                    prev_model, model, task, memory, tcfg, derive_rng(seed, _TRANSITION, t), prev_pair=prev_pair
                )
                tr.update_memory(memory, pair, new_protos, t, prev_pair=prev_pair, cfg=tcfg)
                translator = pair.map_cur
                prev_pair = pair
            else:
                memory.insert(new_protos, t)
            timings["transition"] += time.perf_counter() - tick

            tick = time.perf_counter()
            if cfg.regularizer.method in ("ewc", "mas") and t < stream.num_tasks:
                new_imp = _estimate_importance(cfg, model, task, seed)
                if cfg.regularizer.accumulate and importance is not None:
                    new_imp = importance.accumulate(new_imp)
                importance = new_imp
            timings["importance"] += time.perf_counter() - tick
            prev_model = model
            if snapshot_dir is not None:
                _write_snapshots(snapshot_dir, seed, t, model, importance, memory)

            tick = time.perf_counter()
            matrix.set_row(t, ev.evaluate_after_task(t, stream, model, memory, translator))
            timings["evaluation"] += time.perf_counter() - tick
            log.debug("%s seed=%s task=%d row=%s", cfg.label, seed, t, matrix.row(t))
    except ZSTCIError as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
        result.exit_code = exc.exit_code
    if matrix is not None:
        upto = matrix.populated_rows()
        result.accuracy = matrix.to_lists()
        result.A, result.F = _series(matrix, upto)
    return result


def _write_snapshots(root, seed, t, model, importance, memory):
    from . import snapshot

    d = os.path.join(root, f"seed{seed}")
    os.makedirs(d, exist_ok=True)
    snapshot.save_model(model, os.path.join(d, f"task{t}.model"))
    snapshot.save_memory(memory, os.path.join(d, f"task{t}.memory"))
    if importance is not None:
        snapshot.save_importance(importance, os.path.join(d, f"task{t}.importance"))


def run_experiment(cfg, seeds=None, snapshot_dir=None):
    """One ``RunResult`` per seed."""
    cfg.validate()
    return [run_single(cfg, s, snapshot_dir) for s in (seeds or cfg.run.seeds)]


# ---------------------------------------------------------------------------
# persistence and reporting
# ---------------------------------------------------------------------------


def write_results(results, out_dir, cfg=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.jsonl"), "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "timings.jsonl"), "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"label": r.label, "seed": r.seed, "timings": r.timings}, sort_keys=True) + "\n")
    if cfg is not None:
        with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg))


def read_results(path):
    with open(path, encoding="utf-8") as fh:
        return [RunResult.from_record(json.loads(line)) for line in fh if line.strip()]


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(results):
    """Per label: mean/std over seeds of the A_k and F_k series."""
    if not results:
        raise AggregationError("nothing to aggregate")
    keys = {r.stream_key for r in results}
    if len(keys) > 1:
        raise AggregationError(f"results come from different stream specs: {sorted(keys)}")
    groups = {}
    for r in results:
        groups.setdefault(r.label, []).append(r)
    out = {}
    for label, runs in groups.items():
        n_tasks = min(len(r.A) for r in runs)
        A = [_mean_std([r.A[k] for r in runs]) for k in range(n_tasks)]
        F = [None] + [_mean_std([r.F[k] for r in runs]) for k in range(1, n_tasks)]
        out[label] = {"seeds": sorted(r.seed for r in runs), "A": A, "F": F}
    return out


def _table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def emit_report(results, out_dir=None):
    """Accuracy table (A_k per task) and forgetting series (F_k), mean and std over seeds.

    Writes ``accuracy_table.csv``, ``forgetting_series.csv`` and ``summary.txt``
    when ``out_dir`` is given; returns the aggregated data and the text table.
    """
    agg = aggregate(results)
    n_tasks = max(len(v["A"]) for v in agg.values())
    acc_lines = ["label,task,mean,std,n_seeds"]
    fgt_lines = ["label,task,mean,std,n_seeds"]
    rows = []
    for label, data in agg.items():
        n = len(data["seeds"])
        for k, (m, s) in enumerate(data["A"], start=1):
            acc_lines.append(f"{label},{k},{m!r},{s!r},{n}")
        for k, ms in enumerate(data["F"], start=1):
            if ms is not None:
                fgt_lines.append(f"{label},{k},{ms[0]!r},{ms[1]!r},{n}")
        cells = [f"{100 * m:.1f}" + (f"±{100 * s:.1f}" if n > 1 else "") for m, s in data["A"]]
        cells += [""] * (n_tasks - len(cells))
        final_f = data["F"][-1]
        rows.append([label, *cells, "-" if final_f is None else f"{100 * final_f[0]:.1f}"])
    text = _table(["Method", *[f"T{k}" for k in range(1, n_tasks + 1)], "F_last"], rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "accuracy_table.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(acc_lines) + "\n")
        with open(os.path.join(out_dir, "forgetting_series.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(fgt_lines) + "\n")
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write("Average incremental accuracy A_k (%), mean±std over seeds\n\n" + text + "\n")
    return agg, text


def sweep_configs(cfg, methods, modes):
    """Cartesian product of regularizer methods and ZSTCI modes."""
    return [
        cfg.with_overrides(regularizer={"method": m}, transition={"zstci": z}) for m in methods for z in modes
    ]


def _run_job(job):
    cfg, seed = job
    return run_single(cfg, seed)


def run_sweep(cfg, methods, modes, seeds=None, workers=1):
    jobs = [(c, s) for c in sweep_configs(cfg, methods, modes) for s in (seeds or cfg.run.seeds)]
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))
