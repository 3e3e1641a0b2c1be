"""Reproducible experiment runs: configuration, training over seeds, ablation grids and exports.

A :class:`RunConfig` is a tree of frozen dataclasses addressed by flat dotted
keys (``episode.gap_rank``, ``weights.xi``, ``optimizer.lr``, ``ablation``).
Config files are plain ``key = value`` lines, ``#`` starts a comment.
"""

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from otat.blocks import ConfigError
from otat.episodes import EpisodeSpec, generate_episode
from otat.estimator import OTATClassifier
from otat.golden import read_bundle, write_bundle
from otat.losses import LossWeights
from otat.network import Arm
from otat.svg import heatmap_svg
from otat.transport import CostKind, SinkhornConfig, heatmap_values

__all__ = [
    "ModelConfig",
    "OptimizerConfig",
    "RunConfig",
    "SeedResult",
    "MetricsReport",
    "acceptance_config",
    "parse_config_text",
    "load_config",
    "train",
    "fit_seed",
    "ablation_suite",
    "ablation_table_csv",
    "acceptance_suite",
    "export_heatmaps",
    "save_checkpoint",
    "load_checkpoint",
    "write_report",
]

METRICS_HEADER = ["run_id", "seed", "epoch", "split", "metric", "value"]
LOSS_HEADER = ["step", "l_cos", "l_ota", "l_eaw", "total", "mu"]


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    cmam_start_layer: int = 2
    adapter_rank: int = 8
    alpha: float = 1.0
    gamma: float = 1.0
    beta: float = 1.0
    activation: str = "gelu"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 1 <= self.cmam_start_layer <= self.depth:
            raise ConfigError(f"cmam_start_layer must lie in [1, depth={self.depth}]")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cost: CostKind = CostKind.COSINE
    ablation: Arm = Arm.OTA_OTO_EAW
    epochs: int = 50
    batch_size: int = 64
    seeds: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "cost", CostKind.parse(self.cost))
        object.__setattr__(self, "ablation", Arm.parse(self.ablation))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def dim(self):
        return self.episode.dim

    # -- flat key access ---------------------------------------------------------

    def flat(self):
        """``{dotted key: value}`` for every leaf, in declaration order."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    out[f"{f.name}.{g.name}"] = getattr(value, g.name)
            else:
                out[f.name] = value
        return out

    def keys(self):
        return list(self.flat())

    def get(self, key):
        flat = self.flat()
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        return flat[key]

    def with_overrides(self, overrides):
        """New config with ``{dotted key: value}`` applied; string values are coerced."""
        cfg = self
        for key, raw in overrides.items():
            cfg = cfg._with(key, raw)
        return cfg

    def _with(self, key, raw):
        key = key.strip()
        if key == "dim":
            key = "episode.dim"
        head, _, leaf = key.partition(".")
        names = {f.name for f in dataclasses.fields(self)}
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, head)
        if dataclasses.is_dataclass(current):
            sub = {f.name for f in dataclasses.fields(current)}
            if leaf not in sub:
                raise ConfigError(f"unknown config key {key!r}")
            value = _coerce(getattr(current, leaf), raw, key)
            try:
                return dataclasses.replace(self, **{head: dataclasses.replace(current, **{leaf: value})})
            except ValueError as exc:
                raise ConfigError(f"{key}={raw!r}: {exc}") from exc
        if leaf:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(current, raw, key)
        try:
            return dataclasses.replace(self, **{head: value})
        except ValueError as exc:
            raise ConfigError(f"{key}={raw!r}: {exc}") from exc

    def to_text(self):
        lines = []
        for key, value in self.flat().items():
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def run_id(self):
        digest = hashlib.sha1(self.to_text().encode()).hexdigest()[:8]
        return f"{self.ablation.value}-{digest}"

    def estimator_params(self, seed):
        m, s, w, o = self.model, self.sinkhorn, self.weights, self.optimizer
        return dict(
            arm=self.ablation.value,
            n_blocks=m.depth,
            cmam_start_layer=m.cmam_start_layer,
            adapter_rank=m.adapter_rank,
            alpha=m.alpha,
            gamma=m.gamma,
            beta=m.beta,
            activation=m.activation,
            cost=self.cost.value,
            sinkhorn_lambda=s.lam,
            sinkhorn_max_iter=s.max_iters,
            sinkhorn_tol=s.tol,
            tau=w.tau,
            xi=w.xi,
            nu=w.nu,
            zeta=w.zeta,
            eps2=w.eps2,
            lr=o.lr,
            weight_decay=o.weight_decay,
            beta1=o.beta1,
            beta2=o.beta2,
            epochs=self.epochs,
            batch_size=self.batch_size,
            random_state=seed,
        )


def _format_value(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(current, raw, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(current, Enum):
            return type(current).parse(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config_text(text, base=None):
    """Parse ``key = value`` lines on top of ``base`` (default config when None)."""
    overrides = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return (base or RunConfig()).with_overrides(overrides)


def load_config(path, base=None):
    return parse_config_text(Path(path).read_text(), base)


def acceptance_config():
    """The pinned desk-scale configuration used for the directional checks.

    Standard training defaults (lr 1e-3, 50 epochs, batch 64 clipped to the
    25-item support set) over five seeds. The text side keeps a single rank
    of each latent concept, so text alone is a weak classifier and there is
    headroom for support-image conditioning to show.
    """
    return RunConfig(episode=EpisodeSpec(gap_rank=1), seeds=(0, 1, 2, 3, 4))


# -- training ----------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    history: list
    step_log: list
    accuracy: float
    mnn: float


@dataclass
class MetricsReport:
    run_id: str
    config: RunConfig
    seeds: list
    wall_clock: float = 0.0

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("a report needs at least one seed")
        for r in self.seeds:
            if not 0.0 <= r.accuracy <= 1.0:
                raise ValueError(f"accuracy {r.accuracy} outside [0, 1]")

    @property
    def accuracies(self):
        return np.array([r.accuracy for r in self.seeds])

    @property
    def mnns(self):
        return np.array([r.mnn for r in self.seeds])

    @staticmethod
    def _std(values):
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    @property
    def final(self):
        acc, mnn = self.accuracies, self.mnns
        return {
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": self._std(acc),
            "mnn_mean": float(mnn.mean()),
            "mnn_std": self._std(mnn),
        }

    def metric_rows(self):
        rows = []
        for r in self.seeds:
            for rec in r.history:
                epoch = rec["epoch"]
                for metric in ("accuracy", "mnn"):
                    if metric in rec:
                        rows.append([self.run_id, r.seed, epoch, "query", metric, rec[metric]])
                for metric in ("l_cos", "l_ota", "l_eaw", "total", "mu", "lr"):
                    rows.append([self.run_id, r.seed, epoch, "train", metric, rec[metric]])
        final_epoch = self.config.epochs
        for metric, value in self.final.items():
            rows.append([self.run_id, "all", final_epoch, "query", metric, value])
        return rows

    def metrics_csv(self):
        return csv_text(METRICS_HEADER, self.metric_rows())

    def losses_csv(self, seed):
        r = next(s for s in self.seeds if s.seed == seed)
        return csv_text(LOSS_HEADER, [[rec[k] for k in LOSS_HEADER] for rec in r.step_log])


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def fit_seed(cfg, seed):
    """Train one seed's episode; returns ``(classifier, episode)``."""
    episode = generate_episode(cfg.episode, seed)
    clf = OTATClassifier(**cfg.estimator_params(seed))
    clf.fit(episode.support_x, episode.support_y, episode.text, eval_set=(episode.query_x, episode.query_y))
    return clf, episode


def _run_seed(cfg, seed):
    clf, episode = fit_seed(cfg, seed)
    accuracy = float(clf.score(episode.query_x, episode.query_y))
    mnn = float(clf.alignment(episode.query_x, episode.query_y))
    return SeedResult(seed, clf.history_, clf.step_log_, accuracy, mnn)


def _run_all(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_seed(cfg, seed) for cfg, seed in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_seed, cfg, seed) for cfg, seed in tasks]
        return [f.result() for f in futures]


def train(cfg, workers=1):
    """Train the configured arm on every seed and collect metrics."""
    start = time.perf_counter()
    results = _run_all([(cfg, s) for s in cfg.seeds], workers)
    return MetricsReport(cfg.run_id(), cfg, results, time.perf_counter() - start)


def _grid_points(sweep):
    if not sweep:
        return [{}]
    keys = list(sweep)
    for key in keys:
        if not sweep[key]:
            raise ConfigError(f"sweep over {key!r} has no values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def ablation_suite(base, sweep=None, workers=1):
    """One :func:`train` per grid point; returns ``[(point, MetricsReport)]``.

    ``sweep`` maps dotted config keys to value lists; the grid is their
    cartesian product, in the given key and value order.
    """
    points = _grid_points(sweep or {})
    configs = [base.with_overrides(p) for p in points]
    tasks = [(cfg, s) for cfg in configs for s in cfg.seeds]
    start = time.perf_counter()
    results = _run_all(tasks, workers)
    elapsed = time.perf_counter() - start
    out, i = [], 0
    for point, cfg in zip(points, configs):
        n = len(cfg.seeds)
        out.append((point, MetricsReport(cfg.run_id(), cfg, results[i:i + n], elapsed)))
        i += n
    return out


def _point_label(point):
    return ";".join(f"{k}={_format_value(v) if not isinstance(v, str) else v}" for k, v in point.items()) or "base"


def ablation_table_csv(table):
    keys = list(table[0][0]) if table else []
    header = ["point", *keys, "run_id", "n_seeds", "accuracy_mean", "accuracy_std", "mnn_mean", "mnn_std"]
    rows = []
    for point, report in table:
        f = report.final
        rows.append([
            _point_label(point),
            *(_format_value(report.config.get(k)) for k in keys),
            report.run_id,
            len(report.seeds),
            f["accuracy_mean"],
            f["accuracy_std"],
            f["mnn_mean"],
            f["mnn_std"],
        ])
    return csv_text(header, rows)


# -- exports -----------------------------------------------------------------------


def ensure_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    return path


def write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_report(report, out_dir, timing=True):
    """Write ``metrics.csv``, one loss log per seed and (optionally) ``timing.json``."""
    out = ensure_dir(out_dir)
    written = [out / "metrics.csv"]
    write_text(written[0], report.metrics_csv())
    for r in report.seeds:
        path = out / f"losses_{report.run_id}_seed{r.seed}.csv"
        write_text(path, report.losses_csv(r.seed))
        written.append(path)
    write_text(out / "config.txt", report.config.to_text())
    written.append(out / "config.txt")
    if timing:
        write_text(out / "timing.json", json.dumps({"run_id": report.run_id, "wall_clock_s": report.wall_clock}) + "\n")
        written.append(out / "timing.json")
    return written


def export_heatmaps(cfg, out_dir, seed=None, trained=True):
    """Per-patch cumulative-OT heatmaps for every query image against every class.

    Writes ``heatmaps.csv`` (one row per image and class with the OT distance
    and ``h_0 .. h_{L1-1}``), ``ot_distances.csv`` and one SVG per query image.
    ``trained=False`` uses freshly initialized parameters.
    """
    out = ensure_dir(out_dir)
    seed = cfg.seeds[0] if seed is None else seed
    run_cfg = cfg if trained else dataclasses.replace(cfg, epochs=0)
    clf, episode = fit_seed(run_cfg, seed)
    costs, plans, distances = clf.ot_details(episode.query_x)
    h = heatmap_values(plans.plan, costs)
    n_img, n_cls, n_tok = h.shape
    header = ["image", "label", "class", "distance", *(f"h_{i}" for i in range(n_tok))]
    rows, drows = [], []
    for i in range(n_img):
        label = int(episode.query_y[i])
        for c in range(n_cls):
            rows.append([i, label, c, float(distances[i, c]), *(float(v) for v in h[i, c])])
            drows.append([i, c, float(distances[i, c])])
    written = [out / "heatmaps.csv", out / "ot_distances.csv"]
    write_text(written[0], csv_text(header, rows))
    write_text(written[1], csv_text(["image", "class", "distance"], drows))
    side = math.ceil(math.sqrt(n_tok))
    svg_dir = ensure_dir(out / "svg")
    for i in range(n_img):
        grids = []
        for c in range(n_cls):
            padded = np.full(side * side, np.nan)
            padded[:n_tok] = h[i, c]
            grids.append((f"class {c}", padded.reshape(side, side)))
        path = svg_dir / f"query_{i:03d}.svg"
        write_text(path, heatmap_svg(grids, title=f"query {i} (label {int(episode.query_y[i])})"))
        written.append(path)
    return written


def save_checkpoint(clf, directory):
    """Every network tensor as a matrix file, with names, shapes and roles in the manifest."""
    net = clf.network_
    trainable, frozen = net.trainable(), net.frozen()
    tensors = {**trainable, **frozen}
    extra = {"trainable": sorted(trainable), "frozen": sorted(frozen), "classes": np.asarray(clf.classes_).tolist()}
    return write_bundle(directory, tensors, extra)


def load_checkpoint(directory):
    """``(tensors, manifest)`` as written by :func:`save_checkpoint`."""
    return read_bundle(directory)


def acceptance_suite(out_dir, cfg=None, workers=1):
    """The arm ablation, the cost-kind ablation and heatmaps of the final arm.

    Writes ``ablation.csv``, ``costs.csv``, ``metrics.csv``, per-seed loss
    logs and ``heatmaps/``. Wall-clock times go to ``timing.json`` only, so
    every CSV is reproducible byte for byte. The cosine row of the cost
    ablation is the final arm's run.
    """
    cfg = cfg or acceptance_config()
    out = ensure_dir(out_dir)
    timing = {}
    start = time.perf_counter()
    arms = ablation_suite(cfg, {"ablation": [a.value for a in Arm]}, workers)
    timing["arms_s"] = time.perf_counter() - start
    final_point, final = arms[-1]
    start = time.perf_counter()
    others = ablation_suite(final.config, {"cost": [CostKind.CONSTANT.value, CostKind.EUCLIDEAN.value]}, workers)
    timing["costs_s"] = time.perf_counter() - start
    costs = [({"cost": CostKind.COSINE.value}, final), *others]

    reports = [r for _, r in arms] + [r for _, r in others]
    write_text(out / "ablation.csv", ablation_table_csv(arms))
    write_text(out / "costs.csv", ablation_table_csv(costs))
    write_text(out / "metrics.csv", csv_text(METRICS_HEADER, [row for r in reports for row in r.metric_rows()]))
    for r in reports:
        for s in r.seeds:
            write_text(out / f"losses_{r.run_id}_seed{s.seed}.csv", r.losses_csv(s.seed))
    start = time.perf_counter()
    export_heatmaps(final.config, out / "heatmaps")
    timing["heatmaps_s"] = time.perf_counter() - start
    write_text(out / "timing.json", json.dumps(timing, sort_keys=True) + "\n")
    return {"arms": arms, "costs": costs, "timing": timing, "out": out}
