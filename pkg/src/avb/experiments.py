"""Experiment orchestration: configs, data ingestion, deterministic runs.

This module is the plumbing behind the ``avb`` command line tool. It turns a
JSON config into one :class:`RunResult` per repeat, with every random draw
keyed by ``(master_seed, repeat, stream)`` so that repeats are independent and
reruns are byte-identical. Five experiment kinds are supported:

- ``mixture``: Gaussian mixtures over a component-count grid, with a
  predictive-density table for plotting.
- ``deep_regression``: ReLU networks with uniform-box posteriors over a
  (depth, width) grid; averaged and selected-model predictions with RMSE on
  both the raw and the standardized target scale.
- ``sbm``: block models over a community-count grid, with label accuracy
  against the planted truth when the data are builtin.
- ``particle_demo``: small discretized spaces fit exactly with full-support
  particle states, cross-checked against the brute-force posterior and the
  risk-bound functional.
- ``quasi_regression``: the deep grid under the tempered quadratic loss.

Model-fit failures with a non-finite objective exclude that model (weights
renormalize over the survivors and the result is flagged) instead of aborting
the run. The averaged-vs-selected objective ordering is asserted on every run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from . import __version__
from .compare import (
    expected_risk,
    objective_dominance,
    risk_bound_functional,
    select_model,
    tv_combined_vs_selected,
)
from .core import (
    CombinedPosterior,
    ElboBreakdown,
    ModelCollection,
    combine_posteriors,
)
from .deep import FitConfig, GaussianRegressionAdapter, NetArchitecture, fit_model
from .deep import posterior_mean_predict
from .errors import (
    ConfigError,
    NonFiniteObjective,
    NumericalBreakdown,
    ParseError,
    ShapeError,
)
from .mixture import (
    MixtureModelSpec,
    cavi_fit_restarts,
    plug_in_density,
    predictive_density,
    sample_truth,
)
from .particles import DiscretizedSpace, ParticleTarget, run_algorithm2
from .quasi import (
    QuasiRegressionAdapter,
    SbmData,
    SbmModelSpec,
    label_accuracy,
    network_grid_collection,
    sample_planted_partition,
    sbm_fit_restarts,
    sbm_model_collection,
)

logger = logging.getLogger("avb.experiments")

SCHEMA_VERSION = 1
CODE_VERSION = __version__

EXPERIMENT_KINDS = (
    "mixture",
    "deep_regression",
    "sbm",
    "particle_demo",
    "quasi_regression",
)

# stream tags for substream keys (master_seed, repeat, tag, ...)
_STREAM_DATA = 17
_STREAM_SPLIT = 5
_STREAM_PREDICT_AVERAGED = 9
_STREAM_PREDICT_SELECTED = 10

_TOP_LEVEL_KEYS = {
    "kind",
    "data",
    "model_grid",
    "optimizer",
    "prior",
    "master_seed",
    "repeats",
    "kappa",
    "output_dir",
}

_DATA_KEYS = {
    "mixture": {"source", "n", "path", "feature_columns", "density_grid_limit",
                "density_grid_step"},
    "deep_regression": {"source", "n", "noise_scale", "x_low", "x_high", "path",
                        "feature_columns", "target_column"},
    "sbm": {"source", "n", "within", "between", "communities", "path",
            "node_count"},
    "particle_demo": {"source", "n", "dim", "truth"},
    "quasi_regression": {"source", "n", "noise_scale", "x_low", "x_high", "path",
                         "feature_columns", "target_column"},
}

_OPTIMIZER_KEYS = {
    "mixture": {"restarts", "max_iters", "tol"},
    "deep_regression": {"epochs", "learning_rate", "mc_samples", "optimizer",
                        "batch_size", "eval_samples", "init_center_scale",
                        "init_halfwidth_fraction", "prediction_draws"},
    "sbm": {"restarts", "iters"},
    "particle_demo": set(),
    "quasi_regression": {"epochs", "learning_rate", "mc_samples", "optimizer",
                         "batch_size", "eval_samples", "init_center_scale",
                         "init_halfwidth_fraction", "prediction_draws"},
}

_PRIOR_KEYS = {
    "mixture": {"b0"},
    "deep_regression": {"b0", "magnitude_bound"},
    "sbm": {"b0"},
    "particle_demo": {"b0"},
    "quasi_regression": {"b0", "magnitude_bound"},
}


# ---------------------------------------------------------------------------
# configuration


def _as_nested_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_nested_tuple(v) for v in value)
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: kind, data source, model grid, knobs, seeds.

    ``data``, ``optimizer``, and ``prior`` are flat mappings validated against
    per-kind key sets so that typos fail at load time rather than silently
    using a default. ``model_grid`` entries are component counts (mixture,
    sbm), (depth, width) pairs (deep_regression, quasi_regression), or
    (spacing, bound) pairs (particle_demo).
    """

    kind: str
    data: Mapping[str, Any]
    model_grid: tuple
    optimizer: Mapping[str, Any] = field(default_factory=dict)
    prior: Mapping[str, Any] = field(default_factory=dict)
    master_seed: int = 0
    repeats: int = 1
    kappa: float | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment kind {self.kind!r}; "
                f"expected one of {sorted(EXPERIMENT_KINDS)}"
            )
        object.__setattr__(self, "data", dict(self.data))
        object.__setattr__(self, "optimizer", dict(self.optimizer))
        object.__setattr__(self, "prior", dict(self.prior))
        object.__setattr__(self, "model_grid", _as_nested_tuple(self.model_grid))

        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError("master_seed must be a nonnegative integer")
        if not isinstance(self.repeats, int) or self.repeats < 1:
            raise ConfigError("repeats must be a positive integer")
        if len(self.model_grid) == 0:
            raise ConfigError("model_grid must be nonempty")
        if len(set(self.model_grid)) != len(self.model_grid):
            raise ConfigError("model_grid entries must be distinct")
        self._check_grid()

        for block_name, block, allowed in (
            ("data", self.data, _DATA_KEYS[self.kind]),
            ("optimizer", self.optimizer, _OPTIMIZER_KEYS[self.kind]),
            ("prior", self.prior, _PRIOR_KEYS[self.kind]),
        ):
            unknown = set(block) - allowed
            if unknown:
                raise ConfigError(
                    f"unknown {block_name} keys for kind {self.kind!r}: "
                    f"{sorted(unknown)}; allowed: {sorted(allowed)}"
                )

        source = self.data.get("source", "builtin")
        if source not in ("builtin", "csv"):
            raise ConfigError(f"data source must be builtin or csv, got {source!r}")
        if source == "csv":
            if self.kind == "particle_demo":
                raise ConfigError("particle_demo supports builtin data only")
            path = self.data.get("path")
            if not path:
                raise ConfigError("csv data source requires a path")
            if not Path(path).exists():
                raise ConfigError(f"data file does not exist: {path}")
            if self.kind in ("deep_regression", "quasi_regression"):
                if not self.data.get("feature_columns") or not self.data.get(
                    "target_column"
                ):
                    raise ConfigError(
                        "csv regression data needs feature_columns and "
                        "target_column"
                    )
            if self.kind == "mixture" and not self.data.get("feature_columns"):
                raise ConfigError("csv mixture data needs feature_columns")

        if self.kind == "quasi_regression":
            if self.kappa is None or not self.kappa > 0:
                raise ConfigError(
                    "quasi_regression requires a positive tempering rate kappa"
                )
        elif self.kappa is not None:
            raise ConfigError(f"kappa is not meaningful for kind {self.kind!r}")

        bound = self.prior.get("magnitude_bound", "sqrt_n")
        if bound != "sqrt_n" and not (
            isinstance(bound, (int, float)) and bound > 0
        ):
            raise ConfigError(
                "prior magnitude_bound must be 'sqrt_n' or a positive number"
            )
        b0 = self.prior.get("b0")
        if b0 is not None and not (isinstance(b0, (int, float)) and b0 > 0):
            raise ConfigError("prior b0 must be a positive number")

    def _check_grid(self):
        if self.kind in ("mixture", "sbm"):
            for m in self.model_grid:
                if not isinstance(m, int) or m < 1:
                    raise ConfigError(
                        f"{self.kind} model_grid entries must be positive "
                        f"integers, got {m!r}"
                    )
        elif self.kind in ("deep_regression", "quasi_regression"):
            for entry in self.model_grid:
                ok = (
                    isinstance(entry, tuple)
                    and len(entry) == 2
                    and all(isinstance(v, int) and v >= 1 for v in entry)
                    and entry[0] >= 2
                )
                if not ok:
                    raise ConfigError(
                        "deep model_grid entries must be (depth, width) pairs "
                        f"with depth >= 2, got {entry!r}"
                    )
        else:  # particle_demo
            for entry in self.model_grid:
                ok = (
                    isinstance(entry, tuple)
                    and len(entry) == 2
                    and all(
                        isinstance(v, (int, float)) and v > 0 for v in entry
                    )
                )
                if not ok:
                    raise ConfigError(
                        "particle_demo model_grid entries must be "
                        f"(spacing, bound) pairs, got {entry!r}"
                    )

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = set(raw) - _TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in raw or "data" not in raw or "model_grid" not in raw:
            raise ConfigError("config requires kind, data, and model_grid")
        return cls(
            kind=raw["kind"],
            data=raw["data"],
            model_grid=_as_nested_tuple(raw["model_grid"]),
            optimizer=raw.get("optimizer", {}),
            prior=raw.get("prior", {}),
            master_seed=raw.get("master_seed", 0),
            repeats=raw.get("repeats", 1),
            kappa=raw.get("kappa"),
            output_dir=raw.get("output_dir"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {p} must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        return {
            "kind": self.kind,
            "data": plain(self.data),
            "model_grid": plain(self.model_grid),
            "optimizer": plain(self.optimizer),
            "prior": plain(self.prior),
            "master_seed": self.master_seed,
            "repeats": self.repeats,
            "kappa": self.kappa,
            "output_dir": self.output_dir,
        }


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class ColumnTransform:
    """Per-column affine map ``z = (x - offset) / scale`` with exact inverse."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=float).ravel()
        sc = np.asarray(self.scale, dtype=float).ravel()
        if off.shape != sc.shape:
            raise ShapeError("offset and scale must have equal lengths")
        if np.any(sc == 0) or not np.all(np.isfinite(sc)) or not np.all(
            np.isfinite(off)
        ):
            raise ShapeError("transform parameters must be finite with "
                             "nonzero scales")
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "scale", sc)

    @classmethod
    def standardizing(cls, columns) -> "ColumnTransform":
        """Zero-mean unit-variance map; constant columns keep scale 1."""
        arr = np.asarray(columns, dtype=float)
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        std = np.where(std == 0, 1.0, std)
        return cls(offset=mean, scale=std)

    @classmethod
    def identity(cls, width: int) -> "ColumnTransform":
        return cls(offset=np.zeros(width), scale=np.ones(width))

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.offset) / self.scale

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.scale + self.offset


@dataclass(frozen=True)
class RegressionDataset:
    """Standardized features plus passthrough targets from a CSV file."""

    features: np.ndarray  # standardized, (n, p)
    targets: np.ndarray  # raw, (n,)
    feature_transform: ColumnTransform
    feature_names: tuple
    target_name: str

    @property
    def raw_features(self) -> np.ndarray:
        return self.feature_transform.invert(self.features)


def _read_numeric_table(path, column_names: Sequence[str]) -> np.ndarray:
    """Named columns of a headered CSV as floats; line-numbered errors."""
    p = Path(path)
    names = list(column_names)
    if len(set(names)) != len(names):
        raise ConfigError(f"requested columns are not distinct: {names}")
    with p.open(newline="") as handle:
        reader = csv.reader(handle)
        rows = []
        header = None
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue  # blank line (e.g. trailing newline)
            if header is None:
                header = [cell.strip() for cell in row]
                width = len(header)
                missing = [n for n in names if n not in header]
                if missing:
                    raise ParseError(
                        f"{p}: header is missing columns {missing}", line=lineno
                    )
                positions = [header.index(n) for n in names]
                continue
            if len(row) != width:
                raise ParseError(
                    f"{p}: row has {len(row)} fields, header has {width}",
                    line=lineno,
                )
            try:
                rows.append([float(row[pos]) for pos in positions])
            except ValueError as exc:
                raise ParseError(
                    f"{p}: non-numeric value in a requested column: {exc}",
                    line=lineno,
                ) from exc
    if header is None:
        raise ParseError(f"{p}: file is empty", line=1)
    if not rows:
        raise ParseError(f"{p}: no data rows after the header", line=1)
    return np.asarray(rows, dtype=float)


def ingest_csv(path, feature_columns: Sequence[str], target_column: str
               ) -> RegressionDataset:
    """Load a regression table: features standardized, targets passed through.

    The standardizing transform is stored on the dataset so that new inputs
    can be mapped onto the same scale and predictions can be mapped back.
    Ragged rows and non-numeric cells raise :class:`ParseError` carrying the
    1-based line number.
    """
    names = list(feature_columns) + [target_column]
    table = _read_numeric_table(path, names)
    raw_x = table[:, :-1]
    y = table[:, -1]
    transform = ColumnTransform.standardizing(raw_x)
    return RegressionDataset(
        features=transform.apply(raw_x),
        targets=y,
        feature_transform=transform,
        feature_names=tuple(feature_columns),
        target_name=target_column,
    )


def ingest_edge_csv(path, node_count: int | None = None) -> SbmData:
    """Load an undirected edge list (two integer columns, optional header).

    Node ids are 0-based; ``node_count`` defaults to one more than the
    largest id seen. A first row that does not parse as integers is treated
    as a header.
    """
    p = Path(path)
    pairs = []
    with p.open(newline="") as handle:
        reader = csv.reader(handle)
        first_data_row = True
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(
                    f"{p}: edge rows need exactly 2 fields, got {len(row)}",
                    line=lineno,
                )
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                if first_data_row:
                    first_data_row = False
                    continue  # header row
                raise ParseError(
                    f"{p}: non-integer node id: {exc}", line=lineno
                ) from exc
            first_data_row = False
    if not pairs:
        raise ParseError(f"{p}: no edges found", line=1)
    if node_count is None:
        node_count = max(max(i, j) for i, j in pairs) + 1
    return SbmData.from_edge_list(node_count, pairs)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class PlotTable:
    """A named CSV payload produced by a run (grid + values, no rendering)."""

    name: str
    header: tuple
    rows: tuple

    def to_csv_text(self) -> str:
        def cell(value) -> str:
            if isinstance(value, (bool, np.bool_)):
                return str(bool(value))
            if isinstance(value, (int, np.integer)):
                return str(int(value))
            if isinstance(value, (float, np.floating)):
                return repr(float(value))
            return str(value)

        lines = [",".join(self.header)]
        lines.extend(",".join(cell(v) for v in row) for row in self.rows)
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RunResult:
    """Everything one repeat produced, ready for JSON serialization.

    Mapping fields are keyed by ``str(model_id)`` so they survive the JSON
    round trip; ``model_ids`` preserves the native ids and order. The stored
    ``gamma`` always satisfies the round-trip invariant: recombining the
    stored log prior weights and objective totals reproduces it.
    """

    kind: str
    repeat_index: int
    master_seed: int
    model_ids: tuple
    log_alpha: dict
    elbos: dict
    gamma: dict
    selected_model: Any
    selection_scores: dict
    dominance: dict
    excluded_models: dict
    gamma_renormalized: bool
    metrics: dict
    config_echo: dict
    wall_clock_seconds: float
    plot_tables: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": CODE_VERSION,
            "kind": self.kind,
            "repeat_index": self.repeat_index,
            "master_seed": self.master_seed,
            "model_ids": list(self.model_ids),
            "log_alpha": dict(self.log_alpha),
            "elbos": {k: dict(v) for k, v in self.elbos.items()},
            "gamma": dict(self.gamma),
            "selected_model": self.selected_model,
            "selection_scores": dict(self.selection_scores),
            "dominance": dict(self.dominance),
            "excluded_models": dict(self.excluded_models),
            "gamma_renormalized": self.gamma_renormalized,
            "metrics": dict(self.metrics),
            "config": dict(self.config_echo),
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def _jsonable(value):
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _entropy(gamma: np.ndarray) -> float:
    return float(-np.sum(xlogy(gamma, gamma))) + 0.0  # avoid -0.0 in JSON


def _breakdown_dict(b: ElboBreakdown) -> dict:
    return {
        "expected_nll": float(b.expected_nll),
        "kl_to_prior": float(b.kl_to_prior),
        "total": float(b.total),
        "mc_samples_used": int(b.mc_samples_used),
        "mc_seed": _jsonable(b.mc_seed),
    }


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def _assemble(
    config: ExperimentConfig,
    repeat: int,
    collection: ModelCollection,
    combined: CombinedPosterior,
    excluded: dict,
    metrics: dict,
    plot_tables: tuple,
    started: float,
) -> RunResult:
    """Selection, the dominance assertion, and result packaging."""
    selection = select_model(combined, collection)
    dominance = objective_dominance(combined, selection, collection)
    if not dominance.holds:
        raise NumericalBreakdown(
            "averaged objective exceeds the selected-model objective "
            f"({dominance.avb_objective} > {dominance.msvb_objective})"
        )
    ids = combined.model_ids
    metrics = dict(metrics)
    metrics.setdefault("gamma_entropy", _entropy(combined.gamma))
    metrics.setdefault(
        "tv_combined_vs_selected", tv_combined_vs_selected(combined, selection)
    )
    return RunResult(
        kind=config.kind,
        repeat_index=repeat,
        master_seed=config.master_seed,
        model_ids=tuple(_jsonable(m) for m in ids),
        log_alpha={
            str(m): float(collection.log_alpha[i]) for i, m in enumerate(ids)
        },
        elbos={
            str(m): _breakdown_dict(combined.per_model_elbo[m]) for m in ids
        },
        gamma={str(m): float(combined.gamma[i]) for i, m in enumerate(ids)},
        selected_model=_jsonable(selection.selected_model),
        selection_scores={
            str(m): float(selection.selection_scores[m]) for m in ids
        },
        dominance={
            "averaged_objective": dominance.avb_objective,
            "selected_objective": dominance.msvb_objective,
            "holds": dominance.holds,
        },
        excluded_models=dict(excluded),
        gamma_renormalized=bool(excluded),
        metrics=_jsonable(metrics),
        config_echo=config.to_dict(),
        wall_clock_seconds=time.perf_counter() - started,
        plot_tables=plot_tables,
    )


def _fit_grid_with_policy(model_items: Sequence[tuple], fitter) -> tuple[dict, dict]:
    """Fit each (model_id, payload) item, excluding non-finite failures.

    ``fitter(model_id, payload, index)`` returns ``(state, breakdown)`` or
    raises :class:`NonFiniteObjective`. Returns (fits, excluded-reasons); at
    least one model must survive.
    """
    fits: dict = {}
    excluded: dict = {}
    for idx, (mid, payload) in enumerate(model_items):
        try:
            fits[mid] = fitter(mid, payload, idx)
        except NonFiniteObjective as exc:
            logger.warning("model %s excluded after a non-finite fit: %s",
                           mid, exc)
            excluded[str(mid)] = str(exc)
    if not fits:
        raise NonFiniteObjective("every model fit diverged; nothing to combine")
    return fits, excluded


# ---------------------------------------------------------------------------
# per-kind runners


def _run_mixture(config: ExperimentConfig, repeat: int, started: float
                 ) -> RunResult:
    data_cfg = config.data
    if data_cfg.get("source", "builtin") == "builtin":
        n = int(data_cfg.get("n", 200))
        x = sample_truth(n, [config.master_seed, repeat, _STREAM_DATA])
    else:
        x = _read_numeric_table(
            data_cfg["path"], list(data_cfg["feature_columns"])
        )
    dim = x.shape[1]

    opt = config.optimizer
    restarts = int(opt.get("restarts", 3))
    max_iters = int(opt.get("max_iters", 200))
    tol = float(opt.get("tol", 1e-8))
    b0 = float(config.prior.get("b0", 1.0))

    counts = np.asarray(config.model_grid, dtype=float)
    log_weights = -counts * np.log(counts)

    def fitter(mid, spec, idx):
        result = cavi_fit_restarts(
            spec,
            x,
            seed=[config.master_seed, repeat, idx],
            restarts=restarts,
            max_iters=max_iters,
            tol=tol,
        )
        return result.state, result.breakdown

    items = [
        (m, MixtureModelSpec.default(m, dim)) for m in config.model_grid
    ]
    fits, excluded = _fit_grid_with_policy(items, fitter)
    survivors = [i for i, (m, _) in enumerate(items) if m in fits]
    collection = ModelCollection.from_log_weights(
        tuple((items[i][0], items[i][1], float(items[i][0])) for i in survivors),
        log_weights[survivors],
        b0=b0,
    )
    combined = combine_posteriors(collection, fits)

    metrics = {
        "sample_size": int(len(x)),
        "dimension": int(dim),
    }
    tables = ()
    if dim == 2:
        limit = float(data_cfg.get("density_grid_limit", 8.0))
        step = float(data_cfg.get("density_grid_step", 0.25))
        axis = np.arange(-limit, limit + step / 2, step)
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        pts = np.column_stack([g1.ravel(), g2.ravel()])
        averaged = predictive_density(combined, pts)
        selected = select_model(combined, collection).selected_model
        plug_in = plug_in_density(combined.components[selected], pts)
        tables = (
            PlotTable(
                name="density",
                header=("x1", "x2", "averaged_density", "selected_density"),
                rows=tuple(
                    (float(p[0]), float(p[1]), float(a), float(s))
                    for p, a, s in zip(pts, averaged, plug_in)
                ),
            ),
        )
    return _assemble(
        config, repeat, collection, combined, excluded, metrics, tables, started
    )


def _regression_data(config: ExperimentConfig, repeat: int):
    """Features, raw targets, target transform policy, and raw feature view."""
    data_cfg = config.data
    if data_cfg.get("source", "builtin") == "builtin":
        n = int(data_cfg.get("n", 256))
        noise = float(data_cfg.get("noise_scale", 0.1))
        lo = float(data_cfg.get("x_low", -0.5))
        hi = float(data_cfg.get("x_high", 0.5))
        if not (noise > 0 and hi > lo):
            raise ConfigError("builtin regression needs noise_scale > 0 and "
                              "x_high > x_low")
        rng = np.random.default_rng(
            [config.master_seed, repeat, _STREAM_DATA]
        )
        x = rng.uniform(lo, hi, size=n)[:, None]
        y = np.sin(2.0 * np.pi * x[:, 0]) + noise * rng.standard_normal(n)
        # the generator knows its noise scale, so targets are fit on the
        # noise-normalized scale where the unit-variance likelihood is exact
        target_transform = ColumnTransform(offset=[0.0], scale=[noise])
        return x, y, target_transform, x, ("x",)
    ds = ingest_csv(
        data_cfg["path"],
        list(data_cfg["feature_columns"]),
        data_cfg["target_column"],
    )
    # target scale chosen from the data at fit time (per split) — signalled
    # by returning None here
    return ds.features, ds.targets, None, ds.raw_features, ds.feature_names


def _split_indices(n: int, master_seed: int, repeat: int):
    order = np.random.default_rng(
        [master_seed, repeat, _STREAM_SPLIT]
    ).permutation(n)
    n_test = max(1, int(round(0.1 * n)))
    if n_test >= n:
        raise ConfigError(f"sample of size {n} is too small to split 90/10")
    return order[n_test:], order[:n_test]


def _run_deep_like(config: ExperimentConfig, repeat: int, started: float,
                   tempered: bool) -> RunResult:
    x, y_raw, target_transform, x_raw, feature_names = _regression_data(
        config, repeat
    )
    n = len(y_raw)
    train, test = _split_indices(n, config.master_seed, repeat)
    if target_transform is None:
        target_transform = ColumnTransform.standardizing(
            y_raw[train][:, None]
        )
    y_fit = target_transform.apply(y_raw[:, None]).ravel()

    opt = config.optimizer
    fit_config = FitConfig(
        epochs=int(opt.get("epochs", 500)),
        learning_rate=float(opt.get("learning_rate", 1e-3)),
        mc_samples=int(opt.get("mc_samples", 8)),
        optimizer=str(opt.get("optimizer", "adam")),
        eval_samples=int(opt.get("eval_samples", 256)),
        init_center_scale=float(opt.get("init_center_scale", 0.1)),
        init_halfwidth_fraction=float(opt.get("init_halfwidth_fraction", 0.05)),
        batch_size=(
            int(opt["batch_size"]) if opt.get("batch_size") is not None else None
        ),
    )
    draws = int(opt.get("prediction_draws", 100))
    b0 = float(config.prior.get("b0", 1e-5))
    bound_cfg = config.prior.get("magnitude_bound", "sqrt_n")
    bound = (
        math.sqrt(len(train)) if bound_cfg == "sqrt_n" else float(bound_cfg)
    )

    archs = {
        f"k{depth}m{width}": NetArchitecture(
            depth=depth,
            width=width,
            input_dim=x.shape[1],
            magnitude_bound=bound,
        )
        for depth, width in config.model_grid
    }
    if tempered:
        adapter = QuasiRegressionAdapter(
            x[train],
            y_fit[train],
            learning_rate=float(config.kappa),
            variance_proxy=(
                1.0 if config.data.get("source", "builtin") == "builtin" else None
            ),
        )
    else:
        adapter = GaussianRegressionAdapter(x[train], y_fit[train])

    def fitter(mid, arch, idx):
        result = fit_model(
            arch,
            adapter,
            replace(fit_config, seed=(config.master_seed, repeat, idx)),
        )
        return result.state, result.breakdown

    fits, excluded = _fit_grid_with_policy(list(archs.items()), fitter)
    survivor_archs = {mid: archs[mid] for mid in archs if mid in fits}
    collection = network_grid_collection(survivor_archs, len(train), b0=b0)
    combined = combine_posteriors(collection, fits)
    selection = select_model(combined, collection)

    averaged_fit_scale = posterior_mean_predict(
        combined,
        survivor_archs,
        x[test],
        draws=draws,
        rng=np.random.default_rng(
            [config.master_seed, repeat, _STREAM_PREDICT_AVERAGED]
        ),
    )
    selected_fit_scale = posterior_mean_predict(
        combined,
        survivor_archs,
        x[test],
        draws=draws,
        rng=np.random.default_rng(
            [config.master_seed, repeat, _STREAM_PREDICT_SELECTED]
        ),
        model=selection.selected_model,
    )
    averaged_raw = target_transform.invert(
        averaged_fit_scale[:, None]
    ).ravel()
    selected_raw = target_transform.invert(
        selected_fit_scale[:, None]
    ).ravel()

    metrics = {
        "train_size": int(len(train)),
        "test_size": int(len(test)),
        "magnitude_bound": float(bound),
        "prediction_draws": draws,
        "rmse_raw_averaged": _rms(averaged_raw - y_raw[test]),
        "rmse_raw_selected": _rms(selected_raw - y_raw[test]),
        "rmse_standardized_averaged": _rms(
            averaged_fit_scale - y_fit[test]
        ),
        "rmse_standardized_selected": _rms(
            selected_fit_scale - y_fit[test]
        ),
    }
    if tempered:
        metrics["tempering_rate"] = float(config.kappa)
        metrics["tempering_rate_within_valid_range"] = _jsonable(
            adapter.rate_is_valid
        )

    order = np.argsort(x_raw[test][:, 0], kind="stable")
    header = tuple(feature_names) + (
        "target",
        "averaged_prediction",
        "selected_prediction",
    )
    rows = tuple(
        tuple(float(v) for v in x_raw[test][i])
        + (float(y_raw[test][i]), float(averaged_raw[i]), float(selected_raw[i]))
        for i in order
    )
    tables = (PlotTable(name="predictions", header=header, rows=rows),)
    return _assemble(
        config, repeat, collection, combined, excluded, metrics, tables, started
    )


def _run_sbm(config: ExperimentConfig, repeat: int, started: float) -> RunResult:
    data_cfg = config.data
    truth = None
    if data_cfg.get("source", "builtin") == "builtin":
        n = int(data_cfg.get("n", 40))
        data, truth = sample_planted_partition(
            n,
            float(data_cfg.get("within", 0.9)),
            float(data_cfg.get("between", 0.1)),
            seed=[config.master_seed, repeat, _STREAM_DATA],
            communities=int(data_cfg.get("communities", 2)),
        )
    else:
        data = ingest_edge_csv(data_cfg["path"], data_cfg.get("node_count"))

    opt = config.optimizer
    restarts = int(opt.get("restarts", 3))
    iters = int(opt.get("iters", 100))
    b0 = float(config.prior.get("b0", 1.0))

    def fitter(mid, spec, idx):
        result = sbm_fit_restarts(
            data,
            spec,
            seed=[config.master_seed, repeat, idx],
            restarts=restarts,
            iters=iters,
        )
        return result.state, result.breakdown

    items = [(m, SbmModelSpec(community_count=m)) for m in config.model_grid]
    fits, excluded = _fit_grid_with_policy(items, fitter)
    survivors = [m for m, _ in items if m in fits]
    collection = sbm_model_collection(survivors, data.node_count, b0=b0)
    combined = combine_posteriors(collection, fits)
    selection = select_model(combined, collection)

    state = combined.components[selection.selected_model]
    labels = state.hard_labels()
    sizes = np.bincount(labels, minlength=selection.selected_model)
    metrics = {
        "node_count": int(data.node_count),
        "edge_count": int(round(float(np.sum(data.edges)))),
        "community_sizes": [int(s) for s in sizes],
    }
    if truth is not None:
        metrics["label_accuracy"] = label_accuracy(
            labels, truth, max(selection.selected_model,
                               int(data_cfg.get("communities", 2)))
        )
    tables = (
        PlotTable(
            name="communities",
            header=("node", "community"),
            rows=tuple((int(i), int(c)) for i, c in enumerate(labels)),
        ),
    )
    return _assemble(
        config, repeat, collection, combined, excluded, metrics, tables, started
    )


def _run_particle_demo(config: ExperimentConfig, repeat: int, started: float
                       ) -> RunResult:
    data_cfg = config.data
    n = int(data_cfg.get("n", 40))
    dim = int(data_cfg.get("dim", 1))
    if dim < 1 or n < 1:
        raise ConfigError("particle_demo needs n >= 1 and dim >= 1")
    truth = np.asarray(
        data_cfg.get("truth", [0.3] * dim), dtype=float
    ).ravel()
    if truth.shape != (dim,):
        raise ConfigError(f"truth must have length dim={dim}")
    rng = np.random.default_rng([config.master_seed, repeat, _STREAM_DATA])
    y = truth + rng.standard_normal((n, dim))
    y_sq = float(np.sum(y * y))
    y_sum = y.sum(axis=0)
    b0 = float(config.prior.get("b0", 1.0))

    spaces = {}
    for i, (spacing, bound) in enumerate(config.model_grid):
        spaces[f"space{i}"] = DiscretizedSpace.grid(
            float(spacing), float(bound), dim
        )

    def loglik_at(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        quad = (
            y_sq
            - 2.0 * pts @ y_sum
            + n * np.sum(pts * pts, axis=1)
        )
        return -0.5 * quad - 0.5 * n * dim * math.log(2.0 * math.pi)

    collection = ModelCollection.from_complexity(
        tuple(
            (mid, space, math.sqrt(math.log(space.atom_count)))
            for mid, space in spaces.items()
        ),
        scale=math.log(n),
        b0=b0,
    )

    atom_logliks = {}

    def fitter(mid, space, idx):
        result = run_algorithm2(
            space,
            ParticleTarget(loglik=loglik_at),
            q=space.atom_count,
            iterations=1,
            rng=np.random.default_rng([config.master_seed, repeat, idx]),
            learning_rate=0.0,
            init_indices=np.arange(space.atom_count),
        )
        atom_logliks[mid] = loglik_at(space.materialize())
        return result.state, result.breakdown

    fits, excluded = _fit_grid_with_policy(list(spaces.items()), fitter)
    survivor_ids = [mid for mid in spaces if mid in fits]
    if excluded:
        collection = ModelCollection.from_complexity(
            tuple(
                (mid, spaces[mid], math.sqrt(math.log(spaces[mid].atom_count)))
                for mid in survivor_ids
            ),
            scale=math.log(n),
            b0=b0,
        )
    combined = combine_posteriors(collection, fits)
    selection = select_model(combined, collection)

    # brute-force joint posterior over (model, atom) for the TV cross-check
    log_chunks = []
    fitted_chunks = []
    for i, mid in enumerate(survivor_ids):
        space = spaces[mid]
        ll = atom_logliks[mid]
        log_chunks.append(
            collection.log_alpha[i] - math.log(space.atom_count) + ll
        )
        state = fits[mid][0]
        weights = np.zeros(space.atom_count)
        weights[state.center_indices] = state.weights
        fitted_chunks.append(combined.weight(mid) * weights)
    log_joint = np.concatenate(log_chunks)
    exact = np.exp(log_joint - logsumexp(log_joint))
    fitted = np.concatenate(fitted_chunks)
    tv_exact = 0.5 * float(np.sum(np.abs(fitted - exact)))

    # risk-bound demo on the selected model's atoms
    sel_space = spaces[selection.selected_model]
    sel_state = fits[selection.selected_model][0]
    atoms = sel_space.materialize()
    n_d2 = n * np.sum((atoms - truth) ** 2, axis=1)
    post = np.zeros(sel_space.atom_count)
    post[sel_state.center_indices] = sel_state.weights
    bound_value = risk_bound_functional(post, post, n_d2)
    exact_risk = expected_risk(post, n_d2)

    metrics = {
        "sample_size": n,
        "dimension": dim,
        "atom_counts": {
            str(mid): int(spaces[mid].atom_count) for mid in survivor_ids
        },
        "tv_to_exact_posterior": tv_exact,
        "risk_bound": float(bound_value),
        "exact_risk": float(exact_risk),
        "risk_bound_holds": bool(bound_value >= exact_risk - 1e-9),
    }
    mass_rows = []
    for mid in survivor_ids:
        space = spaces[mid]
        state = fits[mid][0]
        gamma_m = combined.weight(mid)
        for pos, atom_idx in enumerate(state.center_indices):
            w = float(state.weights[pos])
            if w > 1e-12:
                coords = space.atom(int(atom_idx))
                mass_rows.append(
                    (str(mid), int(atom_idx))
                    + tuple(float(c) for c in np.atleast_1d(coords))
                    + (gamma_m * w,)
                )
    tables = (
        PlotTable(
            name="posterior_mass",
            header=("model", "atom")
            + tuple(f"coord{j}" for j in range(dim))
            + ("combined_mass",),
            rows=tuple(mass_rows),
        ),
    )
    return _assemble(
        config, repeat, collection, combined, excluded, metrics, tables, started
    )


# ---------------------------------------------------------------------------
# orchestration


def run_single_repeat(config: ExperimentConfig, repeat: int) -> RunResult:
    """One deterministic repeat; every stream is keyed, never shared."""
    if not 0 <= repeat < config.repeats:
        raise ConfigError(
            f"repeat index {repeat} outside [0, {config.repeats})"
        )
    started = time.perf_counter()
    if config.kind == "mixture":
        return _run_mixture(config, repeat, started)
    if config.kind == "deep_regression":
        return _run_deep_like(config, repeat, started, tempered=False)
    if config.kind == "quasi_regression":
        return _run_deep_like(config, repeat, started, tempered=True)
    if config.kind == "sbm":
        return _run_sbm(config, repeat, started)
    return _run_particle_demo(config, repeat, started)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[RunResult]:
    """All repeats, optionally in parallel; results ordered by repeat index.

    Substreams are keyed by (master_seed, repeat, stream), so the results do
    not depend on ``jobs``.
    """
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    repeats = range(config.repeats)
    if jobs == 1 or config.repeats == 1:
        return [run_single_repeat(config, r) for r in repeats]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_single_repeat, config, r) for r in repeats]
        return [f.result() for f in futures]


def _metric_summary(results: Sequence[RunResult]) -> dict:
    """Median/mean/min/max per scalar metric; counts for boolean metrics."""
    summary: dict = {}
    names = sorted({name for r in results for name in r.metrics})
    for name in names:
        values = [r.metrics[name] for r in results if name in r.metrics]
        if all(isinstance(v, bool) for v in values):
            summary[name] = {
                "true_count": sum(values),
                "total": len(values),
            }
        elif all(isinstance(v, (int, float)) and not isinstance(v, bool)
                 for v in values):
            arr = np.asarray(values, dtype=float)
            summary[name] = {
                "median": float(np.median(arr)),
                "mean": float(np.mean(arr)),
                "min": float(np.min(arr)),
                "max": float(np.max(arr)),
            }
    return summary


def run_and_save(config: ExperimentConfig, out_dir, jobs: int = 1
                 ) -> list[Path]:
    """Run all repeats and write one JSON per repeat, plot CSVs, and a summary.

    Returns the written paths; the summary file is always last.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_experiment(config, jobs=jobs)
    written: list[Path] = []
    result_files = []
    plot_files = []
    for r in results:
        name = f"result_repeat{r.repeat_index:03d}.json"
        path = out / name
        path.write_text(r.to_json())
        written.append(path)
        result_files.append(name)
        for table in r.plot_tables:
            csv_name = f"repeat{r.repeat_index:03d}_{table.name}.csv"
            csv_path = out / csv_name
            csv_path.write_text(table.to_csv_text())
            written.append(csv_path)
            plot_files.append(csv_name)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "code_version": CODE_VERSION,
        "kind": config.kind,
        "config": config.to_dict(),
        "repeat_count": len(results),
        "result_files": result_files,
        "plot_files": plot_files,
        "selected_models": [r.selected_model for r in results],
        "metric_summary": _metric_summary(results),
        "wall_clock_seconds": sum(r.wall_clock_seconds for r in results),
    }
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    written.append(summary_path)
    return written


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplayReport:
    """Outcome of recombining a stored result's prior weights and ELBOs."""

    max_abs_gamma_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_gamma_diff <= self.tolerance


def replay_result(path, tolerance: float = 1e-12) -> ReplayReport:
    """Recompute gamma from a stored result file and compare to the stored one.

    The stored log prior weights and per-model objective totals go through
    the same combination step used during the run, so any drift indicates a
    corrupted or hand-edited file.
    """
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read result {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"result {p} is not valid JSON: {exc}") from exc
    try:
        ids = [str(m) for m in raw["model_ids"]]
        log_alpha = [float(raw["log_alpha"][m]) for m in ids]
        stored_gamma = np.asarray(
            [float(raw["gamma"][m]) for m in ids], dtype=float
        )
        breakdowns = {
            m: ElboBreakdown.of(
                float(raw["elbos"][m]["expected_nll"]),
                float(raw["elbos"][m]["kl_to_prior"]),
                mc_samples_used=int(raw["elbos"][m]["mc_samples_used"]),
                mc_seed=(
                    tuple(raw["elbos"][m]["mc_seed"])
                    if isinstance(raw["elbos"][m]["mc_seed"], list)
                    else raw["elbos"][m]["mc_seed"]
                ),
            )
            for m in ids
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"result {p} is missing fields: {exc}") from exc
    collection = ModelCollection.from_log_weights(
        tuple((m, None, 1.0) for m in ids), log_alpha
    )
    combined = combine_posteriors(
        collection, {m: (None, breakdowns[m]) for m in ids}
    )
    diff = float(np.max(np.abs(combined.gamma - stored_gamma)))
    return ReplayReport(max_abs_gamma_diff=diff, tolerance=tolerance)
