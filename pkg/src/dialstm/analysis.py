"""Diagnostics over recorded attention maps and training gradients.

Covers: pairwise Pearson correlation of attention maps across blocks of a
stage, random-forest importance of earlier hidden states for later ones,
absolute-gradient statistics at stage outputs, and shared-versus-per-block
parameter budget comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from . import tensor as T
from .backbone import NetworkConfig, build
from .data import Dataset, normalize_images
from .errors import ConfigError, NumericOverflowError, ShapeError
from .layers import count_weights
from .trace import AttentionTrace


# ---------------------------------------------------------------------------
# Pearson correlation of attention maps
# ---------------------------------------------------------------------------

def pearson(u, v) -> float | None:
    """Centered correlation; None marks the undefined constant-vector case."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"pearson: incompatible shapes {u.shape} vs {v.shape}")
    if u.size < 2:
        raise ShapeError("pearson: vectors must have length >= 2")
    du = u - u.mean()
    dv = v - v.mean()
    nu = np.sqrt((du * du).sum())
    nv = np.sqrt((dv * dv).sum())
    if nu == 0.0 or nv == 0.0:
        return None
    return float((du * dv).sum() / (nu * nv))


@dataclass
class PairCorrelation:
    stage: int
    block_i: int
    block_j: int
    coefficients: np.ndarray  # per-sample, defined ones only
    excluded: int  # constant-vector samples

    @property
    def mean(self) -> float:
        return float(self.coefficients.mean()) if self.coefficients.size else math.nan

    @property
    def median(self) -> float:
        return float(np.median(self.coefficients)) if self.coefficients.size else math.nan


@dataclass
class StageCorrelation:
    stage: int
    blocks: list[int]
    pairs: list[PairCorrelation]

    def matrix(self) -> np.ndarray:
        """Symmetric matrix of pair means, 1.0 on the diagonal."""
        t = len(self.blocks)
        mat = np.eye(t)
        index = {b: k for k, b in enumerate(self.blocks)}
        for pair in self.pairs:
            i, j = index[pair.block_i], index[pair.block_j]
            mat[i, j] = mat[j, i] = pair.mean
        return mat

    @property
    def grand_mean(self) -> float:
        means = [p.mean for p in self.pairs if not math.isnan(p.mean)]
        return float(np.mean(means)) if means else math.nan


@dataclass
class CorrelationReport:
    stages: dict[int, StageCorrelation] = field(default_factory=dict)

    @property
    def grand_mean(self) -> float:
        means = [s.grand_mean for s in self.stages.values()
                 if not math.isnan(s.grand_mean)]
        return float(np.mean(means)) if means else math.nan


def correlation_report(trace: AttentionTrace,
                       sample_cap: int = 256) -> CorrelationReport:
    """Per-sample Pearson coefficients for every within-stage block pair."""
    report = CorrelationReport()
    samples = trace.samples()[:sample_cap]
    for stage in trace.stages():
        blocks = trace.blocks(stage)
        if len(blocks) < 2:
            raise ConfigError(f"stage {stage} has {len(blocks)} traced blocks; "
                              "correlation needs at least 2")
        pairs = []
        for a in range(len(blocks)):
            for b in range(a + 1, len(blocks)):
                coeffs = []
                excluded = 0
                for s in samples:
                    r = pearson(trace.vector(stage, blocks[a], s),
                                trace.vector(stage, blocks[b], s))
                    if r is None:
                        excluded += 1
                    else:
                        coeffs.append(r)
                pairs.append(PairCorrelation(stage, blocks[a], blocks[b],
                                             np.array(coeffs), excluded))
        report.stages[stage] = StageCorrelation(stage, blocks, pairs)
    return report


def write_correlation_csv(report: CorrelationReport, path) -> None:
    lines = ["stage,block_i,block_j,mean,median,samples,excluded"]
    for stage in sorted(report.stages):
        for p in report.stages[stage].pairs:
            lines.append(f"{stage},{p.block_i},{p.block_j},{p.mean!r},"
                         f"{p.median!r},{p.coefficients.size},{p.excluded}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def write_scatter_csv(trace: AttentionTrace, stage: int, block_i: int,
                      block_j: int, path, sample_cap: int = 64) -> None:
    """Raw (h_i, h_j) pairs for plotting one block pair externally."""
    lines = ["sample,channel,value_i,value_j"]
    for s in trace.samples()[:sample_cap]:
        u = trace.vector(stage, block_i, s)
        v = trace.vector(stage, block_j, s)
        for ch in range(u.size):
            lines.append(f"{s},{ch},{float(u[ch])!r},{float(v[ch])!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# random-forest importance of earlier hidden states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_samples_leaf: int = 2
    feature_subsample: str = "sqrt"
    seed: int = 0


def forest_fit_importance(inputs: np.ndarray, targets: np.ndarray,
                          groups: np.ndarray,
                          cfg: ForestConfig = ForestConfig()) -> np.ndarray | None:
    """Importance of source-layer groups for a multi-channel target.

    Fits one variance-reduction forest per target channel, accumulates
    per-column importances, sums them within each source-layer group, and
    normalizes to 1. Returns None when every target channel is constant
    (the undefined case).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    groups = np.asarray(groups)
    if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
        raise ShapeError(f"forest: incompatible shapes {inputs.shape} vs "
                         f"{targets.shape}")
    if inputs.shape[0] < 10:
        raise ConfigError(f"forest needs >= 10 samples, got {inputs.shape[0]}")
    if groups.shape != (inputs.shape[1],):
        raise ShapeError("groups must label each input column")

    column_importance = np.zeros(inputs.shape[1])
    fitted = 0
    for k in range(targets.shape[1]):
        tk = targets[:, k]
        if np.var(tk) == 0.0:
            continue
        forest = RandomForestRegressor(
            n_estimators=cfg.n_trees, max_depth=cfg.max_depth,
            min_samples_leaf=cfg.min_samples_leaf,
            max_features=cfg.feature_subsample, random_state=cfg.seed + k,
            n_jobs=1)
        forest.fit(inputs, tk)
        column_importance += forest.feature_importances_
        fitted += 1
    if fitted == 0:
        return None

    unique = np.unique(groups)
    grouped = np.array([column_importance[groups == g].sum() for g in unique])
    total = grouped.sum()
    if total == 0.0:
        return None
    return grouped / total


@dataclass
class ImportanceReport:
    # per stage: rows[t] is the normalized importance of blocks < t for block t
    stages: dict[int, list[np.ndarray | None]] = field(default_factory=dict)


def importance_report(trace: AttentionTrace,
                      cfg: ForestConfig = ForestConfig()) -> ImportanceReport:
    """Fig-8-style rows: how much each earlier block explains a later one."""
    report = ImportanceReport()
    samples = trace.samples()
    for stage in trace.stages():
        blocks = trace.blocks(stage)
        if len(blocks) < 2:
            raise ConfigError(f"stage {stage} has {len(blocks)} traced blocks; "
                              "importance needs at least 2")
        rows: list[np.ndarray | None] = []
        for t in range(1, len(blocks)):
            inputs = np.stack([
                np.concatenate([trace.vector(stage, blocks[n], s)
                                for n in range(t)])
                for s in samples])
            targets = np.stack([trace.vector(stage, blocks[t], s)
                                for s in samples])
            width = trace.stage_widths[stage]
            groups = np.repeat(np.arange(t), width)
            rows.append(forest_fit_importance(inputs, targets, groups,
                                              replace(cfg, seed=cfg.seed + 1000 * t)))
        report.stages[stage] = rows
    return report


def write_importance_csv(report: ImportanceReport, path) -> None:
    lines = ["stage,target_block,source_block,importance"]
    for stage in sorted(report.stages):
        for t, row in enumerate(report.stages[stage], start=1):
            if row is None:
                lines.append(f"{stage},{t},-1,undefined")
                continue
            for n, value in enumerate(row):
                lines.append(f"{stage},{t},{n},{float(value)!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gradient statistics at stage outputs
# ---------------------------------------------------------------------------

HIST_BINS = 64
HIST_EDGES = np.logspace(-12.0, 4.0, HIST_BINS + 1)


@dataclass(frozen=True)
class GradientStatsConfig:
    batches: int = 4
    batch_size: int = 64
    seed: int = 0


@dataclass
class StageGradientStats:
    stage: int
    observed: int = 0  # finite |g| entries
    sum_abs: float = 0.0
    sum_sq: float = 0.0
    counts: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))
    underflow: int = 0  # |g| below the first edge (includes exact zeros)
    overflow: int = 0  # |g| above the last edge
    nonfinite: int = 0

    @property
    def mean_abs(self) -> float:
        return self.sum_abs / self.observed if self.observed else math.nan

    @property
    def variance(self) -> float:
        if not self.observed:
            return math.nan
        m = self.mean_abs
        return self.sum_sq / self.observed - m * m

    @property
    def total_entries(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow + self.nonfinite

    def add(self, grads: np.ndarray) -> None:
        flat = np.abs(grads.reshape(-1))
        finite = np.isfinite(flat)
        self.nonfinite += int((~finite).sum())
        flat = flat[finite]
        self.observed += flat.size
        self.sum_abs += float(flat.sum())
        self.sum_sq += float((flat * flat).sum())
        self.underflow += int((flat < HIST_EDGES[0]).sum())
        self.overflow += int((flat > HIST_EDGES[-1]).sum())
        inside = flat[(flat >= HIST_EDGES[0]) & (flat <= HIST_EDGES[-1])]
        hist, _ = np.histogram(inside, bins=HIST_EDGES)
        self.counts += hist


def gradient_stats(model, dataset: Dataset,
                   cfg: GradientStatsConfig = GradientStatsConfig(),
                   no_skip: bool = False) -> list[StageGradientStats]:
    """|gradient| distribution at each stage output over sampled batches.

    Runs forward+backward in train mode on seed-chosen batches; BatchNorm
    running statistics are snapshotted and restored, so the analysis leaves
    the model untouched. Exploding forward passes are skipped and counted.
    """
    rng = np.random.default_rng([cfg.seed, 23])
    stats = [StageGradientStats(stage=s) for s in range(len(model.stages))]
    snapshot = {name: buf.copy() for name, buf in model.buffers().items()}
    params = list(model.parameters().values())
    try:
        for _ in range(cfg.batches):
            idx = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)),
                             replace=False)
            x = normalize_images(dataset.images[idx], dataset.mean, dataset.std)
            labels = dataset.labels[idx]
            for p in params:
                p.grad = None
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    logits, stage_outs = model.forward(
                        x, training=True, collect_stage_outputs=True,
                        use_skip_override=False if no_skip else None)
                    loss = T.softmax_cross_entropy(logits, labels)
                    T.backward(loss)
            except NumericOverflowError:
                T.active_graph().clear()
                continue
            for s, out in enumerate(stage_outs):
                if out.grad is not None:
                    stats[s].add(out.grad)
    finally:
        for name, buf in model.buffers().items():
            buf[...] = snapshot[name]
        for p in params:
            p.grad = None
    return stats


def write_gradient_stats_csv(stats: list[StageGradientStats], summary_path,
                             hist_path_fn) -> None:
    """Summary CSV plus one histogram CSV per stage (path from hist_path_fn)."""
    lines = ["stage,observed,mean_abs,variance,underflow,overflow,nonfinite"]
    for st in stats:
        lines.append(f"{st.stage},{st.observed},{st.mean_abs!r},{st.variance!r},"
                     f"{st.underflow},{st.overflow},{st.nonfinite}")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    for st in stats:
        rows = ["bin,edge_lo,edge_hi,count"]
        for b in range(HIST_BINS):
            rows.append(f"{b},{float(HIST_EDGES[b])!r},{float(HIST_EDGES[b + 1])!r},{st.counts[b]}")
        rows.append(f"underflow,,{float(HIST_EDGES[0])!r},{st.underflow}")
        rows.append(f"overflow,{float(HIST_EDGES[-1])!r},,{st.overflow}")
        rows.append(f"nonfinite,,,{st.nonfinite}")
        with open(hist_path_fn(st.stage), "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# shared-versus-per-block parameter budgets
# ---------------------------------------------------------------------------

@dataclass
class StageBudgetRow:
    stage: int
    width: int
    blocks: int
    shared_weights: int
    per_block_weights: int


@dataclass
class BudgetComparison:
    backbone_weights: int
    backbone_affine: int
    rows: list[StageBudgetRow]

    @property
    def backbone_total(self) -> int:
        return self.backbone_weights + self.backbone_affine

    @property
    def shared_weights(self) -> int:
        return sum(r.shared_weights for r in self.rows)

    @property
    def per_block_weights(self) -> int:
        return sum(r.per_block_weights for r in self.rows)

    @property
    def reduction_fraction(self) -> float:
        if self.per_block_weights == 0:
            return 0.0
        return 1.0 - self.shared_weights / self.per_block_weights


def budget_report(config: NetworkConfig, seed: int = 0) -> BudgetComparison:
    """Backbone budget plus attention weights under both sharing modes.

    The per-block figure for the recurrent unit is the hypothetical
    blocks-per-stage multiple (that mode is rejected at build time).
    """
    model = build(replace_attention_sharing(config, "shared"), seed)
    budget = count_weights(model.components())
    rows = []
    for s, spec in enumerate(config.stages):
        unit = model.shared_attention[s]
        if unit is None:
            shared = 0
        else:
            shared = sum(layer.weight_count() for layer in unit.layers())
        rows.append(StageBudgetRow(
            stage=s, width=config.stage_width(s), blocks=spec.blocks,
            shared_weights=shared, per_block_weights=shared * spec.blocks))
    return BudgetComparison(backbone_weights=budget.weights("backbone"),
                            backbone_affine=budget.affine("backbone"),
                            rows=rows)


def replace_attention_sharing(config: NetworkConfig, sharing: str) -> NetworkConfig:
    if config.attention.kind == "none":
        return config
    return replace(config, attention=replace(config.attention, sharing=sharing))
