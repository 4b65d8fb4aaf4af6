"""Tracing pattern information back to embedding regions.

Pipeline: collect per-node activation value sets per pattern, drop nodes whose
value sets look identically distributed across every pattern pair
(two-sample Kolmogorov-Smirnov), bin the survivors' distributions into a
common 100-bin grid, and score minimally different pattern pairs by cosine
distance between the binned distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable
from .grammar import MinimalPair, SentenceRecord
from .model import MaskedEncoderModel

DEFAULT_BINS = 100
DEFAULT_ALPHA = 0.05


@dataclass
class ValueCollection:
    """Per-pattern activation matrices: pattern -> (n_sentences, n_nodes)."""

    values: dict[str, np.ndarray]
    n_nodes: int

    def node_values(self, pattern: str, node: int) -> np.ndarray:
        return self.values[pattern][:, node]

    @property
    def patterns(self) -> list[str]:
        return sorted(self.values)


def collect_values(
    model: MaskedEncoderModel,
    records: list[SentenceRecord],
    embeddings: EmbeddingTable,
) -> ValueCollection:
    """Evaluation-mode CNN output node values, grouped by sentence pattern."""
    by_pattern: dict[str, list[int]] = {}
    for rec in records:
        by_pattern.setdefault(rec.pattern, []).append(rec.id)
    values = {}
    for pattern, ids in by_pattern.items():
        values[pattern] = model.conv_node_values(embeddings.rows(ids))
    return ValueCollection(values, model.config.conv.nodes)


# ---------------------------------------------------------------------------
# two-sample Kolmogorov-Smirnov

@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float


def kolmogorov_sf(lam: float) -> float:
    """Two-sided Kolmogorov survival function Q(lam) = 2 sum (-1)^(j-1) exp(-2 j^2 lam^2)."""
    if lam <= 0:
        return 1.0
    total = 0.0
    for j in range(1, 101):
        term = (-1.0) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-16:
            break
    return min(max(2.0 * total, 0.0), 1.0)


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


def ks_two_sample(a, b) -> KSResult:
    """Sup-distance of the two empirical CDFs with the asymptotic two-sided
    p-value at effective size n_e = |a||b|/(|a|+|b|),
    lambda = (sqrt(n_e) + 0.12 + 0.11/sqrt(n_e)) * D."""
    a, b = np.asarray(a), np.asarray(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"need at least 2 values per sample, got {len(a)} and {len(b)}")
    d = ks_statistic(a, b)
    n_e = len(a) * len(b) / (len(a) + len(b))
    lam = (math.sqrt(n_e) + 0.12 + 0.11 / math.sqrt(n_e)) * d
    return KSResult(statistic=d, pvalue=kolmogorov_sf(lam))


def ks_exact_pvalue(a, b) -> float:
    """Exact small-sample P(D >= observed) by lattice-path counting.

    Counts orderings of the pooled sample whose running ECDF gap stays below
    the observed statistic; assumes no ties across samples.  Exponential-free
    but O(|a|*|b|), so only sensible for small inputs.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    d = ks_statistic(a, b)
    tol = 1e-12
    # paths from (0,0) to (n,m); step right = next pooled value from a, up = from b.
    # P(D < d) counts paths whose ECDF gap stays strictly below d everywhere.
    counts = np.zeros((n + 1, m + 1))
    counts[0, 0] = 1.0
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 and j == 0:
                continue
            if abs(i / n - j / m) >= d - tol:
                continue
            counts[i, j] = (counts[i - 1, j] if i else 0.0) + (counts[i, j - 1] if j else 0.0)
    return 1.0 - counts[n, m] / math.comb(n + m, n)


@dataclass
class FilterResult:
    kept: list[int]
    removed: list[int]
    min_pvalue: np.ndarray
    alpha: float
    mode: str


def filter_nodes(
    collection: ValueCollection,
    alpha: float = DEFAULT_ALPHA,
    mode: str = "pairwise",
) -> FilterResult:
    """Remove nodes whose value sets never reject the same-distribution null.

    pairwise: a node survives if any unordered pattern pair rejects at alpha.
    omnibus: a node survives if any single pattern rejects against the pooled
    values of all other patterns.
    """
    if mode not in ("pairwise", "omnibus"):
        raise ValueError(f"unknown filter mode {mode!r}")
    patterns = collection.patterns
    min_p = np.ones(collection.n_nodes)
    for node in range(collection.n_nodes):
        per_pattern = [collection.node_values(p, node) for p in patterns]
        if mode == "pairwise":
            for i in range(len(patterns)):
                for j in range(i + 1, len(patterns)):
                    p = ks_two_sample(per_pattern[i], per_pattern[j]).pvalue
                    if p < min_p[node]:
                        min_p[node] = p
        else:
            for i in range(len(patterns)):
                rest = np.concatenate([v for j, v in enumerate(per_pattern) if j != i])
                p = ks_two_sample(per_pattern[i], rest).pvalue
                if p < min_p[node]:
                    min_p[node] = p
    kept = [n for n in range(collection.n_nodes) if min_p[n] <= alpha]
    removed = [n for n in range(collection.n_nodes) if min_p[n] > alpha]
    return FilterResult(kept, removed, min_p, alpha, mode)


# ---------------------------------------------------------------------------
# binned distributions and pair scores

def bin_histogram(values, lo: float, hi: float, bins: int = DEFAULT_BINS):
    """Counts over uniform left-closed bins (last bin right-closed).

    A degenerate range (hi == lo) puts all mass in bin 0 and sets the flag.
    """
    values = np.asarray(values, dtype=np.float64)
    counts = np.zeros(bins, dtype=np.int64)
    if hi < lo:
        raise ValueError(f"bad range [{lo}, {hi}]")
    if hi == lo:
        counts[0] = len(values)
        return counts, True
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    np.add.at(counts, idx, 1)
    return counts, False


def pair_score(hist1, hist2) -> tuple[float, bool]:
    """1 - cosine(hist1, hist2); zero-vector histograms score 1, flagged."""
    h1, h2 = np.asarray(hist1, dtype=np.float64), np.asarray(hist2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"histogram length mismatch {h1.shape} vs {h2.shape}")
    n1, n2 = np.linalg.norm(h1), np.linalg.norm(h2)
    if n1 == 0 or n2 == 0:
        return 1.0, True
    return float(1.0 - h1 @ h2 / (n1 * n2)), False


@dataclass(frozen=True)
class NodeScore:
    node: int
    channel: int
    region: int
    latent_unit: int
    pair_kind: str
    pattern1: str
    pattern2: str
    score: float
    flagged: bool


@dataclass
class LocalizationReport:
    scores: list[NodeScore]
    filter_result: FilterResult
    bins: int
    region_shapes: list[tuple[int, int]]

    def mean_score_by_region(self, kind: str | None = None) -> dict[int, float]:
        by_region: dict[int, list[float]] = {}
        for s in self.scores:
            if kind is None or s.pair_kind == kind:
                by_region.setdefault(s.region, []).append(s.score)
        return {r: float(np.mean(v)) for r, v in by_region.items()}

    def top_nodes(self, kind: str, limit: int = 20) -> list[int]:
        """Node ids ranked by their mean score over pairs of one kind."""
        per_node: dict[int, list[float]] = {}
        for s in self.scores:
            if s.pair_kind == kind:
                per_node.setdefault(s.node, []).append(s.score)
        ranked = sorted(per_node, key=lambda n: -float(np.mean(per_node[n])))
        return ranked[:limit]


def score_pairs(
    collection: ValueCollection,
    kept_nodes: list[int],
    pairs: list[MinimalPair],
    assignment: np.ndarray,
    conv_spec,
    bins: int = DEFAULT_BINS,
) -> list[NodeScore]:
    """Cosine-distance scores for every kept node x requested pattern pair.

    Bin ranges are per node, over the union of that node's values across all
    patterns, matching the shared-binning convention of the analysis.
    """
    patterns = collection.patterns
    scores: list[NodeScore] = []
    stacks = {p: collection.values[p] for p in patterns}
    for node in kept_nodes:
        all_values = np.concatenate([stacks[p][:, node] for p in patterns])
        lo, hi = float(all_values.min()), float(all_values.max())
        hists = {}
        for p in patterns:
            hists[p], _ = bin_histogram(stacks[p][:, node], lo, hi, bins)
        for pair in pairs:
            if pair.p1 not in hists or pair.p2 not in hists:
                continue
            value, flagged = pair_score(hists[pair.p1], hists[pair.p2])
            scores.append(
                NodeScore(
                    node=node,
                    channel=conv_spec.node_channel(node),
                    region=conv_spec.node_region(node),
                    latent_unit=int(assignment[node]),
                    pair_kind=pair.kind,
                    pattern1=pair.p1,
                    pattern2=pair.p2,
                    score=value,
                    flagged=flagged,
                )
            )
    return scores


def build_report(
    model: MaskedEncoderModel,
    collection: ValueCollection,
    pairs: list[MinimalPair],
    alpha: float = DEFAULT_ALPHA,
    bins: int = DEFAULT_BINS,
    filter_mode: str = "pairwise",
) -> LocalizationReport:
    spec = model.config.conv
    filter_result = filter_nodes(collection, alpha, filter_mode)
    assignment = model.hardened_assignment()
    scores = score_pairs(collection, filter_result.kept, pairs, assignment, spec, bins)
    shapes = [spec.region_shape(r) for r in range(spec.n_regions)]
    return LocalizationReport(scores, filter_result, bins, shapes)


# ---------------------------------------------------------------------------
# report files

def write_score_table(report: LocalizationReport, path, conv_spec) -> None:
    """Summary CSV: node, channel, region row/col, latent unit, pair, score."""
    gw = conv_spec.grid[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("node_id,channel,region_row,region_col,latent_unit,pair_kind,pattern1,pattern2,score\n")
        for s in report.scores:
            gi, gj = divmod(s.region, gw)
            fh.write(
                f"{s.node},{s.channel},{gi},{gj},{s.latent_unit},"
                f"{s.pair_kind},{s.pattern1},{s.pattern2},{s.score:.10f}\n"
            )


def write_filter_table(report: LocalizationReport, path) -> None:
    fr = report.filter_result
    removed = set(fr.removed)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# alpha={fr.alpha} mode={fr.mode}\n")
        fh.write("node_id,removed,min_p_value\n")
        for node in range(len(fr.min_pvalue)):
            fh.write(f"{node},{int(node in removed)},{fr.min_pvalue[node]:.10f}\n")


def write_aggregate_table(report: LocalizationReport, path, conv_spec) -> None:
    """Plot-ready means per (region, channel, latent unit, pair kind)."""
    agg: dict[tuple[int, int, int, str], list[float]] = {}
    for s in report.scores:
        agg.setdefault((s.region, s.channel, s.latent_unit, s.pair_kind), []).append(s.score)
    gw = conv_spec.grid[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("region,region_row,region_col,channel,latent_unit,pair_kind,mean_score,n_pairs\n")
        for (region, channel, unit, kind), vals in sorted(agg.items()):
            gi, gj = divmod(region, gw)
            fh.write(
                f"{region},{gi},{gj},{channel},{unit},{kind},{float(np.mean(vals)):.10f},{len(vals)}\n"
            )
