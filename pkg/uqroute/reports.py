"""Report builders behind the harness commands.

Every report is a CSV with a fixed header and fixed row order:

- sweep: routed accuracy and judge calls per (threshold, mode, split)
- quantile report: PM accuracy per uncertainty decile plus the Spearman
  correlation between u and per-pair correctness
- uncertainty gap: u statistics per split and per |p| bin, plus a Welch test
  of the OOD - ID gap
- eval: PM-only accuracy per split with u summaries
- alignment curve
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from uqroute.judge import Judge
from uqroute.pref_data import PreferenceDataset
from uqroute.rloo import CurvePoint
from uqroute.router import evaluate_accuracy, score_batch_symmetric, sign_credit, swap_batch, true_deltas
from uqroute.sngp_head import GpHead
from uqroute.utils.config import RouterConfig, SweepConfig
from uqroute.utils.csv_io import write_csv
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import RoutingMode, ScoreSource, Split

logger = logging.getLogger(__name__)

MIN_QUANTILE_PAIRS = 100
N_DECILES = 10
N_GAP_BINS = 10
ALL_SPLITS = "all"

SWEEP_HEADER = ("split", "threshold", "mode", "calls", "calls_ratio", "accuracy", "wall_time")
QUANTILE_HEADER = ("decile", "count", "u_min", "u_max", "u_mean", "accuracy")
SUMMARY_HEADER = ("statistic", "value")
GAP_HEADER = ("section", "split", "bin", "bin_lo", "bin_hi", "count", "u_mean", "u_std")
EVAL_HEADER = ("split", "count", "accuracy", "u_mean", "u_std", "u_max")
CURVE_HEADER = ("step", "mean_true_reward", "kl", "judge_calls", "fallbacks")


def _pm_scores(head: GpHead, dataset: PreferenceDataset, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Swap-averaged (p, u) for every record, no routing."""
    if len(dataset) == 0:
        return np.zeros(0), np.zeros(0)
    x = np.array([r.x_pair for r in dataset.records], dtype=np.float64)
    x_ba = swap_batch(x, dataset.manifest.context_dim, dataset.manifest.item_dim)
    return score_batch_symmetric(head, x, x_ba, threads=threads)


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    if len(values) == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    split: str
    threshold: float
    mode: RoutingMode
    calls: int
    calls_ratio: float
    accuracy: float
    wall_time: float

    def as_row(self) -> tuple:
        return (self.split, self.threshold, self.mode, self.calls, self.calls_ratio, self.accuracy, self.wall_time)


def sweep_cell(
    head: GpHead,
    router_config: RouterConfig,
    dataset: PreferenceDataset,
    judge: Optional[Judge],
    threads: int,
) -> list[SweepRow]:
    report = evaluate_accuracy(head, router_config, dataset, judge, threads=threads)
    threshold = router_config.threshold
    if router_config.mode is RoutingMode.ADAPTIVE and report.ledger.effective_threshold is not None:
        threshold = report.ledger.effective_threshold
    judged = np.array([r.source is ScoreSource.JUDGE for r in report.routed])
    splits = np.array([r.split.value for r in dataset.records])
    wall = report.ledger.total_wall_time
    rows = []
    for split in [s.value for s in Split] + [ALL_SPLITS]:
        selected = np.ones(len(splits), dtype=bool) if split == ALL_SPLITS else splits == split
        n = int(selected.sum())
        if n == 0:
            continue
        calls = int(judged[selected].sum())
        rows.append(SweepRow(split, threshold, router_config.mode, calls, calls / n,
                             float(report.credits[selected].mean()), wall))
    return rows


def cmd_sweep(
    head: GpHead,
    dataset: PreferenceDataset,
    base_router: RouterConfig,
    sweep: SweepConfig,
    judge_factory: Callable[[], Optional[Judge]],
    out_path: Optional[Path] = None,
    threads: int = 1,
) -> list[SweepRow]:
    """Routed accuracy for every threshold x mode cell (and every call budget).

    ``judge_factory`` builds a fresh judge per cell so ledgers never mix.
    """
    if len(dataset) == 0:
        raise InvalidInputError("sweep needs a non-empty evaluation dataset")
    rows: list[SweepRow] = []
    for threshold in sweep.thresholds:
        for mode in sweep.modes:
            if mode is RoutingMode.ADAPTIVE:
                continue
            cell = base_router.model_copy(update={"threshold": threshold, "mode": mode})
            rows.extend(sweep_cell(head, cell, dataset, judge_factory(), threads))
    for budget in sweep.call_budgets:
        cell = base_router.model_copy(update={"mode": RoutingMode.ADAPTIVE, "call_budget": budget})
        rows.extend(sweep_cell(head, cell, dataset, judge_factory(), threads))
    if out_path is not None:
        write_csv(out_path, SWEEP_HEADER, (r.as_row() for r in rows))
    logger.info("Sweep finished: %d rows", len(rows))
    return rows


# ---------------------------------------------------------------------------
# Quantile report
# ---------------------------------------------------------------------------


@dataclass
class QuantileReport:
    rows: list[tuple] = field(default_factory=list)
    spearman_rho: float = float("nan")
    p_value: float = float("nan")
    n: int = 0


def spearman_or_nan(u: np.ndarray, credits: np.ndarray) -> tuple[float, float]:
    """Spearman correlation; NaN (with a warning) when either side is constant."""
    if np.ptp(u) == 0.0 or np.ptp(credits) == 0.0:
        logger.warning("Spearman correlation undefined: constant input, reporting NaN")
        return float("nan"), float("nan")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = stats.spearmanr(u, credits)
    return float(result.statistic), float(result.pvalue)


def quantile_report(head: GpHead, dataset: PreferenceDataset, threads: int = 1) -> QuantileReport:
    """PM accuracy per uncertainty decile and the u-vs-correctness correlation.

    Raises:
        InvalidInputError: With fewer than 100 pairs or a redacted dataset.
    """
    if len(dataset) < MIN_QUANTILE_PAIRS:
        raise InvalidInputError(
            f"quantile report needs at least {MIN_QUANTILE_PAIRS} pairs, got {len(dataset)}"
        )
    deltas = true_deltas(dataset)
    p, u = _pm_scores(head, dataset, threads)
    credits = sign_credit(p, deltas)
    order = np.argsort(u, kind="stable")
    report = QuantileReport(n=len(u))
    for decile, idx in enumerate(np.array_split(order, N_DECILES), start=1):
        bucket_u = u[idx]
        report.rows.append((decile, len(idx), float(bucket_u.min()), float(bucket_u.max()),
                            float(bucket_u.mean()), float(credits[idx].mean())))
    report.spearman_rho, report.p_value = spearman_or_nan(u, credits)
    logger.info("Quantile report on %d pairs: Spearman rho=%.4f (p=%.3g)", report.n, report.spearman_rho,
                report.p_value)
    return report


def write_quantile_report(report: QuantileReport, out_path: Path) -> Path:
    write_csv(out_path, QUANTILE_HEADER, report.rows)
    write_csv(
        _summary_path(out_path),
        SUMMARY_HEADER,
        [("n", report.n), ("spearman_rho", report.spearman_rho), ("p_value", report.p_value)],
    )
    return out_path


def _summary_path(path: Path) -> Path:
    return path.with_name(path.stem + "_summary" + path.suffix)


# ---------------------------------------------------------------------------
# Uncertainty gap
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    rows: list[tuple] = field(default_factory=list)
    mean_u_id: float = float("nan")
    mean_u_ood: float = float("nan")
    gap: float = float("nan")
    t_stat: float = float("nan")
    p_value: float = float("nan")


def bin_indices(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index per value for equal-width edges; the last edge is inclusive."""
    n_bins = len(edges) - 1
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)


def uncertainty_gap(
    head: GpHead,
    id_dataset: PreferenceDataset,
    ood_dataset: PreferenceDataset,
    threads: int = 1,
) -> GapReport:
    """u per split and per |p| bin, with a Welch test of mean u(OOD) - mean u(ID)."""
    if len(id_dataset) == 0 or len(ood_dataset) == 0:
        raise InvalidInputError("uncertainty gap needs non-empty ID and OOD datasets")
    p_id, u_id = _pm_scores(head, id_dataset, threads)
    p_ood, u_ood = _pm_scores(head, ood_dataset, threads)
    report = GapReport()
    for name, u in (("id", u_id), ("ood", u_ood)):
        mean, std = _mean_std(u)
        report.rows.append(("split", name, "", "", "", len(u), mean, std))

    abs_p = np.abs(np.concatenate([p_id, p_ood]))
    edges = np.histogram_bin_edges(abs_p, bins=N_GAP_BINS)
    for name, p, u in (("id", p_id, u_id), ("ood", p_ood, u_ood)):
        bins = bin_indices(np.abs(p), edges)
        for b in range(N_GAP_BINS):
            selected = bins == b
            mean, std = _mean_std(u[selected])
            report.rows.append(("bin", name, b, float(edges[b]), float(edges[b + 1]), int(selected.sum()),
                                mean, std))

    report.mean_u_id = float(u_id.mean())
    report.mean_u_ood = float(u_ood.mean())
    report.gap = report.mean_u_ood - report.mean_u_id
    if len(u_id) > 1 and len(u_ood) > 1 and (np.ptp(u_id) > 0 or np.ptp(u_ood) > 0):
        result = stats.ttest_ind(u_ood, u_id, equal_var=False)
        report.t_stat, report.p_value = float(result.statistic), float(result.pvalue)
    else:
        logger.warning("Welch test undefined for these samples, reporting NaN")
    report.rows.append(("overall", "all", "", "", "", len(u_id) + len(u_ood),
                        float(np.concatenate([u_id, u_ood]).mean()), float(np.concatenate([u_id, u_ood]).std())))
    logger.info("Uncertainty gap: mean u ID %.4f, OOD %.4f, gap %.4f (p=%.3g)",
                report.mean_u_id, report.mean_u_ood, report.gap, report.p_value)
    return report


def write_gap_report(report: GapReport, out_path: Path) -> Path:
    write_csv(out_path, GAP_HEADER, report.rows)
    write_csv(
        _summary_path(out_path),
        SUMMARY_HEADER,
        [
            ("mean_u_id", report.mean_u_id),
            ("mean_u_ood", report.mean_u_ood),
            ("gap", report.gap),
            ("t_stat", report.t_stat),
            ("p_value", report.p_value),
        ],
    )
    return out_path


# ---------------------------------------------------------------------------
# PM-only evaluation and alignment curve
# ---------------------------------------------------------------------------


def evaluate_pm(head: GpHead, dataset: PreferenceDataset, threads: int = 1) -> list[tuple]:
    """No-routing accuracy per split and overall with u summaries."""
    deltas = true_deltas(dataset)
    p, u = _pm_scores(head, dataset, threads)
    credits = sign_credit(p, deltas)
    splits = np.array([r.split.value for r in dataset.records])
    rows = []
    for split in [s.value for s in Split] + [ALL_SPLITS]:
        selected = np.ones(len(splits), dtype=bool) if split == ALL_SPLITS else splits == split
        if not selected.any():
            continue
        mean, std = _mean_std(u[selected])
        rows.append((split, int(selected.sum()), float(credits[selected].mean()), mean, std,
                     float(u[selected].max())))
    return rows


def write_curve(curve: Sequence[CurvePoint], out_path: Path) -> Path:
    return write_csv(
        out_path,
        CURVE_HEADER,
        ((c.step, c.mean_true_reward, c.kl, c.judge_calls, c.fallbacks) for c in curve),
    )
