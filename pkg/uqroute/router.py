"""Routing between the preference model and the strong judge.

Pairs are scored in both orders and averaged (p antisymmetric, u symmetric).
A pair whose u exceeds the threshold is escalated to the judge and its
verdict replaces the model's reward difference; everything else keeps the
model score. The random baseline escalates the same number of pairs per
batch, chosen uniformly; the adaptive mode escalates a fixed share of each
batch with the highest u.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logit

from uqroute.judge import Judge, JudgePair, NullJudge, run_batch_judge
from uqroute.pref_data import PreferenceDataset
from uqroute.sngp_head import GpHead, predict_batch
from uqroute.utils.config import RouterConfig
from uqroute.utils.errors import InvalidInputError
from uqroute.utils.models import CostLedger, PairScore, RoutedScore, RoutingMode, ScoreSource, Split, Verdict

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_pair_symmetric(head: GpHead, pair_ab, pair_ba) -> PairScore:
    """Swap-averaged score: p = (p_ab - p_ba) / 2, u = (u_ab + u_ba) / 2."""
    # Each ordering is predicted on its own so swapping the arguments reproduces
    # the same raw numbers.
    p_ab, u_ab, g_ab = predict_batch(head, np.asarray(pair_ab, dtype=np.float64)[None, :])
    p_ba, u_ba, g_ba = predict_batch(head, np.asarray(pair_ba, dtype=np.float64)[None, :])
    return symmetric_from_raw(p_ab[0], p_ba[0], u_ab[0], u_ba[0], g_ab[0], g_ba[0])


def symmetric_from_raw(p_ab: float, p_ba: float, u_ab: float, u_ba: float,
                       g_ab: float = 0.0, g_ba: float = 0.0) -> PairScore:
    """Combine the two orderings' raw predictions."""
    return PairScore(p=(p_ab - p_ba) / 2.0, u=(u_ab + u_ba) / 2.0, g=(g_ab - g_ba) / 2.0)


def swap_batch(x: np.ndarray, context_dim: int, item_dim: int) -> np.ndarray:
    """Swap A and B in every row of a batch of pair encodings."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != context_dim + 2 * item_dim:
        raise InvalidInputError(f"expected pair encodings of length {context_dim + 2 * item_dim}")
    ctx = arr[:, :context_dim]
    a = arr[:, context_dim:context_dim + item_dim]
    b = arr[:, context_dim + item_dim:]
    return np.hstack([ctx, b, a])


def score_batch_symmetric(
    head: GpHead,
    x_ab: np.ndarray,
    x_ba: np.ndarray,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Swap-averaged (p, u) for a batch, given both orderings."""
    p_ab, u_ab, _ = predict_batch(head, x_ab, threads=threads)
    p_ba, u_ba, _ = predict_batch(head, x_ba, threads=threads)
    return (p_ab - p_ba) / 2.0, (u_ab + u_ba) / 2.0


# ---------------------------------------------------------------------------
# Verdict mapping
# ---------------------------------------------------------------------------


def map_verdict(verdict: Verdict, epsilon: float, judge_reward: Optional[float] = None) -> float:
    """Reward difference for a judge verdict.

    A_BETTER maps to logit(1 - eps) = ln((1 - eps) / eps), B_BETTER to its
    negative and TIE to 0. With ``judge_reward`` set, the magnitude is that
    fixed value instead.
    """
    if not 0.0 < epsilon < 0.5:
        raise InvalidInputError(f"epsilon must be in (0, 0.5), got {epsilon}")
    magnitude = judge_reward if judge_reward is not None else float(logit(1.0 - epsilon))
    if verdict is Verdict.A_BETTER:
        return magnitude
    if verdict is Verdict.B_BETTER:
        return -magnitude
    return 0.0


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------


class Router:
    """Stateful router: keeps the random-mode RNG and the judge across batches."""

    def __init__(self, config: RouterConfig, judge: Optional[Judge] = None) -> None:
        self.config = config
        self.judge = judge or NullJudge()
        self._rng = np.random.default_rng(config.seed)

    def select(self, u: np.ndarray, ledger: Optional[CostLedger] = None) -> np.ndarray:
        """Boolean mask of the pairs in one batch that go to the judge."""
        u = np.asarray(u, dtype=np.float64)
        mode = self.config.mode
        if mode is RoutingMode.ADAPTIVE:
            n_route = int(round(self.config.call_budget * len(u)))
            mask = np.zeros(len(u), dtype=bool)
            if n_route:
                order = np.argsort(-u, kind="stable")[:n_route]
                mask[order] = True
                if ledger is not None:
                    ledger.effective_threshold = float(u[order[-1]])
            return mask
        mask = u > self.config.threshold
        if mode is RoutingMode.RANDOM:
            n_route = int(mask.sum())
            mask = np.zeros(len(u), dtype=bool)
            mask[self._rng.choice(len(u), size=n_route, replace=False)] = True
        return mask

    def resolve(
        self,
        p: np.ndarray,
        u: np.ndarray,
        mask: np.ndarray,
        pairs: Sequence[JudgePair],
        ledger: CostLedger,
    ) -> list[RoutedScore]:
        """Send masked pairs to the judge and merge verdicts with model scores."""
        routed_idx = np.flatnonzero(mask)
        results: list[RoutedScore] = [
            RoutedScore(p_tilde=float(p[i]), source=ScoreSource.PM, u=float(u[i])) for i in range(len(p))
        ]
        if len(routed_idx) == 0:
            return results
        batch = run_batch_judge(self.judge, [pairs[i] for i in routed_idx])
        ledger.merge(batch.ledger)
        ledger.routed += len(routed_idx)
        for i, outcome in zip(routed_idx, batch.outcomes):
            if outcome.ok:
                results[i] = RoutedScore(
                    p_tilde=map_verdict(outcome.verdict, self.config.epsilon, self.config.judge_reward),
                    source=ScoreSource.JUDGE,
                    u=float(u[i]),
                    verdict=outcome.verdict,
                )
            else:
                results[i] = RoutedScore(p_tilde=float(p[i]), source=ScoreSource.PM_FALLBACK, u=float(u[i]))
        return results

    def route_batch(
        self,
        head: GpHead,
        x_pairs: np.ndarray,
        pair_ids: Sequence[str],
        context_dim: int,
        item_dim: int,
        threads: int = 1,
        ledger: Optional[CostLedger] = None,
    ) -> tuple[list[RoutedScore], CostLedger]:
        """Score, route and judge a set of ordered pairs.

        Routing decisions are taken per chunk of ``config.batch_size`` pairs,
        in input order.
        """
        ledger = ledger if ledger is not None else CostLedger()
        x = np.asarray(x_pairs, dtype=np.float64)
        if len(x) != len(pair_ids):
            raise InvalidInputError("x_pairs and pair_ids differ in length")
        if len(x) == 0:
            return [], ledger

        start = time.perf_counter()
        p, u = score_batch_symmetric(head, x, swap_batch(x, context_dim, item_dim), threads=threads)
        ledger.add_wall_time("scoring", time.perf_counter() - start)
        ledger.comparisons += len(x)
        ledger.pm_evals += len(x)

        results: list[RoutedScore] = []
        size = self.config.batch_size
        for lo in range(0, len(x), size):
            hi = min(lo + size, len(x))
            mask = self.select(u[lo:hi], ledger)
            pairs = [
                JudgePair.from_x_pair(pair_ids[i], x[i], context_dim, item_dim) if mask[i - lo] else None
                for i in range(lo, hi)
            ]
            results.extend(self.resolve(p[lo:hi], u[lo:hi], mask, pairs, ledger))
        logger.debug(
            "Routed %d/%d pairs (%d judged, %d fallbacks)",
            ledger.routed, ledger.comparisons, ledger.judge_calls, ledger.fallbacks,
        )
        return results, ledger


def route(config: RouterConfig, score: PairScore, judge: Optional[Judge], pair: JudgePair) -> RoutedScore:
    """Route a single pair: model score when u <= threshold, otherwise the judge.

    Judge failures fall back to the model score and are never raised.
    """
    router = Router(config, judge)
    ledger = CostLedger(comparisons=1, pm_evals=1)
    mask = router.select(np.array([score.u]), ledger)
    return router.resolve(np.array([score.p]), np.array([score.u]), mask, [pair], ledger)[0]


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


def sign_credit(predicted: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1 for matching signs, 0 for opposite, 0.5 when either side is an exact tie."""
    pred_sign = np.sign(predicted)
    true_sign = np.sign(truth)
    credit = (pred_sign == true_sign).astype(np.float64)
    credit[(pred_sign == 0) | (true_sign == 0)] = 0.5
    return credit


@dataclass
class AccuracyReport:
    """Routed accuracy per split and overall, with the run's ledger."""

    per_split: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    overall: float = float("nan")
    ledger: CostLedger = field(default_factory=CostLedger)
    credits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    routed: list[RoutedScore] = field(default_factory=list)


def true_deltas(dataset: PreferenceDataset) -> np.ndarray:
    """Ground-truth reward differences; the dataset must not be redacted."""
    if any(r.true_delta is None for r in dataset.records):
        raise InvalidInputError("evaluation needs true_delta on every record (dataset is redacted)")
    return np.array([r.true_delta for r in dataset.records], dtype=np.float64)


def evaluate_accuracy(
    head: GpHead,
    router_config: RouterConfig,
    eval_dataset: PreferenceDataset,
    judge: Optional[Judge],
    threads: int = 1,
) -> AccuracyReport:
    """Routed sign accuracy against the ground truth, per split and overall."""
    deltas = true_deltas(eval_dataset)
    router = Router(router_config, judge)
    x = np.array([r.x_pair for r in eval_dataset.records], dtype=np.float64).reshape(len(deltas), -1)
    routed, ledger = router.route_batch(
        head,
        x,
        [r.id for r in eval_dataset.records],
        eval_dataset.manifest.context_dim,
        eval_dataset.manifest.item_dim,
        threads=threads,
    )
    credits = sign_credit(np.array([r.p_tilde for r in routed]), deltas)
    report = AccuracyReport(ledger=ledger, credits=credits, routed=routed)
    splits = np.array([r.split.value for r in eval_dataset.records])
    for split in Split:
        selected = splits == split.value
        if selected.any():
            report.per_split[split.value] = float(credits[selected].mean())
            report.counts[split.value] = int(selected.sum())
    if len(credits):
        report.overall = float(credits.mean())
    logger.info(
        "Accuracy (threshold=%g, mode=%s): overall %.4f %s, calls %d (%.1f%%), fallbacks %d",
        router_config.threshold, router_config.mode.value, report.overall,
        {k: round(v, 4) for k, v in report.per_split.items()},
        ledger.judge_calls, 100.0 * ledger.calls_ratio, ledger.fallbacks,
    )
    return report
