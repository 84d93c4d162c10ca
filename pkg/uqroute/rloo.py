"""RLOO advantages from routed pairwise reward differences and a toy alignment loop.

For each prompt, K sampled responses are scored in all K(K-1) orders, the
matrices are symmetrized (P antisymmetric, U symmetric) and then routed entry
by entry on the symmetrized U. Row means of the routed matrix are the
leave-one-out advantages

    A_i = 1/(K-1) * sum_{j != i} P~[i, j]

which feed the KL-regularized loss

    L = -(1/K) sum_i A_i log pi(y_i | x) + beta * KL(pi(.|x) || pi_ref(.|x))

The policy is a bilinear softmax over a fixed pool of M candidates per
context, so the KL is computed exactly over the pool.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from uqroute.judge import JudgePair
from uqroute.pref_data import GroundTruth, PromptSet, encode_pair
from uqroute.router import Router
from uqroute.sngp_head import GpHead, predict_batch
from uqroute.utils.config import AlignConfig
from uqroute.utils.errors import DivergenceError, InvalidInputError, StateError
from uqroute.utils.models import CostLedger, PromptRecord

logger = logging.getLogger(__name__)

POLICY_INIT_SCALE = 0.1


# ---------------------------------------------------------------------------
# Preference matrices
# ---------------------------------------------------------------------------


@dataclass
class PreferenceMatrix:
    """Routed K x K reward differences, symmetrized uncertainties and routing mask.

    The diagonal of U is unused and left at zero.
    """

    P: np.ndarray
    U: np.ndarray
    routed_mask: np.ndarray
    group_id: str

    @property
    def K(self) -> int:
        return self.P.shape[0]


@dataclass
class ResponseGroup:
    """A context with K responses drawn from its candidate pool."""

    group_id: str
    context: np.ndarray
    responses: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def symmetrize(P: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P <- (P - P^T) / 2 and U <- (U + U^T) / 2."""
    return (P - P.T) / 2.0, (U + U.T) / 2.0


def _ordered_pairs(K: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(K) for j in range(K) if i != j]


def build_matrices_batch(
    head: GpHead,
    router: Router,
    groups: Sequence[ResponseGroup],
    ledger: Optional[CostLedger] = None,
    threads: int = 1,
    id_prefix: str = "",
) -> list[PreferenceMatrix]:
    """Score, symmetrize and route every group of a batch together.

    All ordered pairs of all groups go through one prediction call and all
    upper-triangle entries through one routing decision, so judge calls for
    the whole batch run concurrently. Judge pair ids are
    ``<group_id>:<id_prefix><a>-<b>`` where a and b are pool indices when the
    group carries them, positions otherwise.
    """
    ledger = ledger if ledger is not None else CostLedger()
    if not groups:
        return []
    rows = []
    for group in groups:
        K = len(group.responses)
        if K < 2:
            raise InvalidInputError(f"group {group.group_id} has {K} responses, need at least 2")
        rows.extend(encode_pair(group.context, group.responses[i], group.responses[j])
                    for i, j in _ordered_pairs(K))

    start = time.perf_counter()
    p_all, u_all, _ = predict_batch(head, np.vstack(rows), threads=threads)
    ledger.add_wall_time("scoring", time.perf_counter() - start)

    sym: list[tuple[np.ndarray, np.ndarray]] = []
    upper_p, upper_u, pairs, owners = [], [], [], []
    offset = 0
    for g, group in enumerate(groups):
        K = len(group.responses)
        P = np.zeros((K, K))
        U = np.zeros((K, K))
        for n, (i, j) in enumerate(_ordered_pairs(K)):
            P[i, j] = p_all[offset + n]
            U[i, j] = u_all[offset + n]
        offset += K * (K - 1)
        P, U = symmetrize(P, U)
        sym.append((P, U))
        labels = group.indices if len(group.indices) == K else np.arange(K)
        for i in range(K):
            for j in range(i + 1, K):
                upper_p.append(P[i, j])
                upper_u.append(U[i, j])
                owners.append((g, i, j))
                pairs.append(JudgePair(
                    f"{group.group_id}:{id_prefix}{labels[i]}-{labels[j]}",
                    group.context,
                    group.responses[i],
                    group.responses[j],
                ))

    upper_u_arr = np.array(upper_u)
    ledger.comparisons += len(upper_u)
    ledger.pm_evals += len(upper_u)
    mask = router.select(upper_u_arr, ledger)
    routed = router.resolve(np.array(upper_p), upper_u_arr, mask, pairs, ledger)

    matrices = []
    for g, group in enumerate(groups):
        P, U = sym[g]
        K = len(group.responses)
        matrices.append(PreferenceMatrix(P=np.zeros((K, K)), U=U, routed_mask=np.zeros((K, K), dtype=bool),
                                         group_id=group.group_id))
    for (g, i, j), score, routed_flag in zip(owners, routed, mask):
        m = matrices[g]
        m.P[i, j] = score.p_tilde
        m.P[j, i] = -score.p_tilde
        m.routed_mask[i, j] = m.routed_mask[j, i] = bool(routed_flag)
    return matrices


def build_matrices(
    head: GpHead,
    router: Router,
    context: np.ndarray,
    responses: np.ndarray,
    group_id: str = "g0",
    ledger: Optional[CostLedger] = None,
) -> PreferenceMatrix:
    """Routed preference matrix for one group of K responses."""
    group = ResponseGroup(group_id, np.asarray(context, dtype=np.float64), np.asarray(responses, dtype=np.float64))
    return build_matrices_batch(head, router, [group], ledger)[0]


def advantages(P_tilde) -> np.ndarray:
    """Leave-one-out advantages as row means of an antisymmetric matrix."""
    P = P_tilde.P if isinstance(P_tilde, PreferenceMatrix) else np.asarray(P_tilde, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {P.shape}")
    K = P.shape[0]
    if K < 2:
        raise InvalidInputError("advantages need at least 2 responses")
    off_diag = P.sum(axis=1) - np.diag(P)
    return off_diag / (K - 1)


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


class ToyPolicy:
    """Bilinear softmax policy over a candidate pool.

    logit(y_m | x) = [x; 1]^T theta y_m with theta of shape
    (context_dim + 1, item_dim). ``reference_theta`` is a frozen copy taken at
    construction.
    """

    def __init__(self, theta: np.ndarray, reference_theta: Optional[np.ndarray] = None) -> None:
        self.theta = np.array(theta, dtype=np.float64)
        ref = self.theta if reference_theta is None else reference_theta
        self.reference_theta = np.array(ref, dtype=np.float64)
        self.reference_theta.flags.writeable = False
        if self.reference_theta.shape != self.theta.shape:
            raise InvalidInputError("reference_theta must match theta's shape")

    @classmethod
    def initialize(cls, context_dim: int, item_dim: int, seed: int = 0) -> "ToyPolicy":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, POLICY_INIT_SCALE, size=(context_dim + 1, item_dim)))

    @property
    def context_dim(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def item_dim(self) -> int:
        return self.theta.shape[1]

    def _augmented(self, context) -> np.ndarray:
        ctx = np.asarray(context, dtype=np.float64).reshape(-1)
        if ctx.shape != (self.context_dim,):
            raise InvalidInputError(f"expected context of length {self.context_dim}")
        return np.append(ctx, 1.0)

    def logits(self, context, candidates, theta: Optional[np.ndarray] = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return np.asarray(candidates, dtype=np.float64) @ (theta.T @ self._augmented(context))

    def log_probs(self, context, candidates, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return log_softmax(self.logits(context, candidates, theta))

    def probs(self, context, candidates, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return softmax(self.logits(context, candidates, theta))

    def kl(self, context, candidates, theta: Optional[np.ndarray] = None) -> float:
        """Exact KL(pi || pi_ref) over the pool."""
        logp = self.log_probs(context, candidates, theta)
        logq = self.log_probs(context, candidates, self.reference_theta)
        return float(np.exp(logp) @ (logp - logq))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class PromptBatchItem:
    """One prompt of an RLOO batch: pool, sampled indices and their advantages."""

    context: np.ndarray
    candidates: np.ndarray
    indices: np.ndarray
    advantages: np.ndarray
    old_log_probs: Optional[np.ndarray] = None


def rloo_loss_and_grad(
    policy: ToyPolicy,
    items: Sequence[PromptBatchItem],
    kl_beta: float,
    clip_ratio: Optional[float] = None,
    theta: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Mean RLOO loss over prompts and its gradient w.r.t. theta.

    Without ``clip_ratio`` the policy term is -(1/K) sum_i A_i log pi(y_i).
    With it, the PPO-style surrogate -(1/K) sum_i min(r_i A_i, clip(r_i) A_i)
    is used, r_i being the ratio to ``old_log_probs``.
    """
    theta = policy.theta if theta is None else theta
    if not items:
        return 0.0, np.zeros_like(theta)
    total = 0.0
    grad = np.zeros_like(theta)
    for item in items:
        c_aug = policy._augmented(item.context)
        logp = policy.log_probs(item.context, item.candidates, theta)
        logq = policy.log_probs(item.context, item.candidates, policy.reference_theta)
        pi = np.exp(logp)
        K = len(item.indices)
        adv = np.asarray(item.advantages, dtype=np.float64)

        grad_logits = np.zeros_like(pi)
        if clip_ratio is None:
            total += -float(adv @ logp[item.indices]) / K
            np.add.at(grad_logits, item.indices, -adv / K)
            grad_logits += (adv.sum() / K) * pi
        else:
            old = item.old_log_probs if item.old_log_probs is not None else logp[item.indices]
            ratio = np.exp(logp[item.indices] - old)
            clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
            surrogate = np.minimum(ratio * adv, clipped * adv)
            total += -float(surrogate.sum()) / K
            # Gradient flows only where the unclipped term is the active minimum.
            active = ratio * adv <= clipped * adv
            weights = np.where(active, ratio * adv, 0.0) / K
            for w, m in zip(weights, item.indices):
                grad_logits[m] -= w
                grad_logits += w * pi

        kl = float(pi @ (logp - logq))
        total += kl_beta * kl
        grad_logits += kl_beta * pi * (logp - logq - kl)
        grad += np.outer(c_aug, item.candidates.T @ grad_logits)
    n = len(items)
    return total / n, grad / n


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    groups: int
    judge_calls: int
    fallbacks: int


def sample_groups(
    policy: ToyPolicy,
    prompts: Sequence[PromptRecord],
    K: int,
    rng: np.random.Generator,
) -> list[ResponseGroup]:
    """Draw K distinct candidates per prompt from the current policy."""
    groups = []
    for prompt in prompts:
        pool = np.asarray(prompt.candidates, dtype=np.float64)
        if K > len(pool):
            raise InvalidInputError(f"K={K} exceeds the pool size {len(pool)} of prompt {prompt.id}")
        probs = policy.probs(prompt.context, pool)
        idx = rng.choice(len(pool), size=K, replace=False, p=probs)
        groups.append(ResponseGroup(prompt.id, np.asarray(prompt.context, dtype=np.float64), pool[idx], idx))
    return groups


def rloo_step(
    policy: ToyPolicy,
    prompts: Sequence[PromptRecord],
    head: GpHead,
    router: Router,
    config: AlignConfig,
    rng: np.random.Generator,
    ledger: Optional[CostLedger] = None,
    threads: int = 1,
    step: int = 0,
) -> StepResult:
    """Sample, score, route, compute advantages and update theta in place.

    ``step`` tags the judge pair ids so no two steps share one.

    Raises:
        StateError: If the head has no covariance.
        DivergenceError: If the loss is non-finite.
    """
    if head.covariance is None:
        raise StateError("alignment needs a finalized head (run compute_covariance)")
    ledger = ledger if ledger is not None else CostLedger()
    calls_before, fallbacks_before = ledger.judge_calls, ledger.fallbacks

    groups = sample_groups(policy, prompts, config.K, rng)
    matrices = build_matrices_batch(head, router, groups, ledger, threads=threads, id_prefix=f"s{step}:")
    items = []
    for prompt, group, matrix in zip(prompts, groups, matrices):
        pool = np.asarray(prompt.candidates, dtype=np.float64)
        logp = policy.log_probs(group.context, pool)
        items.append(PromptBatchItem(
            context=group.context,
            candidates=pool,
            indices=group.indices,
            advantages=advantages(matrix),
            old_log_probs=logp[group.indices],
        ))

    first_loss = float("nan")
    for inner in range(config.inner_steps):
        loss, grad = rloo_loss_and_grad(policy, items, config.kl_beta, config.clip_ratio)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(
                "RLOO loss became non-finite",
                {"inner_step": inner, "theta_norm": float(np.linalg.norm(policy.theta))},
            )
        if inner == 0:
            first_loss = loss
        policy.theta = policy.theta - config.learning_rate * grad
    return StepResult(
        loss=first_loss,
        groups=len(groups),
        judge_calls=ledger.judge_calls - calls_before,
        fallbacks=ledger.fallbacks - fallbacks_before,
    )


@dataclass
class CurvePoint:
    """One row of the alignment curve."""

    step: int
    mean_true_reward: float
    kl: float
    judge_calls: int
    fallbacks: int
    loss: float = float("nan")


@dataclass
class AlignResult:
    policy: ToyPolicy
    curve: list[CurvePoint]
    ledger: CostLedger


def expected_true_reward(policy: ToyPolicy, prompts: Sequence[PromptRecord], truth: GroundTruth) -> float:
    """E_x E_{y ~ pi}[r*(x, y)] over the prompt set, exact over each pool."""
    total = 0.0
    for prompt in prompts:
        pool = np.asarray(prompt.candidates, dtype=np.float64)
        total += float(policy.probs(prompt.context, pool) @ truth.reward(prompt.context, pool))
    return total / max(len(prompts), 1)


def mean_kl(policy: ToyPolicy, prompts: Sequence[PromptRecord]) -> float:
    return float(np.mean([policy.kl(p.context, p.candidates) for p in prompts])) if prompts else 0.0


def align(
    config: AlignConfig,
    prompts: PromptSet,
    head: GpHead,
    judge,
    truth: Optional[GroundTruth] = None,
    policy: Optional[ToyPolicy] = None,
    threads: int = 1,
) -> AlignResult:
    """Run ``config.epochs`` passes of RLOO steps over the prompt set.

    The curve has one point before training (step 0) and one after every
    step; judge calls and fallbacks are cumulative.
    """
    manifest = prompts.manifest
    if head.input_dim != manifest.context_dim + 2 * manifest.item_dim:
        raise InvalidInputError(
            f"head expects pair encodings of length {head.input_dim}, prompts imply "
            f"{manifest.context_dim + 2 * manifest.item_dim}"
        )
    if config.K > manifest.pool_size:
        raise InvalidInputError(f"K={config.K} exceeds the candidate pool size {manifest.pool_size}")
    truth = truth or prompts.truth()
    policy = policy or ToyPolicy.initialize(manifest.context_dim, manifest.item_dim, config.seed)
    router = Router(config.router, judge)
    rng = np.random.default_rng(config.seed)
    ledger = CostLedger()
    records = list(prompts.records)

    curve = [CurvePoint(0, expected_true_reward(policy, records, truth), mean_kl(policy, records), 0, 0)]
    logger.info(
        "Aligning on %d prompts: K=%d, beta=%g, lr=%g, %d epochs, threshold=%g (%s)",
        len(records), config.K, config.kl_beta, config.learning_rate, config.epochs,
        config.router.threshold, config.router.mode.value,
    )
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for lo in range(0, len(records), config.batch_size):
            batch = [records[i] for i in order[lo:lo + config.batch_size]]
            step += 1
            result = rloo_step(policy, batch, head, router, config, rng, ledger, threads=threads, step=step)
            point = CurvePoint(
                step,
                expected_true_reward(policy, records, truth),
                mean_kl(policy, records),
                ledger.judge_calls,
                ledger.fallbacks,
                result.loss,
            )
            curve.append(point)
            logger.debug("Step %d: loss %.4f, reward %.4f, KL %.5f", step, result.loss,
                         point.mean_true_reward, point.kl)
        logger.info(
            "Epoch %d/%d: reward %.4f, KL %.5f, judge calls %d",
            epoch + 1, config.epochs, curve[-1].mean_true_reward, curve[-1].kl, ledger.judge_calls,
        )
    return AlignResult(policy, curve, ledger)
