"""Strong-judge abstraction: simulated oracle, remote HTTP client and batching.

The simulated judge reads the ground truth and answers with the correct sign
with probability q, or TIE inside the band |delta| < delta_tie. Each pair's
randomness comes from a hash of (seed, pair id), so verdicts do not depend on
call order.

The remote judge POSTs {id, context, response_a, response_b} and expects
{id, label} with label 1 (A better), 2 (B better) or 0 (tie). Requests share
one sliding-window rate limiter, at most ``max_in_flight`` are outstanding,
and transient failures (5xx, 429, transport errors) are retried with
exponential backoff via tenacity.
"""

import asyncio
import hashlib
import json
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx
import numpy as np
from pydantic import ValidationError
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from uqroute.pref_data import GroundTruth, encode_pair, split_pair
from uqroute.utils.config import JUDGE_API_KEY_ENV, RemoteJudgeConfig, SimJudgeConfig, get_secret
from uqroute.utils.errors import InvalidInputError, JudgeProtocolError, JudgeUnavailableError
from uqroute.utils.models import CostLedger, JudgeReply, JudgeRequest, Verdict
from uqroute.utils.rate_limiter import SlidingWindowRateLimiter

logger = logging.getLogger(__name__)

USER_AGENT = "uqroute-judge-client/1.0"
TRANSIENT_STATUSES = {429, 500, 502, 503, 504}

SIM_JUDGE_PRESETS: dict[str, dict] = {
    # Reasoning-judge accuracy on the hard subset of a reward benchmark.
    "r1-hard": {"accuracy": 0.789},
    "perfect": {"accuracy": 1.0, "tie_threshold": 0.0},
}


def sim_judge_preset(config: SimJudgeConfig, preset: str) -> SimJudgeConfig:
    """Copy of ``config`` with a named judge preset applied."""
    if preset not in SIM_JUDGE_PRESETS:
        raise InvalidInputError(f"unknown judge preset {preset!r}; choose from {sorted(SIM_JUDGE_PRESETS)}")
    return config.model_copy(update=SIM_JUDGE_PRESETS[preset])


@dataclass(frozen=True)
class JudgePair:
    """One ordered pair sent to a judge."""

    pair_id: str
    context: np.ndarray
    response_a: np.ndarray
    response_b: np.ndarray

    @classmethod
    def from_x_pair(cls, pair_id: str, x_pair, context_dim: int, item_dim: int) -> "JudgePair":
        ctx, a, b = split_pair(x_pair, context_dim, item_dim)
        return cls(pair_id, ctx, a, b)

    @property
    def x_pair(self) -> np.ndarray:
        return encode_pair(self.context, self.response_a, self.response_b)

    def to_request(self) -> JudgeRequest:
        """Wire request; latents travel as opaque JSON strings."""
        return JudgeRequest(
            id=self.pair_id,
            context=json.dumps(np.asarray(self.context).tolist()),
            response_a=json.dumps(np.asarray(self.response_a).tolist()),
            response_b=json.dumps(np.asarray(self.response_b).tolist()),
        )

    @classmethod
    def from_request(cls, request: JudgeRequest) -> "JudgePair":
        """Inverse of ``to_request`` for servers that understand the latent encoding."""
        try:
            ctx, a, b = (np.asarray(json.loads(s), dtype=np.float64)
                         for s in (request.context, request.response_a, request.response_b))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"request {request.id} does not carry latent vectors") from exc
        return cls(request.id, ctx.reshape(-1), a.reshape(-1), b.reshape(-1))


@dataclass
class JudgeOutcome:
    """Per-item result of a batch: a verdict or the error that replaced it."""

    pair_id: str
    verdict: Optional[Verdict] = None
    error: Optional[str] = None
    attempts: int = 1
    latency_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return self.verdict is not None


class Judge(ABC):
    """A strong judge that returns a verdict for an ordered pair."""

    name: str = "judge"

    @abstractmethod
    async def judge(self, pair: JudgePair) -> Verdict:
        """Verdict for one pair; raises JudgeUnavailableError or JudgeProtocolError."""
        ...

    def simulated_latency_ms(self, pair: JudgePair) -> float:
        """Latency charged on top of measured time (zero for real judges)."""
        return 0.0

    def attempts_for(self, pair_id: str) -> int:
        return 1

    def clear_attempts(self) -> None:
        """Forget per-pair attempt counts once a batch has been accounted."""
        return None

    async def aclose(self) -> None:
        """Release network resources, if any."""
        return None


# ---------------------------------------------------------------------------
# Simulated judge
# ---------------------------------------------------------------------------


def _pair_rng(seed: int, pair_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{pair_id}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class SimJudge(Judge):
    """Ground-truth oracle with symmetric sign flips and a tie band."""

    name = "sim"

    def __init__(self, config: SimJudgeConfig, truth: GroundTruth) -> None:
        self.config = config
        self.truth = truth

    def judge_sync(self, pair: JudgePair) -> Verdict:
        """Deterministic verdict given the seed and pair id.

        Raises:
            InvalidInputError: If the pair id is empty or the latents do not
                match the ground truth's dims.
        """
        if not pair.pair_id:
            raise InvalidInputError("pair id must be non-empty")
        delta = self.truth.delta(pair.context, pair.response_a, pair.response_b)
        draw = _pair_rng(self.config.seed, pair.pair_id).random()
        if abs(delta) < self.config.tie_threshold or delta == 0.0:
            return Verdict.TIE
        correct = Verdict.A_BETTER if delta > 0 else Verdict.B_BETTER
        return correct if draw < self.config.accuracy else correct.flipped()

    async def judge(self, pair: JudgePair) -> Verdict:
        return self.judge_sync(pair)

    def simulated_latency_ms(self, pair: JudgePair) -> float:
        if self.config.latency_ms_mean <= 0:
            return 0.0
        rng = _pair_rng(self.config.seed, pair.pair_id)
        rng.random()
        return float(rng.exponential(self.config.latency_ms_mean))


def judge_sim(config: SimJudgeConfig, truth: GroundTruth, pair: JudgePair) -> Verdict:
    """Functional form of ``SimJudge.judge_sync``."""
    return SimJudge(config, truth).judge_sync(pair)


class NullJudge(Judge):
    """Stand-in when no judge is configured: every call is unavailable."""

    name = "none"

    async def judge(self, pair: JudgePair) -> Verdict:
        raise JudgeUnavailableError("no judge configured", attempts=0)

    def attempts_for(self, pair_id: str) -> int:
        return 0


# ---------------------------------------------------------------------------
# Remote judge
# ---------------------------------------------------------------------------


class _TransientJudgeError(Exception):
    """Retryable failure: 5xx, 429 or a transport error."""


async def _close_stale_client(client: httpx.AsyncClient) -> None:
    try:
        await client.aclose()
    except (RuntimeError, httpx.HTTPError) as exc:
        logger.debug("Could not close judge client from a previous event loop: %s", exc)


class RemoteJudge(Judge):
    """HTTP judge client with rate limiting, bounded concurrency and retries."""

    name = "remote"

    def __init__(
        self,
        config: RemoteJudgeConfig,
        api_key: Optional[str] = None,
        limiter: Optional[SlidingWindowRateLimiter] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ) -> None:
        self.config = config
        self.api_key = api_key if api_key is not None else get_secret(JUDGE_API_KEY_ENV)
        self.limiter = limiter or SlidingWindowRateLimiter(config.requests_per_minute, config.window_seconds)
        self._transport = transport
        self._client: Optional[httpx.AsyncClient] = None
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self.attempts: dict[str, int] = {}

    async def _bind_loop(self) -> None:
        """Client and semaphore for the running loop; a client from an older loop is closed."""
        loop = asyncio.get_running_loop()
        if self._loop is loop:
            return
        stale = self._client
        headers = {"User-Agent": USER_AGENT}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.AsyncClient(
            headers=headers,
            timeout=self.config.timeout_ms / 1000.0,
            transport=self._transport,
        )
        self._semaphore = asyncio.Semaphore(self.config.max_in_flight)
        self._loop = loop
        if stale is not None:
            await _close_stale_client(stale)

    async def _post_once(self, request: JudgeRequest) -> Verdict:
        self.attempts[request.id] = self.attempts.get(request.id, 0) + 1
        async with self._semaphore:
            await self.limiter.acquire()
            try:
                response = await self._client.post(self.config.endpoint, json=request.model_dump())
            except httpx.TransportError as exc:
                logger.warning("Judge transport error for %s: %s", request.id, exc)
                raise _TransientJudgeError(str(exc)) from exc
        if response.status_code in TRANSIENT_STATUSES:
            logger.warning("Judge returned HTTP %d for %s, retrying", response.status_code, request.id)
            raise _TransientJudgeError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise JudgeProtocolError(f"judge rejected {request.id} with HTTP {response.status_code}")
        try:
            reply = JudgeReply.model_validate(response.json())
        except (ValueError, ValidationError) as exc:
            raise JudgeProtocolError(f"malformed judge reply for {request.id}: {exc}") from exc
        if reply.id != request.id:
            raise JudgeProtocolError(f"reply id {reply.id!r} does not match request {request.id!r}")
        return Verdict.from_label(reply.label)

    async def judge(self, pair: JudgePair) -> Verdict:
        """POST one pair, retrying transient failures.

        Raises:
            JudgeUnavailableError: Retries exhausted.
            JudgeProtocolError: Malformed reply or non-retryable 4xx.
        """
        await self._bind_loop()
        request = pair.to_request()
        try:
            async for attempt in AsyncRetrying(
                retry=retry_if_exception_type(_TransientJudgeError),
                stop=stop_after_attempt(self.config.max_attempts),
                wait=wait_exponential(multiplier=self.config.backoff_base_s, max=self.config.backoff_max_s),
                reraise=True,
            ):
                with attempt:
                    return await self._post_once(request)
        except _TransientJudgeError as exc:
            attempts = self.attempts.get(request.id, 0)
            raise JudgeUnavailableError(
                f"judge unavailable for {request.id} after {attempts} attempts: {exc}", attempts=attempts
            ) from exc
        raise JudgeUnavailableError(f"judge unavailable for {request.id}")

    def attempts_for(self, pair_id: str) -> int:
        return self.attempts.get(pair_id, 0)

    def clear_attempts(self) -> None:
        self.attempts.clear()

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
        self._client = None
        self._semaphore = None
        self._loop = None


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    """Outcomes in input order plus the cost of producing them."""

    outcomes: list[JudgeOutcome] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)


async def batch_judge(judge: Judge, pairs: Sequence[JudgePair]) -> BatchResult:
    """Judge every pair concurrently; results come back in input order.

    Failures are reported per item and never raised.
    """
    if not pairs:
        return BatchResult()
    start = time.perf_counter()

    async def _one(pair: JudgePair) -> JudgeOutcome:
        t0 = time.perf_counter()
        try:
            verdict = await judge.judge(pair)
            error = None
        except (JudgeUnavailableError, JudgeProtocolError) as exc:
            verdict, error = None, str(exc)
        latency = (time.perf_counter() - t0) * 1000.0 + judge.simulated_latency_ms(pair)
        return JudgeOutcome(pair.pair_id, verdict, error, judge.attempts_for(pair.pair_id), latency)

    outcomes = list(await asyncio.gather(*(_one(p) for p in pairs)))
    ledger = CostLedger(
        judge_calls=sum(o.ok for o in outcomes),
        fallbacks=sum(not o.ok for o in outcomes),
        judge_attempts=sum(o.attempts for o in outcomes),
        judge_latency_ms=sum(o.latency_ms for o in outcomes),
    )
    judge.clear_attempts()
    ledger.add_wall_time("judging", time.perf_counter() - start)
    if ledger.fallbacks:
        logger.warning("%d of %d judge calls failed", ledger.fallbacks, len(pairs))
    return BatchResult(outcomes, ledger)


def run_batch_judge(judge: Judge, pairs: Sequence[JudgePair]) -> BatchResult:
    """Synchronous wrapper around ``batch_judge`` for library callers."""
    if not pairs:
        return BatchResult()

    async def _run() -> BatchResult:
        try:
            return await batch_judge(judge, pairs)
        finally:
            await judge.aclose()

    return asyncio.run(_run())
