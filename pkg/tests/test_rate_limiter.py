"""Tests for the sliding-window rate limiter, run on a virtual clock."""

import asyncio

import pytest

from uqroute.utils.rate_limiter import SlidingWindowRateLimiter


class VirtualClock:
    """Monotonic clock that only moves when someone sleeps on it."""

    def __init__(self) -> None:
        self.now = 0.0

    def __call__(self) -> float:
        return self.now

    async def sleep(self, seconds: float) -> None:
        self.now += max(seconds, 0.0)
        await asyncio.sleep(0)


def _limiter(max_requests=200, window=60.0, record_history=True):
    clock = VirtualClock()
    limiter = SlidingWindowRateLimiter(
        max_requests, window, clock=clock, sleep=clock.sleep, record_history=record_history,
    )
    return limiter, clock


# ── Window compliance ───────────────────────────────────────────────────────


class TestSlidingWindowRateLimiter:
    @pytest.mark.asyncio
    async def test_under_limit_never_waits(self):
        limiter, clock = _limiter()
        for _ in range(92):
            await limiter.acquire()
        assert clock.now == 0.0
        assert limiter.throttled == 0

    @pytest.mark.asyncio
    async def test_request_after_full_window_waits(self):
        limiter, clock = _limiter()
        for _ in range(200):
            await limiter.acquire()
        assert limiter.available == 0
        spent_at = await limiter.acquire()
        assert spent_at == pytest.approx(60.0)
        assert limiter.throttled == 1

    @pytest.mark.asyncio
    async def test_large_batch_spans_a_window(self):
        limiter, _ = _limiter()
        for _ in range(276):
            await limiter.acquire()
        assert max(limiter.send_times) - min(limiter.send_times) >= 60.0
        assert limiter.max_in_any_window() <= 200

    @pytest.mark.asyncio
    async def test_concurrent_acquires_respect_window(self):
        limiter, _ = _limiter(max_requests=50, window=10.0)
        await asyncio.gather(*(limiter.acquire() for _ in range(180)))
        assert len(limiter.send_times) == 180
        assert limiter.max_in_any_window() <= 50
        assert limiter.send_times == sorted(limiter.send_times)

    @pytest.mark.asyncio
    async def test_tokens_return_after_window(self):
        limiter, clock = _limiter(max_requests=3, window=5.0)
        for _ in range(3):
            await limiter.acquire()
        assert limiter.available == 0
        clock.now = 5.0
        assert limiter.available == 3

    def test_reusable_across_event_loops(self):
        limiter, _ = _limiter(max_requests=2, window=1.0)
        asyncio.run(limiter.acquire())
        asyncio.run(limiter.acquire())
        assert len(limiter.send_times) == 2

    @pytest.mark.parametrize("kwargs", [{"max_requests": 0}, {"max_requests": 5, "window_seconds": 0.0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            SlidingWindowRateLimiter(**kwargs)


# ── Memory ──────────────────────────────────────────────────────────────────


class TestBoundedState:
    @pytest.mark.asyncio
    async def test_state_bounded_over_many_windows(self):
        limiter, clock = _limiter(max_requests=20, window=1.0, record_history=False)
        for _ in range(1000):
            await limiter.acquire()
            assert limiter.spent_in_window <= 20
        assert clock.now >= 49.0
        assert limiter.sends == 1000
        assert limiter.send_times == []

    @pytest.mark.asyncio
    async def test_history_off_by_default(self):
        limiter = SlidingWindowRateLimiter(5, 1.0)
        await limiter.acquire()
        assert limiter.send_times == []
        with pytest.raises(ValueError):
            limiter.max_in_any_window()
