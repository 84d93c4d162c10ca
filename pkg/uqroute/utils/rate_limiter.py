"""Async sliding-window rate limiter shared by all remote judge requests.

A token returns to the bucket exactly one window after it was spent, so no
window of length ``window_seconds`` ever contains more than ``max_requests``
sends. Callers queue on a lock and are served in arrival order.
"""

import asyncio
import logging
import time
from collections import deque
from typing import Awaitable, Callable, Optional

logger = logging.getLogger(__name__)


class SlidingWindowRateLimiter:
    """Token bucket with per-token refill one window after spending.

    Args:
        max_requests: Tokens available per window (e.g. 200 requests per minute).
        window_seconds: Window length in seconds.
        clock: Monotonic time source; injectable for virtual-time tests.
        sleep: Coroutine used to wait; injectable alongside ``clock``.
        record_history: Keep every send time in ``send_times`` for
            ``max_in_any_window``. Off by default; only the current window is
            held otherwise.
    """

    def __init__(
        self,
        max_requests: int,
        window_seconds: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
        record_history: bool = False,
    ) -> None:
        if max_requests < 1:
            raise ValueError("max_requests must be at least 1")
        if window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        self.max_requests = max_requests
        self.window_seconds = window_seconds
        self._clock = clock
        self._sleep = sleep
        self._spent: deque[float] = deque()
        self.record_history = record_history
        self.send_times: list[float] = []
        self.sends = 0
        self.throttled = 0
        self._lock: Optional[asyncio.Lock] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None

    def _get_lock(self) -> asyncio.Lock:
        """Lock bound to the running event loop, recreated when the loop changes."""
        loop = asyncio.get_running_loop()
        if self._lock is None or self._loop is not loop:
            self._lock = asyncio.Lock()
            self._loop = loop
        return self._lock

    def _expire(self, now: float) -> None:
        while self._spent and self._spent[0] + self.window_seconds <= now:
            self._spent.popleft()

    @property
    def spent_in_window(self) -> int:
        """Send times currently held; never more than ``max_requests``."""
        return len(self._spent)

    @property
    def available(self) -> int:
        """Tokens available right now."""
        self._expire(self._clock())
        return self.max_requests - len(self._spent)

    async def acquire(self) -> float:
        """Wait for a token and spend it.

        Returns:
            The clock time at which the token was spent.
        """
        async with self._get_lock():
            waited = False
            while True:
                now = self._clock()
                self._expire(now)
                if len(self._spent) < self.max_requests:
                    break
                wait = self._spent[0] + self.window_seconds - now
                if not waited:
                    self.throttled += 1
                    waited = True
                    logger.debug("Rate limit reached, waiting %.2fs for a token", wait)
                await self._sleep(wait)
            self._spent.append(now)
            self.sends += 1
            if self.record_history:
                self.send_times.append(now)
            return now

    def max_in_any_window(self) -> int:
        """Largest number of recorded sends inside any half-open window.

        Raises:
            ValueError: If the limiter was built without ``record_history``.
        """
        if not self.record_history:
            raise ValueError("send history is not recorded (record_history=False)")
        times = sorted(self.send_times)
        best = 0
        start = 0
        for end, t in enumerate(times):
            while times[start] + self.window_seconds <= t:
                start += 1
            best = max(best, end - start + 1)
        return best
