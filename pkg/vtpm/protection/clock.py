"""Millisecond trusted clock built from coarse platform seconds plus an
in-enclave tick counter.

Derived time is `anchor_ms + elapsed_ticks * ms_per_tick * rate`. `correct` is
cheap to poll; it only acts once the platform seconds value has advanced by
the correction interval, which lands it on a second boundary:

  * derived time behind the platform second: step forward to it;
  * derived time ahead: keep the current value as the new anchor and slow the
    rate so the excess is absorbed by the next boundary. Never step back.

Within one epoch `now_ms` is non-decreasing, and a read taken after at least
one millisecond of ticks returns a strictly larger value, also while slewing.
A platform reset (new epoch nonce) surfaces as ClockError before any
timestamp of the new epoch.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable

from vtpm.enclave.timebase import PlatformTime, TimeSource, VirtualTime
from vtpm.errors import ClockError


logger = logging.getLogger("vtpm-lab")

DEFAULT_TICK_RATE_HZ = 1000
DEFAULT_CORRECTION_INTERVAL_MS = 1000
MIN_SLEW_RATE = 0.5


@dataclass(frozen=True)
class ClockState:
    last_platform_read: PlatformTime
    tick_count: int
    tick_rate_hz: int
    last_correction_tick: int
    anchor_ms: int
    rate: float = 1.0


class TrustedClock:
    def __init__(
        self,
        platform_time: Callable[[], PlatformTime],
        *,
        tick_rate_hz: int = DEFAULT_TICK_RATE_HZ,
        correction_interval_ms: int = DEFAULT_CORRECTION_INTERVAL_MS,
    ) -> None:
        if tick_rate_hz <= 0 or correction_interval_ms <= 0:
            raise ValueError("tick_rate_hz and correction_interval_ms must be positive")
        self._platform_time = platform_time
        self.correction_interval_ms = correction_interval_ms
        self._lock = threading.Lock()
        self._ticks = 0
        self._last_returned = 0
        # tick count when now_ms last consumed a millisecond of ticks
        self._last_read_ticks = 0
        pt = platform_time()
        self._state = ClockState(
            last_platform_read=pt,
            tick_count=0,
            tick_rate_hz=tick_rate_hz,
            last_correction_tick=0,
            anchor_ms=pt.seconds * 1000,
        )
        self._last_returned = self._state.anchor_ms
        self._last_read = self._last_returned

    @property
    def state(self) -> ClockState:
        with self._lock:
            return replace(self._state, tick_count=self._ticks)

    def tick(self, count: int = 1) -> None:
        with self._lock:
            self._ticks += count

    def _derived(self, state: ClockState, ticks: int) -> int:
        elapsed = ticks - state.last_correction_tick
        return state.anchor_ms + int(elapsed * 1000 * state.rate / state.tick_rate_hz)

    def _check_epoch(self, pt: PlatformTime) -> None:
        if pt.epoch_nonce != self._state.last_platform_read.epoch_nonce:
            raise ClockError("ERR_EPOCH_CHANGED", "platform clock was reset; re-anchor required")

    def now_ms(self) -> int:
        pt = self._platform_time()
        with self._lock:
            self._check_epoch(pt)
            now = max(self._derived(self._state, self._ticks), self._last_returned)
            # a full millisecond of ticks since the last read always yields a new value, even mid-slew
            if (self._ticks - self._last_read_ticks) * 1000 >= self._state.tick_rate_hz:
                now = max(now, self._last_read + 1)
                self._last_read_ticks = self._ticks
            self._last_returned = self._last_read = now
            return now

    def correct(self) -> ClockState:
        pt = self._platform_time()
        with self._lock:
            self._check_epoch(pt)
            st = self._state
            elapsed_ms = (pt.seconds - st.last_platform_read.seconds) * 1000
            if elapsed_ms <= 0 or elapsed_ms < self.correction_interval_ms:
                return replace(st, tick_count=self._ticks)
            derived = max(self._derived(st, self._ticks), self._last_returned)
            platform_ms = pt.seconds * 1000
            if derived < platform_ms:
                anchor, rate = platform_ms, 1.0
            else:
                ahead = derived - platform_ms
                rate = max(MIN_SLEW_RATE, 1.0 - ahead / self.correction_interval_ms)
                anchor = derived
            self._state = replace(
                st,
                last_platform_read=pt,
                tick_count=self._ticks,
                last_correction_tick=self._ticks,
                anchor_ms=anchor,
                rate=rate,
            )
            self._last_returned = max(self._last_returned, anchor)
            return self._state

    def coarse_now_s(self) -> PlatformTime:
        pt = self._platform_time()
        with self._lock:
            self._check_epoch(pt)
        return pt

    def reanchor(self) -> ClockState:
        """Adopt the current platform epoch after a reset."""
        pt = self._platform_time()
        with self._lock:
            self._state = replace(
                self._state,
                last_platform_read=pt,
                tick_count=self._ticks,
                last_correction_tick=self._ticks,
                anchor_ms=pt.seconds * 1000,
                rate=1.0,
            )
            self._last_returned = self._last_read = self._state.anchor_ms
            self._last_read_ticks = self._ticks
            logger.warning("[clock/reanchor] new epoch_nonce=%016x", pt.epoch_nonce)
            return self._state


class VirtualClockDriver:
    """Test hook: moves virtual platform time, ticks the enclave counter with
    an injected rate error, and runs corrections at the configured interval."""

    def __init__(self, clock: TrustedClock, virtual_time: VirtualTime, *, drift: float = 0.0) -> None:
        if not -0.5 < drift < 1.0:
            raise ValueError("drift must be within (-0.5, 1.0)")
        self.clock = clock
        self.virtual_time = virtual_time
        self.drift = drift
        self._tick_residue = 0.0

    def advance(self, ms: int) -> None:
        ticks_per_ms = self.clock.state.tick_rate_hz / 1000 * (1.0 + self.drift)
        for _ in range(ms):
            self.virtual_time.advance(1)
            self._tick_residue += ticks_per_ms
            whole = int(self._tick_residue)
            if whole:
                self.clock.tick(whole)
                self._tick_residue -= whole
            self.clock.correct()


class ClockTicker:
    """The enclave's ticking thread: advances the tick counter at the configured
    rate and runs periodic corrections."""

    def __init__(self, clock: TrustedClock, *, source: TimeSource | None = None) -> None:
        self.clock = clock
        self._source = source
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _now_ns(self) -> int:
        if self._source is not None:
            return self._source.monotonic_ms() * 1_000_000
        return time.monotonic_ns()

    def _run(self) -> None:
        rate = self.clock.state.tick_rate_hz
        started = self._now_ns()
        emitted = 0
        while not self._stop.wait(1.0 / rate):
            due = (self._now_ns() - started) * rate // 1_000_000_000
            if due > emitted:
                self.clock.tick(due - emitted)
                emitted = due
            try:
                self.clock.correct()
            except ClockError:
                # epoch changes are picked up by the command path on its next read
                logger.debug("[clock/ticker] correction skipped: epoch changed")

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="vtpm-lab-ticker", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None


class HostClock:
    """Untrusted host time. Anyone with host access can move it."""

    def __init__(self, source: TimeSource) -> None:
        self._source = source
        self._offset_ms = 0

    def now_ms(self) -> int:
        return self._source.monotonic_ms() + self._offset_ms

    def shift(self, delta_ms: int) -> None:
        self._offset_ms += delta_ms
        logger.info("[clock/host] host clock shifted by %d ms", delta_ms)
