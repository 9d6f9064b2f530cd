"""Coarse trusted time (the PSE/PRTC stand-in) and the time sources under it."""
from __future__ import annotations

import logging
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol


logger = logging.getLogger("vtpm-lab")


class TimeSource(Protocol):
    def monotonic_ms(self) -> int: ...


class SystemTime:
    def monotonic_ms(self) -> int:
        return time.monotonic_ns() // 1_000_000


class WallTime:
    """Host wall clock; survives process restarts, unlike SystemTime."""

    def monotonic_ms(self) -> int:
        return time.time_ns() // 1_000_000


class VirtualTime:
    """Test hook: time only moves when advanced."""

    def __init__(self, start_ms: int = 0) -> None:
        self._now = start_ms
        self._lock = threading.Lock()

    def monotonic_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("virtual time only moves forward")
        with self._lock:
            self._now += ms
            return self._now


@dataclass(frozen=True)
class PlatformTime:
    epoch_nonce: int
    seconds: int


class PlatformClock:
    """Whole seconds since the last platform reset, tagged with the epoch nonce.

    With `state_path` the epoch (nonce, base, high-water mark) is kept on disk
    so separate processes on the same platform read one continuous clock. A
    source reading below the high-water mark (host reboot, clock stepped back)
    starts a new epoch instead of letting platform time decrease.
    """

    def __init__(
        self,
        source: TimeSource,
        *,
        randbytes: Callable[[int], bytes] = os.urandom,
        state_path: Path | None = None,
    ) -> None:
        self.source = source
        self._randbytes = randbytes
        self._lock = threading.Lock()
        self._state_path = Path(state_path) if state_path is not None else None
        self._epoch_nonce = 0
        self._base_ms = 0
        self._high_ms = 0
        if not self._load():
            self.reset()

    def _load(self) -> bool:
        if self._state_path is None or not self._state_path.exists():
            return False
        raw = self._state_path.read_bytes()
        if len(raw) == 16:
            self._epoch_nonce, self._base_ms = struct.unpack(">QQ", raw)
            self._high_ms = self._base_ms
        elif len(raw) == 24:
            self._epoch_nonce, self._base_ms, self._high_ms = struct.unpack(">QQQ", raw)
        else:
            logger.warning("[platform/clock] ignoring malformed epoch file %s", self._state_path.name)
            return False
        return True

    def _save(self) -> None:
        if self._state_path is None:
            return
        tmp = self._state_path.with_name(self._state_path.name + ".tmp")
        tmp.write_bytes(struct.pack(">QQQ", self._epoch_nonce, self._base_ms, self._high_ms))
        os.replace(tmp, self._state_path)

    def _new_epoch(self, now: int) -> int:
        previous = self._epoch_nonce
        nonce = int.from_bytes(self._randbytes(8), "big")
        while nonce == previous:
            nonce = int.from_bytes(self._randbytes(8), "big")
        self._epoch_nonce = nonce
        self._base_ms = self._high_ms = now
        self._save()
        return nonce

    def reset(self) -> PlatformTime:
        with self._lock:
            nonce = self._new_epoch(self.source.monotonic_ms())
        logger.info("[platform/reset] epoch_nonce=%016x", nonce)
        return self.platform_time()

    def platform_time(self) -> PlatformTime:
        with self._lock:
            now = self.source.monotonic_ms()
            if now < self._high_ms:
                behind = self._high_ms - now
                nonce = self._new_epoch(now)
                logger.warning("[platform/clock] source moved back %d ms; new epoch_nonce=%016x", behind, nonce)
            elif (now - self._base_ms) // 1000 > (self._high_ms - self._base_ms) // 1000:
                # persisted at most once per platform second
                self._high_ms = now
                self._save()
            else:
                self._high_ms = now
            return PlatformTime(epoch_nonce=self._epoch_nonce, seconds=(now - self._base_ms) // 1000)
