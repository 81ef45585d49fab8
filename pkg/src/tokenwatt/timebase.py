"""Shared monotonic clock pinned to a per-run epoch.

All sample and event timestamps are nanoseconds relative to one run epoch
taken from the node's monotonic clock. Wall-clock time is captured once at
construction and used for report annotations only, never for measurement.
"""

import time
from datetime import datetime, timezone


class RunClock:
    def __init__(self, epoch_ns: int | None = None):
        self.epoch_ns = time.monotonic_ns() if epoch_ns is None else epoch_ns
        self.wall_start_iso = datetime.now(timezone.utc).isoformat()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self.epoch_ns

    def sleep_until_ns(self, target_ns: int) -> None:
        """Sleep until the run-relative instant target_ns (no-op if past)."""
        while True:
            remaining = target_ns - self.now_ns()
            if remaining <= 0:
                return
            time.sleep(min(remaining / 1e9, 0.05))
