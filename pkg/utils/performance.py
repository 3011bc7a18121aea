import logging
import os
import time

import psutil


logger = logging.getLogger(__name__)


class PerformanceMonitor:
    """Records wall time and resident-memory deltas for named run phases."""

    def __init__(self):
        self.timings = {}
        self.completed = {}
        self.enabled = True

    def start_timing(self, operation_name: str):
        if not self.enabled:
            return

        self.timings[operation_name] = {
            'start_time': time.perf_counter(),
            'start_memory': self._get_memory_usage()
        }
        logger.debug("Starting %s", operation_name)

    def end_timing(self, operation_name: str, details: str = "") -> float | None:
        """Stop the named timer, log the result and return the duration in seconds."""
        if not self.enabled or operation_name not in self.timings:
            return None

        end_time = time.perf_counter()
        end_memory = self._get_memory_usage()

        timing_data = self.timings.pop(operation_name)
        duration = end_time - timing_data['start_time']
        memory_diff = end_memory - timing_data['start_memory']

        duration_str = f"{duration:.3f}s" if duration >= 1 else f"{duration*1000:.1f}ms"
        memory_str = f"{memory_diff:+.1f}MB" if abs(memory_diff) >= 1 else f"{memory_diff*1024:+.0f}KB"

        level = logging.DEBUG if duration < 2.0 else logging.INFO
        logger.log(level, "Finished %s: %s | memory %s %s", operation_name, duration_str, memory_str, details)

        self.completed[operation_name] = duration
        return duration

    def _get_memory_usage(self) -> float:
        """Resident set size of this process in MB."""
        try:
            process = psutil.Process(os.getpid())
            return process.memory_info().rss / (1024 * 1024)
        except psutil.Error:
            return 0.0

    def summary(self) -> dict[str, float]:
        if self.timings:
            logger.warning("Unfinished phases: %s", ", ".join(self.timings))
        return dict(self.completed)


def available_workers() -> int:
    return psutil.cpu_count(logical=True) or 1


# Shared monitor instance
perf_monitor = PerformanceMonitor()
