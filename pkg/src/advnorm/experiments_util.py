"""Run cache shared across experiment recipes so trainings are reused."""

from __future__ import annotations


class RunCache:
    """Memoizes completed training runs under string keys."""

    def __init__(self):
        self._runs: dict[str, dict] = {}

    def get(self, key: str, build):
        if key not in self._runs:
            self._runs[key] = build()
        return self._runs[key]

    def __contains__(self, key: str) -> bool:
        return key in self._runs
