"""Caching of frozen-encoder features."""

import hashlib
import json
import logging
import threading
from typing import Any, Callable, Dict, Optional

import numpy as np
from cachetools import LRUCache

from .config import settings

logger = logging.getLogger(__name__)


class FeatureCache:
    """Thread-safe LRU cache of feature matrices keyed by content hashes.

    Entries are read-only arrays, so callers can share them without copies.
    """

    def __init__(self, maxsize: int = 32) -> None:
        self._store: LRUCache = LRUCache(maxsize=maxsize)
        self._lock = threading.Lock()
        self._hits = 0
        self._misses = 0
        self._evictions = 0

    def get(self, key: str) -> Optional[np.ndarray]:
        with self._lock:
            value = self._store.get(key)
            if value is None:
                self._misses += 1
                return None
            self._hits += 1
            return value  # type: ignore[no-any-return]

    def set(self, key: str, value: np.ndarray) -> np.ndarray:
        value = np.array(value, copy=True)
        value.setflags(write=False)
        with self._lock:
            if key not in self._store and len(self._store) >= self._store.maxsize:
                self._evictions += 1
            self._store[key] = value
        return value

    def get_or_compute(self, key: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        """Return the cached matrix for ``key``, computing it on a miss."""
        cached = self.get(key)
        if cached is not None:
            logger.debug(f"Feature cache hit for {key}")
            return cached
        logger.debug(f"Feature cache miss for {key}")
        return self.set(key, compute())

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
            self._hits = 0
            self._misses = 0
            self._evictions = 0

    def size(self) -> int:
        with self._lock:
            return len(self._store)

    def stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "hits": self._hits,
                "misses": self._misses,
                "evictions": self._evictions,
                "size": len(self._store),
                "max_size": self._store.maxsize,
            }


# Global cache instance
feature_cache = FeatureCache(maxsize=settings.feature_cache_size)


def cache_key(*args: Any, **kwargs: Any) -> str:
    """Generate a cache key from arguments."""
    key_data = {"args": args, "kwargs": sorted(kwargs.items())}
    key_str = json.dumps(key_data, sort_keys=True, default=str)
    return hashlib.md5(key_str.encode()).hexdigest()


def get_cache_stats() -> Dict[str, Any]:
    """Get cache statistics."""
    stats = feature_cache.stats()
    total_requests = stats["hits"] + stats["misses"]
    hit_rate = (stats["hits"] / total_requests) if total_requests else None
    return {**stats, "requests": total_requests, "hit_rate": hit_rate}
