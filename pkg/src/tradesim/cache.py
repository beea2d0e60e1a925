"""Three-level cache: in-process LRU (L1), consistent-hash sharded tier (L2)
and an authoritative persistent map (L3) with MVCC versioned reads.

Time is caller-driven, in seconds; expiry is lazy (checked on access) plus an
explicit purge. Single-writer / multi-reader: the simulator drives it
single-threaded.
"""

from __future__ import annotations

import hashlib
import struct
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ConfigError

L1 = "L1"
L2 = "L2"
L3 = "L3"


def stable_hash64(data: bytes) -> int:
    """64-bit hash, stable across runs and platforms."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class CacheEntry:
    key: bytes
    value: bytes
    version: int
    inserted_at: float
    last_access: float


@dataclass(frozen=True)
class CacheConfig:
    l1_capacity: int = 1024
    l1_ttl: float = 10.0
    l2_capacity: int = 16384
    l2_ttl: float = 60.0
    l2_shards: int = 4
    l2_virtual_nodes: int = 128
    mvcc_retention: int = 8  # versions kept per key in L3

    def __post_init__(self) -> None:
        if self.l1_capacity <= 0 or self.l2_capacity <= 0:
            raise ConfigError("cache capacities must be > 0")
        if self.l1_ttl <= 0 or self.l2_ttl <= 0:
            raise ConfigError("cache TTLs must be > 0")
        if self.l2_shards < 1:
            raise ConfigError("l2_shards must be >= 1")
        if self.l2_virtual_nodes < 1:
            raise ConfigError("l2_virtual_nodes must be >= 1")
        if self.mvcc_retention < 1:
            raise ConfigError("mvcc_retention must be >= 1")


@dataclass
class TierStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    expired: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses


@dataclass
class CacheStats:
    l1: TierStats = field(default_factory=TierStats)
    l2: TierStats = field(default_factory=TierStats)
    l3: TierStats = field(default_factory=TierStats)
    total_gets: int = 0
    memory_hits: int = 0  # L1 + L2

    @property
    def memory_hit_rate(self) -> float:
        return self.memory_hits / self.total_gets if self.total_gets else 0.0

    @property
    def defined(self) -> bool:
        return self.total_gets > 0


class HashRing:
    """Consistent-hash ring with virtual nodes; shard changes relocate only
    keys whose ring segment moved."""

    def __init__(self, shards: int, virtual_nodes: int):
        if virtual_nodes < 1:
            raise ConfigError("virtual_nodes must be >= 1")
        self._virtual = virtual_nodes
        self._points: list[tuple[int, int]] = []  # (hash, shard) sorted by hash
        self._shards: set[int] = set()
        for shard in range(shards):
            self.add_shard(shard)

    @property
    def shards(self) -> set[int]:
        return set(self._shards)

    def add_shard(self, shard: int) -> None:
        if shard in self._shards:
            raise ConfigError(f"shard {shard} already on ring")
        self._shards.add(shard)
        for v in range(self._virtual):
            h = stable_hash64(f"shard:{shard}:vnode:{v}".encode())
            self._points.append((h, shard))
        self._points.sort()

    def remove_shard(self, shard: int) -> None:
        if shard not in self._shards:
            raise ConfigError(f"shard {shard} not on ring")
        self._shards.discard(shard)
        self._points = [(h, s) for h, s in self._points if s != shard]

    def assign(self, key: bytes) -> int:
        if not self._points:
            raise ConfigError("cannot assign on an empty ring")
        h = stable_hash64(key)
        idx = bisect_right(self._points, (h, 1 << 64))
        if idx == len(self._points):
            idx = 0  # wrap around
        return self._points[idx][1]


class _LruTier:
    """One bounded LRU tier with per-entry TTL; holds the latest version only."""

    def __init__(self, name: str, capacity: int, ttl: float, stats: TierStats):
        self.name = name
        self.capacity = capacity
        self.ttl = ttl
        self.stats = stats
        self._entries: OrderedDict[bytes, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: bytes) -> bool:
        return key in self._entries

    def peek(self, key: bytes) -> CacheEntry | None:
        return self._entries.get(key)

    def lookup(self, key: bytes, now: float, max_version: int | None = None) -> CacheEntry | None:
        """TTL-aware lookup; refreshes recency on hit, drops expired entries.

        An entry newer than `max_version` is unusable for a snapshot read and
        counts as a miss at this tier.
        """
        entry = self._entries.get(key)
        if entry is None:
            self.stats.misses += 1
            return None
        if now - entry.inserted_at > self.ttl:
            del self._entries[key]
            self.stats.expired += 1
            self.stats.misses += 1
            return None
        if max_version is not None and entry.version > max_version:
            self.stats.misses += 1
            return None
        entry.last_access = now
        self._entries.move_to_end(key)
        self.stats.hits += 1
        return entry

    def install(self, key: bytes, value: bytes, version: int, now: float) -> None:
        if key in self._entries:
            del self._entries[key]
        while len(self._entries) >= self.capacity:
            # O(1) capacity eviction: pop the LRU victim, classifying it as
            # expired when its TTL had lapsed
            k, victim = self._entries.popitem(last=False)
            if now - victim.inserted_at > self.ttl:
                self.stats.expired += 1
            else:
                self.stats.evictions += 1
        self._entries[key] = CacheEntry(key, value, version, now, now)

    def evict_one(self, now: float) -> bytes | None:
        """Drop one entry: expired entries first, else the LRU victim."""
        for k, entry in self._entries.items():
            if now - entry.inserted_at > self.ttl:
                del self._entries[k]
                self.stats.expired += 1
                return k
        if not self._entries:
            return None
        k, _ = self._entries.popitem(last=False)
        self.stats.evictions += 1
        return k

    def purge_expired(self, now: float) -> int:
        stale = [k for k, e in self._entries.items() if now - e.inserted_at > self.ttl]
        for k in stale:
            del self._entries[k]
        self.stats.expired += len(stale)
        return len(stale)

    def discard(self, key: bytes) -> None:
        self._entries.pop(key, None)


class TieredCache:
    """L1 -> L2 -> L3 lookup with upward promotion and MVCC snapshot reads."""

    def __init__(self, config: CacheConfig | None = None, log_path: str | Path | None = None):
        self.config = config or CacheConfig()
        self.stats = CacheStats()
        self._l1 = _LruTier(L1, self.config.l1_capacity, self.config.l1_ttl, self.stats.l1)
        self._l2 = _LruTier(L2, self.config.l2_capacity, self.config.l2_ttl, self.stats.l2)
        self.ring = HashRing(self.config.l2_shards, self.config.l2_virtual_nodes)
        # L3: key -> list of (version, value, tick), newest last; never expires
        self._l3: dict[bytes, list[tuple[int, bytes, float]]] = {}
        self._log: BinaryIO | None = open(log_path, "ab") if log_path else None

    # -- core operations -------------------------------------------------

    def get(
        self, key: bytes, now: float, snapshot_version: int | None = None
    ) -> tuple[bytes, int, str] | None:
        """Return (value, version, tier) or None on a full miss.

        With `snapshot_version`, returns the newest version <= it; memory tiers
        only serve the request when their (latest) version qualifies.
        """
        self.stats.total_gets += 1

        entry = self._l1.lookup(key, now, snapshot_version)
        if entry is not None:
            self.stats.memory_hits += 1
            return entry.value, entry.version, L1

        entry = self._l2.lookup(key, now, snapshot_version)
        if entry is not None:
            self.stats.memory_hits += 1
            self._l1.install(key, entry.value, entry.version, now)
            return entry.value, entry.version, L2

        versions = self._l3.get(key)
        if versions:
            if snapshot_version is None:
                version, value, _ = versions[-1]
            else:
                candidates = [v for v in versions if v[0] <= snapshot_version]
                if not candidates:
                    self.stats.l3.misses += 1
                    return None
                version, value, _ = candidates[-1]
            self.stats.l3.hits += 1
            if snapshot_version is None:  # promote only latest-version reads
                self._l2.install(key, value, version, now)
                self._l1.install(key, value, version, now)
            return value, version, L3
        self.stats.l3.misses += 1
        return None

    def put(self, key: bytes, value: bytes, now: float) -> int:
        """Write through to L3 (authoritative) and install in L2/L1."""
        versions = self._l3.setdefault(key, [])
        version = versions[-1][0] + 1 if versions else 1
        versions.append((version, value, now))
        if len(versions) > self.config.mvcc_retention:
            del versions[: len(versions) - self.config.mvcc_retention]
        self._l2.install(key, value, version, now)
        self._l1.install(key, value, version, now)
        if self._log is not None:
            self._log.write(encode_log_record(key, value, version, int(now)))
            self._log.flush()
        return version

    def evict_lru(self, tier: str, now: float) -> bytes | None:
        if tier == L1:
            return self._l1.evict_one(now)
        if tier == L2:
            return self._l2.evict_one(now)
        raise ConfigError(f"evict_lru only applies to L1/L2, got {tier!r}")

    def purge_expired(self, now: float) -> int:
        return self._l1.purge_expired(now) + self._l2.purge_expired(now)

    # -- ring management ---------------------------------------------------

    def shard_of(self, key: bytes) -> int:
        return self.ring.assign(key)

    def add_shard(self, shard: int) -> None:
        self.ring.add_shard(shard)

    def remove_shard(self, shard: int) -> None:
        self.ring.remove_shard(shard)

    # -- introspection ----------------------------------------------------

    def latest_version(self, key: bytes) -> int:
        versions = self._l3.get(key)
        return versions[-1][0] if versions else 0

    def tier_len(self, tier: str) -> int:
        if tier == L1:
            return len(self._l1)
        if tier == L2:
            return len(self._l2)
        return len(self._l3)

    def reset_stats(self) -> None:
        self.stats = CacheStats()
        self._l1.stats = self.stats.l1
        self._l2.stats = self.stats.l2

    def memory_hit_rate(self) -> float:
        return self.stats.memory_hit_rate

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


# --- write-through log format: [u32 klen][key][u32 vlen][value][u64 ver][u64 tick]


def encode_log_record(key: bytes, value: bytes, version: int, tick: int) -> bytes:
    return (
        struct.pack("<I", len(key))
        + key
        + struct.pack("<I", len(value))
        + value
        + struct.pack("<QQ", version, tick)
    )


def read_log(path: str | Path) -> list[tuple[bytes, bytes, int, int]]:
    records = []
    raw = Path(path).read_bytes()
    off = 0
    while off < len(raw):
        (klen,) = struct.unpack_from("<I", raw, off)
        off += 4
        key = raw[off : off + klen]
        off += klen
        (vlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        value = raw[off : off + vlen]
        off += vlen
        version, tick = struct.unpack_from("<QQ", raw, off)
        off += 16
        records.append((key, value, version, tick))
    return records


def replay_trace(cache: TieredCache, rows: list[tuple[float, str, bytes]]) -> CacheStats:
    """Replay (tick, op, key) rows; puts write a tick-derived placeholder value."""
    for tick, op, key in rows:
        if op == "get":
            cache.get(key, tick)
        elif op == "put":
            cache.put(key, b"v%d" % int(tick), tick)
        else:
            raise ConfigError(f"unknown trace op {op!r}")
    return cache.stats


class ZipfAccessDriver:
    """Feeds the cache a Zipf-popular, session-local key stream during simulation
    so the latency model sees a live memory hit rate.

    Accesses per tick are capped; misses fill the hierarchy (cache-aside).
    """

    def __init__(
        self,
        cache: TieredCache,
        n_keys: int = 20_000,
        seed: int = 0,
        per_tick_cap: int = 50,
        reaccess_p: float = 0.5,
    ):
        self.cache = cache
        self.per_tick_cap = per_tick_cap
        self._rng = np.random.default_rng([seed, 0xCAC4E])
        ranks = np.arange(1, n_keys + 1, dtype=float)
        self._probs = (1.0 / ranks) / np.sum(1.0 / ranks)
        self._n_keys = n_keys
        self._keys = [b"k%d" % i for i in range(n_keys)]
        self._recent: list[int] = []
        self._reaccess_p = reaccess_p

    def on_tick(self, tick: float, request_count: int) -> float:
        """Run up to `per_tick_cap` sampled accesses; returns the running
        combined memory hit rate."""
        n = min(int(request_count), self.per_tick_cap)
        if n > 0:
            fresh = self._rng.choice(self._n_keys, size=n, p=self._probs)
            for key_id in fresh:
                if self._recent and self._rng.random() < self._reaccess_p:
                    key_id = self._recent[int(self._rng.integers(len(self._recent)))]
                key = self._keys[int(key_id)]
                if self.cache.get(key, tick) is None:
                    self.cache.put(key, b"v", tick)
                self._recent.append(int(key_id))
            if len(self._recent) > 64:
                del self._recent[: len(self._recent) - 64]
        return self.cache.stats.memory_hit_rate
