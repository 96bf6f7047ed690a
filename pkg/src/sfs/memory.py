"""Content-addressable memory with LRU-access bookkeeping and
class-consolidating writes."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tns_io


class MemoryWriteError(ValueError):
    pass


@dataclass
class MemoryEntry:
    key: np.ndarray
    class_id: int
    usage_weight: float = 1.0
    last_read_step: int = 0
    last_update: int = 0
    write_count: int = 1


@dataclass
class MemoryBank:
    capacity: int = 128
    decay: float = 0.99
    entries: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must lie in (0,1)")

    def __len__(self):
        return len(self.entries)

    def effective_usage(self, entry: MemoryEntry) -> float:
        return entry.usage_weight * self.decay ** (self.step - entry.last_update)

    def _touch(self, entry: MemoryEntry, read: bool):
        entry.usage_weight = self.effective_usage(entry) + 1.0
        entry.last_update = self.step
        if read:
            entry.last_read_step = self.step


def _unit(key: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(key))
    if norm <= 0.0 or not np.isfinite(norm):
        raise MemoryWriteError("key must be finite with positive norm")
    return np.asarray(key, dtype=np.float64) / norm


def memory_read(bank: MemoryBank, query_key: np.ndarray, k: int):
    """Top-k entries by cosine similarity; ties break toward lower slot
    index.  Returned entries get read/usage bookkeeping updates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    bank.step += 1
    if not bank.entries:
        return []
    q = _unit(np.asarray(query_key, dtype=np.float64))
    cosines = [float(np.dot(q, _unit(e.key))) for e in bank.entries]
    order = sorted(range(len(cosines)), key=lambda i: (-cosines[i], i))[:k]
    out = []
    for i in order:
        bank._touch(bank.entries[i], read=True)
        out.append((bank.entries[i], cosines[i]))
    return out


def memory_write(bank: MemoryBank, key: np.ndarray, class_id: int,
                 tau_merge: float = 0.9, eta: float = 0.3) -> dict:
    """Consolidate into a similar same-class entry, append to a free slot,
    or evict the least-used slot.  Returns a report dict."""
    bank.step += 1
    k = _unit(np.asarray(key, dtype=np.float64))
    best_i, best_cos = -1, -np.inf
    for i, e in enumerate(bank.entries):
        if e.class_id != class_id:
            continue
        c = float(np.dot(k, _unit(e.key)))
        if c > best_cos:
            best_i, best_cos = i, c
    if best_i >= 0 and best_cos >= tau_merge:
        e = bank.entries[best_i]
        merged = (1.0 - eta) * _unit(e.key) + eta * k
        e.key = _unit(merged)
        e.write_count += 1
        bank._touch(e, read=False)
        return {"action": "merge", "slot": best_i, "cosine": best_cos}
    entry = MemoryEntry(key=k, class_id=class_id, last_update=bank.step,
                        last_read_step=bank.step)
    if len(bank.entries) < bank.capacity:
        bank.entries.append(entry)
        return {"action": "append", "slot": len(bank.entries) - 1}
    victim = min(range(len(bank.entries)),
                 key=lambda i: (bank.effective_usage(bank.entries[i]),
                                bank.entries[i].last_read_step, i))
    bank.entries[victim] = entry
    return {"action": "evict", "slot": victim}


# ---------------------------------------------------------------------------
# Serialization: keys as an SxD tensor plus a line-oriented sidecar.

SIDECAR_NAME = "bank_entries.txt"


def save_bank(directory, bank: MemoryBank, key_dim: int):
    os.makedirs(directory, exist_ok=True)
    keys = np.zeros((bank.capacity, key_dim))
    for i, e in enumerate(bank.entries):
        keys[i] = e.key
    tns_io.write_tns(os.path.join(directory, "bank.tns"), keys)
    with open(os.path.join(directory, SIDECAR_NAME), "w") as f:
        f.write(f"# step {bank.step} decay {bank.decay!r}\n")
        for i, e in enumerate(bank.entries):
            f.write(f"{i} {e.class_id} {e.usage_weight!r} {e.last_read_step} "
                    f"{e.write_count} {e.last_update}\n")


def load_bank(directory) -> MemoryBank:
    keys = tns_io.read_tns(os.path.join(directory, "bank.tns"))
    with open(os.path.join(directory, SIDECAR_NAME)) as f:
        header = f.readline().split()
        bank = MemoryBank(capacity=keys.shape[0], decay=float(header[4]),
                          step=int(header[2]))
        for line in f:
            slot, cid, usage, last_read, wc, last_upd = line.split()
            bank.entries.append(MemoryEntry(
                key=keys[int(slot)].copy(), class_id=int(cid),
                usage_weight=float(usage), last_read_step=int(last_read),
                write_count=int(wc), last_update=int(last_upd)))
    return bank
