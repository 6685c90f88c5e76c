"""Deduplicating persistence for the distilled graph.

A single JSONL file works as an append-only record log: a versioned
header, head records, triple records, and filter-status updates. Opening
a store replays the log into in-memory indexes; the last status record
for a triple wins. This keeps the pipeline self-contained (no database
service) while staying deterministic and auditable.

Editions: ``raw`` is every stored triple; ``high`` is everything except
HinderedBy triples the filter removed. Head items are registered
independently of triples — filtering removes triples, never heads — so
both editions report the same head count.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import StoreError
from .schema import FilterStatus, HeadItem, KnowledgeType, Triple, get_relation

log = logging.getLogger(__name__)

EDITIONS = ("raw", "high")
SPLIT_NAMES = ("train", "dev", "test")

_FORMAT = "ckdistill-store"
_VERSION = 1


@dataclass(frozen=True)
class RelationStats:
    unique_tails: int
    triples: int


@dataclass(frozen=True)
class GraphStats:
    edition: str
    unique_heads: int
    unique_tails: int
    triples: int
    per_relation: dict

    def __post_init__(self):
        if self.edition not in EDITIONS:
            raise StoreError(f"unknown edition: {self.edition!r}")
        if any(c < 0 for c in (self.unique_heads, self.unique_tails, self.triples)):
            raise StoreError("negative count in stats")
        if self.triples != sum(r.triples for r in self.per_relation.values()):
            raise StoreError("per-relation triple counts do not sum to the total")

    def to_dict(self) -> dict:
        return {
            "edition": self.edition,
            "unique_heads": self.unique_heads,
            "unique_tails": self.unique_tails,
            "triples": self.triples,
            "per_relation": {
                name: {"unique_tails": rs.unique_tails, "triples": rs.triples}
                for name, rs in sorted(self.per_relation.items())
            },
        }


def _triple_key(t: Triple) -> tuple:
    return t.key


def _status_included(status: FilterStatus, edition: str) -> bool:
    if edition == "raw":
        return True
    return status != FilterStatus.REMOVED


class TripleStore:
    """Append-log store with an in-memory dedup index.

    Single writer, many readers: every mutation and snapshot read takes
    one lock, and mutations append their whole batch with a single write
    so a batch is either fully on disk or not at all.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._heads: dict = {}   # (text, type value) -> HeadItem
        self._triples: dict = {}  # triple key -> Triple, insertion-ordered
        if self.path.exists() and self.path.stat().st_size > 0:
            self._replay()
            self._file = self.path.open("a", encoding="utf-8")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self.path.open("a", encoding="utf-8")
            self._append_lines(
                [json.dumps({"kind": "hdr", "format": _FORMAT, "version": _VERSION})]
            )

    # -- log plumbing ------------------------------------------------------

    def _replay(self) -> None:
        with self.path.open("r", encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise StoreError(f"{self.path}: empty store file")
        records = []
        for i, line in enumerate(lines, start=1):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                # A torn final line can be left by a crash mid-append; the
                # batch it belonged to was never acknowledged, so drop it.
                if i == len(lines):
                    log.warning("%s: dropping torn final record at line %d", self.path, i)
                    self._truncate_to(lines[:-1])
                    break
                raise StoreError(f"{self.path}:{i}: corrupt record") from None
        if not records or records[0].get("kind") != "hdr":
            raise StoreError(f"{self.path}: missing store header")
        hdr = records[0]
        if hdr.get("format") != _FORMAT or hdr.get("version") != _VERSION:
            raise StoreError(
                f"{self.path}: unsupported store format "
                f"{hdr.get('format')!r} v{hdr.get('version')!r}"
            )
        for i, rec in enumerate(records[1:], start=2):
            try:
                self._apply(rec)
            except (KeyError, ValueError, StoreError) as e:
                raise StoreError(f"{self.path}:{i}: {e}") from None

    def _truncate_to(self, lines: list) -> None:
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        os.replace(tmp, self.path)

    def _apply(self, rec: dict) -> None:
        kind = rec.get("kind")
        if kind == "h":
            item = HeadItem(rec["t"], KnowledgeType.parse(rec["k"]))
            self._heads[item.key] = item
        elif kind == "t":
            head = HeadItem(rec["h"], KnowledgeType.parse(rec["k"]))
            triple = Triple(
                head=head,
                relation=get_relation(rec["r"]),
                tail=rec["tl"],
                filter_status=FilterStatus(rec["s"]),
            )
            self._heads.setdefault(head.key, head)
            self._triples[triple.key] = triple
        elif kind == "s":
            key = (rec["h"], rec["k"], rec["r"], rec["tl"])
            if key not in self._triples:
                raise StoreError(f"status update for unknown triple {key}")
            from dataclasses import replace

            self._triples[key] = replace(
                self._triples[key], filter_status=FilterStatus(rec["s"])
            )
        else:
            raise StoreError(f"unknown record kind {kind!r}")

    def _append_lines(self, lines: Sequence[str]) -> None:
        self._file.write("".join(l + "\n" for l in lines))
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TripleStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ------------------------------------------------------------

    def insert_heads(self, items: Iterable[HeadItem]) -> tuple:
        """Register head items; returns (inserted, duplicates)."""
        with self._lock:
            inserted = duplicates = 0
            lines = []
            for item in items:
                if item.key in self._heads:
                    duplicates += 1
                    continue
                self._heads[item.key] = item
                lines.append(
                    json.dumps(
                        {"kind": "h", "t": item.text, "k": item.knowledge_type.value},
                        ensure_ascii=False,
                    )
                )
                inserted += 1
            if lines:
                self._append_lines(lines)
            return inserted, duplicates

    def insert_triples(self, batch: Iterable[Triple]) -> tuple:
        """Insert triples whose (head, relation, tail) key is new.

        Returns (inserted, duplicates). A triple failing revalidation is
        logged and skipped without aborting the batch; heads referenced by
        new triples are registered as a side effect.
        """
        with self._lock:
            inserted = duplicates = 0
            lines = []
            for t in batch:
                if not isinstance(t, Triple):
                    log.warning("rejecting non-triple %r", t)
                    continue
                if not t.relation.is_valid_for(t.head.knowledge_type):
                    log.warning(
                        "rejecting invalid triple %s/%s", t.relation.name, t.head.knowledge_type.value
                    )
                    continue
                if t.key in self._triples:
                    duplicates += 1
                    continue
                if t.head.key not in self._heads:
                    self._heads[t.head.key] = t.head
                    lines.append(
                        json.dumps(
                            {"kind": "h", "t": t.head.text, "k": t.head.knowledge_type.value},
                            ensure_ascii=False,
                        )
                    )
                self._triples[t.key] = t
                lines.append(
                    json.dumps(
                        {
                            "kind": "t",
                            "h": t.head.text,
                            "k": t.head.knowledge_type.value,
                            "r": t.relation.name,
                            "tl": t.tail,
                            "s": t.filter_status.value,
                        },
                        ensure_ascii=False,
                    )
                )
                inserted += 1
            if lines:
                self._append_lines(lines)
            return inserted, duplicates

    def update_filter_status(
        self, triples: Sequence, status: FilterStatus
    ) -> int:
        """Record filter outcomes for existing HinderedBy triples.

        Accepts Triples or raw 4-tuple keys; returns how many changed.
        """
        if status not in (FilterStatus.KEPT, FilterStatus.REMOVED):
            raise StoreError(f"filter outcome must be kept/removed, got {status.value}")
        from dataclasses import replace

        with self._lock:
            changed = 0
            lines = []
            for t in triples:
                key = t.key if isinstance(t, Triple) else tuple(t)
                if key not in self._triples:
                    raise StoreError(f"cannot update unknown triple {key}")
                current = self._triples[key]
                if current.relation.name != "HinderedBy":
                    raise StoreError(
                        f"filter status applies to HinderedBy only, not {current.relation.name}"
                    )
                if current.filter_status == status:
                    continue
                self._triples[key] = replace(current, filter_status=status)
                lines.append(
                    json.dumps(
                        {"kind": "s", "h": key[0], "k": key[1], "r": key[2], "tl": key[3], "s": status.value},
                        ensure_ascii=False,
                    )
                )
                changed += 1
            if lines:
                self._append_lines(lines)
            return changed

    # -- reads -------------------------------------------------------------

    def head_items(self) -> list:
        with self._lock:
            return list(self._heads.values())

    def triples(self, edition: str = "raw") -> list:
        """Snapshot of the edition's triples in insertion order."""
        if edition not in EDITIONS:
            raise StoreError(f"unknown edition: {edition!r}")
        with self._lock:
            return [
                t for t in self._triples.values() if _status_included(t.filter_status, edition)
            ]

    def __len__(self) -> int:
        with self._lock:
            return len(self._triples)

    def compute_stats(self, edition: str) -> GraphStats:
        rows = self.triples(edition)
        with self._lock:
            head_count = len(self._heads)
        per_rel_tails: dict = {}
        per_rel_count: dict = {}
        all_tails = set()
        for t in rows:
            per_rel_tails.setdefault(t.relation.name, set()).add(t.tail)
            per_rel_count[t.relation.name] = per_rel_count.get(t.relation.name, 0) + 1
            all_tails.add(t.tail)
        per_relation = {
            name: RelationStats(len(per_rel_tails[name]), per_rel_count[name])
            for name in per_rel_count
        }
        return GraphStats(
            edition=edition,
            unique_heads=head_count,
            unique_tails=len(all_tails),
            triples=len(rows),
            per_relation=per_relation,
        )

    def digest(self) -> str:
        """Content digest, independent of insertion order and log layout."""
        with self._lock:
            head_lines = sorted(f"h|{k[0]}|{k[1]}" for k in self._heads)
            triple_lines = sorted(
                f"t|{k[0]}|{k[1]}|{k[2]}|{k[3]}|{t.filter_status.value}"
                for k, t in self._triples.items()
            )
        h = hashlib.sha256()
        for line in head_lines + triple_lines:
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    # -- export ------------------------------------------------------------

    def export(
        self,
        out_dir: str | Path,
        edition: str = "high",
        format: str = "tsv",
        split: Optional[tuple] = None,
        rng: Optional[random.Random] = None,
        basename: str = "triples",
    ) -> dict:
        """Write the edition to disk and return the manifest.

        ``split`` gives (train, dev, test) fractions summing to 1; the
        partition is a deterministic function of ``rng``. Without a split
        a single file is written in insertion order. The manifest carries
        per-file counts and sha256es plus a combined digest, and is itself
        written alongside the data as ``<basename>.manifest.json``.
        """
        if format not in ("tsv", "jsonl"):
            raise StoreError(f"unknown export format: {format!r}")
        rows = self.triples(edition)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        if split is not None:
            if len(split) != len(SPLIT_NAMES):
                raise StoreError("split needs exactly (train, dev, test) fractions")
            if any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
                raise StoreError(f"split fractions must be >= 0 and sum to 1, got {split}")
            if rng is None:
                raise StoreError("a random split needs an rng")
            order = list(range(len(rows)))
            rng.shuffle(order)
            counts = _largest_remainder(len(rows), split)
            parts, offset = {}, 0
            for name, n in zip(SPLIT_NAMES, counts):
                parts[name] = [rows[i] for i in order[offset : offset + n]]
                offset += n
        else:
            parts = {"all": rows}

        files = []
        combined = hashlib.sha256()
        for name, chunk in parts.items():
            suffix = "" if name == "all" else f".{name}"
            fname = f"{basename}{suffix}.{format}"
            body = _render_export(chunk, format)
            (out / fname).write_text(body, encoding="utf-8")
            sha = hashlib.sha256(body.encode("utf-8")).hexdigest()
            combined.update(sha.encode("ascii"))
            files.append({"name": fname, "count": len(chunk), "sha256": sha})

        manifest = {
            "edition": edition,
            "format": format,
            "total": len(rows),
            "files": files,
            "digest": combined.hexdigest(),
            "store_digest": self.digest(),
        }
        (out / f"{basename}.manifest.json").write_text(
            json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
        return manifest


def _largest_remainder(total: int, fractions: Sequence[float]) -> list:
    """Integer allocation matching ``total`` exactly, favoring the largest
    fractional remainders (stable on ties by position)."""
    raw = [total * f for f in fractions]
    counts = [int(x) for x in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _render_export(rows: Sequence[Triple], format: str) -> str:
    lines = []
    if format == "tsv":
        for t in rows:
            fields = (t.head.text, t.relation.name, t.tail)
            if any("\t" in f or "\n" in f for f in fields):
                raise StoreError(f"unexportable characters in triple {t.key}")
            lines.append("\t".join(fields))
    else:
        for t in rows:
            lines.append(
                json.dumps(
                    {
                        "head": t.head.text,
                        "head_type": t.head.knowledge_type.value,
                        "relation": t.relation.name,
                        "tail": t.tail,
                    },
                    ensure_ascii=False,
                )
            )
    return "".join(l + "\n" for l in lines)
