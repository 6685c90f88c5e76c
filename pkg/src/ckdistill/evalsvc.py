"""Human-acceptance evaluation: stratified sampling, annotation
collection over HTTP, and acceptance computation.

The sample covers eight strata — one per relation, with HinderedBy
contributing both an unfiltered and a filtered stratum so the filter's
effect is measurable. Annotators judge rendered natural-language
sentences, not raw triples, and every annotator sees every sampled item
in a private shuffled order. Acceptance is the mean over annotators of
each annotator's proportion of items judged reasonable; a majority-vote
variant is reported alongside as a secondary statistic.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional, Sequence
from urllib.parse import parse_qs, urlparse

from .distiller import derive_rng
from .errors import EvalError
from .schema import (
    DEFAULT_LANG,
    FilterStatus,
    HeadItem,
    KnowledgeType,
    RELATION_ORDER,
    Triple,
    get_relation,
)

LABELS = ("reasonable", "unreasonable")
HB_RAW_STRATUM = "HinderedBy_raw"
HB_FILTERED_STRATUM = "HinderedBy_filtered"
STRATA = tuple(r for r in RELATION_ORDER if r != "HinderedBy") + (
    HB_RAW_STRATUM,
    HB_FILTERED_STRATUM,
)


@dataclass(frozen=True)
class EvalItem:
    sample_id: str
    triple: Triple
    stratum: str


@dataclass(frozen=True)
class EvalSample:
    items: tuple
    per_stratum_n: int

    def __post_init__(self):
        ids = [it.sample_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise EvalError("duplicate sample ids")
        sizes: dict = {}
        for it in self.items:
            sizes[it.stratum] = sizes.get(it.stratum, 0) + 1
        for stratum, size in sizes.items():
            if size != self.per_stratum_n:
                raise EvalError(
                    f"stratum {stratum} has {size} items, expected {self.per_stratum_n}"
                )

    def __len__(self) -> int:
        return len(self.items)

    def by_id(self, sample_id: str) -> EvalItem:
        for it in self.items:
            if it.sample_id == sample_id:
                return it
        raise EvalError(f"unknown sample id: {sample_id}")

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": "ckdistill-eval-sample",
            "version": 1,
            "per_stratum_n": self.per_stratum_n,
            "items": [
                {
                    "sample_id": it.sample_id,
                    "head": it.triple.head.text,
                    "head_type": it.triple.head.knowledge_type.value,
                    "relation": it.triple.relation.name,
                    "tail": it.triple.tail,
                    "filter_status": it.triple.filter_status.value,
                    "stratum": it.stratum,
                }
                for it in self.items
            ],
        }
        p.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalSample":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != "ckdistill-eval-sample":
            raise EvalError(f"not an eval sample file: {path}")
        items = tuple(
            EvalItem(
                sample_id=rec["sample_id"],
                triple=Triple(
                    head=HeadItem(rec["head"], KnowledgeType.parse(rec["head_type"])),
                    relation=get_relation(rec["relation"]),
                    tail=rec["tail"],
                    filter_status=FilterStatus(rec["filter_status"]),
                ),
                stratum=rec["stratum"],
            )
            for rec in data["items"]
        )
        return cls(items=items, per_stratum_n=data["per_stratum_n"])


def build_eval_sample(store, per_stratum_n: int, rng) -> EvalSample:
    """Uniform without-replacement sample of per_stratum_n triples from
    each of the eight strata.

    The filtered HinderedBy stratum excludes triples already drawn for
    the unfiltered one, so strata stay disjoint; at production pool sizes
    the exclusion is a negligible perturbation of uniformity.
    """
    if per_stratum_n < 1:
        raise EvalError("per_stratum_n must be >= 1")
    all_triples = store.triples("raw")
    pools: dict = {s: [] for s in STRATA}
    for t in all_triples:
        if t.relation.name == "HinderedBy":
            pools[HB_RAW_STRATUM].append(t)
            if t.filter_status == FilterStatus.KEPT:
                pools[HB_FILTERED_STRATUM].append(t)
        else:
            pools[t.relation.name].append(t)

    items = []
    taken_raw: set = set()
    for stratum in STRATA:
        pool = pools[stratum]
        if stratum == HB_FILTERED_STRATUM:
            pool = [t for t in pool if t.key not in taken_raw]
        if len(pool) < per_stratum_n:
            raise EvalError(
                f"stratum {stratum} has only {len(pool)} triples, need {per_stratum_n}"
            )
        chosen = rng.sample(pool, per_stratum_n)
        if stratum == HB_RAW_STRATUM:
            taken_raw = {t.key for t in chosen}
        items.extend(EvalItem(f"s{len(items):04d}", t, stratum) for t in chosen)
    return EvalSample(items=tuple(items), per_stratum_n=per_stratum_n)


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    annotator_id: str
    label: str
    timestamp: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise EvalError(f"label must be one of {LABELS}, got {self.label!r}")


class AnnotationStore:
    """Line-delimited annotation log; one live record per
    (sample_id, annotator), re-submission overwrites."""

    def __init__(self, path: str | Path, now: Callable[[], float] = time.time):
        self.path = Path(path)
        self._now = now
        self._lock = threading.Lock()
        self._records: dict = {}  # (sample_id, annotator) -> AnnotationRecord
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as f:
                for i, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        record = AnnotationRecord(
                            rec["sample_id"], rec["annotator"], rec["label"], rec["ts"]
                        )
                    except (json.JSONDecodeError, KeyError) as e:
                        raise EvalError(f"{self.path}:{i}: corrupt annotation record") from e
                    self._records[(record.sample_id, record.annotator_id)] = record
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def submit(self, sample_id: str, annotator_id: str, label: str) -> AnnotationRecord:
        record = AnnotationRecord(sample_id, annotator_id, label, self._now())
        with self._lock:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(
                    json.dumps(
                        {
                            "sample_id": record.sample_id,
                            "annotator": record.annotator_id,
                            "label": record.label,
                            "ts": record.timestamp,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
            self._records[(record.sample_id, record.annotator_id)] = record
        return record

    def records(self) -> dict:
        with self._lock:
            return dict(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


@dataclass(frozen=True)
class AcceptanceReport:
    per_annotator: dict            # annotator -> proportion | None
    overall: Optional[float]
    per_stratum: dict              # stratum -> proportion | None
    majority_acceptance: Optional[float]
    coverage: float
    annotated_items: int
    total_items: int

    def __post_init__(self):
        for v in list(self.per_annotator.values()) + list(self.per_stratum.values()):
            if v is not None and not 0.0 <= v <= 1.0:
                raise EvalError(f"proportion out of range: {v}")
        if not 0.0 <= self.coverage <= 1.0:
            raise EvalError(f"coverage out of range: {self.coverage}")

    def to_dict(self) -> dict:
        return {
            "per_annotator": dict(sorted(self.per_annotator.items())),
            "overall": self.overall,
            "per_stratum": {s: self.per_stratum.get(s) for s in STRATA},
            "majority_acceptance": self.majority_acceptance,
            "coverage": self.coverage,
            "annotated_items": self.annotated_items,
            "total_items": self.total_items,
        }


def _mean(values: Sequence[float]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def compute_acceptance(
    sample: EvalSample,
    records: dict,
    annotators: Optional[Sequence[str]] = None,
) -> AcceptanceReport:
    """Acceptance over whatever coverage exists.

    Each annotator's proportion is computed over the items that annotator
    completed; overall averages those proportions, so the result is
    invariant to annotator ordering. Annotators with no completed items
    are reported as None and excluded from the average.
    """
    known_ids = {it.sample_id for it in sample.items}
    for sid, _ in records:
        if sid not in known_ids:
            raise EvalError(f"annotation for unknown sample id: {sid}")
    if annotators is None:
        annotators = sorted({a for _, a in records})

    stratum_of = {it.sample_id: it.stratum for it in sample.items}
    per_annotator: dict = {}
    per_stratum_votes: dict = {s: {} for s in STRATA}
    for annotator in annotators:
        judged = [rec for key, rec in records.items() if key[1] == annotator]
        if judged:
            per_annotator[annotator] = sum(
                1 for r in judged if r.label == "reasonable"
            ) / len(judged)
        else:
            per_annotator[annotator] = None
        for r in judged:
            votes = per_stratum_votes[stratum_of[r.sample_id]].setdefault(annotator, [])
            votes.append(1.0 if r.label == "reasonable" else 0.0)

    per_stratum = {
        s: _mean([_mean(v) for v in votes.values()]) if votes else None
        for s, votes in per_stratum_votes.items()
    }

    by_item: dict = {}
    for (sid, _), rec in records.items():
        by_item.setdefault(sid, []).append(rec.label)
    item_scores = []
    for labels in by_item.values():
        yes = sum(1 for l in labels if l == "reasonable")
        no = len(labels) - yes
        item_scores.append(1.0 if yes > no else 0.0 if no > yes else 0.5)

    pair_total = len(sample.items) * len(annotators)
    return AcceptanceReport(
        per_annotator=per_annotator,
        overall=_mean(list(per_annotator.values())),
        per_stratum=per_stratum,
        majority_acceptance=_mean(item_scores) if item_scores else None,
        coverage=len(records) / pair_total if pair_total else 0.0,
        annotated_items=len(by_item),
        total_items=len(sample.items),
    )


class EvalService:
    """State behind the annotation API: the sample, the record store, the
    annotator roster, and a per-annotator serving order."""

    def __init__(
        self,
        sample: EvalSample,
        annotations: AnnotationStore,
        annotators: Sequence[str],
        language: str = DEFAULT_LANG,
        order_seed: int = 0,
    ):
        if not annotators:
            raise EvalError("at least one annotator must be registered")
        if len(set(annotators)) != len(annotators):
            raise EvalError("duplicate annotator ids")
        self.sample = sample
        self.annotations = annotations
        self.annotators = tuple(annotators)
        self.language = language
        self._orders = {}
        ids = [it.sample_id for it in sample.items]
        for annotator in annotators:
            order = list(ids)
            derive_rng(order_seed, "serving-order", annotator).shuffle(order)
            self._orders[annotator] = order

    def next_item(self, annotator: str) -> Optional[dict]:
        if annotator not in self._orders:
            raise EvalError(f"unknown annotator: {annotator}")
        done = {sid for (sid, a) in self.annotations.records() if a == annotator}
        for sid in self._orders[annotator]:
            if sid not in done:
                item = self.sample.by_id(sid)
                return {
                    "sample_id": sid,
                    "head": item.triple.head.text,
                    "relation": item.triple.relation.name,
                    "relation_sentence": item.triple.sentence(self.language),
                    "tail": item.triple.tail,
                    "remaining": len(self._orders[annotator]) - len(done),
                }
        return None

    def submit(self, sample_id: str, annotator: str, label: str) -> AnnotationRecord:
        if annotator not in self._orders:
            raise EvalError(f"unknown annotator: {annotator}")
        self.sample.by_id(sample_id)  # raises on unknown id
        return self.annotations.submit(sample_id, annotator, label)

    def progress(self) -> dict:
        records = self.annotations.records()
        completed = {a: 0 for a in self.annotators}
        for _, a in records:
            if a in completed:
                completed[a] += 1
        total = len(self.sample.items)
        pairs = total * len(self.annotators)
        return {
            "total_items": total,
            "annotators": list(self.annotators),
            "completed": completed,
            "coverage": len(records) / pairs if pairs else 0.0,
        }

    def acceptance(self) -> AcceptanceReport:
        return compute_acceptance(self.sample, self.annotations.records(), self.annotators)


_FALLBACK_PAGE = """<!doctype html>
<meta charset="utf-8">
<title>annotation api</title>
<h1>Annotation service</h1>
<p>No UI bundle is configured. The JSON API is live:</p>
<ul>
<li>GET /api/next?annotator=ID</li>
<li>POST /api/judgment {"sample_id", "annotator", "label"}</li>
<li>GET /api/progress</li>
<li>GET /api/acceptance</li>
</ul>
"""

_MIME = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


def make_server(
    service: EvalService,
    host: str = "127.0.0.1",
    port: int = 0,
    ui_dir: Optional[str | Path] = None,
) -> ThreadingHTTPServer:
    """HTTP front for an EvalService; port 0 picks a free port."""
    ui_root = Path(ui_dir).resolve() if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/api/next":
                annotator = parse_qs(url.query).get("annotator", [""])[0]
                if not annotator:
                    return self._json(400, {"error": "annotator parameter required"})
                try:
                    item = service.next_item(annotator)
                except EvalError as e:
                    return self._json(400, {"error": str(e)})
                if item is None:
                    return self._json(200, {"done": True, "remaining": 0})
                return self._json(200, {"done": False, **item})
            if url.path == "/api/progress":
                return self._json(200, service.progress())
            if url.path == "/api/acceptance":
                return self._json(200, service.acceptance().to_dict())
            if url.path.startswith("/api/"):
                return self._json(404, {"error": f"no such endpoint: {url.path}"})
            return self._static(url.path)

        def _static(self, path: str) -> None:
            if ui_root is None:
                body = _FALLBACK_PAGE.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            rel = path.lstrip("/") or "index.html"
            target = (ui_root / rel).resolve()
            if not target.is_relative_to(ui_root) or not target.is_file():
                return self._json(404, {"error": f"not found: {path}"})
            body = target.read_bytes()
            self.send_response(200)
            ctype = _MIME.get(target.suffix, "application/octet-stream")
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            url = urlparse(self.path)
            if url.path != "/api/judgment":
                return self._json(404, {"error": f"no such endpoint: {url.path}"})
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                return self._json(400, {"error": "body must be JSON"})
            missing = [k for k in ("sample_id", "annotator", "label") if k not in payload]
            if missing:
                return self._json(400, {"error": f"missing fields: {', '.join(missing)}"})
            try:
                rec = service.submit(payload["sample_id"], payload["annotator"], payload["label"])
            except EvalError as e:
                return self._json(400, {"error": str(e)})
            return self._json(
                200,
                {
                    "ok": True,
                    "sample_id": rec.sample_id,
                    "annotator": rec.annotator_id,
                    "label": rec.label,
                },
            )

    return ThreadingHTTPServer((host, port), Handler)
