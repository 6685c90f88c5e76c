"""Self-instruct filtering of negative-knowledge triples.

A sample of raw HinderedBy triples is labeled valid/invalid by the same
LLM that generated them, and those labels train a lightweight binary
classifier that scores the full raw set. The reference classifier is a
character n-gram hashed-feature logistic model: dependency-light,
deterministic, and fast to train in-repo. An ``external`` model kind
delegates scoring to a subprocess or HTTP scorer for anyone who wants a
heavier encoder behind the same interface.
"""
from __future__ import annotations

import json
import random
import re
import subprocess
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FilterError
from .gateway import CompletionRequest, GatewayBase
from .schema import (
    DEFAULT_LANG,
    FilterStatus,
    PromptSpec,
    TemplateSet,
    Triple,
    render_judge_prompt,
)

LABELS = ("valid", "invalid")

# Verdict mapping, negative family first so "不合理" never matches the
# affirmative "合理" prefix.
_NO_RE = re.compile(r"^(否|不|没|无效|错)|^(no|invalid|unreasonable|false|incorrect)\b")
_YES_RE = re.compile(r"^(是|对|合理|正确|可以)|^(yes|valid|reasonable|true|correct)\b")
_STRIP = re.compile(r"^[\s\"'“”‘’（(【\[.,，。:：]+")


def map_judge_text(text: str) -> str | None:
    """Map a judge reply onto valid/invalid; None when unmappable."""
    cleaned = _STRIP.sub("", text.strip().lower())
    if _NO_RE.search(cleaned):
        return "invalid"
    if _YES_RE.search(cleaned):
        return "valid"
    return None


@dataclass(frozen=True)
class JudgedSample:
    triple: Triple
    label: str
    judge_raw_text: str
    unmappable: bool = False

    def __post_init__(self):
        if self.triple.relation.name != "HinderedBy":
            raise FilterError("only HinderedBy triples are judged")
        if self.label not in LABELS:
            raise FilterError(f"bad judge label: {self.label!r}")


def sample_for_judging(raw: Sequence[Triple], n: int, rng: random.Random) -> list:
    """Uniform sample without replacement from the raw HinderedBy pool."""
    for t in raw:
        if t.relation.name != "HinderedBy":
            raise FilterError(f"non-HinderedBy triple in judging pool: {t.relation.name}")
    if len(raw) < n:
        raise FilterError(f"cannot sample {n} triples from a pool of {len(raw)}")
    return rng.sample(list(raw), n)


@dataclass
class JudgeOutcome:
    samples: list
    skipped: list = field(default_factory=list)  # (triple, reason)


def judge(
    triples: Sequence[Triple],
    gateway: GatewayBase,
    templates: TemplateSet,
    spec: PromptSpec | None = None,
) -> JudgeOutcome:
    """Ask the gateway for a validity verdict on each triple.

    Unmappable replies get one retry, then count as invalid (conservative:
    an unsure judge should not let a triple through). Transport failures
    are skipped and reported, never silently dropped.
    """
    spec = spec or PromptSpec.judge()
    reqs = [
        CompletionRequest.user(
            gateway.model_id, render_judge_prompt(t, templates), spec.temperature
        )
        for t in triples
    ]
    outcome = JudgeOutcome(samples=[])
    results = gateway.complete_batch(reqs)
    for res, triple in zip(results, triples):
        if not res.ok:
            outcome.skipped.append((triple, str(res.error)))
            continue
        text = res.response.text
        label = map_judge_text(text)
        unmappable = False
        if label is None:
            try:
                retry = gateway.complete(reqs[res.index])
            except Exception as e:
                outcome.skipped.append((triple, str(e)))
                continue
            text = retry.text
            label = map_judge_text(text)
            if label is None:
                label = "invalid"
                unmappable = True
        outcome.samples.append(
            JudgedSample(triple=triple, label=label, judge_raw_text=text, unmappable=unmappable)
        )
    return outcome


def save_judged_samples(samples: Sequence[JudgedSample], path: str | Path) -> None:
    """Audit log: one record per judged triple."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(
                json.dumps(
                    {
                        "head": s.triple.head.text,
                        "head_type": s.triple.head.knowledge_type.value,
                        "tail": s.triple.tail,
                        "label": s.label,
                        "judge_raw_text": s.judge_raw_text,
                        "unmappable": s.unmappable,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


# --- reference classifier -------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    ngram_sizes: tuple = (1, 2, 3)
    hash_size: int = 16384

    def __post_init__(self):
        if self.hash_size < 2 or not self.ngram_sizes:
            raise FilterError("feature spec needs ngram sizes and hash_size >= 2")


def featurize_texts(texts: Sequence[str], spec: FeatureSpec) -> np.ndarray:
    """Hashed character n-gram counts, L2-normalized per row.

    Buckets come from crc32 so features are stable across processes and
    Python hash seeds.
    """
    X = np.zeros((len(texts), spec.hash_size), dtype=np.float64)
    for i, text in enumerate(texts):
        for n in spec.ngram_sizes:
            for j in range(len(text) - n + 1):
                bucket = zlib.crc32(text[j : j + n].encode("utf-8")) % spec.hash_size
                X[i, bucket] += 1.0
        norm = np.linalg.norm(X[i])
        if norm > 0:
            X[i] /= norm
    return X


def triple_feature_text(triple: Triple, lang: str = DEFAULT_LANG) -> str:
    return triple.sentence(lang)


def logistic_loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple:
    """Mean cross-entropy with L2 on the weights.

    Returns (loss, grad_w, grad_b); y holds 1 for valid, 0 for invalid.
    """
    z = X @ w + b
    # log(1 + exp(-|z|)) form avoids overflow on both tails
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w, w))
    p = 1.0 / (1.0 + np.exp(-z))
    diff = p - y
    grad_w = X.T @ diff / len(y) + l2 * w
    grad_b = float(np.mean(diff))
    return loss, grad_w, grad_b


@dataclass
class NgramLinearModel:
    """The in-repo reference filter: linear over hashed char n-grams."""

    feature_spec: FeatureSpec
    weights: np.ndarray
    bias: float
    threshold: float = 0.5
    language: str = DEFAULT_LANG
    kind: str = "ngram_linear"

    def __post_init__(self):
        if self.weights.shape != (self.feature_spec.hash_size,):
            raise FilterError("weight vector does not match the hash size")
        if not 0.0 < self.threshold < 1.0:
            raise FilterError("threshold must lie in (0, 1)")

    def score_texts(self, texts: Sequence[str]) -> np.ndarray:
        X = featurize_texts(texts, self.feature_spec)
        return 1.0 / (1.0 + np.exp(-(X @ self.weights + self.bias)))

    def score_triples(self, triples: Sequence[Triple]) -> np.ndarray:
        return self.score_texts([triple_feature_text(t, self.language) for t in triples])

    def to_dict(self) -> dict:
        return {
            "format": "ckdistill-filter-model",
            "version": 1,
            "kind": self.kind,
            "ngram_sizes": list(self.feature_spec.ngram_sizes),
            "hash_size": self.feature_spec.hash_size,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "threshold": self.threshold,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NgramLinearModel":
        if data.get("format") != "ckdistill-filter-model":
            raise FilterError("not a filter model file")
        return cls(
            feature_spec=FeatureSpec(tuple(data["ngram_sizes"]), data["hash_size"]),
            weights=np.asarray(data["weights"], dtype=np.float64),
            bias=float(data["bias"]),
            threshold=float(data["threshold"]),
            language=data.get("language", DEFAULT_LANG),
        )


@dataclass
class ExternalModel:
    """Delegates scoring to a subprocess (JSONL in, one score per line out)
    or to an HTTP scorer accepting {"texts": [...]} and returning
    {"scores": [...]}."""

    command: tuple = ()
    url: str = ""
    threshold: float = 0.5
    language: str = DEFAULT_LANG
    kind: str = "external"

    def __post_init__(self):
        if bool(self.command) == bool(self.url):
            raise FilterError("external model needs exactly one of command/url")

    def score_texts(self, texts: Sequence[str]) -> np.ndarray:
        if self.command:
            payload = "\n".join(json.dumps({"text": t}, ensure_ascii=False) for t in texts)
            proc = subprocess.run(
                list(self.command),
                input=payload,
                capture_output=True,
                text=True,
                check=True,
            )
            scores = [float(line) for line in proc.stdout.split()]
        else:
            import httpx

            resp = httpx.post(self.url, json={"texts": list(texts)}, timeout=120.0)
            resp.raise_for_status()
            scores = [float(s) for s in resp.json()["scores"]]
        if len(scores) != len(texts):
            raise FilterError(
                f"external scorer returned {len(scores)} scores for {len(texts)} texts"
            )
        return np.asarray(scores, dtype=np.float64)

    def score_triples(self, triples: Sequence[Triple]) -> np.ndarray:
        return self.score_texts([triple_feature_text(t, self.language) for t in triples])

    def to_dict(self) -> dict:
        return {
            "format": "ckdistill-filter-model",
            "version": 1,
            "kind": self.kind,
            "command": list(self.command),
            "url": self.url,
            "threshold": self.threshold,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExternalModel":
        return cls(
            command=tuple(data.get("command", ())),
            url=data.get("url", ""),
            threshold=float(data["threshold"]),
            language=data.get("language", DEFAULT_LANG),
        )


def save_model(model, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(model.to_dict(), ensure_ascii=False), encoding="utf-8")


def load_model(path: str | Path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != "ckdistill-filter-model":
        raise FilterError(f"not a filter model file: {path}")
    if data.get("kind") == "external":
        return ExternalModel.from_dict(data)
    return NgramLinearModel.from_dict(data)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 300
    learning_rate: float = 2.0
    l2: float = 1e-4
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    language: str = DEFAULT_LANG
    calibrate_threshold: bool = False


def calibrate_threshold(scores: np.ndarray, y: np.ndarray) -> float:
    """Threshold maximizing F1 on held-out labels; midpoint between the
    neighboring scores, lowest such threshold on ties."""
    order = np.argsort(scores)
    s_sorted = scores[order]
    candidates = [0.5]
    candidates.extend(
        float((s_sorted[i] + s_sorted[i + 1]) / 2.0) for i in range(len(s_sorted) - 1)
    )
    best_t, best_f1 = 0.5, -1.0
    for t in sorted(set(candidates)):
        if not 0.0 < t < 1.0:
            continue
        pred = scores >= t
        tp = float(np.sum(pred & (y == 1)))
        fp = float(np.sum(pred & (y == 0)))
        fn = float(np.sum(~pred & (y == 1)))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f1 + 1e-12:
            best_t, best_f1 = t, f1
    return best_t


def train_filter(
    samples: Sequence[JudgedSample],
    holdout_fraction: float,
    rng: random.Random,
    settings: TrainSettings | None = None,
) -> tuple:
    """Fit the reference model by full-batch gradient descent.

    Returns (model, holdout_accuracy). Deterministic given the rng: the
    only random step is the train/holdout shuffle.
    """
    settings = settings or TrainSettings()
    if not 0.0 < holdout_fraction <= 0.5:
        raise FilterError("holdout_fraction must lie in (0, 0.5]")
    labels = {s.label for s in samples}
    if labels != set(LABELS):
        raise FilterError(
            "training needs both valid and invalid labels; "
            f"got only {sorted(labels)}"
        )
    texts = [triple_feature_text(s.triple, settings.language) for s in samples]
    y_all = np.array([1.0 if s.label == "valid" else 0.0 for s in samples])
    X_all = featurize_texts(texts, settings.feature_spec)

    idx = list(range(len(samples)))
    rng.shuffle(idx)
    n_hold = max(1, round(holdout_fraction * len(samples)))
    hold_idx, train_idx = idx[:n_hold], idx[n_hold:]
    if not train_idx:
        raise FilterError("holdout leaves no training data")
    X_tr, y_tr = X_all[train_idx], y_all[train_idx]
    X_ho, y_ho = X_all[hold_idx], y_all[hold_idx]
    if len(set(y_tr.tolist())) < 2:
        raise FilterError("training split ended up single-class; lower the holdout")

    w = np.zeros(settings.feature_spec.hash_size)
    b = 0.0
    for _ in range(settings.epochs):
        _, gw, gb = logistic_loss_and_grad(w, b, X_tr, y_tr, settings.l2)
        w -= settings.learning_rate * gw
        b -= settings.learning_rate * gb

    model = NgramLinearModel(
        feature_spec=settings.feature_spec,
        weights=w,
        bias=b,
        language=settings.language,
    )
    hold_scores = model.score_texts([texts[i] for i in hold_idx])
    accuracy = float(np.mean((hold_scores >= model.threshold) == (y_ho == 1.0)))
    if settings.calibrate_threshold:
        model.threshold = calibrate_threshold(hold_scores, y_ho.astype(int))
        accuracy = float(np.mean((hold_scores >= model.threshold) == (y_ho == 1.0)))
    return model, accuracy


@dataclass(frozen=True)
class FilterReport:
    total: int
    kept: int
    removed: int

    def __post_init__(self):
        if self.kept + self.removed != self.total:
            raise FilterError("filter report counts are inconsistent")

    @property
    def kept_rate(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "removed": self.removed,
            "kept_rate": self.kept_rate,
        }


def apply_filter(raw: Sequence[Triple], model) -> tuple:
    """Score every raw HinderedBy triple and split on the threshold.

    Returns (kept, removed, report); outputs carry the kept/removed status.
    Scores at or above the threshold are kept.
    """
    for t in raw:
        if t.relation.name != "HinderedBy" or t.filter_status != FilterStatus.RAW:
            raise FilterError(
                "apply_filter expects raw HinderedBy triples, got "
                f"{t.relation.name}/{t.filter_status.value}"
            )
    if not raw:
        return [], [], FilterReport(0, 0, 0)
    scores = model.score_triples(raw)
    kept, removed = [], []
    for triple, score in zip(raw, scores):
        if score >= model.threshold:
            kept.append(replace(triple, filter_status=FilterStatus.KEPT))
        else:
            removed.append(replace(triple, filter_status=FilterStatus.REMOVED))
    return kept, removed, FilterReport(len(raw), len(kept), len(removed))
