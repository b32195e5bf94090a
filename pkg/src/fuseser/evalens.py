"""Classification metrics, majority-vote ensembling and exhaustive ensemble search."""

from __future__ import annotations

import itertools
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import LabelVocabulary, ids_digest
from .errors import ConfigError, DataError, IngestionError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def _as_labels(refs, preds, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(refs, dtype=np.int64).reshape(-1)
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    if r.shape != p.shape:
        raise DataError(f"length mismatch: {r.size} references vs {p.size} predictions")
    for name, a in (("reference", r), ("prediction", p)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise DataError(f"{name} label out of range [0, {num_classes})")
    return r, p


def confusion_counts(refs, preds, num_classes: int) -> ConfusionCounts:
    r, p = _as_labels(refs, preds, num_classes)
    hit = r == p
    tp = np.bincount(r[hit], minlength=num_classes)
    fp = np.bincount(p[~hit], minlength=num_classes)
    fn = np.bincount(r[~hit], minlength=num_classes)
    return ConfusionCounts(tp, fp, fn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 is defined as 0
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_f1(refs, preds, num_classes: int) -> np.ndarray:
    c = confusion_counts(refs, preds, num_classes)
    return _ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn)


def macro_f1(refs, preds, num_classes: int) -> float:
    return float(per_class_f1(refs, preds, num_classes).mean())


def macro_precision(refs, preds, num_classes: int) -> float:
    c = confusion_counts(refs, preds, num_classes)
    return float(_ratio(c.tp.astype(float), c.tp + c.fp).mean())


def macro_recall(refs, preds, num_classes: int) -> float:
    c = confusion_counts(refs, preds, num_classes)
    return float(_ratio(c.tp.astype(float), c.tp + c.fn).mean())


def micro_f1(refs, preds, num_classes: int) -> float:
    c = confusion_counts(refs, preds, num_classes)
    tp, fp, fn = c.tp.sum(), c.fp.sum(), c.fn.sum()
    den = 2 * tp + fp + fn
    return float(2 * tp / den) if den else 0.0


def all_metrics(refs, preds, num_classes: int) -> dict[str, float]:
    return {
        "macro_f1": macro_f1(refs, preds, num_classes),
        "micro_f1": micro_f1(refs, preds, num_classes),
        "recall": macro_recall(refs, preds, num_classes),
        "precision": macro_precision(refs, preds, num_classes),
    }


# ---------------------------------------------------------------------------
# prediction sets and voting


@dataclass
class PredictionSet:
    model_name: str
    predictions: dict[str, int]
    split_digest: str = ""

    def __post_init__(self) -> None:
        if not self.split_digest:
            self.split_digest = ids_digest(self.predictions)

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.predictions[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{self.model_name}: no prediction for utterance {exc.args[0]!r}") from None

    def save(self, path: str | os.PathLike, vocab: LabelVocabulary) -> None:
        lines = [
            json.dumps({"id": uid, "label": vocab.labels[lab]})
            for uid, lab in sorted(self.predictions.items())
        ]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(
        cls, path: str | os.PathLike, vocab: LabelVocabulary, name: str | None = None
    ) -> "PredictionSet":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError as exc:
            raise IngestionError(f"prediction file not found: {path}") from exc
        preds: dict[str, int] = {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid, label = str(rec["id"]), rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IngestionError(f"{path}:{n}: malformed prediction record") from exc
            if uid in preds:
                raise IngestionError(f"{path}:{n}: duplicate utterance id {uid!r}")
            preds[uid] = vocab.index(label)
        return cls(name or path.stem, preds)


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[str, ...]
    tiebreaker: str

    def __post_init__(self) -> None:
        if len(self.members) < 3:
            raise ConfigError(f"an ensemble needs at least 3 members, got {len(self.members)}")
        if len(set(self.members)) != len(self.members):
            raise ConfigError(f"duplicate ensemble members: {self.members}")
        if self.tiebreaker not in self.members:
            raise ConfigError(f"tiebreaker {self.tiebreaker!r} is not an ensemble member")


def majority_vote(sets: Sequence[PredictionSet], spec: EnsembleSpec) -> PredictionSet:
    """Plurality vote over ``spec.members``; any tie defers to the tiebreaker's prediction."""
    by_name = {s.model_name: s for s in sets}
    if spec.tiebreaker not in by_name:
        raise ConfigError(f"tiebreaker {spec.tiebreaker!r} has no prediction set")
    missing = [m for m in spec.members if m not in by_name]
    if missing:
        raise ConfigError(f"ensemble members without prediction sets: {missing}")
    members = [by_name[m] for m in sorted(spec.members)]
    digests = {s.split_digest for s in members}
    if len(digests) != 1:
        raise DataError("prediction sets cover different evaluation splits")
    ids = sorted(members[0].predictions)
    votes = np.stack([s.labels_for(ids) for s in members])
    tie = by_name[spec.tiebreaker].labels_for(ids)
    out: dict[str, int] = {}
    for j, uid in enumerate(ids):
        ranked = Counter(votes[:, j].tolist()).most_common()
        if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
            out[uid] = int(tie[j])
        else:
            out[uid] = int(ranked[0][0])
    name = "vote(" + ",".join(sorted(spec.members)) + ")"
    return PredictionSet(name, out, members[0].split_digest)


def balanced_subsets(
    refs: Mapping[str, int], num_classes: int, count: int = 100, seed: int = 0
) -> list[list[str]]:
    """``count`` independent subsets with ``n_min`` utterances of every class each."""
    by_class: list[list[str]] = [[] for _ in range(num_classes)]
    for uid in sorted(refs):
        by_class[refs[uid]].append(uid)
    empty = [c for c, ids in enumerate(by_class) if not ids]
    if empty:
        raise ConfigError(f"classes {empty} have no evaluation utterances")
    n_min = min(len(ids) for ids in by_class)
    rng = np.random.default_rng(seed)
    subsets = []
    for _ in range(count):
        chosen: list[str] = []
        for ids in by_class:
            picks = rng.choice(len(ids), size=n_min, replace=False)
            chosen.extend(ids[i] for i in sorted(picks))
        subsets.append(chosen)
    return subsets


@dataclass
class SearchResult:
    spec: EnsembleSpec
    mean_macro_f1: float
    table: list[dict] = field(default_factory=list)


def subset_scores(
    preds: PredictionSet, refs: Mapping[str, int], subsets: Sequence[Sequence[str]], num_classes: int
) -> np.ndarray:
    return np.array(
        [
            macro_f1([refs[u] for u in sub], preds.labels_for(sub), num_classes)
            for sub in subsets
        ]
    )


def ensemble_search(
    sets: Sequence[PredictionSet],
    best_model: str,
    refs: Mapping[str, int],
    subsets: Sequence[Sequence[str]],
    num_classes: int,
) -> SearchResult:
    """Score every member set of size >= 3 that contains ``best_model``.

    Ranking: highest mean macro-F1 over ``subsets``, then fewer members, then
    lexicographic member names. The table lists every admissible ensemble in
    rank order.
    """
    names = sorted(s.model_name for s in sets)
    if len(set(names)) != len(names):
        raise ConfigError("prediction sets must have distinct model names")
    if len(names) < 3:
        raise ConfigError(f"need at least 3 candidate models, got {len(names)}")
    if best_model not in names:
        raise ConfigError(f"best model {best_model!r} is not among the candidates")
    others = [n for n in names if n != best_model]
    rows = []
    for size in range(2, len(others) + 1):
        for combo in itertools.combinations(others, size):
            members = tuple(sorted((best_model, *combo)))
            spec = EnsembleSpec(members, best_model)
            scores = subset_scores(majority_vote(sets, spec), refs, subsets, num_classes)
            rows.append(
                {
                    "members": list(members),
                    "mean_macro_f1": float(scores.mean()),
                    "std": float(scores.std()),
                }
            )
    rows.sort(key=lambda r: (-r["mean_macro_f1"], len(r["members"]), r["members"]))
    top = rows[0]
    return SearchResult(EnsembleSpec(tuple(top["members"]), best_model), top["mean_macro_f1"], rows)
