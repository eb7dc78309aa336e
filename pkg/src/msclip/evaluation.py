"""Zero-shot classification, multilabel decision rules, retrieval mAP@k and report I/O."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _accel
from .data import decode_msr1, encode_msr1
from .errors import EmptyTemplates, LabelNotInClassSet, ShapeMismatch
from .tokenizer import Vocabulary, encode_batch

DEFAULT_TEMPLATES = (
    "a satellite photo of {}",
    "a satellite image of {}",
    "an aerial photo of {}",
    "a remote sensing image of {}",
    "an overhead view of {}",
    "a satellite view of {}",
    "an image of {} taken from above",
    "a top-down photo of {}",
)
NEGATIVE_CLASS_NAME = "other features"


@dataclass(frozen=True)
class ClassSpec:
    name: str
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self):
        if not self.templates:
            raise EmptyTemplates(f"class {self.name!r} has no templates")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template {t!r} must contain '{{}}' exactly once")

    def prompts(self) -> list[str]:
        return [t.format(self.name) for t in self.templates]


def load_templates(path: str | Path) -> tuple[str, ...]:
    """One template per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = tuple(s.strip() for s in lines if s.strip() and not s.lstrip().startswith("#"))
    if not out:
        raise EmptyTemplates(f"no templates in {path}")
    return out


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def build_class_embeddings(encode_text: Callable[[np.ndarray], np.ndarray],
                           classes: Sequence[ClassSpec], vocab: Vocabulary,
                           context_length: int) -> np.ndarray:
    """Per class: mean of the template prompt embeddings, renormalised to unit length."""
    if not classes:
        raise ValueError("need at least one class")
    out = []
    for c in classes:
        emb = encode_text(encode_batch(c.prompts(), vocab, context_length))
        mean = np.asarray(emb, dtype=np.float64).mean(axis=0, keepdims=True)
        out.append(_unit_rows(mean)[0])
    return np.stack(out).astype(np.asarray(emb).dtype)


def similarities(image_embs: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    return np.asarray(image_embs, dtype=np.float64) @ np.asarray(class_embs, dtype=np.float64).T


def top1(sims: np.ndarray) -> np.ndarray:
    """Row argmax; numpy returns the first maximum, i.e. the lowest class index on ties."""
    return np.argmax(sims, axis=1)


def macro_recall(pred: np.ndarray, truth: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    per = np.zeros(k)
    present = np.zeros(k, dtype=bool)
    for c in range(k):
        sel = truth == c
        if sel.any():
            present[c] = True
            per[c] = float(np.mean(pred[sel] == c))
    return per, float(per[present].mean()) if present.any() else 0.0


def classify_top1(image_embs: np.ndarray, class_embs: np.ndarray, true_labels: Sequence[int],
                  ) -> tuple[np.ndarray, float]:
    """Predictions and macro top-1 accuracy (mean per-class recall over classes present)."""
    k = class_embs.shape[0]
    if k < 2:
        raise ValueError("top-1 classification needs at least 2 classes")
    truth = np.asarray(true_labels)
    if truth.size and (truth.min() < 0 or truth.max() >= k):
        raise LabelNotInClassSet(f"labels must lie in [0, {k})")
    pred = top1(similarities(image_embs, class_embs))
    return pred, macro_recall(pred, truth, k)[1]


def multilabel_eq2_from_sims(sims: np.ndarray) -> np.ndarray:
    """Class i is on iff its similarity beats the mean similarity of the other K-1 classes.

    ``s_i > (S - s_i)/(K-1)`` is evaluated as ``(K-1) s_i > S - s_i``, so exact ties
    give 0 without a division.
    """
    sims = np.asarray(sims, dtype=np.float64)
    k = sims.shape[-1]
    if k < 2:
        raise ValueError("the mean-of-others rule needs at least 2 classes")
    total = sims.sum(axis=-1, keepdims=True)
    return ((k - 1) * sims > total - sims).astype(np.int8)


def multilabel_eq2(image_emb: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    return multilabel_eq2_from_sims(similarities(np.atleast_2d(image_emb), class_embs))[0]


def multilabel_negative_class_from_sims(sims: np.ndarray, neg_sims: np.ndarray) -> np.ndarray:
    sims = np.asarray(sims, dtype=np.float64)
    neg = np.asarray(neg_sims, dtype=np.float64)
    return (sims > neg[..., None]).astype(np.int8)


def multilabel_negative_class(image_emb: np.ndarray, class_embs: np.ndarray,
                              negative_emb: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(image_emb)
    return multilabel_negative_class_from_sims(similarities(x, class_embs),
                                               similarities(x, np.atleast_2d(negative_emb))[:, 0])[0]


def average_precision_at_k(ranking: Sequence, relevant, k: int = 100,
                           warn: bool = True) -> float:
    """AP@k normalised by ``min(|relevant|, k)``; 0.0 (with a warning) for an empty relevant set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        if warn:
            warnings.warn("empty relevant set: AP defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    rel = np.fromiter((item in relevant for item in ranking), dtype=np.bool_, count=len(ranking))
    return float(_accel.ap_from_relevance(rel, len(relevant), int(k)))


def rank_by_similarity(scores: np.ndarray) -> np.ndarray:
    """Descending order; stable sort keeps the lower index first on ties."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class RetrievalResult:
    per_class_ap: np.ndarray
    mean_ap: float
    empty_classes: list[int] = field(default_factory=list)


def retrieve_text_to_image(class_embs: np.ndarray, image_embs: np.ndarray,
                           relevance: Sequence[set[int]], k: int = 100) -> RetrievalResult:
    """Rank all images for each class query and average AP@k over classes."""
    if image_embs.shape[0] < 1:
        raise ValueError("need at least one image")
    if len(relevance) != class_embs.shape[0]:
        raise ShapeMismatch("one relevance set per class is required")
    sims = similarities(image_embs, class_embs)
    per = np.zeros(class_embs.shape[0])
    empty = []
    for c in range(class_embs.shape[0]):
        if not relevance[c]:
            empty.append(c)
        per[c] = average_precision_at_k(rank_by_similarity(sims[:, c]), relevance[c], k, warn=False)
    if empty:
        warnings.warn(f"classes {empty} have no relevant images; their AP is 0", RuntimeWarning,
                      stacklevel=2)
    return RetrievalResult(per, float(per.mean()), empty)


@dataclass
class PRF1:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def macro(self) -> tuple[float, float, float]:
        return float(self.precision.mean()), float(self.recall.mean()), float(self.f1.mean())


def macro_prf1(predictions: np.ndarray, truths: np.ndarray) -> PRF1:
    """Per-class P/R/F1 over an (N, K) binary matrix with the 0-when-undefined convention."""
    pred = np.asarray(predictions).astype(bool)
    truth = np.asarray(truths).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    fp = (pred & ~truth).sum(axis=0).astype(np.float64)
    fn = (~pred & truth).sum(axis=0).astype(np.float64)
    p = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    r = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return PRF1(p, r, f)


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    class_names: list[str]
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    config: dict

    def to_json(self) -> dict:
        return {"class_names": self.class_names, "per_class": self.per_class,
                "macro": self.macro, "config": self.config}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        """Fixed-width rendering: per-class rows, then the macro row."""
        head = f"{'class':<28}| {'acc':>7} {'prec':>7} {'rec':>7} {'f1':>7} | {'AP@100':>7}"
        lines = [f"{'':<28}| {'classification':^31} | {'retrieval':>7}", head, "-" * len(head)]
        for name in self.class_names:
            m = self.per_class[name]
            lines.append(f"{name[:28]:<28}| {100 * m['accuracy']:7.2f} {100 * m['precision']:7.2f} "
                         f"{100 * m['recall']:7.2f} {100 * m['f1']:7.2f} | {100 * m['ap_at_100']:7.2f}")
        m = self.macro
        lines.append("-" * len(head))
        lines.append(f"{'macro':<28}| {100 * m['accuracy']:7.2f} {100 * m['precision']:7.2f} "
                     f"{100 * m['recall']:7.2f} {100 * m['f1']:7.2f} | {100 * m['map_at_100']:7.2f}")
        return "\n".join(lines)


def label_matrix(labels: Sequence[Sequence[str]], class_names: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_names)}
    out = np.zeros((len(labels), len(class_names)), dtype=np.int8)
    for r, labs in enumerate(labels):
        for lab in labs:
            if lab not in index:
                raise LabelNotInClassSet(f"label {lab!r} is not in the class set")
            out[r, index[lab]] = 1
    return out


def evaluate_embeddings(image_embs: np.ndarray, labels: Sequence[Sequence[str]],
                        class_names: Sequence[str], class_embs: np.ndarray,
                        method: str = "eq2", negative_emb: np.ndarray | None = None,
                        k: int = 100, config: Mapping | None = None) -> EvalReport:
    """Build an EvalReport from precomputed embeddings.

    Single-label data (every sample has one label) is scored with top-1
    predictions; per-class accuracy is then per-class recall. Multilabel data is
    scored with the chosen binary rule (``eq2`` or ``negclass``) and per-class
    accuracy is binary accuracy over all samples.
    """
    if method not in ("eq2", "negclass"):
        raise ValueError(f"unknown multilabel method {method!r}")
    truth = label_matrix(labels, class_names)
    sims = similarities(image_embs, class_embs)
    kc = len(class_names)
    multilabel = bool(np.any(truth.sum(axis=1) != 1))
    if multilabel:
        if method == "eq2":
            pred = multilabel_eq2_from_sims(sims)
        else:
            if negative_emb is None:
                raise ValueError("negclass needs a negative class embedding")
            pred = multilabel_negative_class_from_sims(sims, similarities(image_embs, negative_emb[None])[:, 0])
        per_acc = (pred == truth).mean(axis=0)
        macro_acc = float(per_acc.mean())
    else:
        p1 = top1(sims)
        pred = np.zeros_like(truth)
        pred[np.arange(len(p1)), p1] = 1
        per_acc, macro_acc = macro_recall(p1, truth.argmax(axis=1), kc)
    prf = macro_prf1(pred, truth)
    relevance = [set(np.flatnonzero(truth[:, c]).tolist()) for c in range(kc)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ret = retrieve_text_to_image(class_embs, image_embs, relevance, k)
    per_class = {}
    for c, name in enumerate(class_names):
        per_class[name] = {"accuracy": float(per_acc[c]), "precision": float(prf.precision[c]),
                           "recall": float(prf.recall[c]), "f1": float(prf.f1[c]),
                           "ap_at_100": float(ret.per_class_ap[c])}
    mp, mr, mf = prf.macro
    macro = {"accuracy": macro_acc, "precision": mp, "recall": mr, "f1": mf,
             "map_at_100": ret.mean_ap}
    cfg = dict(config or {})
    cfg.update({"method": method, "task": "multilabel" if multilabel else "single-label",
                "num_samples": int(len(labels)), "retrieval_k": k,
                "classes_without_relevant": [class_names[c] for c in ret.empty_classes]})
    return EvalReport(list(class_names), per_class, macro, cfg)


def load_report(path: str | Path) -> EvalReport:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(obj["class_names"], obj["per_class"], obj["macro"], obj["config"])


# ---------------------------------------------------------------------------
# embedding export


def write_embeddings(emb_path: str | Path, labels_path: str | Path, embeddings: np.ndarray,
                     labels: Sequence[Sequence[str]]) -> None:
    """Float32 matrix in an MSR1 container with no bands (height=N, width=D) plus a label file.

    Labels are one line per row; multiple labels are joined with ``|``.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.shape[0] != len(labels):
        raise ShapeMismatch("one label entry per embedding row is required")
    for path in (emb_path, labels_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        Path(emb_path).write_bytes(encode_msr1([], emb[None]))
        Path(labels_path).write_text("".join("|".join(labs) + "\n" for labs in labels), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write embeddings to {e.filename}: {e.strerror}") from e


def read_embeddings(emb_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, list[list[str]]]:
    names, vals = decode_msr1(Path(emb_path).read_bytes())
    if names:
        raise ShapeMismatch(f"{emb_path} is a raster, not an embedding matrix")
    labels = [line.split("|") for line in Path(labels_path).read_text(encoding="utf-8").splitlines()]
    if len(labels) != vals.shape[1]:
        raise ShapeMismatch(f"{labels_path} has {len(labels)} rows, matrix has {vals.shape[1]}")
    return vals[0], labels
