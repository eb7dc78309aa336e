"""Glue between records, a trained model and the evaluation metrics."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import SceneRecord, model_input
from .errors import InvalidConfig
from .evaluation import (
    DEFAULT_TEMPLATES, NEGATIVE_CLASS_NAME, ClassSpec, EvalReport, build_class_embeddings,
    evaluate_embeddings, write_embeddings,
)
from .tokenizer import Vocabulary


def class_names_from(records: Sequence[SceneRecord]) -> list[str]:
    return sorted({lab for r in records for lab in r.class_labels})


def embed_records(params: M.ModelParameters, records: Sequence[SceneRecord],
                  chunk: int = 128) -> np.ndarray:
    cfg = params.config
    stats = cfg.stats()
    if stats is None:
        raise InvalidConfig("model has no normalisation stats")
    out = []
    for i in range(0, len(records), chunk):
        batch = model_input([r.load_image() for r in records[i:i + chunk]], cfg.bands(), stats,
                            cfg.image_size)
        out.append(M.encode_image(params, batch))
    if not out:
        return np.zeros((0, cfg.proj_dim), dtype=params.dtype)
    return np.concatenate(out)


def class_embeddings(params: M.ModelParameters, vocab: Vocabulary, names: Sequence[str],
                     templates: Sequence[str] = DEFAULT_TEMPLATES) -> np.ndarray:
    specs = [ClassSpec(n, tuple(templates)) for n in names]
    return build_class_embeddings(lambda t: M.encode_text(params, t), specs, vocab,
                                  params.config.context_length)


def evaluate_model(params: M.ModelParameters, vocab: Vocabulary, records: Sequence[SceneRecord],
                   class_names: Sequence[str] | None = None,
                   templates: Sequence[str] = DEFAULT_TEMPLATES, method: str = "eq2",
                   negative_name: str = NEGATIVE_CLASS_NAME, checkpoint_id: str | None = None,
                   image_embs: np.ndarray | None = None) -> EvalReport:
    names = list(class_names) if class_names is not None else class_names_from(records)
    if image_embs is None:
        image_embs = embed_records(params, records)
    cembs = class_embeddings(params, vocab, names, templates)
    neg = class_embeddings(params, vocab, [negative_name], templates)[0]
    config = {"bands": [b.value for b in params.config.bands()], "templates": list(templates),
              "checkpoint": checkpoint_id, "negative_class": negative_name}
    return evaluate_embeddings(image_embs, [r.class_labels for r in records], names, cembs,
                               method=method, negative_emb=neg, config=config)


def export_embeddings(params: M.ModelParameters, records: Sequence[SceneRecord],
                      emb_path: str | Path, labels_path: str | Path) -> np.ndarray:
    embs = embed_records(params, records)
    write_embeddings(emb_path, labels_path, embs, [r.class_labels for r in records])
    return embs
