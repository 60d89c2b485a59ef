"""Two-stage text-to-image search, attribute recognition, and their metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from . import numcore as nc
from .attributes.space import UNKNOWN
from .encoders import APTM, trim_padding

log = logging.getLogger(__name__)

DEFAULT_SHORTLIST = 128


@dataclass
class Gallery:
    image_ids: list
    person_ids: list
    features: np.ndarray  # (N, p) unit-norm projected [CLS] features
    embeddings: np.ndarray  # (N, rows, d) image encoder outputs for reranking

    def __post_init__(self):
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("gallery image ids must be unique")
        n = len(self.image_ids)
        if not (len(self.person_ids) == len(self.features) == len(self.embeddings) == n):
            raise ValueError("gallery fields disagree in length")
        if n and np.abs(np.linalg.norm(self.features, axis=1) - 1.0).max() > 1e-4:
            raise ValueError("gallery features must be unit norm")

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class RankedResult:
    query_id: Hashable
    image_ids: list = field(default_factory=list)
    similarities: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)  # None past the shortlist

    def __len__(self) -> int:
        return len(self.image_ids)

    def rows(self):
        return list(zip(self.image_ids, self.similarities, self.probabilities))


def two_stage_order(ids: Sequence, sims: np.ndarray, score: Callable[[np.ndarray], np.ndarray],
                    k: int = DEFAULT_SHORTLIST) -> tuple[list[int], dict]:
    """Positions of ``ids`` in final order, plus ``{position: score}`` for the shortlist.

    Stage 1 sorts by similarity (desc, ties by id). The top ``min(k, n)`` are
    re-sorted by ``score`` (desc, ties by similarity, then id); the rest keep
    stage-1 order after them.
    """
    if k < 1:
        raise ValueError("shortlist size must be at least 1")
    n = len(ids)
    stage1 = sorted(range(n), key=lambda i: (-sims[i], ids[i]))
    short = np.asarray(stage1[: min(k, n)], dtype=np.int64)
    probs = np.asarray(score(short), dtype=np.float64) if short.size else np.zeros(0)
    by_pos = dict(zip(short.tolist(), probs.tolist()))
    head = sorted(short.tolist(), key=lambda i: (-by_pos[i], -sims[i], ids[i]))
    return head + stage1[len(short):], by_pos


def build_gallery(model: APTM, pixels: np.ndarray, image_ids: list, person_ids: list,
                  batch_size: int = 32) -> Gallery:
    feats, embs = [], []
    with nc.no_grad():
        for s in range(0, len(pixels), batch_size):
            V = model.encode_image(pixels[s:s + batch_size])
            embs.append(V.data)
            feats.append(model.project_image(V[:, 0]).data)
    d = model.cfg.text.embed_dim
    rows = model.cfg.image.num_patches + 1
    return Gallery(list(image_ids), list(person_ids),
                   np.concatenate(feats) if feats else np.zeros((0, model.cfg.proj_dim)),
                   np.concatenate(embs) if embs else np.zeros((0, rows, d)))


def match_scores(model: APTM, V: np.ndarray, ids: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Match probability of every (V[i], ids[i]) pair."""
    out = []
    with nc.no_grad():
        for s in range(0, len(V), batch_size):
            sub = trim_padding(ids[s:s + batch_size])
            L = model.encode_text(sub)
            C = model.encode_cross(nc.Tensor(V[s:s + batch_size]), L, sub)
            out.append(model.match_prob(C[:, 0]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def search(model: APTM, query_ids: np.ndarray, gallery: Gallery, k: int = DEFAULT_SHORTLIST,
           query_id: Hashable = None, batch_size: int = 64) -> RankedResult:
    """Rank the gallery for one tokenized query."""
    if len(gallery) == 0:
        return RankedResult(query_id)
    q = np.asarray(query_ids)[None] if np.ndim(query_ids) == 1 else np.asarray(query_ids)
    q = trim_padding(q)
    with nc.no_grad():
        f_t = model.project_text(model.encode_text(q)[:, 0]).data[0]
    sims = gallery.features.astype(np.float64) @ f_t.astype(np.float64)

    def score(pos):
        return match_scores(model, gallery.embeddings[pos], np.repeat(q, len(pos), axis=0), batch_size)

    order, stage2 = two_stage_order(gallery.image_ids, sims, score, k)
    return RankedResult(query_id,
                        [gallery.image_ids[i] for i in order],
                        [float(sims[i]) for i in order],
                        [stage2.get(i) for i in order])


def search_all(model: APTM, queries: np.ndarray, query_ids: Sequence, gallery: Gallery,
               k: int = DEFAULT_SHORTLIST, workers: int = 1) -> list[RankedResult]:
    """Search every query; with ``workers > 1`` queries fan out over threads.

    Results come back in ``query_ids`` order regardless of completion order.
    """
    def one(j):
        return search(model, queries[j], gallery, k, query_ids[j])

    if workers <= 1:
        return [one(j) for j in range(len(query_ids))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = dict(zip(query_ids, pool.map(one, range(len(query_ids)))))
    return [done[q] for q in query_ids]


# -- retrieval metrics ------------------------------------------------------

def relevant_sets(query_pids: Sequence, gallery_ids: Sequence, gallery_pids: Sequence) -> list[set]:
    by_pid: dict = {}
    for gid, pid in zip(gallery_ids, gallery_pids):
        by_pid.setdefault(pid, set()).add(gid)
    return [by_pid.get(pid, set()) for pid in query_pids]


def _usable(rankings, relevant):
    keep = [(r, rel) for r, rel in zip(rankings, relevant) if rel]
    excluded = len(rankings) - len(keep)
    if excluded:
        log.warning("%d queries have no relevant gallery item; excluded", excluded)
    return keep, excluded


def _ids(r):
    return r.image_ids if isinstance(r, RankedResult) else list(r)


def recall_at_k(rankings: Sequence, relevant: Sequence[set], k: int) -> float:
    """Fraction of queries with at least one relevant item in the top ``k``."""
    keep, _ = _usable(rankings, relevant)
    if not keep:
        return 0.0
    return sum(any(g in rel for g in _ids(r)[:k]) for r, rel in keep) / len(keep)


def average_precision(ranking: Sequence, relevant: set) -> float:
    hits, acc = 0, 0.0
    for i, g in enumerate(ranking):
        if g in relevant:
            hits += 1
            acc += hits / (i + 1)
    return acc / len(relevant) if relevant else 0.0


def mean_ap(rankings: Sequence, relevant: Sequence[set]) -> float:
    keep, _ = _usable(rankings, relevant)
    if not keep:
        return 0.0
    return float(np.mean([average_precision(_ids(r), rel) for r, rel in keep]))


def retrieval_report(rankings: Sequence, relevant: Sequence[set], ks=(1, 5, 10)) -> dict:
    _, excluded = _usable(rankings, relevant)
    out = {f"R@{k}": recall_at_k(rankings, relevant, k) for k in ks}
    out["mAP"] = mean_ap(rankings, relevant)
    out["queries"] = len(rankings) - excluded
    out["excluded_queries"] = excluded
    return out


# -- attribute recognition --------------------------------------------------

def attribute_probs(model: APTM, V: np.ndarray, prompt_ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """(N, 2|A|) match probability of every image against every prompt."""
    n, p = len(V), len(prompt_ids)
    img = np.repeat(np.arange(n), p)
    prm = np.tile(np.arange(p), n)
    probs = np.empty(n * p)
    for s in range(0, n * p, batch_size):
        sl = slice(s, s + batch_size)
        probs[sl] = match_scores(model, V[img[sl]], prompt_ids[prm[sl]], batch_size)
    return probs.reshape(n, p)


def predict_attributes(probs: np.ndarray) -> np.ndarray:
    """Label with the higher prompt probability; ties resolve to label 0."""
    probs = np.asarray(probs)
    return (probs[:, 1::2] > probs[:, 0::2]).astype(np.int8)


def recognize_attributes(model: APTM, pixels: np.ndarray, prompt_ids: np.ndarray) -> np.ndarray:
    with nc.no_grad():
        V = model.encode_image(pixels).data
    return predict_attributes(attribute_probs(model, V, prompt_ids))


def attr_metrics(pred: np.ndarray, labels: np.ndarray) -> dict:
    """Label-based mA plus example-based Acc/Prec/Rec/F1; label 1 is the positive class.

    Unknown labels are ignored. Ratios with an empty denominator count as 1
    when the numerator set is empty too (nothing to find, nothing claimed),
    else 0.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    known = labels != UNKNOWN
    per_attr, skipped = [], []
    for a in range(labels.shape[1]):
        m = known[:, a]
        if not m.any():
            skipped.append(a)
            continue
        pos = m & (labels[:, a] == 1)
        neg = m & (labels[:, a] == 0)
        rates = []
        if pos.any():
            rates.append(np.mean(pred[pos, a] == 1))
        if neg.any():
            rates.append(np.mean(pred[neg, a] == 0))
        per_attr.append(float(np.mean(rates)))

    accs, precs, recs = [], [], []
    for i in range(labels.shape[0]):
        if not known[i].any():
            continue
        P = known[i] & (pred[i] == 1)
        G = known[i] & (labels[i] == 1)
        inter, union = int((P & G).sum()), int((P | G).sum())
        np_, ng = int(P.sum()), int(G.sum())
        accs.append(inter / union if union else 1.0)
        precs.append(inter / np_ if np_ else float(ng == 0))
        recs.append(inter / ng if ng else float(np_ == 0))
    prec = float(np.mean(precs)) if precs else 0.0
    rec = float(np.mean(recs)) if recs else 0.0
    return {
        "mA": float(np.mean(per_attr)) if per_attr else 0.0,
        "Acc": float(np.mean(accs)) if accs else 0.0,
        "Prec": prec,
        "Rec": rec,
        "F1": 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0,
        "per_attribute_mA": per_attr,
        "excluded_attributes": skipped,
    }
