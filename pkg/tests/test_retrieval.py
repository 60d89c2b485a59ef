import functools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import aptm.numcore as nc
from aptm.attributes import UNKNOWN, Vocab
from aptm.encoders import APTM
from aptm.retrieval import (
    Gallery,
    RankedResult,
    attr_metrics,
    average_precision,
    build_gallery,
    mean_ap,
    predict_attributes,
    recall_at_k,
    relevant_sets,
    retrieval_report,
    search,
    search_all,
    two_stage_order,
)

from conftest import CAPTIONS, tiny_config


# -- independent oracles ----------------------------------------------------

def oracle_metrics(rankings, relevant, ks):
    """Vectorised Recall@K / AP via a relevance matrix and cumulative sums."""
    rows = [(r, rel) for r, rel in zip(rankings, relevant) if len(rel)]
    n = max(len(r) for r, _ in rows)
    hit = np.zeros((len(rows), n))
    for q, (r, rel) in enumerate(rows):
        hit[q, : len(r)] = np.isin(np.asarray(r, dtype=object), list(rel))
    first = np.where(hit.any(1), hit.argmax(1), n)
    rec = {k: float(np.mean(first < k)) for k in ks}
    prec = np.cumsum(hit, 1) / np.arange(1, n + 1)
    ap = (prec * hit).sum(1) / np.array([len(rel) for _, rel in rows])
    return rec, float(ap.mean())


def _cmp(a, b):
    # a, b: (prob, sim, id); higher prob, then higher sim, then smaller id first
    for x, y, sign in ((a[0], b[0], -1), (a[1], b[1], -1), (a[2], b[2], 1)):
        if x != y:
            return sign if x > y else -sign
    return 0


def oracle_two_stage(items, k):
    """items: list of (id, sim, prob). Insertion-free comparator sort, two passes."""
    stage1 = sorted(items, key=functools.cmp_to_key(lambda a, b: _cmp((0, a[1], a[0]), (0, b[1], b[0]))))
    head = stage1[:k]
    head = sorted(head, key=functools.cmp_to_key(lambda a, b: _cmp((a[2], a[1], a[0]), (b[2], b[1], b[0]))))
    return [i[0] for i in head + stage1[k:]]


# -- fixtures ---------------------------------------------------------------

@pytest.fixture(scope="module")
def world():
    vocab = Vocab.build(CAPTIONS)
    with nc.precision(np.float64):
        model = APTM(tiny_config(len(vocab)), seed=11)
        rng = np.random.default_rng(0)
        pixels = rng.random((50, 3, 16, 8))
        ids = [f"img{i:02d}" for i in range(50)]
        pids = [i // 2 for i in range(50)]
        gallery = build_gallery(model, pixels, ids, pids)
    return vocab, model, pixels, gallery


def brute_force_items(model, pixels, ids, query):
    """Per-item cosine and match probability, one image at a time."""
    out = []
    with nc.precision(np.float64), nc.no_grad():
        q = query[None, : int((query != 0).sum())]
        L = model.encode_text(q)
        ft = model.project_text(L[:, 0]).data[0]
        for i, x in enumerate(pixels):
            V = model.encode_image(x[None])
            fi = model.project_image(V[:, 0]).data[0]
            sim = float(fi @ ft / (np.linalg.norm(fi) * np.linalg.norm(ft)))
            p = float(model.match_prob(model.encode_cross(V, L, q)[:, 0]).data[0])
            out.append((ids[i], sim, p))
    return out


# -- search -----------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 7, 50, 128])
def test_search_matches_brute_force_oracle(world, k):
    vocab, model, pixels, gallery = world
    query = vocab.tokenize(CAPTIONS[0])
    with nc.precision(np.float64):
        got = search(model, query, gallery, k=k)
    items = brute_force_items(model, pixels, gallery.image_ids, query)
    assert got.image_ids == oracle_two_stage(items, min(k, 50))
    sims = dict((i, s) for i, s, _ in items)
    np.testing.assert_allclose(got.similarities, [sims[i] for i in got.image_ids], atol=1e-12)


def test_full_shortlist_is_exhaustive_rerank(world):
    vocab, model, pixels, gallery = world
    query = vocab.tokenize(CAPTIONS[1])
    with nc.precision(np.float64):
        got = search(model, query, gallery, k=1000)
    items = brute_force_items(model, pixels, gallery.image_ids, query)
    assert got.image_ids[0] == max(items, key=lambda t: t[2])[0]
    probs = got.probabilities
    assert all(p is not None for p in probs)
    assert all(a >= b for a, b in zip(probs, probs[1:]))


def test_outside_shortlist_keeps_stage1_order(world):
    vocab, model, _, gallery = world
    with nc.precision(np.float64):
        got = search(model, vocab.tokenize(CAPTIONS[2]), gallery, k=5)
    tail = got.similarities[5:]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    assert all(p is None for p in got.probabilities[5:])
    assert set(got.image_ids) == set(gallery.image_ids)


def test_empty_and_single_gallery(world):
    vocab, model, pixels, gallery = world
    empty = Gallery([], [], np.zeros((0, 8)), np.zeros((0, 9, 8)))
    assert len(search(model, vocab.tokenize("a man"), empty)) == 0
    one = build_gallery(model, pixels[:1], ["only"], [0])
    assert search(model, vocab.tokenize("a man"), one).image_ids == ["only"]


def test_bad_shortlist_size(world):
    vocab, model, _, gallery = world
    with pytest.raises(ValueError):
        search(model, vocab.tokenize("a man"), gallery, k=0)


def test_gallery_invariants():
    with pytest.raises(ValueError):
        Gallery(["a", "a"], [0, 0], np.eye(2), np.zeros((2, 1, 1)))
    with pytest.raises(ValueError):
        Gallery(["a", "b"], [0, 0], 2 * np.eye(2), np.zeros((2, 1, 1)))


def test_search_permutation_invariant(world):
    vocab, model, _, gallery = world
    perm = np.random.default_rng(1).permutation(len(gallery))
    shuffled = Gallery([gallery.image_ids[i] for i in perm], [gallery.person_ids[i] for i in perm],
                       gallery.features[perm], gallery.embeddings[perm])
    q = vocab.tokenize(CAPTIONS[3])
    with nc.precision(np.float64):
        assert search(model, q, gallery, k=10).image_ids == search(model, q, shuffled, k=10).image_ids


def test_search_all_workers_agree(world):
    vocab, model, _, gallery = world
    qs = vocab.tokenize_batch(CAPTIONS)
    qids = ["q0", "q1", "q2", "q3"]
    a = search_all(model, qs, qids, gallery, k=8, workers=1)
    b = search_all(model, qs, qids, gallery, k=8, workers=3)
    assert [r.query_id for r in b] == qids
    assert [r.image_ids for r in a] == [r.image_ids for r in b]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=30), st.integers(1, 30))
def test_shortlist_invariant_to_monotone_transform(sims, k):
    sims = np.array(sims)
    ids = list(range(len(sims)))
    seen = []

    def score(pos):
        seen.append(sorted(pos.tolist()))
        return np.zeros(len(pos))

    two_stage_order(ids, sims, score, k)
    # dense rank then a cubic: strictly increasing and exact in floating point
    u = np.unique(sims, return_inverse=True)[1].astype(float)
    two_stage_order(ids, u ** 3 + u + 5, score, k)
    assert seen[0] == seen[1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=25), st.integers(1, 30))
def test_two_stage_order_matches_comparator_oracle(pairs, k):
    # coarse integer values force plenty of ties
    sims = np.array([a / 3 for a, _ in pairs])
    probs = np.array([b / 3 for _, b in pairs])
    ids = [f"x{i:02d}" for i in range(len(pairs))]
    order, _ = two_stage_order(ids, sims, lambda pos: probs[pos], k)
    items = [(ids[i], sims[i], probs[i]) for i in range(len(ids))]
    assert [ids[i] for i in order] == oracle_two_stage(items, min(k, len(ids)))


# -- metrics ----------------------------------------------------------------

def test_metric_hand_values():
    ranking = ["b", "a"] + [f"z{i}" for i in range(8)]
    rel = [{"a"}]
    assert recall_at_k([ranking], rel, 1) == 0.0
    assert recall_at_k([ranking], rel, 5) == 1.0
    assert average_precision(ranking, {"a"}) == 0.5
    assert mean_ap([["a", "b"]], [{"a"}]) == 1.0


def test_metrics_match_oracle_on_random_queries():
    rng = np.random.default_rng(42)
    n = 40
    gallery_ids = [f"g{i}" for i in range(n)]
    gallery_pids = rng.integers(0, 12, size=n).tolist()
    query_pids = rng.integers(0, 14, size=100).tolist()  # some pids absent → excluded
    rankings = [[gallery_ids[i] for i in rng.permutation(n)] for _ in range(100)]
    rel = relevant_sets(query_pids, gallery_ids, gallery_pids)
    ks = (1, 5, 10)
    exp_rec, exp_map = oracle_metrics(rankings, rel, ks)
    for k in ks:
        assert abs(recall_at_k(rankings, rel, k) - exp_rec[k]) <= 1e-9
    assert abs(mean_ap(rankings, rel) - exp_map) <= 1e-9
    rep = retrieval_report(rankings, rel, ks)
    assert rep["excluded_queries"] == sum(1 for r in rel if not r)
    assert rep["queries"] + rep["excluded_queries"] == 100


def test_ranked_result_accepted_by_metrics():
    r = RankedResult("q", ["a", "b"], [0.9, 0.1], [0.5, None])
    assert recall_at_k([r], [{"b"}], 2) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1))
def test_metric_invariants(perm, rel):
    ranking = list(perm)
    recalls = [recall_at_k([ranking], [rel], k) for k in range(1, 13)]
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0
    ap = mean_ap([ranking], [rel])
    assert 0.0 <= ap <= 1.0
    front = all(g in rel for g in ranking[: len(rel)])
    assert (abs(ap - 1.0) < 1e-12) == front


# -- attribute recognition and metrics --------------------------------------

def test_predict_attributes_argmax_and_ties():
    probs = np.array([[0.2, 0.8, 0.5, 0.5, 0.9, 0.1]])
    np.testing.assert_array_equal(predict_attributes(probs), [[1, 0, 0]])


def test_attr_metrics_trivial():
    labels = np.array([[0, 1, 1], [1, 0, 0], [1, 1, 0], [0, 0, 1]])
    m = attr_metrics(labels, labels)
    assert all(m[k] == 1.0 for k in ("mA", "Acc", "Prec", "Rec", "F1"))
    m = attr_metrics(np.ones_like(labels), labels)
    assert m["mA"] == 0.5


def test_attr_metrics_unknown_and_excluded():
    labels = np.array([[1, UNKNOWN], [0, UNKNOWN]])
    m = attr_metrics(np.array([[1, 0], [0, 1]]), labels)
    assert m["excluded_attributes"] == [1]
    assert m["mA"] == 1.0 and m["Acc"] == 1.0


def oracle_attr_metrics(pred, labels):
    known = labels >= 0
    tp = ((pred == 1) & (labels == 1) & known).sum(0)
    tn = ((pred == 0) & (labels == 0) & known).sum(0)
    npos = ((labels == 1) & known).sum(0)
    nneg = ((labels == 0) & known).sum(0)
    ma = []
    for a in range(labels.shape[1]):
        rates = ([tp[a] / npos[a]] if npos[a] else []) + ([tn[a] / nneg[a]] if nneg[a] else [])
        if rates:
            ma.append(sum(rates) / len(rates))
    rows = known.any(1)
    P = ((pred == 1) & known)[rows]
    G = ((labels == 1) & known)[rows]
    inter, union = (P & G).sum(1), (P | G).sum(1)
    acc = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    prec = np.where(P.sum(1) > 0, inter / np.maximum(P.sum(1), 1), (G.sum(1) == 0) * 1.0)
    rec = np.where(G.sum(1) > 0, inter / np.maximum(G.sum(1), 1), (P.sum(1) == 0) * 1.0)
    p, r = prec.mean(), rec.mean()
    return {"mA": np.mean(ma), "Acc": acc.mean(), "Prec": p, "Rec": r, "F1": 2 * p * r / (p + r)}


def test_attr_metrics_match_oracle():
    rng = np.random.default_rng(7)
    labels = rng.integers(-1, 2, size=(200, 27))
    pred = rng.integers(0, 2, size=(200, 27))
    got = attr_metrics(pred, labels)
    for k, v in oracle_attr_metrics(pred, labels).items():
        assert abs(got[k] - v) <= 1e-9, k


def test_recognize_deterministic(world):
    from aptm.attributes import render_prompts
    from aptm.retrieval import recognize_attributes

    vocab, model, pixels, _ = world
    prompts = np.stack([p.token_ids for p in render_prompts(vocab=vocab)])
    a = recognize_attributes(model, pixels[:2], prompts)
    b = recognize_attributes(model, pixels[:2], prompts)
    assert a.shape == (2, 27)
    np.testing.assert_array_equal(a, b)
