import csv

import numpy as np
import pytest
import torch

from ccreid.data import Sample
from ccreid.errors import ContractError, EvaluationError
from ccreid.evaluation import (cosine_distance, extract_features, format_report, score, score_distmat,
                               write_distance_csv)
from ccreid.models import build_toy_encoders


def meta(pids, cams, clothes=None, paths=None):
    out = {"pid": np.asarray(pids), "camid": np.asarray(cams),
           "clothes": np.asarray(clothes if clothes is not None else pids)}
    if paths is not None:
        out["path"] = np.asarray(paths, dtype=object)
    return out


def brute_force(distmat, qm, gm, protocol):
    """Independent loop-based oracle: (cmc, mAP, dropped), or None without valid queries."""
    nq, ng = distmat.shape
    aps, first = [], []
    for i in range(nq):
        ranked = sorted(range(ng), key=lambda j: (distmat[i, j], j))
        labels = []
        for j in ranked:
            same_id = qm["pid"][i] == gm["pid"][j]
            same_cam = qm["camid"][i] == gm["camid"][j]
            same_clothes = qm["clothes"][i] == gm["clothes"][j]
            if protocol == "general":
                junk = same_id and same_cam
            elif protocol == "cloth-changing":
                junk = same_id and (same_cam or same_clothes)
            else:
                junk = same_id and (same_cam or not same_clothes)
            if not junk:
                labels.append(bool(same_id))
        if not any(labels):
            continue
        hits, precisions = 0, []
        for r, hit in enumerate(labels, 1):
            if hit:
                hits += 1
                precisions.append(hits / r)
        aps.append(sum(precisions) / len(precisions))
        first.append(labels.index(True))
    if not aps:
        return None
    cmc = np.array([np.mean([f < k for f in first]) for k in range(1, ng + 1)])
    return cmc, float(np.mean(aps)), nq - len(aps)


def test_single_query_worked_example():
    # ranked list after junk removal: positive, negative, positive
    dist = np.array([[0.1, 0.2, 0.3]])
    res = score_distmat(dist, meta([0], [0]), meta([0, 1, 0], [1, 1, 1]))
    assert res.mAP == pytest.approx(0.8333, abs=1e-4)
    assert res.rank(1) == 1.0


def test_first_positive_at_rank_three():
    dist = np.array([[0.1, 0.2, 0.3]])
    res = score_distmat(dist, meta([0], [0]), meta([1, 2, 0], [1, 1, 1]))
    assert res.cmc.tolist() == [0.0, 0.0, 1.0]
    assert res.mAP == pytest.approx(1 / 3)


def test_junk_entry_is_skipped_not_counted():
    dist = np.array([[0.1, 0.2, 0.3]])
    # the nearest gallery image shares identity and camera, so it is junk
    res = score_distmat(dist, meta([0], [0]), meta([0, 1, 0], [0, 1, 1]))
    assert res.num_junk == 1
    assert res.mAP == pytest.approx(0.5)
    assert res.cmc.tolist()[:2] == [0.0, 1.0]


def test_query_without_valid_positive_is_dropped():
    dist = np.array([[0.1, 0.2], [0.2, 0.1]])
    res = score_distmat(dist, meta([0, 5], [0, 0]), meta([0, 1], [1, 1]))
    assert res.num_valid == 1 and res.num_dropped == 1
    assert np.isnan(res.ap[1])


def test_no_valid_query_raises():
    with pytest.raises(EvaluationError):
        score_distmat(np.zeros((1, 2)), meta([0], [0]), meta([1, 2], [1, 1]))


def test_empty_inputs_rejected():
    with pytest.raises(ContractError):
        score_distmat(np.zeros((0, 3)), meta([], []), meta([0, 1, 2], [0, 0, 0]))


def test_self_path_match_is_junk():
    dist = np.array([[0.0, 0.5]])
    res = score_distmat(dist, meta([0], [0], paths=["a.png"]), meta([0, 0], [1, 1], paths=["a.png", "b.png"]))
    assert res.num_junk == 1 and res.mAP == 1.0


def test_protocols_on_one_gallery():
    q = meta([0], [0], clothes=[10])
    g = meta([0, 0, 0, 1], [1, 1, 0, 1], clothes=[10, 11, 11, 20])
    dist = np.array([[0.1, 0.4, 0.2, 0.3]])
    general = score_distmat(dist, q, g, "general")
    cc = score_distmat(dist, q, g, "cloth-changing")
    sc = score_distmat(dist, q, g, "same-clothes")
    assert general.num_junk == 1
    assert cc.num_junk == 2 and cc.cmc.tolist()[:2] == [0.0, 1.0]
    assert sc.num_junk == 2 and sc.rank(1) == 1.0


def test_unknown_protocol():
    with pytest.raises(ContractError):
        score_distmat(np.zeros((1, 1)), meta([0], [0]), meta([0], [1]), "sideways")


@pytest.mark.parametrize("protocol", ["general", "cloth-changing", "same-clothes"])
@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force_oracle(protocol, seed):
    rng = np.random.default_rng(seed)
    nq, ng = rng.integers(1, 6), rng.integers(2, 13)
    qm = meta(rng.integers(0, 3, nq), rng.integers(0, 2, nq), rng.integers(0, 4, nq))
    gm = meta(rng.integers(0, 3, ng), rng.integers(0, 2, ng), rng.integers(0, 4, ng))
    # coarse values make ties common
    dist = rng.integers(0, 4, (nq, ng)).astype(float)
    expected = brute_force(dist, qm, gm, protocol)
    if expected is None:
        with pytest.raises(EvaluationError):
            score_distmat(dist, qm, gm, protocol)
        return
    cmc, mAP, dropped = expected
    res = score_distmat(dist, qm, gm, protocol)
    assert res.mAP == pytest.approx(mAP, abs=1e-12)
    np.testing.assert_allclose(res.cmc, cmc, atol=1e-12)
    assert res.num_dropped == dropped


def test_gallery_permutation_and_feature_scale_invariance():
    rng = np.random.default_rng(0)
    qf, gf = rng.normal(size=(4, 8)), rng.normal(size=(12, 8))
    qm = meta([0, 1, 2, 3], [0, 0, 0, 0])
    gm = meta(np.repeat([0, 1, 2, 3], 3), np.ones(12, int))
    base = score(qf, gf, qm, gm)
    perm = rng.permutation(12)
    shuffled = score(qf, gf[perm], qm, {k: v[perm] for k, v in gm.items()})
    scaled = score(3.0 * qf, 0.25 * gf, qm, gm)
    assert shuffled.mAP == pytest.approx(base.mAP, abs=1e-12)
    np.testing.assert_allclose(shuffled.cmc, base.cmc)
    assert scaled.mAP == pytest.approx(base.mAP, abs=1e-12)


def test_cosine_distance_range():
    d = cosine_distance([[1.0, 0.0]], [[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    np.testing.assert_allclose(d, [[0.0, 1.0, 2.0]], atol=1e-12)


def test_single_shot_averages_repeats():
    rng = np.random.default_rng(1)
    qf, gf = rng.normal(size=(3, 4)), rng.normal(size=(9, 4))
    qm = meta([0, 1, 2], [0, 0, 0])
    gm = meta(np.repeat([0, 1, 2], 3), np.ones(9, int))
    res = score(qf, gf, qm, gm, single_shot=True, repeats=5)
    assert len(res.cmc) == 3
    assert 0.0 <= res.mAP <= 1.0


def test_report_and_histogram_csv(tmp_path):
    dist = np.array([[0.1, 0.2, 0.3]])
    qm, gm = meta([0], [0]), meta([0, 1, 0], [0, 1, 1])
    res = score_distmat(dist, qm, gm)
    text = format_report({"general": res}, {"checkpoint": "x.pt"})
    assert text.startswith("protocol=general rank1=0.0000") and "checkpoint=x.pt" in text
    path = tmp_path / "d.csv"
    write_distance_csv(res, qm, gm, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["kind", "distance"]
    assert sorted(r[0] for r in rows[1:]) == ["inter", "intra"]


def _samples(toy_manifest, split):
    return [r for r in toy_manifest.records if r.split == split][:6]


def test_feature_cache_roundtrip(tmp_path, toy_manifest):
    raw, _, _ = build_toy_encoders(8, seed=0, width=8)
    raw.module.train()
    samples = _samples(toy_manifest, "query")
    cache = tmp_path / "f.pt"
    feats, m = extract_features(raw, samples, (64, 32), batch_size=4, cache_path=cache)
    assert feats.shape == (6, 8) and cache.exists()
    assert raw.module.training, "previous mode restored"
    with torch.no_grad():
        for p in raw.module.parameters():
            p.zero_()
    again, _ = extract_features(raw, samples, (64, 32), cache_path=cache)
    assert torch.equal(feats, again), "cached features are reused"
    assert list(m["pid"]) == [s.identity for s in samples]


def test_extraction_of_empty_list():
    raw, _, _ = build_toy_encoders(8, seed=0, width=8)
    feats, m = extract_features(raw, [], (64, 32))
    assert feats.shape == (0, 8) and len(m["pid"]) == 0


def test_extraction_is_batch_size_independent(toy_manifest):
    raw, _, _ = build_toy_encoders(8, seed=0, width=8)
    samples = _samples(toy_manifest, "gallery")
    a, _ = extract_features(raw, samples, (64, 32), batch_size=1)
    b, _ = extract_features(raw, samples, (64, 32), batch_size=6)
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-5)
