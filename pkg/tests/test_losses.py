import itertools
import math

import numpy as np
import pytest
import torch

from ccreid import losses as L
from ccreid.errors import ContractError

from gradcheck import relative_error

TAU = 0.07


def np_cos(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return (a / np.linalg.norm(a, axis=1, keepdims=True)) @ (b / np.linalg.norm(b, axis=1, keepdims=True)).T


def np_ce(logits, labels):
    logits = np.asarray(logits, float)
    out = []
    for row, y in zip(logits, labels):
        m = row.max()
        out.append(-(row[y] - m - math.log(np.exp(row - m).sum())))
    return float(np.mean(out))


# ---------------------------------------------------------------- cross-entropy


def test_ce_uniform_logits():
    assert L.ce_loss(torch.zeros(3, 4), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-6)


def test_ce_vanishes_with_large_margin():
    logits = torch.tensor([[50.0, 0.0, 0.0]])
    assert L.ce_loss(logits, [0]).item() < 1e-12


def test_ce_worked_value():
    assert L.ce_loss(torch.tensor([[2.0, 0.0, 1.0]]), [0]).item() == pytest.approx(0.4076, abs=1e-4)


def test_ce_label_out_of_range():
    with pytest.raises(ContractError):
        L.ce_loss(torch.zeros(2, 3), [0, 3])


def test_ce_row_shift_invariance():
    logits = torch.randn(4, 5, dtype=torch.float64)
    labels = [0, 4, 2, 2]
    shifted = logits + torch.randn(4, 1, dtype=torch.float64) * 10
    assert L.ce_loss(shifted, labels).item() == pytest.approx(L.ce_loss(logits, labels).item(), abs=1e-12)


# ---------------------------------------------------------------- triplet


def brute_force_triplet(x, labels, margin):
    x = np.asarray(x, float)
    n = len(x)
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    total = 0.0
    for a in range(n):
        pos = [p for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [q for q in range(n) if labels[q] != labels[a]]
        # hardest triplet over every (positive, negative) combination
        worst = max(margin + d[a, p] - d[a, q] for p, q in itertools.product(pos, neg))
        total += max(worst, 0.0)
    return total / n


def test_triplet_identical_features_give_margin():
    loss = L.triplet_loss(torch.ones(4, 3, dtype=torch.float64), [0, 0, 1, 1], 0.3)
    assert loss.item() == pytest.approx(0.3, abs=1e-5)


def test_triplet_inactive_hinge():
    x = torch.tensor([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]], dtype=torch.float64)
    assert L.triplet_loss(x, [0, 0, 1, 1], 0.3).item() == pytest.approx(0.0, abs=1e-5)


def test_triplet_hand_placed_points():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.8], [3.0, 1.0]])
    labels = [0, 0, 1, 1]
    got = L.triplet_loss(torch.tensor(x), labels, 0.3).item()
    assert got == pytest.approx(brute_force_triplet(x, labels, 0.3), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_triplet_matches_exhaustive_mining(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    got = L.triplet_loss(torch.tensor(x), labels, 0.3).item()
    assert got == pytest.approx(brute_force_triplet(x, labels, 0.3), abs=1e-9)


def test_triplet_translation_invariance():
    x = torch.randn(8, 4, dtype=torch.float64)
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    moved = x + torch.randn(1, 4, dtype=torch.float64) * 5
    assert L.triplet_loss(moved, labels).item() == pytest.approx(L.triplet_loss(x, labels).item(), abs=1e-9)


def test_triplet_needs_two_identities():
    with pytest.raises(ContractError):
        L.triplet_loss(torch.randn(4, 3), [1, 1, 1, 1])


# ---------------------------------------------------------------- prompt contrastive


def test_single_sample_contrastive_is_zero():
    f, p = torch.randn(1, 4), torch.randn(1, 4)
    for direction in ("i2t", "t2i"):
        assert L.prompt_contrastive_loss(f, p, [0], direction).item() == pytest.approx(0.0, abs=1e-7)


def test_equal_similarities_give_ln2():
    f = torch.ones(2, 4)
    p = torch.ones(2, 4)
    for direction in ("i2t", "t2i"):
        assert L.prompt_contrastive_loss(f, p, [0, 1], direction).item() == pytest.approx(math.log(2), abs=1e-6)


def test_three_sample_contrastive_direct_evaluation():
    rng = np.random.default_rng(0)
    f, p = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    S = np_cos(f, p) / TAU
    i2t = np_ce(S, [0, 1, 2])
    t2i = np_ce(S.T, [0, 1, 2])
    tf, tp = torch.tensor(f), torch.tensor(p)
    assert L.prompt_contrastive_loss(tf, tp, [4, 7, 9], "i2t").item() == pytest.approx(i2t, abs=1e-9)
    assert L.prompt_contrastive_loss(tf, tp, [4, 7, 9], "t2i").item() == pytest.approx(t2i, abs=1e-9)


def test_i2t_with_repeated_labels_uses_unique_prompts():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(4, 5))
    prompts = rng.normal(size=(2, 5))
    labels = [0, 0, 1, 1]
    S = np_cos(f, prompts) / TAU
    expected = np_ce(S, labels)
    got = L.prompt_contrastive_loss(torch.tensor(f), torch.tensor(prompts[labels]), labels, "i2t").item()
    assert got == pytest.approx(expected, abs=1e-9)


def test_contrastive_is_batch_order_invariant():
    f, p = torch.randn(6, 4, dtype=torch.float64), torch.randn(6, 4, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 4, 5])
    perm = torch.randperm(6)
    for direction in ("i2t", "t2i"):
        a = L.prompt_contrastive_loss(f, p, labels, direction).item()
        b = L.prompt_contrastive_loss(f[perm], p[perm], labels[perm], direction).item()
        assert a == pytest.approx(b, abs=1e-12)


def test_contrastive_rejects_unknown_direction_and_shapes():
    with pytest.raises(ContractError):
        L.prompt_contrastive_loss(torch.randn(2, 3), torch.randn(2, 3), [0, 1], "sideways")
    with pytest.raises(ContractError):
        L.prompt_contrastive_loss(torch.randn(2, 3), torch.randn(3, 3), [0, 1])


# ---------------------------------------------------------------- i2tce


def test_i2tce_single_class_is_zero():
    assert L.i2tce_loss(torch.randn(3, 4), torch.randn(1, 4), [0, 0, 0]).item() == pytest.approx(0, abs=1e-7)


def test_i2tce_equidistant_is_ln_k():
    K = 5
    eye = torch.eye(K + 1)
    f, prompts = eye[:1], eye[1:]
    assert L.i2tce_loss(f, prompts, [2]).item() == pytest.approx(math.log(K), abs=1e-6)


def test_i2tce_three_classes_direct_evaluation():
    rng = np.random.default_rng(2)
    f, prompts = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    labels = [0, 2, 1, 2]
    expected = np_ce(np_cos(f, prompts) / TAU, labels)
    assert L.i2tce_loss(torch.tensor(f), torch.tensor(prompts), labels).item() == pytest.approx(expected, abs=1e-9)


def test_i2tce_high_temperature_limit():
    f, prompts = torch.randn(4, 6, dtype=torch.float64), torch.randn(7, 6, dtype=torch.float64)
    loss = L.i2tce_loss(f, prompts, [0, 1, 2, 3], L.SimilarityConfig(1e6)).item()
    assert loss == pytest.approx(math.log(7), abs=1e-3)


def test_i2tce_missing_class_prompt():
    with pytest.raises(ContractError):
        L.i2tce_loss(torch.randn(2, 4), torch.randn(3, 4), [0, 3])


def test_sampled_denominator_bounds_full_loss():
    f, prompts = torch.randn(6, 8, dtype=torch.float64), torch.randn(20, 8, dtype=torch.float64)
    labels = [0, 1, 1, 4, 4, 9]
    full = L.i2tce_loss(f, prompts, labels).item()
    g = torch.Generator().manual_seed(0)
    sampled = L.i2tce_loss(f, prompts, labels, num_negatives=5, generator=g).item()
    assert sampled <= full
    assert L.i2tce_loss(f, prompts, labels, num_negatives=19).item() == pytest.approx(full, abs=1e-12)


def test_temperature_must_be_positive():
    with pytest.raises(ContractError):
        L.SimilarityConfig(0.0)


# ---------------------------------------------------------------- centroid consistency


def test_centroids_identical_streams():
    f = torch.randn(4, 3)
    assert L.centroid_consistency_loss(f, f.clone(), [0, 0, 1, 1]).item() == 0.0


def test_centroids_unit_offset():
    raw = torch.tensor([[1.0, 0.0], [3.0, 0.0]])
    shield = torch.tensor([[1.0, 1.0], [3.0, 1.0]])
    assert L.centroid_consistency_loss(raw, shield, [5, 5]).item() == pytest.approx(1.0)


def test_centroids_two_identities_by_hand():
    raw = np.array([[0.0, 0.0], [2.0, 2.0], [1.0, 0.0], [1.0, 4.0]])
    shield = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    labels = [0, 0, 1, 1]
    # centroids: raw (1,1) vs (1,1); raw (1,2) vs (0,0)
    expected = (0.0 + (1.0 + 4.0)) / 2
    got = L.centroid_consistency_loss(torch.tensor(raw), torch.tensor(shield), labels).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_centroids_reject_non_pk_batch():
    with pytest.raises(ContractError):
        L.centroid_consistency_loss(torch.randn(3, 2), torch.randn(3, 2), [0, 0, 1])


def test_centroid_gradient_reaches_both_streams():
    raw = torch.randn(4, 3, requires_grad=True)
    shield = torch.randn(4, 3, requires_grad=True)
    L.centroid_consistency_loss(raw, shield, [0, 0, 1, 1]).backward()
    assert raw.grad.abs().sum() > 0 and shield.grad.abs().sum() > 0


# ---------------------------------------------------------------- disentangle


def test_disentangle_cosine_bounds():
    f = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert L.disentangle_loss(f, torch.tensor([[0.0, 3.0], [1.0, 0.0]])).item() == pytest.approx(0.0)
    assert L.disentangle_loss(f, 2 * f).item() == pytest.approx(1.0)
    assert L.disentangle_loss(f, -f).item() == pytest.approx(-1.0)


def test_disentangle_zero_vector_rejected():
    with pytest.raises(ContractError):
        L.disentangle_loss(torch.zeros(1, 3), torch.ones(1, 3))


def test_disentangle_treats_clothes_features_as_constants():
    f = torch.randn(3, 4, requires_grad=True)
    c = torch.randn(3, 4, requires_grad=True)
    L.disentangle_loss(f, c).backward()
    assert f.grad.abs().sum() > 0
    assert c.grad is None


def test_minimising_disentangle_moves_features_away_from_clothes():
    f = torch.tensor([[1.0, 0.2]], requires_grad=True)
    c = torch.tensor([[1.0, 0.0]])
    before = L.disentangle_loss(f, c).item()
    L.disentangle_loss(f, c).backward()
    with torch.no_grad():
        f -= 0.1 * f.grad
    assert L.disentangle_loss(f, c).item() < before


# ---------------------------------------------------------------- totals


def test_stage1_total_additivity():
    zero = {k: torch.tensor(0.0) for k in L.STAGE1_TERMS}
    assert L.stage1_total(zero).value.item() == 0.0
    terms = dict(zip(L.STAGE1_TERMS, map(torch.tensor, (0.5, 1.25, 2.0, 4.0))))
    report = L.stage1_total(terms)
    assert report.value.item() == pytest.approx(7.75)
    assert report.grad_targets == {"prompt_bank"}


def test_stage1_total_recomposes_individual_terms():
    g = torch.Generator().manual_seed(0)
    f_s, f_c, t_id, t_c = (torch.randn(8, 6, generator=g, dtype=torch.float64) for _ in range(4))
    pids, cids = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3]), torch.tensor([0, 1, 2, 2, 4, 5, 6, 7])
    terms = {"i2t": L.prompt_contrastive_loss(f_s, t_id, pids, "i2t"),
             "t2i": L.prompt_contrastive_loss(f_s, t_id, pids, "t2i"),
             "i2t_c": L.prompt_contrastive_loss(f_c, t_c, cids, "i2t"),
             "t2i_c": L.prompt_contrastive_loss(f_c, t_c, cids, "t2i")}
    expected = sum(v.item() for v in terms.values())
    assert L.stage1_total(terms).value.item() == pytest.approx(expected, abs=1e-7)


def test_stage2_defaults_and_additivity():
    from ccreid.config import TrainingConfig
    cfg = TrainingConfig()
    assert (cfg.lambda1, cfg.lambda2) == (0.1, 1.0)
    zero = {k: torch.tensor(0.0) for k in L.STAGE2_TERMS}
    assert L.stage2_total(zero).value.item() == 0.0


def test_stage2_weighted_sum():
    rng = np.random.default_rng(3)
    values = dict(zip(L.STAGE2_TERMS, rng.random(len(L.STAGE2_TERMS))))
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in values.items()}
    expected = sum(v for k, v in values.items() if k not in ("con", "dis"))
    expected += 0.1 * values["con"] + 1.0 * values["dis"]
    assert L.stage2_total(terms, 0.1, 1.0).value.item() == pytest.approx(expected, abs=1e-7)


def test_stage2_grad_targets():
    terms = {k: torch.tensor(1.0) for k in L.STAGE2_TERMS}
    assert L.stage2_total(terms).grad_targets == {
        "raw_encoder", "head_id", "shield_encoder", "head_id_s", "proj_c"}
    assert L.STAGE2_TARGETS["i2tce_c"] == {"proj_c"}
    assert L.STAGE2_TARGETS["dis"] == {"raw_encoder"}
    baseline = L.stage2_total({"id": torch.tensor(1.0)})
    assert baseline.grad_targets == {"raw_encoder", "head_id"}


def test_loss_report_item_is_plain_float():
    x = torch.tensor(2.0, requires_grad=True)
    assert L.stage1_total({"i2t": x * 1.5}).item() == 3.0


# ---------------------------------------------------------------- gradients


def _instances(seed, C=8, n=8, K=5):
    g = torch.Generator().manual_seed(seed)
    return {name: torch.randn(*shape, generator=g, dtype=torch.float64)
            for name, shape in (("f", (n, C)), ("p", (n, C)), ("s", (n, C)), ("P", (K, C)), ("z", (n, K)))}


LABELS = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])

GRAD_CASES = {
    "ce": (lambda v: (lambda x: L.ce_loss(x, LABELS)), "z"),
    "triplet": (lambda v: (lambda x: L.triplet_loss(x, LABELS, 0.3)), "f"),
    "i2t/image": (lambda v: (lambda x: L.prompt_contrastive_loss(x, v["p"], LABELS, "i2t")), "f"),
    "i2t/prompt": (lambda v: (lambda x: L.prompt_contrastive_loss(v["f"], x, LABELS, "i2t")), "p"),
    "t2i/image": (lambda v: (lambda x: L.prompt_contrastive_loss(x, v["p"], LABELS, "t2i")), "f"),
    "t2i/prompt": (lambda v: (lambda x: L.prompt_contrastive_loss(v["f"], x, LABELS, "t2i")), "p"),
    "i2tce/image": (lambda v: (lambda x: L.i2tce_loss(x, v["P"], LABELS)), "f"),
    "i2tce/prompt": (lambda v: (lambda x: L.i2tce_loss(v["f"], x, LABELS)), "P"),
    "centroid": (lambda v: (lambda x: L.centroid_consistency_loss(x, v["s"], LABELS)), "f"),
    "disentangle": (lambda v: (lambda x: L.disentangle_loss(x, v["s"])), "f"),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    make, arg = GRAD_CASES[name]
    for seed in range(5):
        values = _instances(seed)
        assert relative_error(make(values), values[arg]) < 1e-4
