"""Retrieval scoring: protocol rules, CMC and mAP."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ContractError, EvaluationError
from . import rank

logger = logging.getLogger(__name__)


def _meta(meta: dict, n: int) -> dict:
    out = {}
    for key in ("pid", "camid", "clothes"):
        if key not in meta:
            raise ContractError(f"metadata missing {key!r}")
        out[key] = np.asarray(meta[key]).reshape(-1)
        if len(out[key]) != n:
            raise ContractError(f"metadata {key!r} has {len(out[key])} entries, expected {n}")
    out["path"] = np.asarray(meta.get("path", [None] * n), dtype=object)
    return out


def _pairs(q, g, key):
    return q[key][:, None] == g[key][None, :]


def _self_match(q, g):
    qp, gp = q["path"], g["path"]
    same = np.zeros((len(qp), len(gp)), dtype=bool)
    if any(p is not None for p in qp):
        same = qp[:, None] == gp[None, :]
        same &= (qp[:, None] != None)  # noqa: E711
    return same


def _general_junk(q, g):
    return (_pairs(q, g, "pid") & _pairs(q, g, "camid")) | _self_match(q, g)


def _cc_junk(q, g):
    same_id = _pairs(q, g, "pid")
    return (same_id & (_pairs(q, g, "camid") | _pairs(q, g, "clothes"))) | _self_match(q, g)


def _sc_junk(q, g):
    same_id = _pairs(q, g, "pid")
    return (same_id & (_pairs(q, g, "camid") | ~_pairs(q, g, "clothes"))) | _self_match(q, g)


def _same_identity(q, g):
    return _pairs(q, g, "pid")


@dataclass(frozen=True)
class ProtocolRule:
    """Which gallery entries are excluded (junk) and which count as matches
    for each query. Non-junk entries that are not positives are negatives."""

    name: str
    junk: Callable
    positive: Callable = _same_identity


PROTOCOLS = {
    "general": ProtocolRule("general", _general_junk),
    "cloth-changing": ProtocolRule("cloth-changing", _cc_junk),
    "same-clothes": ProtocolRule("same-clothes", _sc_junk),
}


def get_protocol(name) -> ProtocolRule:
    if isinstance(name, ProtocolRule):
        return name
    try:
        return PROTOCOLS[name]
    except KeyError:
        raise ContractError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from None


@dataclass
class RetrievalResult:
    protocol: str
    distmat: np.ndarray
    order: np.ndarray
    ap: np.ndarray           # per query, NaN where the query had no valid positive
    cmc: np.ndarray
    mAP: float
    num_valid: int
    num_dropped: int
    num_junk: int

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self, ranks=(1, 5, 10)) -> dict:
        out = {f"rank{k}": self.rank(k) for k in ranks}
        out.update(mAP=self.mAP, valid_queries=self.num_valid,
                   dropped_queries=self.num_dropped, junk=self.num_junk)
        return out


def cosine_distance(qf, gf) -> np.ndarray:
    qf = np.asarray(qf, dtype=np.float64)
    gf = np.asarray(gf, dtype=np.float64)
    qn = qf / np.maximum(np.linalg.norm(qf, axis=1, keepdims=True), 1e-12)
    gn = gf / np.maximum(np.linalg.norm(gf, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def score_distmat(distmat, query_meta, gallery_meta, rule="general", max_rank=None) -> RetrievalResult:
    distmat = np.asarray(distmat, dtype=np.float64)
    nq, ng = distmat.shape
    if nq == 0 or ng == 0:
        raise ContractError("query and gallery must be non-empty")
    rule = get_protocol(rule)
    q, g = _meta(query_meta, nq), _meta(gallery_meta, ng)
    junk = rule.junk(q, g)
    positive = rule.positive(q, g) & ~junk
    # ties broken by gallery index
    order = np.argsort(distmat, axis=1, kind="stable").astype(np.int64)
    first_hit, ap, n_pos = rank.evaluate_ranked(
        np.ascontiguousarray(order), np.ascontiguousarray(positive, dtype=np.uint8),
        np.ascontiguousarray(junk, dtype=np.uint8))
    valid = n_pos > 0
    if not valid.any():
        raise EvaluationError(f"no query has a valid positive under the {rule.name!r} protocol")
    max_rank = ng if max_rank is None else min(max_rank, ng)
    hits = first_hit[valid]
    cmc = np.array([(hits < k).mean() for k in range(1, max_rank + 1)])
    ap = np.where(valid, ap, np.nan)
    return RetrievalResult(rule.name, distmat, order, ap, cmc, float(ap[valid].mean()),
                           int(valid.sum()), int((~valid).sum()), int(junk.sum()))


def score(query_feats, gallery_feats, query_meta, gallery_meta, rule="general",
          max_rank=None, single_shot: bool = False, repeats: int = 10, seed: int = 0) -> RetrievalResult:
    """Rank the gallery for every query by cosine distance and compute CMC/mAP.

    With ``single_shot`` the gallery is reduced to one random image per
    identity, ``repeats`` times, and CMC/mAP are averaged over repeats.
    """
    distmat = cosine_distance(query_feats, gallery_feats)
    if not single_shot:
        return score_distmat(distmat, query_meta, gallery_meta, rule, max_rank)
    g = _meta(gallery_meta, distmat.shape[1])
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(repeats):
        keep = np.array(sorted(rng.choice(np.flatnonzero(g["pid"] == p)) for p in np.unique(g["pid"])))
        sub = {k: np.asarray(v)[keep] for k, v in g.items()}
        try:
            runs.append(score_distmat(distmat[:, keep], query_meta, sub, rule, max_rank))
        except EvaluationError:
            continue
    if not runs:
        raise EvaluationError("no single-shot repeat had a valid query")
    n = min(len(r.cmc) for r in runs)
    first = runs[0]
    first.cmc = np.mean([r.cmc[:n] for r in runs], axis=0)
    first.mAP = float(np.mean([r.mAP for r in runs]))
    return first


def distance_histogram_rows(result: RetrievalResult, query_meta, gallery_meta):
    """(kind, distance) for every non-junk query/gallery pair; kind is
    ``intra`` for same identity, ``inter`` otherwise."""
    nq, ng = result.distmat.shape
    q, g = _meta(query_meta, nq), _meta(gallery_meta, ng)
    rule = get_protocol(result.protocol)
    keep = ~rule.junk(q, g)
    same = _pairs(q, g, "pid")
    for i, j in zip(*np.nonzero(keep)):
        yield ("intra" if same[i, j] else "inter", float(result.distmat[i, j]))


def write_distance_csv(result: RetrievalResult, query_meta, gallery_meta, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "distance"])
        for kind, d in distance_histogram_rows(result, query_meta, gallery_meta):
            w.writerow([kind, f"{d:.6f}"])


def format_report(results: dict, extra: dict | None = None) -> str:
    """One ``metric=value`` line per protocol."""
    lines = []
    for name, res in results.items():
        s = res.summary()
        fields = [f"protocol={name}"] + [
            f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()]
        lines.append(" ".join(fields))
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
