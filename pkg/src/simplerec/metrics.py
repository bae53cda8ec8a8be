"""Top-k ranking metrics, catalog coverage, sampled I-NDCG and paired significance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def _discounts(n):
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked, relevant, k):
    """Binary-relevance NDCG@k; ``None`` when ``relevant`` is empty."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return None
    gains = np.array([1.0 if i in relevant else 0.0 for i in list(ranked)[:k]])
    dcg = float(np.sum(gains * _discounts(len(gains))))
    idcg = float(np.sum(_discounts(min(len(relevant), k))))
    return dcg / idcg


def _hits(ranked, relevant, k):
    relevant = set(relevant)
    return sum(1 for i in list(ranked)[:k] if i in relevant)


def recall_at_k(ranked, relevant, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return None
    return _hits(ranked, relevant, k) / len(set(relevant))


def precision_at_k(ranked, relevant, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return None
    return _hits(ranked, relevant, k) / k


def coverage_at_k(lists, n_items, k=None):
    """Share of the catalog appearing in at least one top-k list."""
    seen = set()
    for ranked in lists:
        seen.update(list(ranked)[:k] if k else ranked)
    return len(seen) / n_items


def _positive_rank(pos_score, pos_id, neg_scores, neg_ids):
    # ties go to the lower id, matching rank_items
    above = (neg_scores > pos_score) | ((neg_scores == pos_score) & (neg_ids < pos_id))
    return 1 + int(np.sum(above))


@dataclass
class SampledNDCG:
    value: float
    n_positives: int
    short_users: list = field(default_factory=list)  # fewer than N unrated items


def indcg_sampled(scores, positives, rated, n_negatives=99, seed=0):
    """Subsampled NDCG: each positive ranked against ``n_negatives`` unrated items.

    ``scores`` maps user -> score vector over item ids; ``positives`` and
    ``rated`` map user -> item sets (``rated`` includes every known
    interaction). Averaged per positive.
    """
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    rng = np.random.default_rng(seed)
    values, short = [], []
    for user in sorted(positives):
        s = np.asarray(scores[user])
        known = set(rated.get(user, ())) | set(positives[user])
        unrated = np.array(sorted(set(range(len(s))) - known), dtype=np.int64)
        if len(unrated) < n_negatives:
            short.append(user)
        for pos in sorted(positives[user]):
            if len(unrated) <= n_negatives:
                negs = unrated
            else:
                negs = rng.choice(unrated, size=n_negatives, replace=False)
            rank = _positive_rank(s[pos], pos, s[negs], negs)
            values.append(1.0 / math.log2(rank + 1))
    value = float(np.mean(values)) if values else 0.0
    return SampledNDCG(value, len(values), short)


@dataclass
class Significance:
    p_value: float
    degenerate: bool = False


def paired_significance(a, b):
    """Two-sided Wilcoxon signed-rank test over paired per-user values.

    ``a`` and ``b`` map user -> value over the same users. All-tied input
    yields ``p = 1`` flagged degenerate.
    """
    if set(a) != set(b):
        raise ValueError("reports cover different users")
    users = sorted(a)
    x = np.array([a[u] for u in users], dtype=np.float64)
    y = np.array([b[u] for u in users], dtype=np.float64)
    if len(users) == 0 or np.all(x == y):
        return Significance(1.0, True)
    res = stats.wilcoxon(x, y, zero_method="wilcox", alternative="two-sided")
    return Significance(float(res.pvalue))


METRICS = ("ndcg", "recall", "precision")
_FUNCS = {"ndcg": ndcg_at_k, "recall": recall_at_k, "precision": precision_at_k}


@dataclass
class MetricReport:
    """Per-user and aggregate metrics of one evaluated ranking run."""

    k: int
    per_user: dict  # metric -> {user: value}
    coverage: float
    candidate_policy: str
    n_skipped: int = 0
    indcg: float | None = None
    indcg_negatives: int | None = None
    p_values: dict = field(default_factory=dict)  # metric -> p vs. comparison report

    def mean(self, metric):
        vals = self.per_user[metric]
        return float(np.mean(list(vals.values()))) if vals else 0.0

    def n_users(self, metric="ndcg"):
        return len(self.per_user[metric])

    def rows(self):
        """Flat rows of the documented schema: metric, k, value, n_users, p_value."""
        out = []
        for m in METRICS:
            out.append({"metric": m, "k": self.k, "value": self.mean(m), "n_users": self.n_users(m),
                        "p_value": self.p_values.get(m)})
        out.append({"metric": "coverage", "k": self.k, "value": self.coverage,
                    "n_users": self.n_users(), "p_value": None})
        if self.indcg is not None:
            out.append({"metric": "i-ndcg", "k": self.indcg_negatives, "value": self.indcg,
                        "n_users": self.n_users(), "p_value": None})
        return out

    def to_tsv(self):
        lines = ["metric\tk\tvalue\tn_users\tp_value"]
        for r in self.rows():
            p = "" if r["p_value"] is None else f"{r['p_value']:.6g}"
            lines.append(f"{r['metric']}\t{r['k']}\t{r['value']:.6f}\t{r['n_users']}\t{p}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return {
            "k": self.k,
            "candidate_policy": self.candidate_policy,
            "n_skipped": self.n_skipped,
            "rows": self.rows(),
            "per_user": {m: {str(u): v for u, v in sorted(vals.items())} for m, vals in self.per_user.items()},
        }

    @classmethod
    def from_json(cls, obj):
        rows = {r["metric"]: r for r in obj["rows"]}
        per_user = {m: {int(u): v for u, v in vals.items()} for m, vals in obj["per_user"].items()}
        indcg = rows.get("i-ndcg")
        return cls(obj["k"], per_user, rows["coverage"]["value"], obj["candidate_policy"],
                   obj.get("n_skipped", 0), indcg["value"] if indcg else None,
                   indcg["k"] if indcg else None)

    def compare(self, baseline):
        """Fill ``p_values`` with paired tests against ``baseline`` on shared users."""
        for m in METRICS:
            shared = sorted(set(self.per_user[m]) & set(baseline.per_user[m]))
            a = {u: self.per_user[m][u] for u in shared}
            b = {u: baseline.per_user[m][u] for u in shared}
            self.p_values[m] = paired_significance(a, b).p_value
        return self.p_values


def evaluate_lists(lists, relevant, k, n_items, candidate_policy="full"):
    """MetricReport from ranked lists (user -> item sequence) and test sets."""
    per_user = {m: {} for m in METRICS}
    skipped = 0
    for user in sorted(lists):
        rel = relevant.get(user, set())
        if not rel:
            skipped += 1
            continue
        for m in METRICS:
            per_user[m][user] = _FUNCS[m](lists[user], rel, k)
    cov = coverage_at_k([lists[u] for u in sorted(lists)], n_items, k)
    return MetricReport(k, per_user, cov, candidate_policy, skipped)
