"""Welch t-test, 2x2 chi-square test and keyword frequencies, with in-module special functions."""
import csv
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


# -- special functions ---------------------------------------------------


def _gamma_series(a, x):
    """Lower regularized P(a, x) by its power series (good for x < a + 1)."""
    term = total = 1.0 / a
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a, x):
    """Upper regularized Q(a, x) by modified Lentz continued fraction (good for x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("gammainc: a must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gammaincc(a, x):
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x), accurate in the tail."""
    if a <= 0:
        raise ValueError("gammaincc: a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _beta_cf(a, b, x):
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b) via continued fraction with the symmetry swap."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc: a and b must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_sf_two_sided(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0:
        return 1.0
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


def chi2_sf(x, df):
    """Survival function of the chi-square distribution."""
    if df <= 0:
        raise ValueError("df must be positive")
    return min(1.0, max(0.0, gammaincc(df / 2.0, x / 2.0)))


# -- tests ---------------------------------------------------------------


@dataclass
class TestResult:
    statistic: float
    df: float
    p_value: float
    groups: list = field(default_factory=list)   # [{"n", "mean", "std"}] where applicable
    note: str = ""

    __test__ = False  # not a pytest class

    def to_dict(self):
        return asdict(self)


def _summary(x):
    return {"n": int(len(x)), "mean": float(np.mean(x)), "std": float(np.std(x, ddof=1))}


def welch_t(sample_a, sample_b):
    """Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    for name, s in (("a", a), ("b", b)):
        if len(s) < 2:
            raise ValueError(f"welch_t: sample {name} needs at least 2 values, got {len(s)}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"welch_t: sample {name} contains non-finite values")
    na, nb = len(a), len(b)
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    groups = [_summary(a), _summary(b)]
    se2 = va / na + vb / nb
    if se2 == 0:
        if ma == mb:
            return TestResult(0.0, float(na + nb - 2), 1.0, groups, "both samples constant and equal")
        raise ValueError("welch_t: both samples have zero variance but different means")
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return TestResult(float(t), float(df), t_sf_two_sided(t, df), groups)


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts [[a, b], [c, d]]: rows are groups, columns outcomes."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for k in ("a", "b", "c", "d"):
            v = getattr(self, k)
            if v < 0 or int(v) != v:
                raise ValueError(f"contingency count {k}={v} must be a non-negative integer")
        if self.total == 0:
            raise ValueError("contingency table is empty")

    @property
    def total(self):
        return self.a + self.b + self.c + self.d

    def rows(self):
        return [[self.a, self.b], [self.c, self.d]]


def chi_square(table, correction=False):
    """Pearson chi-square test of independence on a 2x2 table (df = 1).

    ``correction`` applies Yates' continuity correction.
    """
    if not isinstance(table, ContingencyTable2x2):
        (a, b), (c, d) = table
        table = ContingencyTable2x2(a, b, c, d)
    obs = np.asarray(table.rows(), dtype=np.float64)
    n = obs.sum()
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / n
    if np.any(expected == 0):
        raise ValueError("chi_square: a row or column total is zero (zero expected count)")
    dev = np.abs(obs - expected)
    if correction:
        dev = np.maximum(dev - 0.5, 0.0)
    stat = float(np.sum(dev ** 2 / expected))
    return TestResult(stat, 1.0, chi2_sf(stat, 1))


# -- keyword frequencies -------------------------------------------------

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text):
    return [t.lower() for t in _TOKEN.findall(text)]


def keyword_freq(texts, stopwords=(), group_size=None):
    """(term, count) sorted by descending count then term.

    With ``group_size`` counts are divided by it (per-capita frequencies).
    """
    stop = {s.lower() for s in stopwords}
    counts = Counter(t for text in texts for t in tokenize(text) if t not in stop)
    out = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if group_size is not None:
        if group_size <= 0:
            raise ValueError("group_size must be positive")
        out = [(t, c / group_size) for t, c in out]
    return out


def keyword_freq_by_group(groups, stopwords=(), normalize=False, sizes=None):
    """``groups``: {name: [texts]}. Normalises by ``sizes[name]`` (default: number of texts)."""
    out = {}
    for name, texts in groups.items():
        size = None
        if normalize:
            size = (sizes or {}).get(name, len(texts)) or None
        out[name] = keyword_freq(texts, stopwords, size)
    return out


# -- reports -------------------------------------------------------------


@dataclass
class HabitRow:
    habit: str
    name: str
    positive_holders: int
    total_holders: int
    table: list
    result: TestResult

    def to_dict(self):
        return {"habit": self.habit, "name": self.name, "positive_holders": self.positive_holders,
                "total_holders": self.total_holders, "table": self.table, **self.result.to_dict()}


@dataclass
class HabitReport:
    rows: list
    skipped: list          # (habit id, reason)
    positive_users: int
    total_users: int

    def to_dict(self):
        return {"positive_users": self.positive_users, "total_users": self.total_users,
                "rows": [r.to_dict() for r in self.rows],
                "skipped": [{"habit": h, "reason": why} for h, why in self.skipped]}

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["habit", "name", "positive_holders", "total_holders", "chi2", "p_value"])
            for r in self.rows:
                w.writerow([r.habit, r.name, r.positive_holders, r.total_holders,
                            repr(r.result.statistic), repr(r.result.p_value)])

    def format(self):
        lines = [f"{'habit':<40} {'# positive':>10} {'# total':>8} {'p-value':>9}",
                 f"{'(all users)':<40} {self.positive_users:>10} {self.total_users:>8} {'-':>9}"]
        for r in self.rows:
            lines.append(f"{r.name[:40]:<40} {r.positive_holders:>10} {r.total_holders:>8} {format_p(r.result.p_value):>9}")
        return "\n".join(lines)


def format_p(p):
    return "<0.001" if p < 0.001 else f"{p:.4f}"


def habit_contingency_report(g, relation="has", correction=False):
    """Chi-square test of holding each habit vs. the user label."""
    rel = g.relation(relation)
    labels = np.asarray(g.labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n = len(labels)
    s, d = rel.edges()
    rows, skipped = [], []
    for h in range(g.node_counts[rel.dst]):
        holders = np.unique(s[d == h])
        hid = g.ids[rel.dst][h]
        if len(holders) == 0:
            skipped.append((hid, "no holders"))
            continue
        a = int(labels[holders].sum())                 # positive holders
        c = len(holders) - a                            # negative holders
        table = ContingencyTable2x2(a, n_pos - a, c, (n - n_pos) - c)
        try:
            res = chi_square(table, correction)
        except ValueError as e:
            skipped.append((hid, str(e)))
            continue
        rows.append(HabitRow(hid, g.names[rel.dst][h], a, len(holders), table.rows(), res))
    return HabitReport(rows, skipped, n_pos, n)


def nutrient_ttest_report(values, labels):
    """``values``: {nutrient: per-user array}. Welch test of positive vs. negative users per nutrient."""
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    for name, v in values.items():
        v = np.asarray(v, dtype=np.float64)
        res = welch_t(v[labels == 1], v[labels == 0])
        out.append({"nutrient": name, "mean_positive": res.groups[0]["mean"],
                    "mean_negative": res.groups[1]["mean"], "t": res.statistic, "df": res.df,
                    "p_value": res.p_value})
    return out
