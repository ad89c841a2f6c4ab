"""Group-level analysis of parcellations.

Relabeling to a reference, majority-vote atlas with confidence map,
region connectomes, similarity-based and edge-wise two-sample t-tests, and
a linear max-margin classifier with stratified cross-validation.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import betainc

from data_model import FLOAT_FMT, FormatError, Parcellation, ValidationError, _records, as_generator
from metrics import contingency, get_metric, pairwise_similarity

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.05, 0.00005)
# A pooled standard error this small relative to the means counts as zero spread.
ZERO_SPREAD = 1e-13


@dataclass(frozen=True, eq=False)
class Atlas:
    parcellation: Parcellation
    confidence: np.ndarray
    members: int


@dataclass(frozen=True, eq=False)
class Connectome:
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValidationError("connectome must be square")
        if (matrix < 0).any() or not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0):
            raise ValidationError("connectome must be symmetric and nonnegative")
        object.__setattr__(self, "matrix", matrix)

    @property
    def k(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    infinite: bool = False


@dataclass(frozen=True, eq=False)
class EdgewiseResult:
    p: np.ndarray
    t: np.ndarray
    maps: dict

    @property
    def k(self):
        return self.p.shape[0]

    def to_frame(self):
        a, b = np.triu_indices(self.k)
        frame = pd.DataFrame({"a": a + 1, "b": b + 1, "t": self.t[a, b], "p": self.p[a, b]})
        for threshold, significant in self.maps.items():
            name = "sig@" + np.format_float_positional(float(threshold), trim="-")
            frame[name] = significant[a, b].astype(int)
        return frame


@dataclass(frozen=True, eq=False)
class GroupSimilarityTest:
    within_a: np.ndarray
    within_b: np.ndarray
    across: np.ndarray
    a_vs_across: TTestResult
    b_vs_across: TTestResult
    a_vs_b: TTestResult

    def to_frame(self, name_a="A", name_b="B"):
        rows = [
            (f"{name_a} vs {name_a}-{name_b}", self.a_vs_across),
            (f"{name_b} vs {name_a}-{name_b}", self.b_vs_across),
            (f"{name_a} vs {name_b}", self.a_vs_b),
        ]
        return pd.DataFrame(
            {
                "comparison": [r[0] for r in rows],
                "p": [r[1].p for r in rows],
                "t": [r[1].t for r in rows],
                "df": [r[1].df for r in rows],
            }
        )


@dataclass(frozen=True)
class ClassifierParams:
    c: float = 1.0
    epochs: int = 200
    step: float = 1.0
    backtracks: int = 30


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray
    history: tuple = field(default=())

    def decision(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.center) / self.scale
        return z @ self.weights + self.bias


# --- 1. RELABELING AND ATLAS ---
def relabel_to_reference(parc, ref):
    """Give each region the reference label it overlaps most (ties to the smaller label)."""
    if parc.k != ref.k:
        raise ValidationError(f"k mismatch: {parc.k} vs reference {ref.k}")
    table = contingency(parc, ref)
    mapping = np.zeros(parc.k + 1, dtype=np.int64)
    mapping[table.row_labels] = table.col_labels[np.argmax(table.counts.toarray(), axis=1)]
    out = Parcellation(mapping[parc.labels], ref.k)
    if out.degenerate:
        log.warning("relabeling is not one-to-one: %d reference labels unused", int((out.sizes == 0).sum()))
    return out


def relabel_group(parcs, reference_index):
    if not 0 <= reference_index < len(parcs):
        raise ValidationError(f"reference index {reference_index} out of range")
    ref = parcs[reference_index]
    return [relabel_to_reference(p, ref) for p in parcs]


def majority_atlas(parcs):
    """Modal label per voxel (ties to the smallest) and the modal frequency as confidence."""
    if not parcs:
        raise ValidationError("empty list")
    n, k = parcs[0].n, parcs[0].k
    if any(p.n != n or p.k != k for p in parcs):
        raise ValidationError("all parcellations must share voxel count and k")
    counts = np.zeros((n, k), dtype=np.int64)
    rows = np.arange(n)
    for p in parcs:
        counts[rows, p.labels - 1] += 1
    labels = np.argmax(counts, axis=1) + 1
    confidence = counts[rows, labels - 1] / len(parcs)
    return Atlas(Parcellation(labels, k), confidence, len(parcs))


# --- 2. CONNECTOMES ---
def build_connectome(conn, parc):
    """k x k cumulative strengths; each undirected voxel pair counted once."""
    if conn.n != parc.n:
        raise ValidationError(f"size mismatch: connectivity {conn.n}, parcellation {parc.n}")
    S = parc.indicator()
    upper = (S.T @ conn.upper @ S).toarray()
    return Connectome(upper + upper.T - np.diag(np.diag(upper)))


def write_connectome(connectome, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("CONNECTOME %d\n" % connectome.k)
        np.savetxt(fh, connectome.matrix, fmt=FLOAT_FMT)


def read_connectome(path):
    records = _records(path)
    try:
        lineno, tokens = next(records)
    except StopIteration:
        raise FormatError("missing CONNECTOME header", path, 1)
    if len(tokens) != 2 or tokens[0] != "CONNECTOME":
        raise FormatError("expected 'CONNECTOME k' header", path, lineno)
    try:
        k = int(tokens[1])
    except ValueError:
        raise FormatError(f"region count must be an integer, got {tokens[1]!r}", path, lineno)
    if k < 1:
        raise FormatError("region count must be ≥ 1", path, lineno)
    rows = []
    for lineno, tokens in records:
        if len(tokens) != k:
            raise FormatError(f"expected {k} values", path, lineno)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise FormatError("malformed value", path, lineno)
    if len(rows) != k:
        raise FormatError(f"expected {k} rows, found {len(rows)}", path)
    return Connectome(np.array(rows))


# --- 3. T-TESTS ---
def _ttest_arrays(x, y, equal_var=True):
    """Two-sample t over the leading axis; returns (t, p, df, infinite)."""
    # sorting makes the statistics independent of sample order
    x = np.sort(np.asarray(x, dtype=np.float64), axis=0)
    y = np.sort(np.asarray(y, dtype=np.float64), axis=0)
    n1, n2 = x.shape[0], y.shape[0]
    if n1 < 2 or n2 < 2:
        raise ValidationError("each sample needs at least two values")
    m1, m2 = x.mean(axis=0), y.mean(axis=0)
    v1, v2 = x.var(axis=0, ddof=1), y.var(axis=0, ddof=1)
    if equal_var:
        df = np.full(np.shape(m1), float(n1 + n2 - 2))
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        se = np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    else:
        a, b = v1 / n1, v2 / n2
        se = np.sqrt(a + b)
        with np.errstate(divide="ignore", invalid="ignore"):
            df = (a + b) ** 2 / (a ** 2 / (n1 - 1) + b ** 2 / (n2 - 1))
        df = np.where(np.isfinite(df), df, float(n1 + n2 - 2))
    diff = m1 - m2
    flat = se <= ZERO_SPREAD * np.maximum(np.maximum(np.abs(m1), np.abs(m2)), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(flat, 0.0, diff / np.where(flat, 1.0, se))
    p = np.clip(betainc(df / 2.0, 0.5, df / (df + t * t)), 0.0, 1.0)
    infinite = flat & (diff != 0)
    t = np.where(infinite, np.copysign(np.inf, diff), t)
    p = np.where(infinite, 0.0, p)
    return t, p, df, infinite


def two_sample_ttest(xs, ys, equal_var=True):
    """Student's pooled t (Welch when equal_var is False); positive t means mean(xs) > mean(ys)."""
    t, p, df, infinite = _ttest_arrays(np.ravel(xs), np.ravel(ys), equal_var)
    return TTestResult(float(t), float(p), float(df), bool(infinite))


def edgewise_ttests(groupA, groupB, thresholds=DEFAULT_THRESHOLDS, equal_var=True):
    if len(groupA) < 2 or len(groupB) < 2:
        raise ValidationError("each group needs at least two connectomes")
    k = groupA[0].k
    if any(c.k != k for c in list(groupA) + list(groupB)):
        raise ValidationError("all connectomes must share k")
    x = np.stack([c.matrix for c in groupA])
    y = np.stack([c.matrix for c in groupB])
    t, p, _, _ = _ttest_arrays(x, y, equal_var)
    maps = {float(thr): p < thr for thr in thresholds}
    return EdgewiseResult(p, t, maps)


def write_edgewise_report(result, path):
    result.to_frame().to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)


def similarity_group_test(groupA, groupB, metric="nmi", equal_var=True):
    """Within-A, within-B and across-group pairwise similarities, and the three t-tests."""
    if len(groupA) < 3 or len(groupB) < 3:
        raise ValidationError("each group needs at least three parcellations")
    get_metric(metric)
    na = len(groupA)
    matrix = pairwise_similarity(list(groupA) + list(groupB), metric)
    block_a = matrix[:na, :na]
    block_b = matrix[na:, na:]
    within_a = block_a[np.triu_indices(na, 1)]
    within_b = block_b[np.triu_indices(block_b.shape[0], 1)]
    across = matrix[:na, na:].ravel()
    return GroupSimilarityTest(
        within_a,
        within_b,
        across,
        two_sample_ttest(within_a, across, equal_var),
        two_sample_ttest(within_b, across, equal_var),
        two_sample_ttest(within_a, within_b, equal_var),
    )


# --- 4. CLASSIFICATION ---
def select_top_edges(p, count):
    """The `count` entries with a <= b and smallest p; ties broken by (a, b). 1-based."""
    p = np.asarray(p)
    a, b = np.triu_indices(p.shape[0])
    if count < 1 or count > a.size:
        raise ValidationError(f"count must lie in [1, {a.size}]")
    order = np.lexsort((b, a, p[a, b]))[:count]
    return [(int(a[i]) + 1, int(b[i]) + 1) for i in order]


def edge_features(connectomes, edges):
    return np.array([[c.matrix[a - 1, b - 1] for a, b in edges] for c in connectomes])


def _hinge_objective(z, y, w, b, c):
    margins = y * (z @ w + b)
    return 0.5 * float(w @ w) + c * float(np.maximum(0.0, 1.0 - margins).mean())


def train_linear_classifier(features, labels, params=None):
    """Linear max-margin classifier by full-batch subgradient descent on the hinge loss.

    Features are standardized with training statistics. A step that would
    raise the objective is halved until it does not, so the recorded loss
    never increases.
    """
    params = params or ClassifierParams()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[1] < 1 or x.shape[0] != y.size:
        raise ValidationError("features must be s x d with one label per row")
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ValidationError("labels must be -1 or +1")
    if np.unique(y).size < 2:
        raise ValidationError("single-class labels")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - center) / scale
    s, d = z.shape
    w, b = np.zeros(d), 0.0
    loss = _hinge_objective(z, y, w, b, params.c)
    history = [loss]
    for epoch in range(params.epochs):
        active = y * (z @ w + b) < 1.0
        grad_w = w - params.c * (y[active, None] * z[active]).sum(axis=0) / s
        grad_b = -params.c * y[active].sum() / s
        step = params.step / np.sqrt(epoch + 1.0)
        for _ in range(params.backtracks):
            cand_w, cand_b = w - step * grad_w, b - step * grad_b
            cand = _hinge_objective(z, y, cand_w, cand_b, params.c)
            if cand <= loss:
                w, b, loss = cand_w, cand_b, cand
                break
            step /= 2.0
        history.append(loss)
    return LinearClassifier(w, float(b), center, scale, tuple(history))


def predict(classifier, features):
    return np.where(classifier.decision(features) >= 0, 1, -1)


def stratified_folds(labels, folds, seed=0):
    """Fold index per sample; each class is shuffled and dealt round-robin."""
    y = np.asarray(labels).ravel()
    rng = as_generator(seed)
    fold_of = np.empty(y.size, dtype=np.int64)
    position = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold_of[idx] = (position + np.arange(idx.size)) % folds
        position += idx.size
    return fold_of


def cross_validate(features, labels, folds=10, seed=0, params=None, n_jobs=1):
    """Mean held-out accuracy over stratified folds."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if not 2 <= folds <= y.size:
        raise ValidationError(f"need 2 <= folds <= {y.size}")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValidationError("single-class labels")
    if counts.min() < 2:
        raise ValidationError("each class needs at least two samples")
    fold_of = stratified_folds(y, folds, seed)

    def run(f):
        test = fold_of == f
        clf = train_linear_classifier(x[~test], y[~test], params)
        return float((predict(clf, x[test]) == y[test]).mean())

    accuracies = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(run)(f) for f in range(folds))
    log.debug("fold accuracies: %s", accuracies)
    return float(np.mean(accuracies))
