"""Diagonal Gaussian-mixture EM over per-directed-link feature vectors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import LinkStats

log = logging.getLogger(__name__)

FEATURES = ("mean_ms", "q25", "q50", "q75", "q90", "q99", "cv", "loss_fraction")
MIN_LINK_SAMPLES = 30
VAR_FLOOR = 1e-6
TOL = 1e-6
MAX_ITER = 200
DEFAULT_K = 5
DEFAULT_RESTARTS = 10


class ClusteringError(ValueError):
    pass


class TooFewPoints(ClusteringError):
    pass


class DimensionMismatch(ClusteringError):
    pass


class MissingDirection(ClusteringError):
    pass


@dataclass
class FeatureSet:
    links: list[tuple[int, int]]
    names: list[str]
    matrix: np.ndarray  # standardized, links x dims
    center: np.ndarray
    spread: np.ndarray
    skipped: dict[tuple[int, int], str] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)

    def vector(self, link) -> np.ndarray:
        return self.matrix[self.links.index(tuple(link))]


def build_features(stats: Sequence[LinkStats], min_samples: int = MIN_LINK_SAMPLES) -> FeatureSet:
    """One z-scored vector per directed link; constant dimensions are dropped."""
    kept, skipped = [], {}
    for s in sorted(stats, key=lambda s: s.link):
        if s.count < min_samples:
            skipped[s.link] = f"only {s.count} samples (< {min_samples})"
            continue
        kept.append(s)
    if not kept:
        raise TooFewPoints("no link has enough samples")
    raw = np.array([[float(getattr(s, f)) for f in FEATURES] for s in kept])
    raw = np.nan_to_num(raw, nan=0.0)
    center = raw.mean(axis=0)
    spread = raw.std(axis=0)
    # rounding-level spread counts as constant; z-scoring it would only amplify noise
    live = spread > 1e-9 * np.maximum(np.abs(center), 1.0)
    dropped = [f for f, ok in zip(FEATURES, live) if not ok]
    for f in dropped:
        log.warning("feature %s is constant across links; dropped", f)
    z = (raw[:, live] - center[live]) / spread[live]
    return FeatureSet([s.link for s in kept], [f for f, ok in zip(FEATURES, live) if ok],
                      z, center[live], spread[live], skipped, dropped)


@dataclass
class GmmModel:
    weights: np.ndarray    # (k,)
    means: np.ndarray      # (k, d)
    variances: np.ndarray  # (k, d)
    loglik: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.weights.size


def _log_joint(x: np.ndarray, weights, means, variances) -> np.ndarray:
    """log(weight_j * N(x_i | mean_j, diag var_j)), shape (n, k)."""
    d = x.shape[1]
    diff = x[:, None, :] - means[None, :, :]
    maha = np.sum(diff * diff / variances[None, :, :], axis=2)
    logdet = np.sum(np.log(variances), axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw[None, :] - 0.5 * (d * math.log(2 * math.pi) + logdet[None, :] + maha)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _em_run(x: np.ndarray, k: int, rng: np.random.Generator, tol: float,
            max_iter: int, floor: float) -> GmmModel:
    n, d = x.shape
    means = _kmeanspp(x, k, rng)
    labels = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    weights = np.bincount(labels, minlength=k).astype(float) + 1e-12
    weights /= weights.sum()
    base = np.maximum(x.var(axis=0), floor)
    variances = np.tile(base, (k, 1))

    history = []
    prev = -math.inf
    it = 0
    for it in range(1, max_iter + 1):
        lj = _log_joint(x, weights, means, variances)
        lse = _logsumexp(lj)
        ll = float(lse.sum())
        # EM never lowers the likelihood; allow only rounding noise
        assert ll >= prev - 1e-9 * max(1.0, abs(prev)), (ll, prev)
        history.append(ll)
        if ll - prev < tol and it > 1:
            break
        prev = ll
        resp = np.exp(lj - lse[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        safe = np.where(nk > 0, nk, 1.0)
        new_means = (resp.T @ x) / safe[:, None]
        means = np.where(nk[:, None] > 0, new_means, means)
        sq = (resp.T @ (x * x)) / safe[:, None] - means * means
        variances = np.where(nk[:, None] > 0, np.maximum(sq, floor), variances)
    return GmmModel(weights, means, variances, history[-1], history, it)


def em_fit(vectors, k: int = DEFAULT_K, restarts: int = DEFAULT_RESTARTS,
           rng: Optional[np.random.Generator] = None, tol: float = TOL,
           max_iter: int = MAX_ITER, floor: float = VAR_FLOOR) -> GmmModel:
    """Best of ``restarts`` k-means++-seeded EM runs by final log-likelihood."""
    x = np.asarray(vectors, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1 or x.shape[0] < k:
        raise TooFewPoints(f"need at least k={k} points, have {x.shape[0]}")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for child in rng.spawn(max(1, restarts)):
        model = _em_run(x, k, child, tol, max_iter, floor)
        if best is None or model.loglik > best.loglik:
            best = model
    return best


def responsibilities(model: GmmModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.means.shape[1]:
        raise DimensionMismatch(f"vector has {x.shape[1]} dims, model has {model.means.shape[1]}")
    lj = _log_joint(x, model.weights, model.means, model.variances)
    return np.exp(lj - _logsumexp(lj)[:, None])


def assign(model: GmmModel, vector) -> tuple[int, np.ndarray]:
    """Hard label (argmax, ties to the lowest index) and the responsibility vector."""
    r = responsibilities(model, vector)[0]
    return int(np.argmax(r)), r


def assign_all(model: GmmModel, features: FeatureSet) -> dict[tuple[int, int], int]:
    r = responsibilities(model, features.matrix)
    return {link: int(np.argmax(row)) for link, row in zip(features.links, r)}


def component_order(model: GmmModel, labels: dict, stats: Sequence[LinkStats]) -> list[int]:
    """Component indices sorted by ascending mean RTT of their member links.

    Components without members go last, in index order.
    """
    by_link = {s.link: s for s in stats}
    means = []
    for c in range(model.k):
        m = [by_link[l].mean_ms for l, lab in labels.items() if lab == c]
        means.append(np.mean(m) if m else math.inf)
    return [int(c) for c in np.argsort(means, kind="stable")]


def order_by_mean(model: GmmModel, labels: dict, stats: Sequence[LinkStats]) -> dict:
    """Relabel clusters so that label 0 is the fastest, as in the summary table."""
    rank = {c: i for i, c in enumerate(component_order(model, labels, stats))}
    return {l: rank[c] for l, c in labels.items()}


@dataclass
class ClusterRow:
    cluster: str
    links: int
    percent: float
    mean_rtt_ms: float
    cv: float
    loss_percent: float


def cluster_summary(labels: dict, stats: Sequence[LinkStats], k: Optional[int] = None) -> list[ClusterRow]:
    """Per-cluster unweighted means over member links, plus a Global row."""
    by_link = {s.link: s for s in stats}
    k = k if k is not None else (max(labels.values()) + 1 if labels else 0)
    total = len(labels)
    if total == 0:
        raise ClusteringError("no assignments")

    def row(name, members):
        if not members:
            return ClusterRow(name, 0, 0.0, math.nan, math.nan, math.nan)
        ss = [by_link[l] for l in members]
        return ClusterRow(name, len(ss), 100.0 * len(ss) / total,
                          float(np.mean([s.mean_ms for s in ss])),
                          float(np.mean([s.cv for s in ss])),
                          100.0 * float(np.nanmean([s.loss_fraction for s in ss]))
                          if any(not math.isnan(s.loss_fraction) for s in ss) else math.nan)

    rows = [row(f"c{c + 1}", [l for l, lab in labels.items() if lab == c]) for c in range(k)]
    rows.append(row("Global", list(labels)))
    return rows


@dataclass
class Crosstab:
    counts: np.ndarray          # k x k, upper triangle used
    diagonal_percent: np.ndarray

    def rows(self) -> list[list[str]]:
        """Table layout: upper triangle, then the diagonal-percentage row."""
        k = self.counts.shape[0]
        out = [["cluster"] + [f"c{j + 1}" for j in range(k)]]
        for i in range(k):
            out.append([f"C{i + 1}"] + ["" if j < i else str(int(self.counts[i, j]))
                                        for j in range(k)])
        out.append(["diag%"] + ["nan" if math.isnan(p) else f"{p:.0f}"
                                for p in self.diagonal_percent])
        return out


def direction_crosstab(labels: dict, k: Optional[int] = None) -> Crosstab:
    """Count unordered pairs by the clusters of their two directions.

    Cell (i, j), i <= j, counts pairs with one direction in c_i and the
    other in c_j. The diagonal percentage of cluster c is the share of
    pairs touching c whose two directions both landed in c.
    """
    k = k if k is not None else (max(labels.values()) + 1 if labels else 0)
    counts = np.zeros((k, k), dtype=int)
    for (a, b), ca in labels.items():
        if a > b:
            continue
        if (b, a) not in labels:
            raise MissingDirection(f"link {b}->{a} has no assignment")
        cb = labels[(b, a)]
        i, j = sorted((ca, cb))
        counts[i, j] += 1
    for (a, b) in labels:
        if a > b and (b, a) not in labels:
            raise MissingDirection(f"link {b}->{a} has no assignment")
    touching = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        diag = np.where(touching > 0, 100.0 * np.diag(counts) / touching, math.nan)
    return Crosstab(counts, diag)


@dataclass(frozen=True)
class Archetype:
    name: str
    mean_ms: float
    cv: float
    loss_fraction: float
    share: float


# reference cluster profiles: mean RTT, CV, loss fraction, share of links
ARCHETYPES = (
    Archetype("c1", 49.0, 1.12, 0.0022, 0.21),
    Archetype("c2", 131.0, 6.37, 0.0040, 0.21),
    Archetype("c3", 167.0, 0.33, 0.0030, 0.24),
    Archetype("c4", 269.0, 0.96, 0.0012, 0.21),
    Archetype("c5", 358.0, 0.44, 0.0140, 0.13),
)


def _allocate(total: int, shares: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``total`` items by ``shares``."""
    w = np.asarray(shares, dtype=float)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - base), kind="stable")[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


def synth_link(arch: Archetype, link: tuple[int, int], rng: np.random.Generator,
               messages: int = 1000, jitter: float = 0.08) -> LinkStats:
    """Lognormal RTT samples with the archetype's mean and CV, Bernoulli loss."""
    from .analysis import descriptive_stats

    mean = arch.mean_ms * math.exp(jitter * rng.standard_normal())
    s2 = math.log1p(arch.cv ** 2)
    lost = int(rng.binomial(messages, arch.loss_fraction))
    x = rng.lognormal(math.log(mean) - s2 / 2, math.sqrt(s2), messages - lost)
    st = descriptive_stats(x, link, lost / messages)
    st.messages_sent, st.messages_lost = messages, lost
    return st


def synth_mesh(n_links: int, rng: np.random.Generator, archetypes=ARCHETYPES,
               perturb: float = 0.0, messages: int = 1000, jitter: float = 0.08):
    """Synthetic directed links, both directions of a pair drawn from one archetype.

    A ``perturb`` fraction of pairs has its reverse direction moved to an
    adjacent archetype. Returns (stats, truth) with truth mapping each
    directed link to its archetype index.
    """
    if n_links % 2:
        raise ClusteringError("n_links must be even (links come in pairs)")
    n_pairs = n_links // 2
    counts = _allocate(n_pairs, [a.share for a in archetypes])
    labels = np.repeat(np.arange(len(archetypes)), counts)
    rng.shuffle(labels)
    flipped = set(rng.choice(n_pairs, int(round(perturb * n_pairs)), replace=False).tolist())
    stats, truth = [], {}
    for p, c in enumerate(labels.tolist()):
        a, b = 2 * p, 2 * p + 1
        rc = c
        if p in flipped:
            options = [j for j in (c - 1, c + 1) if 0 <= j < len(archetypes)]
            rc = options[int(rng.integers(len(options)))]
        for link, lab in (((a, b), c), ((b, a), rc)):
            stats.append(synth_link(archetypes[lab], link, rng, messages, jitter))
            truth[link] = lab
    return stats, truth


def match_labels(truth: Sequence[int], pred: Sequence[int], k: int) -> tuple[float, dict]:
    """Best agreement over all one-to-one relabelings (exhaustive, k is small)."""
    from itertools import permutations

    t = np.asarray(truth)
    p = np.asarray(pred)
    conf = np.zeros((k, k), dtype=int)
    np.add.at(conf, (p, t), 1)
    best, best_map = -1, {}
    for perm in permutations(range(k)):
        hit = sum(conf[i, perm[i]] for i in range(k))
        if hit > best:
            best, best_map = hit, {i: perm[i] for i in range(k)}
    return best / max(1, t.size), best_map
