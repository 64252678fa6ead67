"""Delay distribution families, maximum-likelihood fits and AD ranking.

Parameter conventions follow the usual fitting-package layout:

* Gamma: ``shape`` (lambda) and ``scale`` (Theta), mean ``shape * scale``.
* Lognormal / Lognormal3: ``loc`` and ``scale`` are mean and sd of
  ``log(x - threshold)``.
* Loglogistic3: ``loc`` and ``scale`` are location and scale of the
  logistic law of ``log(x - threshold)``.
* Weibull / Weibull3: ``shape`` k and ``scale``.
* Normal: ``loc`` is the mean, ``scale`` the standard deviation.
* Exponential2: ``scale`` (mean excess) above ``threshold``.
"""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from . import special

MIN_FIT_SAMPLES = 30
AD_CLAMP = 1e-15
THRESHOLD_GRID = 200


class DistError(ValueError):
    pass


class OutOfSupport(DistError):
    pass


class SupportViolation(DistError):
    pass


class DegenerateData(DistError):
    pass


class TooFewSamples(DistError):
    pass


class WrongFamily(DistError):
    pass


class BadFraction(DistError):
    pass


class Family(enum.Enum):
    GAMMA = "gamma"
    LOGNORMAL = "lognormal"
    LOGNORMAL3 = "lognormal3"
    LOGLOGISTIC3 = "loglogistic3"
    WEIBULL = "weibull"
    WEIBULL3 = "weibull3"
    NORMAL = "normal"
    EXPONENTIAL2 = "exponential2"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def n_params(self) -> int:
        return 3 if self in _THREE_PARAM else 2

    @classmethod
    def parse(cls, name: str) -> "Family":
        key = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        for fam in cls:
            if fam.value == key:
                return fam
        aliases = {"exponential": cls.EXPONENTIAL2, "exp2": cls.EXPONENTIAL2,
                   "2parexponential": cls.EXPONENTIAL2, "3parlognormal": cls.LOGNORMAL3,
                   "3parloglogistic": cls.LOGLOGISTIC3, "3parweibull": cls.WEIBULL3,
                   "loglogistic": cls.LOGLOGISTIC3}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown distribution family {name!r}")


_LABELS = {
    Family.GAMMA: "Gamma",
    Family.LOGNORMAL: "Lognormal",
    Family.LOGNORMAL3: "3-Par Lognormal",
    Family.LOGLOGISTIC3: "3-Par Loglogistic",
    Family.WEIBULL: "Weibull",
    Family.WEIBULL3: "3-Par Weibull",
    Family.NORMAL: "Normal",
    Family.EXPONENTIAL2: "2-Par Exponential",
}
_THREE_PARAM = {Family.LOGNORMAL3, Family.LOGLOGISTIC3, Family.WEIBULL3}
ALL_FAMILIES = tuple(Family)


@dataclass(frozen=True)
class DistParams:
    family: Family
    scale: float
    shape: Optional[float] = None
    loc: Optional[float] = None
    threshold: float = 0.0

    def __post_init__(self):
        fam = self.family
        for name in ("scale", "shape", "loc", "threshold"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, float(v))
        if not self.scale > 0:
            raise ValueError(f"{fam.label}: scale must be positive, got {self.scale}")
        if fam in (Family.GAMMA, Family.WEIBULL, Family.WEIBULL3):
            if self.shape is None or not self.shape > 0:
                raise ValueError(f"{fam.label}: shape must be positive, got {self.shape}")
        if fam in (Family.LOGNORMAL, Family.LOGNORMAL3, Family.LOGLOGISTIC3, Family.NORMAL):
            if self.loc is None or not math.isfinite(self.loc):
                raise ValueError(f"{fam.label}: location required")
        if fam in (Family.GAMMA, Family.LOGNORMAL, Family.WEIBULL) and self.threshold != 0.0:
            raise ValueError(f"{fam.label} has no threshold parameter")

    @classmethod
    def gamma(cls, shape, scale):
        return cls(Family.GAMMA, scale, shape=shape)

    @classmethod
    def lognormal(cls, loc, scale, threshold=0.0):
        fam = Family.LOGNORMAL3 if threshold else Family.LOGNORMAL
        return cls(fam, scale, loc=loc, threshold=threshold)

    @classmethod
    def loglogistic3(cls, loc, scale, threshold):
        return cls(Family.LOGLOGISTIC3, scale, loc=loc, threshold=threshold)

    @classmethod
    def weibull(cls, shape, scale, threshold=0.0):
        fam = Family.WEIBULL3 if threshold else Family.WEIBULL
        return cls(fam, scale, shape=shape, threshold=threshold)

    @classmethod
    def normal(cls, mean, sd):
        return cls(Family.NORMAL, sd, loc=mean)

    @classmethod
    def exponential2(cls, scale, threshold=0.0):
        return cls(Family.EXPONENTIAL2, scale, threshold=threshold)

    @property
    def lower(self) -> float:
        """Infimum of the support."""
        return -math.inf if self.family is Family.NORMAL else self.threshold

    def mean(self) -> float:
        f, s = self.family, self.scale
        if f is Family.GAMMA:
            return self.shape * s
        if f in (Family.LOGNORMAL, Family.LOGNORMAL3):
            return self.threshold + math.exp(self.loc + s * s / 2)
        if f is Family.LOGLOGISTIC3:
            if s >= 1:
                return math.inf
            return self.threshold + math.exp(self.loc) * math.pi * s / math.sin(math.pi * s)
        if f in (Family.WEIBULL, Family.WEIBULL3):
            return self.threshold + s * math.gamma(1 + 1 / self.shape)
        if f is Family.NORMAL:
            return self.loc
        return self.threshold + s

    def as_dict(self) -> dict:
        return {"family": self.family.value, "loc": self.loc, "shape": self.shape,
                "scale": self.scale, "threshold": self.threshold}


@dataclass(frozen=True)
class FitResult:
    params: DistParams
    ad_stat: float
    n: int

    @property
    def family(self) -> Family:
        return self.params.family


class Ranking(NamedTuple):
    fits: list[FitResult]
    skipped: dict[Family, str]


@dataclass(frozen=True)
class GammaMoments:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float


# -- densities ---------------------------------------------------------------


def _shifted(params: DistParams, x: np.ndarray) -> np.ndarray:
    return x - params.threshold


def logpdf(params: DistParams, x):
    """Log density; raises OutOfSupport if any point lies outside the support."""
    x = np.asarray(x, dtype=float)
    f, s = params.family, params.scale
    if f is Family.NORMAL:
        z = (x - params.loc) / s
        return -0.5 * z * z - math.log(s) - 0.5 * math.log(2 * math.pi)
    z = _shifted(params, x)
    if np.any(z <= 0):
        raise OutOfSupport(f"{f.label}: support is x > {params.threshold}")
    if f is Family.GAMMA:
        k = params.shape
        return (k - 1) * np.log(z) - z / s - special.lgamma(k) - k * math.log(s)
    if f in (Family.LOGNORMAL, Family.LOGNORMAL3):
        ly = np.log(z)
        u = (ly - params.loc) / s
        return -0.5 * u * u - ly - math.log(s) - 0.5 * math.log(2 * math.pi)
    if f is Family.LOGLOGISTIC3:
        ly = np.log(z)
        u = (ly - params.loc) / s
        return -u - ly - math.log(s) - 2.0 * np.logaddexp(0.0, -u)
    if f in (Family.WEIBULL, Family.WEIBULL3):
        k = params.shape
        r = z / s
        return math.log(k / s) + (k - 1) * np.log(r) - r ** k
    return -z / s - math.log(s)


def pdf(params: DistParams, x):
    out = np.exp(logpdf(params, x))
    return out if np.ndim(out) else float(out)


def _cdf_sf(params: DistParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # far-tail overflow lands on the right limit (0 or 1), so keep quiet about it
    with np.errstate(over="ignore"):
        return _cdf_sf_raw(params, x)


def _cdf_sf_raw(params: DistParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f, s = params.family, params.scale
    if f is Family.NORMAL:
        z = (x - params.loc) / s
        return special.norm_cdf(z), special.norm_sf(z)
    z = _shifted(params, x)
    inside = z > 0
    zp = np.where(inside, z, 1.0)
    if f is Family.GAMMA:
        c, q = special.gammainc_pq(params.shape, zp / s)
    elif f in (Family.LOGNORMAL, Family.LOGNORMAL3):
        u = (np.log(zp) - params.loc) / s
        c, q = special.norm_cdf(u), special.norm_sf(u)
    elif f is Family.LOGLOGISTIC3:
        u = (np.log(zp) - params.loc) / s
        c = 1.0 / (1.0 + np.exp(-u))
        q = 1.0 / (1.0 + np.exp(u))
    elif f in (Family.WEIBULL, Family.WEIBULL3):
        h = (zp / s) ** params.shape
        c, q = -np.expm1(-h), np.exp(-h)
    else:
        c, q = -np.expm1(-zp / s), np.exp(-zp / s)
    c = np.where(inside, c, 0.0)
    q = np.where(inside, q, 1.0)
    return c, q


def cdf(params: DistParams, x):
    arr = np.asarray(x, dtype=float)
    c, _ = _cdf_sf(params, np.atleast_1d(arr))
    return c if arr.ndim else float(c[0])


def sf(params: DistParams, x):
    arr = np.asarray(x, dtype=float)
    _, q = _cdf_sf(params, np.atleast_1d(arr))
    return q if arr.ndim else float(q[0])


def ppf(params: DistParams, p):
    """Quantile function; closed form where one exists, bisection otherwise."""
    arr = np.asarray(p, dtype=float)
    p = np.atleast_1d(arr)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    f, s = params.family, params.scale
    if f is Family.NORMAL:
        out = params.loc + s * _norm_ppf(p)
    elif f in (Family.LOGNORMAL, Family.LOGNORMAL3):
        out = params.threshold + np.exp(params.loc + s * _norm_ppf(p))
    elif f is Family.LOGLOGISTIC3:
        out = params.threshold + np.exp(params.loc + s * np.log(p / (1 - p)))
    elif f in (Family.WEIBULL, Family.WEIBULL3):
        out = params.threshold + s * (-np.log1p(-p)) ** (1 / params.shape)
    elif f is Family.EXPONENTIAL2:
        out = params.threshold - s * np.log1p(-p)
    else:
        out = _bisect_ppf(params, p)
    return out if arr.ndim else float(out[0])


_inv_cdf = np.frompyfunc(statistics.NormalDist().inv_cdf, 1, 1)


def _norm_ppf(p):
    return _inv_cdf(p).astype(float)


def _bisect_ppf(params: DistParams, p: np.ndarray) -> np.ndarray:
    lo = np.full_like(p, params.threshold)
    hi = np.full_like(p, params.threshold + params.mean())
    while True:
        short = cdf(params, hi) < p
        if not np.any(short):
            break
        hi = np.where(short, params.threshold + 2 * (hi - params.threshold), hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = cdf(params, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-12 * np.maximum(1.0, np.abs(hi))):
            break
    return 0.5 * (lo + hi)


# -- sampling ----------------------------------------------------------------


def _gamma_standard(shape: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit-scale Gamma variates by Marsaglia-Tsang squeeze/rejection."""
    boost = shape < 1
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(64, int((n - filled) * 1.1))
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * z) ** 3
        ok = v > 0
        vs = np.where(ok, v, 1.0)
        accept = ok & ((u < 1.0 - 0.0331 * z ** 4)
                       | (np.log(np.where(u > 0, u, 1e-300)) < 0.5 * z * z + d * (1.0 - vs + np.log(vs))))
        got = d * vs[accept]
        take = min(len(got), n - filled)
        out[filled:filled + take] = got[:take]
        filled += take
    if boost:
        out *= rng.random(n) ** (1.0 / shape)
    return out


def sample(params: DistParams, rng: np.random.Generator, n: int) -> np.ndarray:
    f, s = params.family, params.scale
    if f is Family.GAMMA:
        return s * _gamma_standard(params.shape, rng, n)
    if f is Family.NORMAL:
        return params.loc + s * rng.standard_normal(n)
    if f in (Family.LOGNORMAL, Family.LOGNORMAL3):
        return params.threshold + np.exp(params.loc + s * rng.standard_normal(n))
    # inverse-cdf families; 1 - U keeps the argument in (0, 1]
    u = 1.0 - rng.random(n)
    if f is Family.LOGLOGISTIC3:
        u = np.where(u >= 1.0, 0.5, u)
        return params.threshold + np.exp(params.loc + s * np.log(u / (1.0 - u)))
    if f in (Family.WEIBULL, Family.WEIBULL3):
        return params.threshold + s * (-np.log(u)) ** (1.0 / params.shape)
    return params.threshold - s * np.log(u)


# -- maximum likelihood ------------------------------------------------------


def _check_data(data, positive: bool) -> np.ndarray:
    x = np.asarray(data, dtype=float).ravel()
    if x.size < MIN_FIT_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DistError("data contains non-finite values")
    if np.ptp(x) == 0:
        raise DegenerateData("data has zero variance")
    if positive and np.any(x <= 0):
        raise SupportViolation("family needs strictly positive data")
    return x


def _gamma_shape(mean: float, mean_log: float, var: float) -> float:
    """Solve log(k) - digamma(k) = log(mean) - mean(log x) by Newton."""
    target = math.log(mean) - mean_log
    k = mean * mean / var
    for _ in range(100):
        g = math.log(k) - special.digamma(k) - target
        dg = 1.0 / k - special.trigamma(k)
        step = g / dg
        nk = k - step
        while nk <= 0:
            step /= 2
            nk = k - step
        if abs(nk - k) <= 1e-13 * k:
            return nk
        k = nk
    return k


def _fit_gamma(x):
    mean = x.mean()
    k = _gamma_shape(mean, np.log(x).mean(), x.var())
    return DistParams.gamma(k, mean / k)


def _weibull_shape(ly: np.ndarray, k0: Optional[float] = None) -> float:
    """Profile-likelihood Newton for the Weibull shape on log-data ``ly``."""
    ly = ly - ly.max()  # shape estimate is scale-invariant; keeps exp() <= 1
    mlog = ly.mean()
    if k0 is None:
        sd = ly.std()
        k0 = 1.2 / sd if sd > 0 else 1.0
    k = k0
    lo, hi = 0.0, math.inf
    for _ in range(200):
        w = np.exp(k * ly)
        sw = w.sum()
        wl = w * ly
        a = wl.sum() / sw
        b = (wl * ly).sum() / sw
        g = a - 1.0 / k - mlog
        dg = b - a * a + 1.0 / (k * k)
        if g > 0:
            hi = min(hi, k)
        else:
            lo = max(lo, k)
        nk = k - g / dg
        if not lo < nk < hi:
            nk = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * k
        if abs(nk - k) <= 1e-12 * k:
            return nk
        k = nk
    return k


def _weibull_cond(z, k0=None):
    ly = np.log(z)
    k = _weibull_shape(ly, k0)
    m = ly.max()
    scale = math.exp(m + math.log(np.mean(np.exp(k * (ly - m)))) / k)
    return k, scale, ly


def _fit_weibull(x):
    k, scale, _ = _weibull_cond(x)
    return DistParams.weibull(k, scale)


def _logistic_eval(y, mu, s):
    u = (y - mu) / s
    e = np.exp(-np.clip(u, -700.0, 700.0))
    ll = float(np.sum(-u - 2.0 * np.log1p(e))) - y.size * math.log(s)
    return ll, u, 1.0 / (1.0 + e)


def _logistic_mle(y: np.ndarray, start: Optional[tuple[float, float]] = None):
    """Location/scale MLE of a logistic law by damped Newton."""
    n = y.size
    if start is None:
        mu, s = float(np.median(y)), float(y.std() * math.sqrt(3) / math.pi)
    else:
        mu, s = start
    cur, u, p = _logistic_eval(y, mu, s)
    for _ in range(100):
        w = p * (1.0 - p)
        t = 2.0 * p - 1.0
        st, su_t, sw, suw = t.sum(), np.dot(u, t), w.sum(), np.dot(u, w)
        su2w = np.dot(u * u, w)
        g_mu = st / s
        g_s = (su_t - n) / s
        h_mm = -2.0 * sw / (s * s)
        h_ms = -(st + 2.0 * suw) / (s * s)
        h_ss = -(2.0 * su_t - n + 2.0 * su2w) / (s * s)
        det = h_mm * h_ss - h_ms * h_ms
        if det > 0 and h_mm < 0:
            d_mu = -(h_ss * g_mu - h_ms * g_s) / det
            d_s = -(-h_ms * g_mu + h_mm * g_s) / det
        else:  # not locally concave: gradient step
            d_mu, d_s = g_mu * s * s / n, g_s * s * s / n
        step = 1.0
        while True:
            nmu, ns = mu + step * d_mu, s + step * d_s
            if ns > 0:
                new, nu, np_ = _logistic_eval(y, nmu, ns)
                if new >= cur - 1e-12 * abs(cur):
                    break
            step /= 2
            if step < 1e-12:
                return mu, s, cur
        done = abs(nmu - mu) <= 1e-10 * max(1.0, abs(mu)) and abs(ns - s) <= 1e-10 * s
        mu, s, cur, u, p = nmu, ns, new, nu, np_
        if done:
            break
    return mu, s, cur


# Conditional fits at a fixed threshold. Each returns (loglik, params,
# warm-start state for the neighbouring threshold).

def _profile_lognormal(x, thr, start=None):
    z = x - thr
    ly = np.log(z)
    mu, sd = ly.mean(), ly.std()
    if sd <= 0:
        return -math.inf, None, None
    ll = -0.5 * x.size * (math.log(2 * math.pi * sd * sd) + 1.0) - ly.sum()
    return ll, DistParams(Family.LOGNORMAL3, float(sd), loc=float(mu), threshold=thr), None


def _profile_weibull(x, thr, start=None):
    z = x - thr
    k, scale, ly = _weibull_cond(z, start)
    n = x.size
    ll = n * math.log(k) - n * k * math.log(scale) + (k - 1) * ly.sum() - n
    return ll, DistParams(Family.WEIBULL3, scale, shape=k, threshold=thr), k


def _profile_loglogistic(x, thr, start=None):
    ly = np.log(x - thr)
    mu, s, ll = _logistic_mle(ly, start)
    return ll - ly.sum(), DistParams.loglogistic3(mu, s, thr), (mu, s)


_PROFILES = {
    Family.LOGNORMAL3: _profile_lognormal,
    Family.WEIBULL3: _profile_weibull,
    Family.LOGLOGISTIC3: _profile_loglogistic,
}

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _fit_threshold(family: Family, x: np.ndarray) -> DistParams:
    """Grid over the threshold, then golden-section refinement."""
    profile = _PROFILES[family]
    xmin, span = float(x.min()), float(np.ptp(x))
    grid = np.linspace(xmin - span, xmin - span * 1e-6, THRESHOLD_GRID)
    warm = None

    def evaluate(t):
        nonlocal warm
        ll, p, state = profile(x, float(t), warm)
        if state is not None:
            warm = state
        return ll, p

    best_ll, best_p, best_i = -math.inf, None, 0
    for i, t in enumerate(grid):
        ll, p = evaluate(t)
        if ll > best_ll:
            best_ll, best_p, best_i = ll, p, i
    a = float(grid[max(best_i - 1, 0)])
    b = float(grid[min(best_i + 1, len(grid) - 1)])
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, pc = evaluate(c)
    fd, pd = evaluate(d)
    for _ in range(40):
        if fc > fd:
            b, d, fd, pd = d, c, fc, pc
            c = b - _GOLDEN * (b - a)
            fc, pc = evaluate(c)
        else:
            a, c, fc, pc = c, d, fd, pd
            d = a + _GOLDEN * (b - a)
            fd, pd = evaluate(d)
    for ll, p in ((fc, pc), (fd, pd)):
        if ll > best_ll:
            best_ll, best_p = ll, p
    return best_p


def fit_mle(family: Family, data) -> DistParams:
    family = Family(family)
    positive = family in (Family.GAMMA, Family.LOGNORMAL, Family.WEIBULL)
    x = _check_data(data, positive)
    if family is Family.GAMMA:
        return _fit_gamma(x)
    if family is Family.NORMAL:
        return DistParams.normal(float(x.mean()), float(x.std()))
    if family is Family.LOGNORMAL:
        ly = np.log(x)
        return DistParams.lognormal(float(ly.mean()), float(ly.std()))
    if family is Family.WEIBULL:
        return _fit_weibull(x)
    if family is Family.EXPONENTIAL2:
        n = x.size
        xmin = float(x.min())
        scale = n * (float(x.mean()) - xmin) / (n - 1)
        return DistParams.exponential2(scale, xmin - scale / n)
    return _fit_threshold(family, x)


def loglik(params: DistParams, data) -> float:
    return float(np.sum(logpdf(params, np.asarray(data, dtype=float))))


# -- goodness of fit ---------------------------------------------------------


def anderson_darling_cdf(data, cdf_fn: Callable, sf_fn: Optional[Callable] = None) -> float:
    """A^2 of sorted data under an arbitrary cdf (and optional survival fn)."""
    x = np.sort(np.asarray(data, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise DistError("empty data")
    f = np.clip(np.asarray(cdf_fn(x), dtype=float), AD_CLAMP, 1.0 - AD_CLAMP)
    if sf_fn is None:
        q = 1.0 - f
    else:
        q = np.clip(np.asarray(sf_fn(x), dtype=float), AD_CLAMP, 1.0 - AD_CLAMP)
    i = np.arange(1, n + 1, dtype=float)
    total = np.sum((2.0 * i - 1.0) * (np.log(f) + np.log(q[::-1])))
    return float(-n - total / n)


def anderson_darling(data, params: DistParams) -> float:
    x = np.asarray(data, dtype=float)
    if params.family is not Family.NORMAL and np.any(x <= params.threshold):
        raise SupportViolation(
            f"{params.family.label}: data must lie above threshold {params.threshold}")
    return anderson_darling_cdf(x, lambda v: cdf(params, v), lambda v: sf(params, v))


def rank_fits(data, families: Iterable[Family] = ALL_FAMILIES) -> Ranking:
    """Fit every family and rank by ascending A^2; failures are reported, not raised."""
    x = np.asarray(data, dtype=float).ravel()
    fits, skipped = [], {}
    order = {f: i for i, f in enumerate(ALL_FAMILIES)}
    for fam in families:
        fam = Family(fam)
        try:
            params = fit_mle(fam, x)
            ad = anderson_darling(x, params)
        except (DistError, ValueError, FloatingPointError, ZeroDivisionError) as exc:
            skipped[fam] = f"{type(exc).__name__}: {exc}"
            continue
        if not math.isfinite(ad):
            skipped[fam] = "non-finite Anderson-Darling statistic"
            continue
        fits.append(FitResult(params, ad, x.size))
    fits.sort(key=lambda r: (r.ad_stat, r.family.n_params, order[r.family]))
    return Ranking(fits, skipped)


def probability_plot_data(data, params: DistParams, max_points: int = 1000):
    """(empirical quantile, model quantile) pairs at median-rank positions."""
    x = np.sort(np.asarray(data, dtype=float).ravel())
    n = x.size
    idx = np.unique(np.linspace(0, n - 1, min(n, max_points)).round().astype(int))
    p = (idx + 1 - 0.3) / (n + 0.4)
    return x[idx], ppf(params, p)


# -- Gamma diagnostics & sampling helpers -------------------------------------


def gamma_moments(params: DistParams) -> GammaMoments:
    if params.family is not Family.GAMMA:
        raise WrongFamily(f"moments are defined here for Gamma, got {params.family.label}")
    k, s = params.shape, params.scale
    return GammaMoments(k * s, k * s * s, 2.0 / math.sqrt(k), 6.0 / k)


def subsample_size(n: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise BadFraction(f"fraction must be in (0, 1], got {fraction}")
    # round() absorbs binary representation error (0.001 * 551e6 etc.)
    return min(n, math.ceil(round(n * fraction, 6)))


def subsample_indices(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = subsample_size(n, fraction)
    return rng.choice(n, size=k, replace=False)


def subsample(data, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of ceil(fraction * n) elements."""
    x = np.asarray(data)
    return x[subsample_indices(x.shape[0], fraction, rng)]
