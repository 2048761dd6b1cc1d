"""Synthetic crash-regime order-book generator.

Pipeline: fit a mean-reverting diffusion to a seed mid-price and a
GARCH(1,1) to its one-minute log-returns, amplify both (faster reversion,
higher mean, more reactive and more persistent volatility), re-simulate,
rebuild the order-book feature panel, overlay VAR(1)-correlated noise,
time-warp the training segment, and window the result with next-20-step
realized-volatility targets. A four-gate statistical battery compares the
synthetic returns with the seed.

The seed panel is parametric and built in (the generator is self-contained),
but any (T, d) feature matrix with a mid-price column can be supplied
instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.signal import lfilter

from ._kernels import garch_loglik_grad, garch_simulate, vasicek_path
from .autodiff import ContractViolation

__all__ = [
    "VasicekParams",
    "GarchParams",
    "SyntheticDatasetSpec",
    "WindowedDataset",
    "ValidationReport",
    "NonMeanRevertingError",
    "DegenerateSigmaError",
    "GarchFitError",
    "fit_vasicek_mle",
    "simulate_vasicek",
    "fit_garch11",
    "amplify_and_simulate_garch",
    "fit_var1_cov",
    "add_correlated_noise",
    "time_warp",
    "realized_vol_target",
    "cusum_changepoint",
    "build_seed_panel",
    "validate_synthetic",
    "generate_dslob",
]

SECONDS_PER_YEAR = 31_536_000
RV_STEPS = 20
TARGET_FLOOR = 1e-12
SPLIT_RATIOS = (24891, 9891, 4891)

VASICEK_SPEED_FACTOR = 1.5
VASICEK_MEAN_FACTOR = 1.2
GARCH_ALPHA_FACTOR = 1.2
GARCH_BETA_FACTOR = 1.1
GARCH_BETA_CAP = 0.95


class NonMeanRevertingError(ValueError):
    pass


class DegenerateSigmaError(ValueError):
    """Noiseless series; carries the recovered drift parameters."""

    def __init__(self, params):
        super().__init__("residual variance is zero; sigma is degenerate")
        self.params = params


class GarchFitError(RuntimeError):
    def __init__(self, params, loglik):
        super().__init__(f"GARCH fit did not converge (loglik {loglik:.6g})")
        self.params = params
        self.loglik = loglik


@dataclass
class VasicekParams:
    theta: float  # mean-reversion speed, 1/time
    mu: float  # long-term mean
    sigma: float  # diffusion scale

    def __post_init__(self):
        if self.theta <= 0:
            raise ContractViolation("theta must be positive")
        if self.sigma < 0:
            raise ContractViolation("sigma must be nonnegative")

    def amplified(self):
        return VasicekParams(VASICEK_SPEED_FACTOR * self.theta,
                             VASICEK_MEAN_FACTOR * self.mu, self.sigma)


@dataclass
class GarchParams:
    omega: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.omega < 0 or self.alpha < 0 or self.beta < 0:
            raise ContractViolation("GARCH parameters must be nonnegative")
        if self.alpha + self.beta >= 1:
            raise ContractViolation("fitted GARCH must satisfy alpha + beta < 1")

    def amplified(self):
        """(omega, 1.2 alpha, min(0.95, 1.1 beta)); may be explosive."""
        return (self.omega, GARCH_ALPHA_FACTOR * self.alpha,
                min(GARCH_BETA_CAP, GARCH_BETA_FACTOR * self.beta))


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


def fit_vasicek_mle(series, dt) -> VasicekParams:
    """Exact discrete-time MLE through the AR(1) map P' = a P + b + eps with
    a = exp(-theta dt), b = mu (1 - a), Var(eps) = sigma^2 (1 - a^2) / (2 theta)."""
    p = np.asarray(series, dtype=np.float64)
    if len(p) < 3:
        raise ContractViolation("need at least 3 observations")
    if dt <= 0:
        raise ContractViolation("dt must be positive")
    x, y = p[:-1], p[1:]
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    if not 0 < a < 1:
        raise NonMeanRevertingError(f"AR coefficient {a:.6g} outside (0, 1)")
    theta = -np.log(a) / dt
    mu = b / (1.0 - a)
    resid = y - a * x - b
    var_e = float(np.mean(resid**2))
    if var_e <= 1e-14 * max(1.0, float(np.var(p))):
        raise DegenerateSigmaError(VasicekParams(theta, mu, 0.0))
    sigma = np.sqrt(var_e * 2.0 * theta / (1.0 - a * a))
    return VasicekParams(float(theta), float(mu), float(sigma))


def simulate_vasicek(p: VasicekParams, amplify, P0, n, dt, seed):
    """Euler path of length n+1; amplification scales (theta, mu) by
    (1.5, 1.2)."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    q = p.amplified() if amplify else p
    eps = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed)))).standard_normal(n)
    return vasicek_path(q.theta, q.mu, q.sigma, float(P0), float(dt), eps)


def _garch_project(x):
    w, a, b = x
    w = max(w, 1e-12)
    a = max(a, 0.0)
    b = max(b, 0.0)
    if a + b > 0.999:
        s = 0.999 / (a + b)
        a *= s
        b *= s
    return np.array([w, a, b])


def fit_garch11(returns, max_iter=50000) -> GarchParams:
    """Gaussian quasi-MLE by projected gradient ascent with backtracking.

    Returns are rescaled internally to unit variance so omega is well
    conditioned; sigma0^2 is the sample variance. Converges when an accepted
    step improves the log-likelihood by less than 1e-9.
    """
    r = np.asarray(returns, dtype=np.float64)
    if len(r) < 100:
        raise ContractViolation("need at least 100 returns")
    sv = float(np.var(r))
    if sv <= 0:
        raise ContractViolation("returns are constant")
    scale = np.sqrt(sv)
    rs = r / scale
    x = np.array([1.0 - 0.05 - 0.90, 0.05, 0.90])  # variance-targeted start
    ll, *g = garch_loglik_grad(rs, x[0], x[1], x[2], 1.0)
    step = 1e-4
    for _ in range(max_iter):
        cand = _garch_project(x + step * np.asarray(g))
        ll_new, *g_new = garch_loglik_grad(rs, cand[0], cand[1], cand[2], 1.0)
        if ll_new > ll:
            improved = ll_new - ll
            x, ll, g = cand, ll_new, g_new
            step *= 1.2
            if improved < 1e-9:
                return GarchParams(float(x[0] * sv), float(x[1]), float(x[2]))
        else:
            step *= 0.5
            if step < 1e-18:
                return GarchParams(float(x[0] * sv), float(x[1]), float(x[2]))
    raise GarchFitError(GarchParams(float(x[0] * sv), float(x[1]), float(x[2])), ll)


def garch_loglik(returns, p: GarchParams, sigma0_sq=None):
    r = np.asarray(returns, dtype=np.float64)
    s0 = float(np.var(r)) if sigma0_sq is None else sigma0_sq
    ll, *_ = garch_loglik_grad(r, p.omega, p.alpha, p.beta, s0)
    return ll


def amplify_and_simulate_garch(p: GarchParams, n, seed):
    """Simulate r_t = sigma'_t eps_t under the amplified parameters.

    Returns (returns, sigma_path, explosive) where explosive flags
    alpha' + beta' >= 1 (simulation still proceeds; a warning is issued).
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    omega, a, b = p.amplified()
    explosive = a + b >= 1.0
    if explosive:
        warnings.warn("amplified GARCH is variance-explosive (alpha' + beta' >= 1)")
        s0 = omega
    else:
        s0 = omega / (1.0 - a - b)
    eps = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed)))).standard_normal(n)
    r, sig = garch_simulate(omega, a, b, s0, eps)
    return r, sig, explosive


def fit_var1_cov(features):
    """Residual covariance of a least-squares VAR(1) fit, symmetrized and
    eigenvalue-floored at 1e-12."""
    X = np.asarray(features, dtype=np.float64)
    T, d = X.shape
    if T < 2 * d:
        raise ContractViolation("need at least 2*d_feat rows")
    A = np.concatenate([X[:-1], np.ones((T - 1, 1))], axis=1)
    Y = X[1:]
    B, _, rank, _ = np.linalg.lstsq(A, Y, rcond=None)
    if rank < d + 1:
        warnings.warn("rank-deficient VAR regressors; using ridge fallback")
        G = A.T @ A + 1e-8 * np.eye(d + 1)
        B = np.linalg.solve(G, A.T @ Y)
    resid = Y - A @ B
    S = np.cov(resid, rowvar=False)
    S = np.atleast_2d(0.5 * (S + S.T))
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.maximum(vals, 1e-12)) @ vecs.T


def noise_signal_ratio(features, cov):
    """Mean over features of noise variance / feature variance."""
    fvar = np.asarray(features).var(axis=0)
    ok = fvar > 0
    return float(np.mean(np.diag(np.asarray(cov))[ok] / fvar[ok]))


def add_correlated_noise(features, cov, snr_match, seed):
    """features + eta with eta ~ N(0, s^2 cov) via a PSD factor of cov.

    snr_match may be False (s = 1), True (s = 1; cov is assumed estimated
    from these features, whose noise-to-signal ratio it then reproduces by
    construction), or a target noise-to-signal ratio, in which case s is
    chosen so the per-feature ratio matches it on average.
    """
    X = np.asarray(features, dtype=np.float64)
    S = np.asarray(cov, dtype=np.float64)
    diag = np.diag(S)
    if not np.any(diag > 0):
        return X.copy()
    if snr_match is True or snr_match is False:
        s = 1.0
    else:
        own = noise_signal_ratio(X, S)
        s = np.sqrt(float(snr_match) / own) if own > 0 else 1.0
    vals, vecs = np.linalg.eigh(S)
    F = vecs * np.sqrt(np.maximum(vals, 0.0))
    z = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed)))).standard_normal(X.shape)
    return X + s * (z @ F.T)


def time_warp(series, gp_var, length_scale, seed, n_knots=200):
    """Resample along a smooth random time-change.

    The local rate tau(t) is a squared-exponential GP (mean 1, variance
    gp_var) sampled on a coarse knot grid and interpolated, clipped to
    >= 0.1 so warped time stays strictly increasing. The output has the
    input's length with endpoints fixed.
    """
    if gp_var < 0:
        raise ContractViolation("gp_var must be nonnegative")
    x = np.asarray(series, dtype=np.float64)
    T = x.shape[0]
    if gp_var == 0 or T < 3:
        return x.copy()
    m = min(n_knots, T)
    knots = np.linspace(0.0, T - 1.0, m)
    K = gp_var * np.exp(-0.5 * ((knots[:, None] - knots[None, :]) / length_scale) ** 2)
    K[np.diag_indices(m)] += 1e-10
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    tau_k = 1.0 + np.linalg.cholesky(K) @ rng.standard_normal(m)
    tau = np.maximum(np.interp(np.arange(T), knots, tau_k), 0.1)
    u = np.concatenate([[0.0], np.cumsum(tau[1:])])
    targets = np.linspace(0.0, u[-1], T)
    if x.ndim == 1:
        return np.interp(targets, u, x)
    return np.stack([np.interp(targets, u, x[:, j]) for j in range(x.shape[1])], axis=1)


ANNUALIZER = np.sqrt(SECONDS_PER_YEAR / RV_STEPS)


def realized_vol_target(prices, end_index):
    """log(annualized realized vol over the next 20 one-second returns).

    Needs prices[end_index .. end_index + 20]; raises when the series ends
    too soon (callers drop such windows rather than pad).
    """
    p = np.asarray(prices, dtype=np.float64)
    if end_index + RV_STEPS >= len(p):
        raise ContractViolation("fewer than 21 future prices past the window end")
    seg = p[end_index : end_index + RV_STEPS + 1]
    r = np.diff(np.log(seg))
    rv = np.sqrt(np.sum(r * r)) * ANNUALIZER
    return float(np.log(rv + TARGET_FLOOR))


def cusum_changepoint(returns, drift=None, threshold=None):
    """One-sided CUSUM on squared returns; index of the first alarm or None."""
    x = np.asarray(returns, dtype=np.float64) ** 2
    base = np.mean(x)
    sd = np.std(x)
    if sd == 0:
        return None
    k = 0.5 * sd if drift is None else drift
    h = 5.0 * sd if threshold is None else threshold
    g = 0.0
    for t, v in enumerate(x):
        g = max(0.0, g + v - base - k)
        if g > h:
            return t
    return None


# ---------------------------------------------------------------------------
# Seed panel and generation
# ---------------------------------------------------------------------------

SEED_VASICEK = VasicekParams(theta=0.004, mu=100.0, sigma=0.002)
SEED_GARCH = GarchParams(omega=2.5e-7 * (1 - 0.10 - 0.75), alpha=0.10, beta=0.75)
N_LEVELS = 4
TICK = 0.01
BAR_SECONDS = 60


def _garch_bar_returns_1s(omega, alpha, beta, s0, n_sec, rng):
    """One-second returns whose volatility follows an exact GARCH(1,1)
    recursion on one-minute bars (each second draws sigma_bar / sqrt(60))."""
    n_bars = int(np.ceil(n_sec / BAR_SECONDS))
    eps = rng.standard_normal(n_bars * BAR_SECONDS)
    r = np.empty(n_bars * BAR_SECONDS)
    s = s0
    for b in range(n_bars):
        seg = np.sqrt(s / BAR_SECONDS) * eps[b * BAR_SECONDS : (b + 1) * BAR_SECONDS]
        r[b * BAR_SECONDS : (b + 1) * BAR_SECONDS] = seg
        rb = seg.sum()
        s = omega + alpha * rb * rb + beta * s
    return r[:n_sec]


def _panel_from_mid(mid, ret, rng, dx):
    """Deterministic order-book style panel: mid, returns, spread, four
    price levels with log-normal sizes and derived imbalance/microprice
    channels, padded with AR(1) order-flow factors up to dx columns."""
    T = len(mid)
    absr = np.abs(ret)
    # trailing averages: features at t only see returns up to t
    vol_proxy = lfilter(np.ones(20) / 20, [1.0], absr)
    vol_fast = lfilter(np.ones(5) / 5, [1.0], absr)
    spread = TICK * (1.0 + vol_fast / (np.mean(absr) + 1e-12))
    cols = [mid, ret, vol_proxy, spread]
    for lvl in range(N_LEVELS):
        base = spread / 2.0 + lvl * TICK
        bid = mid - base * (1.0 + 0.05 * np.abs(rng.standard_normal(T)))
        ask = mid + base * (1.0 + 0.05 * np.abs(rng.standard_normal(T)))
        bsz = np.exp(rng.normal(4.0 - 0.3 * lvl, 0.25, T))
        asz = np.exp(rng.normal(4.0 - 0.3 * lvl, 0.25, T))
        imb = (bsz - asz) / (bsz + asz)
        micro = (bid * asz + ask * bsz) / (bsz + asz)
        cols += [bid, ask, bsz, asz, imb, micro, bid * bsz, ask * asz]
    k = len(cols)
    phis = np.linspace(0.55, 0.98, dx - k)
    for phi in phis:
        innov = 0.5 * ret / (np.std(ret) + 1e-12) + rng.standard_normal(T)
        c = np.sqrt(1.0 - phi * phi)
        cols.append(lfilter([c], [1.0, -phi], innov))
    return np.stack(cols, axis=1)


def build_seed_panel(n_steps, seed, dx=85):
    """Built-in parametric seed: mean-reverting mid-price with GARCH-scaled
    one-second innovations plus the derived panel. Returns (features, mid)."""
    ss = np.random.SeedSequence(int(seed))
    k_vas, k_g, k_panel = [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(3)]
    eps = k_vas.standard_normal(n_steps - 1)
    om, al, be = SEED_GARCH.omega, SEED_GARCH.alpha, SEED_GARCH.beta
    g_ret = _garch_bar_returns_1s(om, al, be, om / (1 - al - be), n_steps - 1, k_g)
    mid = np.empty(n_steps)
    mid[0] = SEED_VASICEK.mu
    th, mu, sg = SEED_VASICEK.theta, SEED_VASICEK.mu, SEED_VASICEK.sigma
    for t in range(n_steps - 1):
        mid[t + 1] = mid[t] + th * (mu - mid[t]) + sg * eps[t] + mid[t] * g_ret[t]
    ret = np.concatenate([[0.0], np.diff(np.log(mid))])
    return _panel_from_mid(mid, ret, k_panel, dx), mid


@dataclass
class SyntheticDatasetSpec:
    seed: int = 0
    n_steps: int = 5000
    feature_count: int = 85
    window_len: int = 20
    gp_var: float = 0.1
    gp_length_scale: float = 50.0
    snr_match: bool = True
    seed_len: int = 36000  # internal seed panel length (600 one-minute bars)


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (N, L, dx)
    targets: np.ndarray  # (N,)
    split: np.ndarray  # (N,) int8: 0 train, 1 val, 2 test

    def subset(self, tag):
        i = {"train": 0, "val": 1, "test": 2}[tag]
        m = self.split == i
        return self.windows[m], self.targets[m]


@dataclass
class ValidationReport:
    ks_p: float
    acf_max_dev: float
    acf_band: float
    corr_mean_absdiff: float
    tail_rel_err: float
    passed: bool


def _acf(x, max_lag):
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        return np.zeros(max_lag)
    return np.array([float(x[l:] @ x[:-l]) / denom for l in range(1, max_lag + 1)])


def validate_synthetic(synth_returns, seed_returns, synth_features=None,
                       seed_features=None, max_lag=50) -> ValidationReport:
    """Four gates: KS on returns (p > 0.05), squared-return ACF within the
    i.i.d. 95% band out to lag 50, mean |corr difference| < 0.03 across
    feature pairs, and the 99.5% negative-tail quantile within 5%."""
    a = np.asarray(synth_returns, dtype=np.float64)
    b = np.asarray(seed_returns, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ContractViolation("both return series must be nonempty")
    ks_p = float(stats.ks_2samp(a, b).pvalue)
    band = 2.0 / np.sqrt(min(len(a), len(b)))
    acf_dev = float(np.max(np.abs(_acf(a**2, max_lag) - _acf(b**2, max_lag))))
    if synth_features is not None and seed_features is not None:
        ca = np.corrcoef(np.asarray(synth_features), rowvar=False)
        cb = np.corrcoef(np.asarray(seed_features), rowvar=False)
        iu = np.triu_indices_from(ca, k=1)
        d = np.abs(ca[iu] - cb[iu])
        corr_dev = float(np.nanmean(d))
    else:
        corr_dev = 0.0
    na, nb = a[a < 0], b[b < 0]
    if len(na) and len(nb):
        qa = float(np.quantile(-na, 0.995))
        qb = float(np.quantile(-nb, 0.995))
        tail = abs(qa - qb) / qb if qb > 0 else 0.0
    else:
        tail = 0.0
    passed = ks_p > 0.05 and acf_dev < band and corr_dev < 0.03 and tail < 0.05
    return ValidationReport(ks_p, acf_dev, band, corr_dev, tail, passed)


def split_counts(n_windows):
    """Chronological train/val/test counts in the reference proportions."""
    total = sum(SPLIT_RATIOS)
    n_train = int(round(n_windows * SPLIT_RATIOS[0] / total))
    n_val = int(round(n_windows * SPLIT_RATIOS[1] / total))
    return n_train, n_val, n_windows - n_train - n_val


def generate_dslob(spec: SyntheticDatasetSpec, seed_panel=None, seed_mid=None):
    """Run the full pipeline; returns (WindowedDataset, ValidationReport,
    fitted_params dict)."""
    if seed_panel is None:
        seed_panel, seed_mid = build_seed_panel(spec.seed_len, spec.seed, spec.feature_count)
    else:
        seed_panel = np.asarray(seed_panel, dtype=np.float64)
        seed_mid = seed_panel[:, 0] if seed_mid is None else np.asarray(seed_mid)
    seed_ret = np.diff(np.log(seed_mid))

    vas = fit_vasicek_mle(seed_mid, dt=1.0)
    n_bars = len(seed_mid) // 60
    bar_prices = seed_mid[: n_bars * 60 : 60]
    garch = fit_garch11(np.diff(np.log(bar_prices)))

    ss = np.random.SeedSequence((int(spec.seed), 1))
    k_g, k_noise, k_warp, k_panel = [s.generate_state(1)[0] for s in ss.spawn(4)]
    T = spec.n_steps
    om_a, al_a, be_a = garch.amplified()
    if al_a + be_a >= 1.0:
        warnings.warn("amplified GARCH is variance-explosive (alpha' + beta' >= 1)")
        s0_a = om_a
    else:
        s0_a = om_a / (1.0 - al_a - be_a)
    g_ret = _garch_bar_returns_1s(
        om_a, al_a, be_a, s0_a, T - 1,
        np.random.Generator(np.random.Philox(np.random.SeedSequence(k_g))))
    va = vas.amplified()
    eps = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(spec.seed), 2)))).standard_normal(T - 1)
    mid = np.empty(T)
    mid[0] = va.mu
    for t in range(T - 1):
        mid[t + 1] = mid[t] + va.theta * (va.mu - mid[t]) + va.sigma * eps[t] + mid[t] * g_ret[t]
    L = spec.window_len
    n_windows = T - L + 1 - (RV_STEPS + 1)
    n_train, n_val, n_test = split_counts(n_windows)

    # warp only the steps feeding purely-train windows, so later splits are
    # untouched and chronology is preserved; features derive from the warped
    # price so every channel sees the same local clock as the target
    warp_end = n_train + L - 1
    mid_w = mid.copy()
    mid_w[:warp_end] = time_warp(mid[:warp_end, None], spec.gp_var,
                                 spec.gp_length_scale, k_warp)[:, 0]
    ret = np.concatenate([[0.0], np.diff(np.log(mid_w))])
    panel = _panel_from_mid(mid_w, ret, np.random.Generator(np.random.Philox(
        np.random.SeedSequence(k_panel))), spec.feature_count)

    cov = fit_var1_cov(seed_panel)
    target_ratio = noise_signal_ratio(seed_panel, cov) if spec.snr_match else False
    panel = add_correlated_noise(panel, cov, target_ratio, k_noise)
    panel[:, 0] = mid_w  # keep the target price channel noise-free

    windows = np.empty((n_windows, L, spec.feature_count))
    targets = np.empty(n_windows)
    for i in range(n_windows):
        windows[i] = panel[i : i + L]
        targets[i] = realized_vol_target(mid_w, i + L - 1)
    split = np.concatenate([
        np.zeros(n_train, dtype=np.int8),
        np.ones(n_val, dtype=np.int8),
        np.full(n_test, 2, dtype=np.int8),
    ])
    ds = WindowedDataset(windows=windows, targets=targets, split=split)

    report = validate_synthetic(ret[1:], seed_ret, panel, seed_panel)
    if not report.passed:
        warnings.warn(
            f"synthetic battery soft-fail: ks_p={report.ks_p:.4f} "
            f"acf_dev={report.acf_max_dev:.4f}/{report.acf_band:.4f} "
            f"corr_dev={report.corr_mean_absdiff:.4f} tail={report.tail_rel_err:.4f}")
    fitted = {"vasicek": vas, "garch": garch}
    return ds, report, fitted
