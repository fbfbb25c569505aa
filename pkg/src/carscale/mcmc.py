"""Posterior inference for Poisson disease-mapping models.

Counts y_i ~ Poisson(E_i r_i) with log r = alpha + beta z + x, where x is an
intrinsic CAR random effect (scaled or unscaled) or the reparametrized
mixture of an iid and a scaled intrinsic component. Sampling is a
Metropolis-within-Gibbs scheme:

* the field precision kappa has a conjugate gamma full conditional whose
  shape uses the kappa exponent of the normalizing constant;
* fixed effects move by adaptive scalar random walks (covariates are
  centered internally and the intercept mapped back on output);
* field updates preserve the per-component sum-to-zero constraints exactly:
  component proposals are random-walk increments projected to mean zero,
  singletons move by scalar random walks.

Proposal scales adapt by Robbins-Monro tuning toward standard acceptance
targets during burn-in and are frozen afterwards. Identical data, config and
seed reproduce results bit for bit.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .graphs import ComponentPartition, Graph, connected_components
from .precision import structure_matrix
from .priors import Bym2Spec, PcPriorSpec, PhiPrior, pc_prior_precision_logpdf
from .scaling import ScaledCarModel, scale_model

#: prior precision of intercept and covariate effects (effectively flat)
FIXED_EFFECT_PRECISION = 1e-6

#: iteration cap applied when an improper posterior is detected
IMPROPER_ITERATION_CAP = 20_000

_QUANTILES = (0.025, 0.5, 0.975)


class McmcError(RuntimeError):
    """Sampling failed to behave as configured."""


class ImproperPosteriorWarning(UserWarning):
    """The requested model has an improper posterior (flat singleton, zero count)."""


# ---------------------------------------------------------------------------
# data and configuration


@dataclass(frozen=True)
class DiseaseMappingData:
    """Observed and expected counts, with optional covariates (n x p).

    `gaussian_obs` is a real-valued observation vector used only by the
    Gaussian validation likelihood (the counts are ignored in that mode).
    """

    y: np.ndarray
    E: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    gaussian_obs: np.ndarray | None = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=np.int64)
        E = np.asarray(self.E, dtype=np.float64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "E", E)
        if y.shape != E.shape or y.ndim != 1:
            raise ValueError("y and E must be vectors of equal length")
        if np.any(y < 0):
            raise ValueError("counts must be non-negative")
        if np.any(E <= 0):
            raise ValueError("expected counts must be positive")
        if self.covariates is not None:
            Z = np.asarray(self.covariates, dtype=np.float64)
            if Z.ndim == 1:
                Z = Z[:, None]
            object.__setattr__(self, "covariates", Z)
            if Z.shape[0] != y.shape[0]:
                raise ValueError("covariate rows must match data length")
            if len(self.covariate_names) != Z.shape[1]:
                names = tuple(f"z{j + 1}" for j in range(Z.shape[1]))
                object.__setattr__(self, "covariate_names", names)
        if self.gaussian_obs is not None:
            obs = np.asarray(self.gaussian_obs, dtype=np.float64)
            object.__setattr__(self, "gaussian_obs", obs)
            if obs.shape != y.shape:
                raise ValueError("gaussian_obs must match data length")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])


def read_mapping_csv(path: str | Path, covariates=()) -> DiseaseMappingData:
    """Read a disease-mapping CSV with mandatory Counts, E and Region columns.

    Rows are reordered by the 1-based Region index. `covariates` selects
    additional columns by name; entries may be plain names or
    ``{"name": ..., "scale": ...}`` mappings applying a multiplicative
    rescaling at load time.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty data file")
    for col in ("Counts", "E", "Region"):
        if col not in rows[0]:
            raise ValueError(f"{path}: missing mandatory column {col!r}")

    n = len(rows)
    region = np.array([int(r["Region"]) for r in rows])
    if sorted(region) != list(range(1, n + 1)):
        raise ValueError(f"{path}: Region must be a permutation of 1..{n}")
    order = np.argsort(region)

    y = np.array([int(rows[i]["Counts"]) for i in order])
    E = np.array([float(rows[i]["E"]) for i in order])

    names: list[str] = []
    cols: list[np.ndarray] = []
    for spec in covariates:
        if isinstance(spec, str):
            name, scale = spec, 1.0
        else:
            name, scale = spec["name"], float(spec.get("scale", 1.0))
        if name not in rows[0]:
            raise ValueError(f"{path}: covariate column {name!r} not found")
        cols.append(scale * np.array([float(rows[i][name]) for i in order]))
        names.append(name)
    Z = np.column_stack(cols) if cols else None
    return DiseaseMappingData(y=y, E=E, covariates=Z, covariate_names=tuple(names))


@dataclass(frozen=True)
class FitConfig:
    """Sampler configuration; validated on construction."""

    model_kind: str = "besag_scaled"
    iterations: int = 200_000
    burn_in: int = 50_000
    thin: int = 10
    seed: int = 0
    chains: int = 1
    priors: dict = field(default_factory=dict)
    per_component_intercepts: bool = False
    adapt_window: int = 50
    target_accept_scalar: float = 0.44
    target_accept_block: float = 0.234
    likelihood: str = "poisson"
    gaussian_sd: float = 1.0
    fixed_kappa: float | None = None
    fixed_phi: float | None = None
    save_samples: bool = False
    report_risks: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.model_kind not in ("besag_scaled", "besag_unscaled", "bym2"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.likelihood not in ("poisson", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.iterations <= 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("iterations, burn_in, thin must be positive")
        if self.burn_in >= self.iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) must be smaller than iterations ({self.iterations})"
            )
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.likelihood == "gaussian" and self.fixed_kappa is None:
            raise ValueError("gaussian validation mode requires fixed_kappa")
        if self.report_risks is not None:
            object.__setattr__(self, "report_risks", tuple(int(i) for i in self.report_risks))


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    q2_5: float
    median: float
    q97_5: float


@dataclass(frozen=True)
class FitResult:
    """Posterior summaries plus DIC and sampler diagnostics."""

    summaries: dict[str, ParamSummary]
    dic: float
    p_d: float
    acceptance_rates: dict[str, float]
    diagnostics: dict
    samples: dict[str, np.ndarray] | None = None

    def write_summary_csv(self, path: str | Path) -> None:
        """One row per parameter in Table order: mean, sd, 2.5%, median, 97.5%."""
        lines = ["parameter,mean,sd,q2.5,median,q97.5"]
        for name, s in self.summaries.items():
            lines.append(
                f"{name},{s.mean:.17g},{s.sd:.17g},{s.q2_5:.17g},{s.median:.17g},{s.q97_5:.17g}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# reusable pieces


def dic(deviance_draws: np.ndarray, deviance_at_posterior_mean: float) -> tuple[float, float]:
    """Deviance information criterion: (mean deviance + p_D, p_D)."""
    d = np.asarray(deviance_draws, dtype=np.float64)
    if d.size == 0:
        raise ValueError("deviance draws must be non-empty")
    d_bar = float(d.mean())
    p_d = d_bar - float(deviance_at_posterior_mean)
    return d_bar + p_d, p_d


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    """-2 log-likelihood of Poisson counts with means mu (log y! via log-gamma)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(-2.0 * np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))


def kappa_gibbs(rng: np.random.Generator, prior_shape: float, prior_rate: float,
                exponent: float, quad: float, size=None):
    """Draw from the conjugate full conditional of the field precision.

    Gamma with shape ``prior_shape + exponent`` and rate
    ``prior_rate + quad/2`` where quad is the field's current quadratic form.
    """
    shape = prior_shape + float(exponent)
    rate = prior_rate + 0.5 * quad
    return rng.gamma(shape, 1.0 / rate, size=size)


def sample_prior(model: ScaledCarModel, kappa: float, rng=None, size: int | None = None):
    """Draw from the constrained scaled field at precision kappa.

    Components of size > 1 are sampled in the eigenbasis of their scaled
    block with variance 1/(kappa * eigenvalue) on the non-null directions
    and zero weight on the null direction, which enforces the sum-to-zero
    constraint exactly; singletons are independent N(0, 1/kappa).
    Returns shape (n,) when size is None, else (size, n).
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    rng = np.random.default_rng(rng)
    part = model.partition
    m = 1 if size is None else int(size)
    out = np.zeros((m, part.n))
    dense = model.scaled_R.to_dense()
    for k in range(part.n_components):
        idx = part.members[k]
        if idx.size == 1:
            out[:, idx[0]] = rng.standard_normal(m) / math.sqrt(kappa)
            continue
        lam, vec = np.linalg.eigh(dense[np.ix_(idx, idx)])
        tol = idx.size * lam.max() * 1e-12
        keep = lam > tol
        coeff = rng.standard_normal((m, int(keep.sum()))) / np.sqrt(kappa * lam[keep])
        out[:, idx] = coeff @ vec[:, keep].T
    return out[0] if size is None else out


class _AdaptiveScale:
    """Robbins-Monro tuning of one proposal scale toward a target rate."""

    def __init__(self, initial: float, target: float, window: int):
        self.log_s = math.log(initial)
        self.target = target
        self.window = window
        self._acc = 0.0
        self._count = 0
        self._batches = 0
        self.frozen = False
        self.post_acc = 0.0
        self.post_count = 0

    @property
    def value(self) -> float:
        return math.exp(self.log_s)

    def step(self, accepted: float) -> None:
        if self.frozen:
            self.post_acc += accepted
            self.post_count += 1
            return
        self._acc += accepted
        self._count += 1
        if self._count >= self.window:
            self._batches += 1
            rate = self._acc / self._count
            # large early steps cover badly-scaled starts; decay keeps the
            # adaptation vanishing
            delta = min(0.5, self._batches**-0.6)
            self.log_s += delta if rate > self.target else -delta
            self._acc = 0.0
            self._count = 0

    def freeze(self) -> None:
        self.frozen = True

    @property
    def post_rate(self) -> float:
        return self.post_acc / self.post_count if self.post_count else float("nan")


def _validate_report_risks(cfg: FitConfig, n: int) -> None:
    if cfg.report_risks is None:
        return
    for i in cfg.report_risks:
        if not 1 <= i <= n:
            raise ValueError(f"report_risks node {i} out of range 1..{n}")


def _check_acceptance(rates: dict[str, float], exempt: set[str]) -> None:
    for name, rate in rates.items():
        if name in exempt or math.isnan(rate):
            continue
        if not 0.05 <= rate <= 0.95:
            raise McmcError(
                f"non-convergent adaptation: block {name!r} acceptance {rate:.3f} "
                "outside [0.05, 0.95] after the adaptation window"
            )


def _summaries_from_draws(draws: dict[str, np.ndarray]) -> dict[str, ParamSummary]:
    out: dict[str, ParamSummary] = {}
    for name, d in draws.items():
        q = np.quantile(d, _QUANTILES)
        out[name] = ParamSummary(
            mean=float(d.mean()),
            sd=float(d.std(ddof=1)) if d.size > 1 else 0.0,
            q2_5=float(q[0]),
            median=float(q[1]),
            q97_5=float(q[2]),
        )
    return out


# ---------------------------------------------------------------------------
# prior parsing


def _gamma_prior(priors: dict, key: str, default=(1.0, 5e-5)) -> tuple[float, float]:
    spec = priors.get(key)
    if spec is None:
        return default
    if spec.get("prior") != "gamma":
        raise ValueError(f"prior for {key!r} must be gamma, got {spec.get('prior')!r}")
    return float(spec["shape"]), float(spec["rate"])


def _pc_prior(priors: dict, key: str, kind: str, default: tuple[float, float] | None) -> PcPriorSpec:
    spec = priors.get(key)
    if spec is None:
        if default is None:
            raise ValueError(f"model requires a {kind!r} prior spec under priors[{key!r}]")
        return PcPriorSpec(u=default[0], tail_prob=default[1])
    if spec.get("prior") != kind:
        raise ValueError(f"prior for {key!r} must be {kind!r}, got {spec.get('prior')!r}")
    return PcPriorSpec(u=float(spec["u"]), tail_prob=float(spec["alpha"]))


# ---------------------------------------------------------------------------
# field structure shared by the samplers


@dataclass
class _FieldStructure:
    """Per-component blocks of the (scaled or raw) structure matrix."""

    components: list[np.ndarray]
    blocks: list[sp.csr_matrix]
    singletons: np.ndarray
    singleton_prec: np.ndarray
    exponent: float

    @classmethod
    def from_model_kind(cls, g: Graph, partition: ComponentPartition, model_kind: str,
                        scaled: ScaledCarModel | None) -> "_FieldStructure":
        if model_kind == "besag_unscaled":
            matrix = structure_matrix(g)
            # flat singleton priors carry no power of kappa
            exponent = sum(
                Fraction(int(s) - 1, 2) for s in partition.sizes if int(s) > 1
            )
            singleton_prec = np.zeros(len(partition.singleton_ids))
        else:
            assert scaled is not None
            matrix = scaled.scaled_R
            exponent = scaled.norm_info.kappa_exponent
            singleton_prec = np.ones(len(partition.singleton_ids))
        full = matrix.to_csr()
        comps = [partition.members[k] for k in partition.non_singleton_components]
        blocks = [full[idx, :][:, idx].tocsr() for idx in comps]
        return cls(
            components=comps,
            blocks=blocks,
            singletons=np.asarray(partition.singleton_ids, dtype=np.int64),
            singleton_prec=singleton_prec,
            exponent=float(exponent),
        )


def _project_mean_zero(x: np.ndarray, components: list[np.ndarray]) -> np.ndarray:
    out = x.copy()
    for idx in components:
        out[idx] -= out[idx].mean()
    return out


# ---------------------------------------------------------------------------
# fixed-effect bookkeeping (intercept(s) + centered covariates)


@dataclass
class _FixedEffects:
    F: np.ndarray                 # (n, q) design, covariate columns centered
    names: list[str]
    n_intercepts: int
    zbar: np.ndarray              # (p,) centering offsets of covariate columns
    col_idx: list[np.ndarray]     # nonzero rows per column
    col_val: list[np.ndarray]

    @classmethod
    def build(cls, data: DiseaseMappingData, partition: ComponentPartition,
              per_component_intercepts: bool) -> "_FixedEffects":
        n = data.n
        cols: list[np.ndarray] = []
        names: list[str] = []
        if per_component_intercepts:
            for k in partition.non_singleton_components:
                ind = np.zeros(n)
                ind[partition.members[k]] = 1.0
                cols.append(ind)
                names.append(f"alpha[{k + 1}]")
        else:
            cols.append(np.ones(n))
            names.append("alpha")
        n_int = len(cols)
        if data.covariates is not None:
            zbar = data.covariates.mean(axis=0)
            for j, name in enumerate(data.covariate_names):
                cols.append(data.covariates[:, j] - zbar[j])
                names.append(f"beta[{name}]")
        else:
            zbar = np.zeros(0)
        F = np.column_stack(cols)
        col_idx = [np.flatnonzero(c != 0.0) for c in cols]
        col_val = [c[i] for c, i in zip(cols, col_idx)]
        return cls(F=F, names=names, n_intercepts=n_int, zbar=zbar,
                   col_idx=col_idx, col_val=col_val)

    def original(self, theta: np.ndarray) -> np.ndarray:
        """Map centered-parameterization coefficients back to original scale."""
        orig = theta.copy()
        if self.zbar.size:
            shift = float(theta[self.n_intercepts:] @ self.zbar)
            orig[: self.n_intercepts] -= shift
        return orig

    def log_prior(self, theta: np.ndarray) -> float:
        orig = self.original(theta)
        return -0.5 * FIXED_EFFECT_PRECISION * float(orig @ orig)


# ---------------------------------------------------------------------------
# Besag sampler


def _besag_chain(data: DiseaseMappingData, struct: _FieldStructure,
                 fixed: _FixedEffects | None, prior_shape: float, prior_rate: float,
                 cfg: FitConfig, iterations: int, burn_in: int,
                 rng: np.random.Generator) -> dict:
    n = data.n
    gaussian = cfg.likelihood == "gaussian"
    if gaussian:
        if data.gaussian_obs is None:
            raise ValueError("gaussian validation mode requires data.gaussian_obs")
        y = data.gaussian_obs
    else:
        y = data.y.astype(np.float64)
    logE = np.log(data.E)
    lgamma_const = float(np.sum(gammaln(data.y + 1.0)))

    comps = struct.components
    blocks = struct.blocks
    singles = struct.singletons
    s_prec = struct.singleton_prec

    # initial state: residual log-rates projected into the constraint space
    if fixed is not None:
        theta = np.zeros(fixed.F.shape[1])
        theta[: fixed.n_intercepts] = math.log(max(y.sum(), 0.5) / data.E.sum())
        base = fixed.F @ theta
        x = np.log((y + 0.5) / (data.E * np.exp(base)))
    else:
        theta = np.zeros(0)
        base = np.zeros(n)
        x = np.zeros(n)
    x = _project_mean_zero(x, comps)
    if gaussian:
        x[:] = 0.0

    kappa = cfg.fixed_kappa
    eta = np.zeros(n) if gaussian else logE + base + x
    mu = np.zeros(n) if gaussian else np.exp(eta)
    inv_var = 1.0 / cfg.gaussian_sd**2

    rx = [blk @ x[idx] for blk, idx in zip(blocks, comps)]
    quads = [float(x[idx] @ r) for idx, r in zip(comps, rx)]

    def singleton_quad() -> float:
        return float(np.sum(s_prec * x[singles] ** 2)) if singles.size else 0.0

    if kappa is None:
        kappa = (prior_shape + struct.exponent) / (
            prior_rate + 0.5 * (sum(quads) + singleton_quad())
        )

    # preconditioner equalizing per-node posterior curvature scales
    w = np.ones(n) if gaussian else 1.0 / np.sqrt(y + 1.0)

    scales: dict[str, _AdaptiveScale] = {}
    for c, idx in enumerate(comps):
        scales[f"x_comp{c + 1}"] = _AdaptiveScale(
            2.38 / math.sqrt(idx.size), cfg.target_accept_block, cfg.adapt_window
        )
    if singles.size:
        scales["x_singletons"] = _AdaptiveScale(0.5, cfg.target_accept_scalar, cfg.adapt_window)
    if fixed is not None:
        for name in fixed.names:
            scales[name] = _AdaptiveScale(0.1, cfg.target_accept_scalar, cfg.adapt_window)

    keep = (iterations - burn_in + cfg.thin - 1) // cfg.thin
    rec_kappa = np.empty(keep)
    rec_theta = np.empty((keep, theta.size))
    rec_r = np.empty((keep, n)) if not gaussian else None
    rec_x = np.empty((keep, n)) if gaussian or cfg.save_samples else None
    rec_dev = np.empty(keep)
    x_sum = np.zeros(n)
    eta_sum = np.zeros(n)
    kept = 0

    def loglik_delta(idx: np.ndarray, delta: np.ndarray) -> float:
        if gaussian:
            xi = x[idx]
            return float(
                -0.5 * inv_var * np.sum((xi + delta - y[idx]) ** 2 - (xi - y[idx]) ** 2)
            )
        return float(y[idx] @ delta + mu[idx] @ (1.0 - np.exp(delta)))

    for it in range(iterations):
        if it == burn_in:
            for s in scales.values():
                s.freeze()

        # component blocks: projected random-walk moves
        for c, idx in enumerate(comps):
            tune = scales[f"x_comp{c + 1}"]
            delta = tune.value * w[idx] * rng.standard_normal(idx.size)
            delta -= delta.mean()
            bdelta = blocks[c] @ delta
            dquad = 2.0 * float(delta @ rx[c]) + float(delta @ bdelta)
            logr = loglik_delta(idx, delta) - 0.5 * kappa * dquad
            if math.log(rng.random()) < logr:
                x[idx] += delta
                if not gaussian:
                    eta[idx] += delta
                    mu[idx] *= np.exp(delta)
                rx[c] += bdelta
                quads[c] += dquad
                tune.step(1.0)
            else:
                tune.step(0.0)

        # singleton scalar moves (vectorized, independent accept/reject)
        if singles.size:
            tune = scales["x_singletons"]
            delta = tune.value * rng.standard_normal(singles.size)
            xs = x[singles]
            if gaussian:
                dll = -0.5 * inv_var * ((xs + delta - y[singles]) ** 2 - (xs - y[singles]) ** 2)
            else:
                dll = y[singles] * delta + mu[singles] * (1.0 - np.exp(delta))
            dprior = -0.5 * kappa * s_prec * ((xs + delta) ** 2 - xs**2)
            acc = np.log(rng.random(singles.size)) < dll + dprior
            if np.any(acc):
                moved = singles[acc]
                x[moved] += delta[acc]
                if not gaussian:
                    eta[moved] += delta[acc]
                    mu[moved] *= np.exp(delta[acc])
            tune.step(float(acc.mean()))

        # fixed effects: adaptive scalar random walks
        if fixed is not None:
            for j, name in enumerate(fixed.names):
                tune = scales[name]
                delta = tune.value * rng.standard_normal()
                idx, val = fixed.col_idx[j], fixed.col_val[j]
                de = delta * val
                dll = float(y[idx] @ de + mu[idx] @ (1.0 - np.exp(de)))
                theta_new = theta.copy()
                theta_new[j] += delta
                dpr = fixed.log_prior(theta_new) - fixed.log_prior(theta)
                if math.log(rng.random()) < dll + dpr:
                    theta = theta_new
                    eta[idx] += de
                    mu[idx] *= np.exp(de)
                    tune.step(1.0)
                else:
                    tune.step(0.0)

        # precision: conjugate Gibbs draw
        if cfg.fixed_kappa is None:
            # refresh cached block products periodically to kill fp drift
            if it % 1000 == 999:
                rx = [blk @ x[idx] for blk, idx in zip(blocks, comps)]
                quads = [float(x[idx] @ r) for idx, r in zip(comps, rx)]
            quad = sum(quads) + singleton_quad()
            kappa = float(kappa_gibbs(rng, prior_shape, prior_rate, struct.exponent, quad))

        if it >= burn_in and (it - burn_in) % cfg.thin == 0:
            rec_kappa[kept] = kappa
            if theta.size:
                rec_theta[kept] = fixed.original(theta)
            if rec_r is not None:
                rec_r[kept] = mu / data.E
            if rec_x is not None:
                rec_x[kept] = x
            if not gaussian:
                rec_dev[kept] = -2.0 * (float(y @ eta - mu.sum()) - lgamma_const)
                eta_sum += eta
            x_sum += x
            kept += 1

    rates = {name: s.post_rate for name, s in scales.items()}
    return {
        "kappa": rec_kappa[:kept],
        "theta": rec_theta[:kept],
        "r": rec_r[:kept] if rec_r is not None else None,
        "x": rec_x[:kept] if rec_x is not None else None,
        "deviance": rec_dev[:kept],
        "x_mean": x_sum / max(kept, 1),
        "eta_mean": eta_sum / max(kept, 1),
        "rates": rates,
        "kept": kept,
    }


def fit_besag(data: DiseaseMappingData, g: Graph, cfg: FitConfig) -> FitResult:
    """Fit the Poisson model with a scaled or unscaled intrinsic CAR effect.

    Both kinds use one sum-to-zero constraint per component of size > 1 (so
    their fits are directly comparable); the scaled kind applies the
    per-component constants and a unit-precision singleton replacement,
    while the unscaled kind keeps the raw structure matrix, leaving
    singletons with a flat prior.
    """
    if cfg.model_kind not in ("besag_scaled", "besag_unscaled"):
        raise ValueError(f"fit_besag cannot fit model_kind {cfg.model_kind!r}")
    if data.n != g.n:
        raise ValueError(f"data length {data.n} does not match graph size {g.n}")
    _validate_report_risks(cfg, data.n)

    partition = connected_components(g)
    scaled = scale_model(g) if cfg.model_kind == "besag_scaled" else None
    struct = _FieldStructure.from_model_kind(g, partition, cfg.model_kind, scaled)
    prior_shape, prior_rate = _gamma_prior(cfg.priors, "kappa")

    iterations, burn_in, capped = cfg.iterations, cfg.burn_in, None
    if cfg.model_kind == "besag_unscaled" and struct.singletons.size:
        zero_singles = struct.singletons[data.y[struct.singletons] == 0]
        if zero_singles.size:
            nodes = ", ".join(str(i + 1) for i in zero_singles)
            warnings.warn(
                f"unscaled intrinsic model leaves singleton node(s) {nodes} with a "
                "flat prior and a zero count: the posterior for their risk is "
                "improper (infinite mass as the risk tends to 0) and the chain "
                "cannot converge; iterations capped at "
                f"{IMPROPER_ITERATION_CAP}. Use the scaled model instead.",
                ImproperPosteriorWarning,
                stacklevel=2,
            )
            capped = min(iterations, IMPROPER_ITERATION_CAP)
            iterations = capped
            burn_in = min(burn_in, iterations // 2)

    gaussian = cfg.likelihood == "gaussian"
    fixed = None if gaussian else _FixedEffects.build(data, partition, cfg.per_component_intercepts)

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    # over/underflow yield -inf or nan log-ratios that reject safely; they
    # occur by design when an improper posterior drifts off to -inf
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        chains = [
            _besag_chain(data, struct, fixed, prior_shape, prior_rate, cfg,
                         iterations, burn_in, np.random.Generator(np.random.PCG64(s)))
            for s in seeds
        ]

    return _assemble_result(
        data, cfg, chains, fixed,
        hyper_names=() if cfg.fixed_kappa is not None else ("kappa",),
        hyper_key="kappa",
        capped=capped,
        improper_singletons=bool(capped),
    )


# ---------------------------------------------------------------------------
# BYM2 sampler


def _bym2_chain(data: DiseaseMappingData, struct: _FieldStructure,
                fixed: _FixedEffects, prec_spec: PcPriorSpec, phi_prior: PhiPrior | None,
                cfg: FitConfig, rng: np.random.Generator) -> dict:
    n = data.n
    y = data.y.astype(np.float64)
    logE = np.log(data.E)
    lgamma_const = float(np.sum(gammaln(data.y + 1.0)))

    comps = struct.components
    blocks = struct.blocks
    singles = struct.singletons

    theta = np.zeros(fixed.F.shape[1])
    theta[: fixed.n_intercepts] = math.log(max(y.sum(), 0.5) / data.E.sum())
    base = fixed.F @ theta
    resid = _project_mean_zero(np.log((y + 0.5) / (data.E * np.exp(base))), comps)
    tau = 1.0 / max(float(np.var(resid)), 1e-2)
    phi = cfg.fixed_phi if cfg.fixed_phi is not None else 0.5

    v = np.zeros(n)
    u = np.zeros(n)
    s_v = math.sqrt(max(1.0 - phi, 0.0) / tau)
    s_u = math.sqrt(phi / tau)
    x = s_v * v + s_u * u
    eta = logE + base + x
    mu = np.exp(eta)

    ru = [blk @ u[idx] for blk, idx in zip(blocks, comps)]

    w = 1.0 / np.sqrt(y + 1.0)

    scales: dict[str, _AdaptiveScale] = {}
    for c, idx in enumerate(comps):
        scales[f"u_comp{c + 1}"] = _AdaptiveScale(
            2.38 / math.sqrt(idx.size), cfg.target_accept_block, cfg.adapt_window
        )
    if singles.size:
        scales["u_singletons"] = _AdaptiveScale(0.5, cfg.target_accept_scalar, cfg.adapt_window)
    scales["v_sites"] = _AdaptiveScale(0.5, cfg.target_accept_scalar, cfg.adapt_window)
    for name in fixed.names:
        scales[name] = _AdaptiveScale(0.1, cfg.target_accept_scalar, cfg.adapt_window)
    scales["log_tau"] = _AdaptiveScale(0.3, cfg.target_accept_scalar, cfg.adapt_window)
    if cfg.fixed_phi is None:
        scales["logit_phi"] = _AdaptiveScale(0.5, cfg.target_accept_scalar, cfg.adapt_window)

    keep = (cfg.iterations - cfg.burn_in + cfg.thin - 1) // cfg.thin
    rec_tau = np.empty(keep)
    rec_phi = np.empty(keep)
    rec_theta = np.empty((keep, theta.size))
    rec_r = np.empty((keep, n))
    rec_x = np.empty((keep, n)) if cfg.save_samples else None
    rec_dev = np.empty(keep)
    eta_sum = np.zeros(n)
    kept = 0

    def dll_at(idx: np.ndarray, dx: np.ndarray) -> float:
        return float(y[idx] @ dx + mu[idx] @ (1.0 - np.exp(dx)))

    def apply_field(idx: np.ndarray, dx: np.ndarray) -> None:
        x[idx] += dx
        eta[idx] += dx
        mu[idx] *= np.exp(dx)

    for it in range(cfg.iterations):
        if it == cfg.burn_in:
            for s in scales.values():
                s.freeze()

        # structured component blocks (sum-to-zero preserved by projection)
        for c, idx in enumerate(comps):
            tune = scales[f"u_comp{c + 1}"]
            delta = tune.value * w[idx] * rng.standard_normal(idx.size)
            delta -= delta.mean()
            bdelta = blocks[c] @ delta
            dprior = -0.5 * (2.0 * float(delta @ ru[c]) + float(delta @ bdelta))
            logr = dll_at(idx, s_u * delta) + dprior
            if math.log(rng.random()) < logr:
                u[idx] += delta
                ru[c] += bdelta
                apply_field(idx, s_u * delta)
                tune.step(1.0)
            else:
                tune.step(0.0)

        # structured singletons: standard normal prior
        if singles.size:
            tune = scales["u_singletons"]
            delta = tune.value * rng.standard_normal(singles.size)
            us = u[singles]
            dll = y[singles] * (s_u * delta) + mu[singles] * (1.0 - np.exp(s_u * delta))
            dprior = -0.5 * ((us + delta) ** 2 - us**2)
            acc = np.log(rng.random(singles.size)) < dll + dprior
            if np.any(acc):
                moved = singles[acc]
                u[moved] += delta[acc]
                apply_field(moved, s_u * delta[acc])
            tune.step(float(acc.mean()))

        # unstructured component: site-wise scalar moves, jointly vectorized
        tune = scales["v_sites"]
        delta = tune.value * rng.standard_normal(n)
        dx = s_v * delta
        dll = y * dx + mu * (1.0 - np.exp(dx))
        dprior = -0.5 * ((v + delta) ** 2 - v**2)
        acc = np.log(rng.random(n)) < dll + dprior
        if np.any(acc):
            v[acc] += delta[acc]
            apply_field(np.flatnonzero(acc), dx[acc])
        tune.step(float(acc.mean()))

        # fixed effects
        for j, name in enumerate(fixed.names):
            tune = scales[name]
            delta = tune.value * rng.standard_normal()
            idx, val = fixed.col_idx[j], fixed.col_val[j]
            de = delta * val
            dll = float(y[idx] @ de + mu[idx] @ (1.0 - np.exp(de)))
            theta_new = theta.copy()
            theta_new[j] += delta
            dpr = fixed.log_prior(theta_new) - fixed.log_prior(theta)
            if math.log(rng.random()) < dll + dpr:
                theta = theta_new
                eta[idx] += de
                mu[idx] *= np.exp(de)
                tune.step(1.0)
            else:
                tune.step(0.0)

        # overall precision on the log scale
        tune = scales["log_tau"]
        delta = tune.value * rng.standard_normal()
        tau_new = tau * math.exp(delta)
        sv_new = math.sqrt(max(1.0 - phi, 0.0) / tau_new)
        su_new = math.sqrt(phi / tau_new)
        x_new = sv_new * v + su_new * u
        dx = x_new - x
        dll = float(y @ dx + mu @ (1.0 - np.exp(dx)))
        dpr = (
            float(pc_prior_precision_logpdf(tau_new, prec_spec))
            - float(pc_prior_precision_logpdf(tau, prec_spec))
            + delta  # Jacobian of tau = exp(log_tau)
        )
        if math.log(rng.random()) < dll + dpr:
            tau = tau_new
            s_v, s_u = sv_new, su_new
            x = x_new
            eta = logE + fixed.F @ theta + x
            mu = np.exp(eta)
            tune.step(1.0)
        else:
            tune.step(0.0)

        # mixing weight on the logit scale
        if cfg.fixed_phi is None:
            tune = scales["logit_phi"]
            delta = tune.value * rng.standard_normal()
            logit = math.log(phi / (1.0 - phi)) + delta
            phi_new = 1.0 / (1.0 + math.exp(-logit))
            if 0.0 < phi_new < 1.0:
                sv_new = math.sqrt((1.0 - phi_new) / tau)
                su_new = math.sqrt(phi_new / tau)
                x_new = sv_new * v + su_new * u
                dx = x_new - x
                dll = float(y @ dx + mu @ (1.0 - np.exp(dx)))
                dpr = (
                    phi_prior.logpdf(phi_new) - phi_prior.logpdf(phi)
                    + math.log(phi_new * (1.0 - phi_new)) - math.log(phi * (1.0 - phi))
                )
                if math.log(rng.random()) < dll + dpr:
                    phi = phi_new
                    s_v, s_u = sv_new, su_new
                    x = x_new
                    eta = logE + fixed.F @ theta + x
                    mu = np.exp(eta)
                    tune.step(1.0)
                else:
                    tune.step(0.0)
            else:
                tune.step(0.0)

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            rec_tau[kept] = tau
            rec_phi[kept] = phi
            rec_theta[kept] = fixed.original(theta)
            rec_r[kept] = mu / data.E
            if rec_x is not None:
                rec_x[kept] = x
            rec_dev[kept] = -2.0 * (float(y @ eta - mu.sum()) - lgamma_const)
            eta_sum += eta
            kept += 1

    rates = {name: s.post_rate for name, s in scales.items()}
    return {
        "tau_x": rec_tau[:kept],
        "phi": rec_phi[:kept],
        "theta": rec_theta[:kept],
        "r": rec_r[:kept],
        "x": rec_x[:kept] if rec_x is not None else None,
        "deviance": rec_dev[:kept],
        "eta_mean": eta_sum / max(kept, 1),
        "rates": rates,
        "kept": kept,
    }


def fit_bym2(data: DiseaseMappingData, g: Graph, cfg: FitConfig) -> FitResult:
    """Fit the Poisson model with the reparametrized mixed random effect.

    The latent state is kept as the iid component v and the scaled
    structured component u (with its sum-to-zero constraints); the field
    x = (sqrt(1-phi) v + sqrt(phi) u)/sqrt(tau) is assembled
    deterministically. tau and phi move on log/logit scales under their
    penalized-complexity priors.
    """
    if cfg.model_kind != "bym2":
        raise ValueError(f"fit_bym2 cannot fit model_kind {cfg.model_kind!r}")
    if data.n != g.n:
        raise ValueError(f"data length {data.n} does not match graph size {g.n}")
    if cfg.likelihood != "poisson":
        raise ValueError("the mixed-effect model supports the Poisson likelihood only")
    _validate_report_risks(cfg, data.n)

    partition = connected_components(g)
    scaled = scale_model(g)
    struct = _FieldStructure.from_model_kind(g, partition, "bym2", scaled)
    prec_spec = _pc_prior(cfg.priors, "precision", "pc.prec", default=(1.0, 0.01))
    phi_prior = None
    if cfg.fixed_phi is None:
        phi_spec = _pc_prior(cfg.priors, "phi", "pc.phi", default=(0.5, 0.5))
        phi_prior = PhiPrior(Bym2Spec.from_model(scaled), phi_spec)

    fixed = _FixedEffects.build(data, partition, cfg.per_component_intercepts)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        chains = [
            _bym2_chain(data, struct, fixed, prec_spec, phi_prior, cfg,
                        np.random.Generator(np.random.PCG64(s)))
            for s in seeds
        ]

    hyper = ("tau_x",) if cfg.fixed_phi is not None else ("tau_x", "phi")
    return _assemble_result(data, cfg, chains, fixed, hyper_names=hyper,
                            hyper_key="tau_x", capped=None, improper_singletons=False)


# ---------------------------------------------------------------------------
# shared result assembly


def _assemble_result(data: DiseaseMappingData, cfg: FitConfig, chains: list[dict],
                     fixed: _FixedEffects | None, hyper_names: tuple[str, ...],
                     hyper_key: str, capped: int | None,
                     improper_singletons: bool) -> FitResult:
    draws: dict[str, np.ndarray] = {}
    if fixed is not None:
        theta = np.concatenate([c["theta"] for c in chains], axis=0)
        for j, name in enumerate(fixed.names):
            draws[name] = theta[:, j]
    for name in hyper_names:
        key = "kappa" if name == "kappa" else name
        draws[name] = np.concatenate([c[key] for c in chains])

    gaussian = cfg.likelihood == "gaussian"
    if gaussian:
        xs = np.concatenate([c["x"] for c in chains], axis=0)
        for i in range(data.n):
            draws[f"x[{i + 1}]"] = xs[:, i]
    else:
        rs = np.concatenate([c["r"] for c in chains], axis=0)
        nodes = (
            range(data.n)
            if cfg.report_risks is None
            else [i - 1 for i in cfg.report_risks]
        )
        for i in nodes:
            draws[f"r[{i + 1}]"] = rs[:, i]

    summaries = _summaries_from_draws(draws)

    if gaussian:
        dic_value, p_d = float("nan"), float("nan")
    else:
        dev = np.concatenate([c["deviance"] for c in chains])
        kept_total = sum(c["kept"] for c in chains)
        eta_mean = sum(c["eta_mean"] * c["kept"] for c in chains) / kept_total
        dev_at_mean = poisson_deviance(data.y.astype(float), np.exp(eta_mean))
        dic_value, p_d = dic(dev, dev_at_mean)

    rate_names = chains[0]["rates"].keys()
    rates = {
        name: float(np.mean([c["rates"][name] for c in chains])) for name in rate_names
    }
    exempt = {"x_singletons"} if improper_singletons else set()
    _check_acceptance(rates, exempt)

    samples = None
    if cfg.save_samples:
        samples = {name: d for name, d in draws.items()}
        if chains[0].get("x") is not None:
            samples["x"] = np.concatenate([c["x"] for c in chains], axis=0)

    diagnostics = {
        "model_kind": cfg.model_kind,
        "likelihood": cfg.likelihood,
        "seed": cfg.seed,
        "chains": cfg.chains,
        "iterations": cfg.iterations if capped is None else capped,
        "iteration_cap": capped,
        "burn_in": cfg.burn_in,
        "thin": cfg.thin,
        "retained_draws": int(sum(c["kept"] for c in chains)),
        "acceptance_rates": rates,
        "acceptance_rates_per_chain": [c["rates"] for c in chains],
        "dic": dic_value,
        "p_d": p_d,
    }
    return FitResult(
        summaries=summaries,
        dic=dic_value,
        p_d=p_d,
        acceptance_rates=rates,
        diagnostics=diagnostics,
        samples=samples,
    )


def fit(data: DiseaseMappingData, g: Graph, cfg: FitConfig) -> FitResult:
    """Dispatch to the sampler matching cfg.model_kind."""
    if cfg.model_kind == "bym2":
        return fit_bym2(data, g, cfg)
    return fit_besag(data, g, cfg)
