"""Hierarchical Poisson models on a network lattice.

Three variants share the outcome equation

    y_i ~ Poisson(e_i * lambda_i),
    log lambda_i = beta0 + beta_x * c_i + sum_j beta_j z_ij + theta_i,

where ``c = w`` (the observed proxy) for the baseline and ``c = x`` (the
latent true covariate) for the two measurement-error variants.  These add

    x_i = alpha0 + sum_j alpha_j ztilde_ij + eps_i,   eps_i ~ N(0, 1/tau_eps)
    w_i = x_i + u_i (+ phi_i),                        u_i ~ N(0, 1/tau_u)

with ``phi`` a second ICAR field in the spatial variant.  ``eps`` and ``u``
are never stored; they are the residuals ``x - mu`` and ``w - x - phi``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .gmrf import LOG_2PI, IcarStructure, icar_logdensity, quad_form
from .priors import PriorSpec, validate_prior

VARIANTS = ("baseline", "classical_me", "spatial_me")
OUTCOMES = ("poisson", "gaussian", "none")
ETA_LIMIT = 50.0
STD_TOL = 1e-8


class ModelError(ValueError):
    """Invalid model input or a non-finite evaluation."""


def standardize(values) -> tuple[np.ndarray, float, float]:
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    if not sd > 0:
        raise ModelError("cannot standardize a constant column")
    return (v - mean) / sd, mean, sd


def dummy_code(labels, reference=None) -> tuple[np.ndarray, list[str]]:
    """0/1 indicator columns for every level except ``reference``.

    The default reference is the smallest level, which for functional road
    classes is the motorway class.
    """
    labels = [str(v) for v in labels]
    levels = sorted(set(labels), key=lambda s: (len(s), s) if s.isdigit() else (1e9, s))
    if reference is None:
        reference = levels[0]
    reference = str(reference)
    if reference not in levels:
        raise ModelError(f"reference level {reference!r} not present")
    others = [lv for lv in levels if lv != reference]
    M = np.array([[1.0 if lab == lv else 0.0 for lv in others] for lab in labels]).reshape(len(labels), len(others))
    return M, others


def _as_matrix(arr, n: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(n, -1) if n else arr.reshape(0, 0)
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ModelError("covariate matrices must have n rows")
    return arr


@dataclass(eq=False)
class Dataset:
    y: np.ndarray
    e: np.ndarray
    w: np.ndarray
    Z: np.ndarray
    Ztilde: np.ndarray
    z_names: list = field(default_factory=list)
    ztilde_names: list = field(default_factory=list)
    # column name -> {"kind": "numeric" | "dummy" | "raw", "mean": .., "sd": ..}
    standardization: dict = field(default_factory=dict)
    segment_ids: list | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.size and (np.any(self.y < 0) or np.any(self.y != np.round(self.y))):
            raise ModelError("counts must be nonnegative integers")
        self.y = self.y.astype(np.int64)
        self.e = np.asarray(self.e, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        n = self.y.shape[0]
        self.Z = _as_matrix(self.Z, n)
        self.Ztilde = _as_matrix(self.Ztilde, n)
        if not (self.e.shape == self.w.shape == (n,)):
            raise ModelError("y, e and w must all have length n")
        if np.any(self.e <= 0):
            raise ModelError("offsets must be positive")
        if not self.z_names:
            self.z_names = [f"z{j + 1}" for j in range(self.Z.shape[1])]
        if not self.ztilde_names:
            self.ztilde_names = [f"ztilde{j + 1}" for j in range(self.Ztilde.shape[1])]
        if len(self.z_names) != self.Z.shape[1] or len(self.ztilde_names) != self.Ztilde.shape[1]:
            raise ModelError("column names do not match covariate matrices")
        for col, name in [(self.w, "w")] + list(zip(self.Z.T, self.z_names)) + list(zip(self.Ztilde.T, self.ztilde_names)):
            if not np.all(np.isfinite(col)):
                raise ModelError(f"column {name!r} has non-finite values")
            kind = self.standardization.get(name, {}).get("kind")
            if kind == "numeric" and n > 1:
                if abs(col.mean()) > STD_TOL or abs(col.std(ddof=1) - 1.0) > STD_TOL:
                    raise ModelError(f"column {name!r} is flagged standardized but is not")
            elif kind == "dummy" and not np.all((col == 0) | (col == 1)):
                raise ModelError(f"dummy column {name!r} has values other than 0/1")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def q(self) -> int:
        return self.Ztilde.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.y, self.e, self.w, self.Z, self.Ztilde):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.z_names, self.ztilde_names)).encode())
        return h.hexdigest()


def default_priors(variant: str = "baseline", include_spatial_theta: bool = True) -> dict:
    priors = {
        "beta0": PriorSpec.normal(0.0, 50.0),
        "beta_x": PriorSpec.normal(0.0, 50.0),
        "beta": PriorSpec.normal(0.0, 50.0),
    }
    if include_spatial_theta:
        priors["tau_theta"] = PriorSpec.loggamma(1.0, 5e-05)
    if variant in ("classical_me", "spatial_me"):
        priors["alpha0"] = PriorSpec.normal(0.0, 50.0)
        priors["alpha"] = PriorSpec.normal(0.0, 50.0)
        priors["tau_eps"] = PriorSpec.pc_precision(1.0, 0.1)
        priors["tau_u"] = PriorSpec.pc_precision(2.0, 0.1)
    if variant == "spatial_me":
        priors["tau_phi"] = PriorSpec.loggamma(1.0, 5e-05)
    return priors


@dataclass
class ModelSpec:
    variant: str = "baseline"
    priors: dict = None
    include_spatial_theta: bool = True
    outcome: str = "poisson"
    outcome_precision: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}")
        if self.outcome not in OUTCOMES:
            raise ModelError(f"unknown outcome {self.outcome!r}")
        if self.priors is None:
            self.priors = default_priors(self.variant, self.include_spatial_theta)
        self.validate()

    @property
    def is_me(self) -> bool:
        return self.variant != "baseline"

    @property
    def is_spatial_me(self) -> bool:
        return self.variant == "spatial_me"

    def required_priors(self) -> set:
        req = {"beta0", "beta_x", "beta"}
        if self.include_spatial_theta:
            req.add("tau_theta")
        if self.is_me:
            req |= {"alpha0", "alpha", "tau_eps", "tau_u"}
        if self.is_spatial_me:
            req.add("tau_phi")
        return req

    def validate(self) -> None:
        req = self.required_priors()
        missing = sorted(req - set(self.priors))
        if missing:
            raise ModelError(f"missing priors for {missing}")
        for name, prior in self.priors.items():
            base = name.split("[")[0]
            if base not in req:
                raise ModelError(f"prior given for {name!r}, which variant {self.variant!r} does not sample")
            problems = validate_prior(prior)
            if problems:
                raise ModelError(f"prior {name!r}: {'; '.join(problems)}")
            if base.startswith("tau") != prior.is_precision_prior:
                raise ModelError(f"prior {name!r}: family {prior.family!r} does not fit this parameter")

    def prior_for(self, name: str) -> PriorSpec:
        if name in self.priors:
            return self.priors[name]
        base = name.split("[")[0]
        return self.priors[base]

    def with_priors(self, **updates) -> "ModelSpec":
        pri = dict(self.priors)
        pri.update(updates)
        return replace(self, priors=pri)


def beta_names(data: Dataset) -> list[str]:
    return ["beta0", "beta_x"] + [f"beta[{nm}]" for nm in data.z_names]


def alpha_names(data: Dataset) -> list[str]:
    return ["alpha0"] + [f"alpha[{nm}]" for nm in data.ztilde_names]


def tau_names(spec: ModelSpec) -> list[str]:
    names = []
    if spec.include_spatial_theta:
        names.append("tau_theta")
    if spec.is_me:
        names += ["tau_eps", "tau_u"]
    if spec.is_spatial_me:
        names.append("tau_phi")
    return names


@dataclass
class LatentState:
    beta: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray | None = None
    x: np.ndarray | None = None
    phi: np.ndarray | None = None
    tau_theta: float | None = None
    tau_eps: float | None = None
    tau_u: float | None = None
    tau_phi: float | None = None

    def copy(self) -> "LatentState":
        def c(v):
            return None if v is None else np.array(v, dtype=float, copy=True)

        return LatentState(c(self.beta), c(self.theta), c(self.alpha), c(self.x), c(self.phi),
                           self.tau_theta, self.tau_eps, self.tau_u, self.tau_phi)

    @classmethod
    def zeros(cls, data: Dataset, spec: ModelSpec, tau: float = 1.0) -> "LatentState":
        n = data.n
        st = cls(beta=np.zeros(2 + data.p), theta=np.zeros(n))
        if spec.include_spatial_theta:
            st.tau_theta = tau
        if spec.is_me:
            st.alpha = np.zeros(1 + data.q)
            st.x = np.zeros(n)
            st.tau_eps = tau
            st.tau_u = tau
        if spec.is_spatial_me:
            st.phi = np.zeros(n)
            st.tau_phi = tau
        return st


def covariate_column(state: LatentState, data: Dataset, variant: str) -> np.ndarray:
    if variant == "baseline":
        return data.w
    if state.x is None:
        raise ModelError("measurement-error variants need the latent covariate x")
    return state.x


def exposure_mean(state: LatentState, data: Dataset) -> np.ndarray:
    a = state.alpha
    return a[0] + data.Ztilde @ a[1:]


def _eta(state: LatentState, data: Dataset, variant: str) -> np.ndarray:
    b = state.beta
    return b[0] + b[1] * covariate_column(state, data, variant) + data.Z @ b[2:] + state.theta


def linear_predictor(state: LatentState, data: Dataset, variant: str) -> np.ndarray:
    """Log rates ``eta``; ``exp(eta)`` gives lambda."""
    eta = _eta(state, data, variant)
    bad = np.flatnonzero(~np.isfinite(eta))
    if bad.size:
        raise ModelError(f"non-finite linear predictor at index {int(bad[0])}")
    return eta


def poisson_pointwise(y, e, eta) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return y * (np.log(e) + eta) - e * np.exp(eta) - gammaln(y + 1.0)


def loglik_poisson(y, e, eta) -> float:
    eta = np.asarray(eta, dtype=float)
    if eta.size:
        big = int(np.argmax(np.abs(eta)))
        if abs(eta[big]) > ETA_LIMIT:
            raise FloatingPointError(
                f"|eta| = {abs(eta[big]):.1f} at index {big} exceeds {ETA_LIMIT}; rescale covariates"
            )
    return float(np.sum(poisson_pointwise(y, e, eta)))


def gaussian_pointwise(v, mean, tau) -> np.ndarray:
    r = np.asarray(v, dtype=float) - mean
    return 0.5 * np.log(tau) - 0.5 * LOG_2PI - 0.5 * tau * r * r


def exposure_logdensity(state: LatentState, data: Dataset) -> float:
    return float(np.sum(gaussian_pointwise(state.x, exposure_mean(state, data), state.tau_eps)))


def error_mean(state: LatentState, variant: str) -> np.ndarray:
    if variant == "spatial_me":
        return state.x + state.phi
    return state.x


def error_logdensity(state: LatentState, data: Dataset, variant: str) -> float:
    return float(np.sum(gaussian_pointwise(data.w, error_mean(state, variant), state.tau_u)))


def outcome_pointwise(state: LatentState, data: Dataset, spec: ModelSpec, eta=None) -> np.ndarray:
    if eta is None:
        eta = _eta(state, data, spec.variant)
    if spec.outcome == "poisson":
        return poisson_pointwise(data.y, data.e, eta)
    if spec.outcome == "gaussian":
        return gaussian_pointwise(data.y, eta, spec.outcome_precision)
    return np.zeros(0)


def logposterior_components(state: LatentState, data: Dataset, spec: ModelSpec,
                            icar: IcarStructure | None, check: bool = True) -> dict:
    """All additive terms of the joint log posterior, by name."""
    variant = spec.variant
    comp: dict[str, float] = {}
    eta = _eta(state, data, variant)
    if spec.outcome == "poisson":
        comp["outcome"] = loglik_poisson(data.y, data.e, eta)
    elif spec.outcome == "gaussian":
        comp["outcome"] = float(np.sum(gaussian_pointwise(data.y, eta, spec.outcome_precision)))
    else:
        comp["outcome"] = 0.0
    if spec.is_me:
        comp["exposure"] = exposure_logdensity(state, data)
        comp["error"] = error_logdensity(state, data, variant)
    if spec.include_spatial_theta:
        comp["theta_prior"] = icar_logdensity(state.theta, state.tau_theta, icar, check=check)
    if spec.is_spatial_me:
        comp["phi_prior"] = icar_logdensity(state.phi, state.tau_phi, icar, check=check)
    lp_beta = 0.0
    for name, v in zip(beta_names(data), state.beta):
        lp_beta += spec.prior_for(name).logpdf(v)
    comp["beta_prior"] = lp_beta
    if spec.is_me:
        lp_alpha = 0.0
        for name, v in zip(alpha_names(data), state.alpha):
            lp_alpha += spec.prior_for(name).logpdf(v)
        comp["alpha_prior"] = lp_alpha
    for name in tau_names(spec):
        comp[f"{name}_prior"] = spec.prior_for(name).logpdf(getattr(state, name))
    return comp


def joint_logposterior(state: LatentState, data: Dataset, spec: ModelSpec,
                       icar: IcarStructure | None, check: bool = True) -> float:
    comp = logposterior_components(state, data, spec, icar, check=check)
    for name, v in comp.items():
        if not np.isfinite(v):
            raise ModelError(f"non-finite log-posterior component {name!r}")
    return float(sum(comp.values()))


def outcome_score(state: LatentState, data: Dataset, spec: ModelSpec, eta=None):
    """Score and (positive) curvature of the outcome log likelihood w.r.t. eta."""
    if eta is None:
        eta = _eta(state, data, spec.variant)
    if spec.outcome == "poisson":
        mu = data.e * np.exp(eta)
        return data.y - mu, mu
    if spec.outcome == "gaussian":
        t = spec.outcome_precision
        return t * (data.y - eta), np.full(data.n, t)
    return np.zeros(data.n), np.zeros(data.n)


def _normal_prior_terms(spec: ModelSpec, names: list[str]):
    means = np.array([spec.prior_for(nm).params[0] for nm in names])
    var = np.array([spec.prior_for(nm).params[1] for nm in names])
    return means, 1.0 / var


def logposterior_gradient(state: LatentState, data: Dataset, spec: ModelSpec,
                          icar: IcarStructure | None) -> dict:
    """Analytic gradient w.r.t. beta, alpha, x, theta, phi (unconstrained)."""
    variant = spec.variant
    r, _ = outcome_score(state, data, spec)
    cov = covariate_column(state, data, variant)
    X = np.column_stack([np.ones(data.n), cov, data.Z])
    m, prec = _normal_prior_terms(spec, beta_names(data))
    grad = {"beta": X.T @ r - prec * (state.beta - m)}
    if spec.include_spatial_theta:
        grad["theta"] = r - state.tau_theta * icar.K.matvec(state.theta)
    else:
        grad["theta"] = np.zeros(data.n)
    if spec.is_me:
        mu = exposure_mean(state, data)
        res_eps = state.x - mu
        res_u = data.w - error_mean(state, variant)
        grad["x"] = state.beta[1] * r - state.tau_eps * res_eps + state.tau_u * res_u
        Xt = np.column_stack([np.ones(data.n), data.Ztilde])
        ma, preca = _normal_prior_terms(spec, alpha_names(data))
        grad["alpha"] = state.tau_eps * (Xt.T @ res_eps) - preca * (state.alpha - ma)
        if spec.is_spatial_me:
            grad["phi"] = state.tau_u * res_u - state.tau_phi * icar.K.matvec(state.phi)
    return grad


def quad_form_theta(state: LatentState, icar: IcarStructure) -> float:
    return quad_form(icar.K, state.theta)
