"""MAP initialisation, Metropolis-within-Gibbs sampling and convergence diagnostics.

The sampler targets the joint posterior assembled in :mod:`netme.model`.
One sweep updates, in order: the regression coefficients (adaptive random
walk), the exposure coefficients (exact Gaussian draw), the latent
covariate (site-wise random walk), the outcome field theta (block MH with a
Gaussian-approximation proposal), the error field phi (exact Gaussian draw)
and the precisions (conjugate Gamma draws or random walk on log tau).
Proposal scales adapt by Robbins-Monro during burn-in only.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.linalg import splu

from .gmrf import ConstrainedGaussian, IcarStructure, quad_form
from .model import (
    Dataset,
    LatentState,
    ModelError,
    ModelSpec,
    alpha_names,
    beta_names,
    covariate_column,
    error_mean,
    exposure_mean,
    gaussian_pointwise,
    joint_logposterior,
    logposterior_components,
    logposterior_gradient,
    outcome_score,
    tau_names,
)

THREADS_ENV = "NETME_THREADS"
BLOCKS = ("beta", "alpha", "x", "theta", "phi", "tau_theta", "tau_eps", "tau_u", "tau_phi")


class SamplerDivergence(FloatingPointError):
    """Non-finite log posterior during sampling."""

    def __init__(self, iteration: int, block: str):
        super().__init__(f"non-finite log posterior at iteration {iteration} in block {block!r}")
        self.iteration = iteration
        self.block = block


class MapConvergenceError(RuntimeError):
    def __init__(self, iterations: int, grad_norm: float):
        super().__init__(f"MAP did not converge in {iterations} iterations (gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


@dataclass
class SamplerConfig:
    n_iterations: int = 30000
    n_burnin: int = 10000
    thinning: int = 4
    n_chains: int = 4
    rng_seed: int = 20230907
    target_accept_single: float = 0.44
    target_accept_block: float = 0.234
    adaptation_decay: float = 0.6
    # Newton steps towards the conditional mode when building the theta proposal
    field_newton_steps: int = 3
    # field moves per sweep: "joint" (tau and field together), "conditional"
    # (field at fixed tau) or "both"; precisions also get their own update
    field_update: str = "joint"
    # interweaving moves for (alpha, x) and (tau_eps, x) in the ME variants
    ancillary_moves: bool = True
    force_mh_tau: bool = False
    # blocks held at given values (name -> value); used by oracle tests
    fixed: dict = field(default_factory=dict)
    # starting precisions; unset ones use 1.0 for ICAR fields and prior medians otherwise
    init_precisions: dict = field(default_factory=dict)
    init_jitter: bool = True
    n_workers: int | None = None

    def __post_init__(self):
        for name in ("n_iterations", "thinning", "n_chains"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= self.n_burnin < self.n_iterations:
            raise ValueError("n_burnin must be in [0, n_iterations)")
        if (self.n_iterations - self.n_burnin) < self.thinning:
            raise ValueError("no draws retained after burn-in and thinning")
        if self.field_update not in ("joint", "conditional", "both"):
            raise ValueError(f"unknown field_update {self.field_update!r}")
        unknown = set(self.fixed) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown fixed blocks {sorted(unknown)}")

    @property
    def n_draws(self) -> int:
        return (self.n_iterations - self.n_burnin) // self.thinning

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = sorted(self.fixed)
        return d


# ---------------------------------------------------------------------------
# augmented pseudo-observation system


@dataclass
class AugmentedSystem:
    """Stacked responses, one column per equation.

    Rows ``0..n-1`` hold the counts, rows ``n..2n-1`` the zero
    pseudo-observations of the exposure equation ``0 = -x + mu + eps`` and
    rows ``2n..3n-1`` the proxy ``w = x (+ phi) + u``.  Entries outside a
    row's own column are NaN.
    """

    response: np.ndarray
    equation: np.ndarray
    site: np.ndarray
    families: tuple

    @property
    def n_rows(self) -> int:
        return self.response.shape[0]

    def row_values(self) -> np.ndarray:
        return self.response[np.arange(self.n_rows), self.equation]

    def pointwise_loglik(self, state: LatentState, data: Dataset, spec: ModelSpec) -> np.ndarray:
        """Log density of every row at ``state``."""
        out = np.empty(self.n_rows)
        n = data.n
        from .model import outcome_pointwise

        out[:n] = outcome_pointwise(state, data, spec)
        if self.n_rows > n:
            v = self.row_values()
            mean_exp = exposure_mean(state, data) - state.x
            out[n:2 * n] = gaussian_pointwise(v[n:2 * n], mean_exp, state.tau_eps)
            out[2 * n:] = gaussian_pointwise(v[2 * n:], error_mean(state, spec.variant), state.tau_u)
        return out

    def gaussian_logdensity(self, state: LatentState, data: Dataset, spec: ModelSpec) -> float:
        return float(np.sum(self.pointwise_loglik(state, data, spec)[data.n:]))


def build_augmented_system(data: Dataset, spec: ModelSpec) -> AugmentedSystem:
    n = data.n
    if not spec.is_me:
        return AugmentedSystem(data.y.astype(float).reshape(n, 1), np.zeros(n, dtype=np.int64),
                               np.arange(n), (spec.outcome,))
    resp = np.full((3 * n, 3), np.nan)
    resp[:n, 0] = data.y
    resp[n:2 * n, 1] = 0.0
    resp[2 * n:, 2] = data.w
    eq = np.repeat(np.arange(3), n)
    return AugmentedSystem(resp, eq, np.tile(np.arange(n), 3), (spec.outcome, "gaussian", "gaussian"))


# ---------------------------------------------------------------------------
# MAP


class _Layout:
    """Positions of the latent blocks inside one flat vector."""

    def __init__(self, data: Dataset, spec: ModelSpec, free=BLOCKS):
        n = data.n
        sizes = [("beta", 2 + data.p)]
        if spec.is_me:
            sizes += [("alpha", 1 + data.q), ("x", n)]
        if spec.include_spatial_theta:
            sizes.append(("theta", n))
        if spec.is_spatial_me:
            sizes.append(("phi", n))
        self.slices = {}
        pos = 0
        for name, k in sizes:
            if name in free:
                self.slices[name] = slice(pos, pos + k)
                pos += k
        self.size = pos

    def pack(self, state: LatentState) -> np.ndarray:
        v = np.empty(self.size)
        for name, sl in self.slices.items():
            v[sl] = getattr(state, name)
        return v

    def unpack(self, v: np.ndarray, template: LatentState) -> LatentState:
        st = template.copy()
        for name, sl in self.slices.items():
            setattr(st, name, v[sl].copy())
        return st


def _neg_hessian(state: LatentState, data: Dataset, spec: ModelSpec, icar, layout: _Layout):
    """Sparse negative Hessian of the joint log posterior (fixed precisions)."""
    n = data.n
    s = layout.slices
    N = layout.size
    r, c = outcome_score(state, data, spec)
    cov = covariate_column(state, data, spec.variant)
    X = np.column_stack([np.ones(n), cov, data.Z])
    blocks = []

    def put(a, b, M):
        if a in s and b in s:
            M = sp.coo_matrix(M)
            ra, rb = s[a].start, s[b].start
            blocks.append((M.row + ra, M.col + rb, M.data))
            if a != b:
                blocks.append((M.col + rb, M.row + ra, M.data))

    prec_b = np.array([1.0 / spec.prior_for(nm).params[1] for nm in beta_names(data)])
    put("beta", "beta", X.T @ (c[:, None] * X) + np.diag(prec_b))
    if spec.include_spatial_theta:
        put("beta", "theta", X.T * c[None, :])
        put("theta", "theta", sp.diags(c) + state.tau_theta * icar.K.csr)
    if spec.is_me:
        bx = state.beta[1]
        Hbx = (c * bx)[None, :] * X.T
        Hbx[1] -= r
        put("beta", "x", Hbx)
        put("x", "x", sp.diags(bx * bx * c + state.tau_eps + state.tau_u))
        Xt = np.column_stack([np.ones(n), data.Ztilde])
        put("x", "alpha", -state.tau_eps * Xt)
        prec_a = np.array([1.0 / spec.prior_for(nm).params[1] for nm in alpha_names(data)])
        put("alpha", "alpha", state.tau_eps * Xt.T @ Xt + np.diag(prec_a))
        if spec.include_spatial_theta:
            put("x", "theta", sp.diags(bx * c))
        if spec.is_spatial_me:
            put("x", "phi", sp.diags(np.full(n, state.tau_u)))
            put("phi", "phi", sp.diags(np.full(n, state.tau_u)) + state.tau_phi * icar.K.csr)
    if not blocks:
        return sp.csr_matrix((N, N))
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    vals = np.concatenate([b[2] for b in blocks])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def _constraint_matrix(icar, layout: _Layout) -> sp.csr_matrix:
    rows, cols = [], []
    k = 0
    for name in ("theta", "phi"):
        if name in layout.slices:
            start = layout.slices[name].start
            rows.append(k + icar.component_label)
            cols.append(start + np.arange(icar.n))
            k += icar.n_components
    if not rows:
        return sp.csr_matrix((0, layout.size))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(k, layout.size))


def _project(v: np.ndarray, icar, layout: _Layout) -> np.ndarray:
    v = v.copy()
    for name in ("theta", "phi"):
        if name in layout.slices:
            sl = layout.slices[name]
            v[sl] = icar.center(v[sl])
    return v


def _safe_logpost(state, data, spec, icar) -> float:
    try:
        comp = logposterior_components(state, data, spec, icar, check=False)
    except (FloatingPointError, ModelError):
        return -np.inf
    val = float(sum(comp.values()))
    return val if np.isfinite(val) else -np.inf


def initial_precisions(spec: ModelSpec, overrides: dict | None = None, icar_start: float | None = None) -> dict:
    """Starting precisions: ``icar_start`` (or the prior median) for ICAR fields, prior medians otherwise."""
    out = {}
    for name in tau_names(spec):
        if overrides and name in overrides:
            out[name] = float(overrides[name])
        elif icar_start is not None and name in ("tau_theta", "tau_phi"):
            out[name] = float(icar_start)
        else:
            out[name] = float(spec.prior_for(name).median())
    return out


def fit_map(data: Dataset, spec: ModelSpec, icar: IcarStructure | None,
            precisions: dict | None = None, tol: float = 1e-6, max_iter: int = 200,
            start: LatentState | None = None, free=BLOCKS) -> LatentState:
    """Newton ascent over (beta, alpha, x, theta, phi) at fixed precisions.

    Sum-to-zero constraints enter through the KKT system, so every step stays
    on the constraint set.  Steps are Levenberg-damped and backtracked.
    """
    taus = initial_precisions(spec, precisions)
    if start is None:
        st = LatentState.zeros(data, spec)
        if spec.outcome == "poisson" and data.y.sum() > 0:
            st.beta[0] = np.log(data.y.sum() / data.e.sum())
        elif spec.outcome == "gaussian" and data.n:
            st.beta[0] = float(np.mean(data.y))
        if spec.is_me:
            st.x = data.w.copy()
            st.alpha[0] = float(np.mean(data.w))
    else:
        st = start.copy()
    for k, v in taus.items():
        setattr(st, k, v)
    layout = _Layout(data, spec, free)
    if layout.size == 0:
        return st
    A = _constraint_matrix(icar, layout)
    m = A.shape[0]
    v = _project(layout.pack(st), icar, layout)
    f = _safe_logpost(layout.unpack(v, st), data, spec, icar)
    if not np.isfinite(f):
        raise ModelError("initial state for MAP has non-finite log posterior")
    damping = 0.0
    gnorm = np.inf
    for it in range(max_iter):
        cur = layout.unpack(v, st)
        g_dict = logposterior_gradient(cur, data, spec, icar)
        g = np.concatenate([g_dict[name] for name in layout.slices])
        gp = _project(g, icar, layout)
        gnorm = float(np.max(np.abs(gp)))
        if gnorm <= tol:
            return cur
        H = _neg_hessian(cur, data, spec, icar, layout)
        for _ in range(30):
            Hd = H + damping * sp.identity(layout.size) if damping > 0 else H
            KKT = sp.bmat([[Hd, A.T], [A, None]], format="csc") if m else Hd.tocsc()
            rhs = np.concatenate([g, np.zeros(m)])
            try:
                sol = splu(KKT).solve(rhs)
                d = sol[:layout.size]
                ok = np.all(np.isfinite(d)) and float(g @ d) > 0
            except RuntimeError:
                ok = False
            if ok:
                step, accepted = 1.0, False
                slope = float(g @ d)
                # Newton decrement: predicted gain below the resolution of f means converged
                if damping == 0.0 and 0.5 * slope <= 1e-12 * max(1.0, abs(f)):
                    return cur
                for _ls in range(40):
                    cand = _project(v + step * d, icar, layout)
                    fc = _safe_logpost(layout.unpack(cand, st), data, spec, icar)
                    if fc >= f + 1e-4 * step * slope or (fc >= f and step * np.max(np.abs(d)) < 1e-12):
                        accepted = True
                        break
                    step *= 0.5
                if accepted:
                    v, f = cand, fc
                    damping = damping / 10.0 if damping > 1e-8 else 0.0
                    break
            damping = max(1e-4, damping * 10.0)
        else:
            break
    raise MapConvergenceError(max_iter, gnorm)


# ---------------------------------------------------------------------------
# samples


@dataclass(eq=False)
class PosteriorSamples:
    scalars: dict  # name -> (chains, draws)
    fields: dict  # name -> (chains, draws, n)
    logpost: np.ndarray  # (chains, draws)
    acceptance: list  # per chain: block -> rate after burn-in
    seeds: list
    config: SamplerConfig
    variant: str
    data_digest: str = ""
    beta_labels: list = field(default_factory=list)
    alpha_labels: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.logpost.shape[0]

    @property
    def n_draws(self) -> int:
        return self.logpost.shape[1]

    @property
    def scalar_names(self) -> list[str]:
        return list(self.scalars)

    def flat(self, name: str) -> np.ndarray:
        if name in self.scalars:
            return self.scalars[name].reshape(-1)
        arr = self.fields[name]
        return arr.reshape(-1, arr.shape[-1])

    def state_at(self, chain: int, draw: int) -> LatentState:
        beta = np.array([self.scalars[nm][chain, draw] for nm in self.beta_labels])
        st = LatentState(beta=beta, theta=self.fields["theta"][chain, draw].copy())
        if self.alpha_labels:
            st.alpha = np.array([self.scalars[nm][chain, draw] for nm in self.alpha_labels])
        for nm in ("x", "phi"):
            if nm in self.fields:
                setattr(st, nm, self.fields[nm][chain, draw].copy())
        for nm in ("tau_theta", "tau_eps", "tau_u", "tau_phi"):
            if nm in self.scalars:
                setattr(st, nm, float(self.scalars[nm][chain, draw]))
        return st

    def iter_states(self):
        for c in range(self.n_chains):
            for d in range(self.n_draws):
                yield self.state_at(c, d)

    def mean_state(self) -> LatentState:
        beta = np.array([self.scalars[nm].mean() for nm in self.beta_labels])
        st = LatentState(beta=beta, theta=self.fields["theta"].mean(axis=(0, 1)))
        if self.alpha_labels:
            st.alpha = np.array([self.scalars[nm].mean() for nm in self.alpha_labels])
        for nm in ("x", "phi"):
            if nm in self.fields:
                setattr(st, nm, self.fields[nm].mean(axis=(0, 1)))
        for nm in ("tau_theta", "tau_eps", "tau_u", "tau_phi"):
            if nm in self.scalars:
                setattr(st, nm, float(self.scalars[nm].mean()))
        return st

    def save(self, directory) -> None:
        """Per-parameter CSV chains (one column per chain), fields as .npy, JSON manifest."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        header = ",".join(f"chain{c + 1}" for c in range(self.n_chains))
        files = {}
        for name, arr in list(self.scalars.items()) + [("logpost", self.logpost)]:
            fn = f"{_file_safe(name)}.csv"
            np.savetxt(out / fn, arr.T, delimiter=",", header=header, comments="", fmt="%.17g")
            files[name] = fn
        for name, arr in self.fields.items():
            fn = f"{name}.npy"
            np.save(out / fn, arr)
            files[name] = fn
        manifest = {
            "variant": self.variant,
            "data_digest": self.data_digest,
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "seeds": self.seeds,
            "acceptance": self.acceptance,
            "config": self.config.to_dict(),
            "beta_labels": self.beta_labels,
            "alpha_labels": self.alpha_labels,
            "scalars": list(self.scalars),
            "fields": list(self.fields),
            "files": files,
        }
        (out / "chains.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PosteriorSamples":
        src = Path(directory)
        man = json.loads((src / "chains.json").read_text())
        files = man["files"]

        def read_csv(fn):
            return np.atleast_2d(np.loadtxt(src / fn, delimiter=",", skiprows=1).reshape(man["n_draws"], -1)).T

        scalars = {nm: read_csv(files[nm]) for nm in man["scalars"]}
        fields = {nm: np.load(src / files[nm]) for nm in man["fields"]}
        cfg = dict(man["config"])
        cfg["fixed"] = {}
        return cls(scalars, fields, read_csv(files["logpost"]), man["acceptance"], man["seeds"],
                   SamplerConfig(**cfg), man["variant"], man["data_digest"],
                   man["beta_labels"], man["alpha_labels"])


def _file_safe(name: str) -> str:
    return name.replace("[", "__").replace("]", "").replace("/", "_").replace(" ", "_")


# ---------------------------------------------------------------------------
# sampler


def _rm_step(t: int, decay: float) -> float:
    return 1.0 / (t + 1.0) ** decay


class _Chain:
    def __init__(self, data: Dataset, spec: ModelSpec, icar, config: SamplerConfig,
                 state: LatentState, rng: np.random.Generator, beta_cov: np.ndarray):
        self.data, self.spec, self.icar, self.cfg = data, spec, icar, config
        self.st = state.copy()
        self.rng = rng
        n = data.n
        self.n = n
        self.Xt = np.column_stack([np.ones(n), data.Ztilde])
        self.beta_chol = np.linalg.cholesky(beta_cov)
        d = len(state.beta)
        self.log_s_beta = np.log(2.38 / np.sqrt(d))
        self.log_s_tau = {nm: np.log(0.5) for nm in ("tau_theta", "tau_eps", "tau_u", "tau_phi")}
        self.log_s_joint = {"theta": np.log(0.3), "phi": np.log(0.3)}
        self.log_s_anc = {"alpha": np.log(1.0), "tau_eps": np.log(0.2), "scale": np.log(0.05)}
        self.log_s_x = None
        if spec.is_me:
            _, c = outcome_score(self.st, data, spec)
            prec = state.beta[1] ** 2 * c + state.tau_eps + state.tau_u
            self.log_s_x = np.log(2.4 / np.sqrt(prec))
        self.prec_beta = np.array([1.0 / spec.prior_for(nm).params[1] for nm in beta_names(data)])
        self.mean_beta = np.array([spec.prior_for(nm).params[0] for nm in beta_names(data)])
        if spec.is_me:
            self.prec_alpha = np.array([1.0 / spec.prior_for(nm).params[1] for nm in alpha_names(data)])
            self.mean_alpha = np.array([spec.prior_for(nm).params[0] for nm in alpha_names(data)])
            Pa = state.tau_eps * self.Xt.T @ self.Xt + np.diag(self.prec_alpha)
            self.alpha_chol = np.linalg.cholesky(np.linalg.inv(Pa))
        self.fixed = set(config.fixed)
        self.accept = {}
        self.tries = {}

    # -- helpers -----------------------------------------------------------
    def _ll_outcome(self, eta) -> np.ndarray:
        """Pointwise outcome log likelihood without constants."""
        data, spec = self.data, self.spec
        if spec.outcome == "poisson":
            return data.y * eta - data.e * np.exp(eta)
        if spec.outcome == "gaussian":
            r = data.y - eta
            return -0.5 * spec.outcome_precision * r * r
        return np.zeros_like(eta)

    def _eta_base(self) -> np.ndarray:
        b = self.st.beta
        return b[0] + self.data.Z @ b[2:] + self.st.theta

    def _cov(self) -> np.ndarray:
        return covariate_column(self.st, self.data, self.spec.variant)

    def _record(self, block: str, acc: float, tries: float = 1.0, burn: bool = False) -> None:
        if burn:
            return
        self.accept[block] = self.accept.get(block, 0.0) + acc
        self.tries[block] = self.tries.get(block, 0.0) + tries

    # -- blocks -------------------------------------------------------------
    def update_beta(self, t: int, burn: bool) -> None:
        st, data = self.st, self.data
        cov = self._cov()
        base_rest = data.Z @ st.beta[2:] + st.theta  # recomputed per candidate below

        def target(beta):
            eta = beta[0] + beta[1] * cov + data.Z @ beta[2:] + st.theta
            if self.spec.outcome == "poisson" and np.max(eta) > 50:
                return -np.inf
            ll = float(np.sum(self._ll_outcome(eta)))
            return ll - 0.5 * float(np.sum(self.prec_beta * (beta - self.mean_beta) ** 2))

        del base_rest
        cur = target(st.beta)
        if not np.isfinite(cur):
            raise SamplerDivergence(t, "beta")
        prop = st.beta + np.exp(self.log_s_beta) * (self.beta_chol @ self.rng.standard_normal(st.beta.size))
        new = target(prop)
        acc = np.log(self.rng.uniform()) < new - cur
        if acc:
            st.beta = prop
        if burn:
            self.log_s_beta += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_block)
        self._record("beta", float(acc), burn=burn)

    def update_alpha(self, t: int, burn: bool) -> None:
        st = self.st
        P = st.tau_eps * self.Xt.T @ self.Xt + np.diag(self.prec_alpha)
        h = st.tau_eps * self.Xt.T @ st.x + self.prec_alpha * self.mean_alpha
        L = np.linalg.cholesky(P)
        mean = np.linalg.solve(P, h)
        st.alpha = mean + np.linalg.solve(L.T, self.rng.standard_normal(mean.size))
        self._record("alpha", 1.0, burn=burn)

    def update_x(self, t: int, burn: bool) -> None:
        st, data = self.st, self.data
        base = self._eta_base()
        mu = exposure_mean(st, data)
        wres = data.w - (st.phi if st.phi is not None else 0.0)
        bx = st.beta[1]

        def target(x):
            eta = base + bx * x
            with np.errstate(over="ignore"):
                ll = self._ll_outcome(eta)
            ll = np.where(np.isfinite(ll), ll, -np.inf)
            return ll - 0.5 * st.tau_eps * (x - mu) ** 2 - 0.5 * st.tau_u * (wres - x) ** 2

        cur = target(st.x)
        if not np.all(np.isfinite(cur)):
            raise SamplerDivergence(t, "x")
        prop = st.x + np.exp(self.log_s_x) * self.rng.standard_normal(self.n)
        new = target(prop)
        acc = np.log(self.rng.uniform(size=self.n)) < new - cur
        st.x = np.where(acc, prop, st.x)
        if burn:
            self.log_s_x += _rm_step(t, self.cfg.adaptation_decay) * (acc - self.cfg.target_accept_single)
        self._record("x", float(acc.sum()), float(self.n), burn=burn)

    def update_exposure_ancillary(self, t: int, burn: bool) -> None:
        """Interweaving moves that hold eps = x - mu fixed.

        (i) shift alpha and carry x along (x + Ztilde delta); (ii) rescale
        tau_eps and eps together.  The exposure density is unchanged by (i)
        and, after the Jacobian, by (ii); only the outcome and error terms and
        the priors enter the ratio.  These break the alpha/x and tau_eps/x
        coupling of plain data augmentation.
        """
        st, data = self.st, self.data
        base = self._eta_base()
        wres = data.w - (st.phi if st.phi is not None else 0.0)
        bx = st.beta[1]

        def loglik(x):
            eta = base + bx * x
            if self.spec.outcome == "poisson" and np.max(eta) > 50:
                return -np.inf
            r = wres - x
            return float(np.sum(self._ll_outcome(eta))) - 0.5 * st.tau_u * float(r @ r)

        cur = loglik(st.x)
        if not np.isfinite(cur):
            raise SamplerDivergence(t, "x")
        if "alpha" not in self.fixed:
            delta = np.exp(self.log_s_anc["alpha"]) * (self.alpha_chol @ self.rng.standard_normal(st.alpha.size))
            a_new = st.alpha + delta
            x_new = st.x + self.Xt @ delta
            new = loglik(x_new)
            lp_prior = -0.5 * float(np.sum(self.prec_alpha * ((a_new - self.mean_alpha) ** 2 - (st.alpha - self.mean_alpha) ** 2)))
            acc = np.isfinite(new) and np.log(self.rng.uniform()) < new - cur + lp_prior
            if acc:
                st.alpha, st.x, cur = a_new, x_new, new
            if burn:
                self.log_s_anc["alpha"] += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_block)
            self._record("alpha~x", float(acc), burn=burn)
        if "tau_eps" not in self.fixed:
            step = np.exp(self.log_s_anc["tau_eps"]) * self.rng.standard_normal()
            t_new = st.tau_eps * np.exp(step)
            mu = exposure_mean(st, data)
            x_new = mu + (st.x - mu) * np.exp(-0.5 * step)
            new = loglik(x_new)
            prior = self.spec.prior_for("tau_eps")
            log_r = new - cur + prior.logpdf(t_new) - prior.logpdf(st.tau_eps) + step
            acc = np.isfinite(new) and np.log(self.rng.uniform()) < log_r
            if acc:
                st.tau_eps, st.x = float(t_new), x_new
            if burn:
                self.log_s_anc["tau_eps"] += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_single)
            self._record("tau_eps~x", float(acc), burn=burn)
        if not ({"beta", "alpha", "tau_eps"} & self.fixed):
            # scale move x/s, alpha/s, beta_x*s, tau_eps*s^2: the linear predictor and
            # the exposure term (after its share of the Jacobian) are unchanged
            ls = np.exp(self.log_s_anc["scale"]) * self.rng.standard_normal()
            s = np.exp(ls)
            x_new = st.x / s
            a_new = st.alpha / s
            b_new = st.beta.copy()
            b_new[1] *= s
            t_new = st.tau_eps * s * s
            r0 = wres - st.x
            r1 = wres - x_new
            d_err = -0.5 * st.tau_u * (float(r1 @ r1) - float(r0 @ r0))
            pa = self.prec_alpha
            d_prior = (-0.5 * float(np.sum(pa * ((a_new - self.mean_alpha) ** 2 - (st.alpha - self.mean_alpha) ** 2)))
                       - 0.5 * self.prec_beta[1] * ((b_new[1] - self.mean_beta[1]) ** 2 - (st.beta[1] - self.mean_beta[1]) ** 2)
                       + self.spec.prior_for("tau_eps").logpdf(t_new) - self.spec.prior_for("tau_eps").logpdf(st.tau_eps))
            log_j = (3 - st.alpha.size) * ls
            log_r = d_err + d_prior + log_j
            acc = np.isfinite(log_r) and np.log(self.rng.uniform()) < log_r
            if acc:
                st.x, st.alpha, st.beta, st.tau_eps = x_new, a_new, b_new, float(t_new)
            if burn:
                self.log_s_anc["scale"] += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_single)
            self._record("scale~x", float(acc), burn=burn)


    def _field_proposal(self, name: str, value, tau: float, base) -> ConstrainedGaussian:
        """Gaussian approximation to the full conditional of ``theta`` or ``phi``.

        For theta under a Poisson outcome the approximation is expanded at the
        point reached by ``field_newton_steps`` Newton steps from ``value``;
        in every other case the conditional is Gaussian and this is exact.
        """
        spec, data, icar, st = self.spec, self.data, self.icar, self.st
        if name == "phi":
            return ConstrainedGaussian(icar, tau, d=np.full(self.n, st.tau_u), b=st.tau_u * (data.w - st.x))
        if spec.outcome == "gaussian":
            t = spec.outcome_precision
            return ConstrainedGaussian(icar, tau, d=np.full(self.n, t), b=t * (data.y - base))
        if spec.outcome == "none":
            return ConstrainedGaussian(icar, tau)
        cur = value
        for _ in range(max(1, self.cfg.field_newton_steps)):
            c = data.e * np.exp(np.minimum(base + cur, 50.0))
            G = ConstrainedGaussian(icar, tau, d=c, b=data.y - c + c * cur)
            cur = G.mean
        return G

    def _field_loglik(self, name: str, value, base) -> float:
        """Log likelihood terms in which the field appears (up to constants)."""
        if name == "phi":
            r = self.data.w - self.st.x - value
            return -0.5 * self.st.tau_u * float(r @ r)
        eta = base + value
        if self.spec.outcome == "poisson" and np.max(eta) > 50:
            return -np.inf
        return float(np.sum(self._ll_outcome(eta)))

    def _field_base(self, name: str):
        if name == "phi":
            return None
        b = self.st.beta
        return b[0] + b[1] * self._cov() + self.data.Z @ b[2:]

    def update_field(self, name: str, t: int, burn: bool) -> None:
        """Block update of one field at fixed precision."""
        st, icar = self.st, self.icar
        tau = getattr(st, f"tau_{name}")
        base = self._field_base(name)
        cur_val = getattr(st, name)
        Gf = self._field_proposal(name, cur_val, tau, base)
        prop = Gf.sample(self.rng)
        if name == "phi" or self.spec.outcome != "poisson":
            setattr(st, name, prop)
            self._record(name, 1.0, burn=burn)
            return

        def target(v):
            return self._field_loglik(name, v, base) - 0.5 * tau * quad_form(icar.K, v)

        cur = target(cur_val)
        if not np.isfinite(cur):
            raise SamplerDivergence(t, name)
        new = target(prop)
        acc = False
        if np.isfinite(new):
            Gr = self._field_proposal(name, prop, tau, base)
            acc = np.log(self.rng.uniform()) < new - cur + Gr.logpdf(cur_val) - Gf.logpdf(prop)
        if acc:
            setattr(st, name, prop)
        self._record(name, float(acc), burn=burn)

    def update_field_joint(self, name: str, t: int, burn: bool) -> None:
        """Joint move of (tau, field): random walk on log tau, field from its approximation at the new tau."""
        st, icar = self.st, self.icar
        tname = f"tau_{name}"
        prior = self.spec.prior_for(tname)
        r = icar.rank
        base = self._field_base(name)
        cur_val, tau = getattr(st, name), getattr(st, tname)

        def target(v, tv):
            return (self._field_loglik(name, v, base) + 0.5 * r * np.log(tv)
                    - 0.5 * tv * quad_form(icar.K, v) + prior.logpdf(tv))

        cur = target(cur_val, tau)
        if not np.isfinite(cur):
            raise SamplerDivergence(t, f"{name}+{tname}")
        step = np.exp(self.log_s_joint[name]) * self.rng.standard_normal()
        tau_new = tau * np.exp(step)
        Gf = self._field_proposal(name, cur_val, tau_new, base)
        prop = Gf.sample(self.rng)
        new = target(prop, tau_new)
        acc = False
        if np.isfinite(new):
            Gr = self._field_proposal(name, prop, tau, base)
            log_r = new - cur + Gr.logpdf(cur_val) - Gf.logpdf(prop) + step
            acc = np.log(self.rng.uniform()) < log_r
        if acc:
            setattr(st, name, prop)
            setattr(st, tname, float(tau_new))
        if burn:
            self.log_s_joint[name] += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_block)
        self._record(f"{name}+{tname}", float(acc), burn=burn)

    def update_tau(self, name: str, t: int, burn: bool) -> None:
        st, spec, data, icar = self.st, self.spec, self.data, self.icar
        if name == "tau_theta":
            q, r = quad_form(icar.K, st.theta), icar.rank
        elif name == "tau_phi":
            q, r = quad_form(icar.K, st.phi), icar.rank
        elif name == "tau_eps":
            res = st.x - exposure_mean(st, data)
            q, r = float(res @ res), data.n
        else:
            res = data.w - error_mean(st, spec.variant)
            q, r = float(res @ res), data.n
        prior = spec.prior_for(name)
        if prior.family == "loggamma" and not self.cfg.force_mh_tau:
            a, rate = prior.params
            setattr(st, name, float(self.rng.gamma(a + 0.5 * r, 1.0 / (rate + 0.5 * q))))
            self._record(name, 1.0, burn=burn)
            return

        def target(logt):
            tau = np.exp(logt)
            return 0.5 * r * logt - 0.5 * tau * q + prior.logpdf(tau) + logt

        lt = np.log(getattr(st, name))
        cur = target(lt)
        if not np.isfinite(cur):
            raise SamplerDivergence(t, name)
        prop = lt + np.exp(self.log_s_tau[name]) * self.rng.standard_normal()
        acc = np.log(self.rng.uniform()) < target(prop) - cur
        if acc:
            setattr(st, name, float(np.exp(prop)))
        if burn:
            self.log_s_tau[name] += _rm_step(t, self.cfg.adaptation_decay) * (float(acc) - self.cfg.target_accept_single)
        self._record(name, float(acc), burn=burn)

    # -- driver -----------------------------------------------------------
    def run(self):
        cfg, spec, data, icar = self.cfg, self.spec, self.data, self.icar
        n_draws = cfg.n_draws
        snames = beta_names(data) + (alpha_names(data) if spec.is_me else []) + tau_names(spec)
        scal = np.empty((len(snames), n_draws))
        fnames = ["theta"] + (["x"] if spec.is_me else []) + (["phi"] if spec.is_spatial_me else [])
        flds = {nm: np.empty((n_draws, self.n)) for nm in fnames}
        lp = np.empty(n_draws)
        steps = []
        if "beta" not in self.fixed:
            steps.append(self.update_beta)
        if spec.is_me and "alpha" not in self.fixed:
            steps.append(self.update_alpha)
        if spec.is_me and "x" not in self.fixed:
            steps.append(self.update_x)
            if cfg.ancillary_moves:
                steps.append(self.update_exposure_ancillary)
        from functools import partial

        for name, present in (("theta", spec.include_spatial_theta), ("phi", spec.is_spatial_me)):
            if not present or name in self.fixed:
                continue
            joint = cfg.field_update in ("joint", "both") and f"tau_{name}" not in self.fixed
            if joint:
                steps.append(partial(self.update_field_joint, name))
            if not joint or cfg.field_update == "both":
                steps.append(partial(self.update_field, name))
        tau_steps = [nm for nm in tau_names(spec) if nm not in self.fixed]
        k = 0
        for it in range(cfg.n_iterations):
            burn = it < cfg.n_burnin
            for step in steps:
                step(t=it, burn=burn)
            for nm in tau_steps:
                self.update_tau(nm, it, burn)
            if not burn and (it - cfg.n_burnin + 1) % cfg.thinning == 0 and k < n_draws:
                st = self.st
                try:
                    lp[k] = joint_logposterior(st, data, spec, icar, check=False)
                except (ModelError, FloatingPointError):
                    raise SamplerDivergence(it, "joint") from None
                row = list(st.beta) + (list(st.alpha) if spec.is_me else []) + [getattr(st, nm) for nm in tau_names(spec)]
                scal[:, k] = row
                for nm in fnames:
                    flds[nm][k] = getattr(st, nm)
                k += 1
        rates = {b: self.accept[b] / self.tries[b] for b in sorted(self.accept)}
        return snames, scal, flds, lp, rates


def _beta_proposal_cov(state: LatentState, data: Dataset, spec: ModelSpec) -> np.ndarray:
    _, c = outcome_score(state, data, spec)
    cov = covariate_column(state, data, spec.variant)
    X = np.column_stack([np.ones(data.n), cov, data.Z])
    prec = np.array([1.0 / spec.prior_for(nm).params[1] for nm in beta_names(data)])
    H = X.T @ (c[:, None] * X) + np.diag(prec)
    C = np.linalg.inv(H)
    return 0.5 * (C + C.T)


def _run_chain(args):
    data, spec, icar, config, state, seed_seq, beta_cov = args
    rng = np.random.default_rng(seed_seq)
    st = state.copy()
    if config.init_jitter:
        L = np.linalg.cholesky(beta_cov)
        if "beta" not in config.fixed:
            st.beta = st.beta + L @ rng.standard_normal(st.beta.size)
        for nm in tau_names(spec):
            if nm not in config.fixed:
                setattr(st, nm, float(getattr(st, nm) * np.exp(0.3 * rng.standard_normal())))
    chain = _Chain(data, spec, icar, config, st, rng, beta_cov)
    return chain.run()


def _n_workers(config: SamplerConfig) -> int:
    if config.n_workers is not None:
        return max(1, int(config.n_workers))
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def initial_state(data: Dataset, spec: ModelSpec, icar, config: SamplerConfig) -> LatentState:
    """MAP of the latent blocks at the starting precisions, with fixed blocks applied."""
    taus = initial_precisions(spec, config.init_precisions, icar_start=1.0)
    for nm in tau_names(spec):
        if nm in config.fixed:
            taus[nm] = float(config.fixed[nm])
    start = LatentState.zeros(data, spec)
    if spec.outcome == "poisson" and data.y.sum() > 0:
        start.beta[0] = np.log(data.y.sum() / data.e.sum())
    if spec.is_me:
        start.x = data.w.copy()
        start.alpha[0] = float(np.mean(data.w))
    for nm, val in config.fixed.items():
        setattr(start, nm, np.array(val, dtype=float) if np.ndim(val) else float(val))
    free = [b for b in ("beta", "alpha", "x", "theta", "phi") if b not in config.fixed]
    return fit_map(data, spec, icar, precisions=taus, start=start, free=free)


def run_mcmc(data: Dataset, spec: ModelSpec, icar: IcarStructure | None,
             config: SamplerConfig | None = None, start: LatentState | None = None) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains from the MAP state."""
    config = config or SamplerConfig()
    if spec.include_spatial_theta or spec.is_spatial_me:
        if icar is None or icar.n != data.n:
            raise ModelError("an ICAR structure matching the data is required")
    state = start.copy() if start is not None else initial_state(data, spec, icar, config)
    for nm, val in config.fixed.items():
        setattr(state, nm, np.array(val, dtype=float) if np.ndim(val) else float(val))
    beta_cov = _beta_proposal_cov(state, data, spec)
    children = np.random.SeedSequence(config.rng_seed).spawn(config.n_chains)
    jobs = [(data, spec, icar, config, state, ss, beta_cov) for ss in children]
    workers = min(_n_workers(config), config.n_chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    snames = results[0][0]
    scalars = {nm: np.stack([r[1][i] for r in results]) for i, nm in enumerate(snames)}
    fields = {nm: np.stack([r[2][nm] for r in results]) for nm in results[0][2]}
    logpost = np.stack([r[3] for r in results])
    return PosteriorSamples(
        scalars=scalars, fields=fields, logpost=logpost,
        acceptance=[r[4] for r in results],
        seeds=[{"entropy": int(config.rng_seed), "spawn_key": list(ss.spawn_key)} for ss in children],
        config=config, variant=spec.variant, data_digest=data.digest(),
        beta_labels=beta_names(data), alpha_labels=alpha_names(data) if spec.is_me else [],
    )


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class Diagnostic:
    ess_bulk: float
    ess_mean: float
    rhat: float
    mcse: float
    degenerate: bool = False


def _autocov_multi(chains: np.ndarray) -> np.ndarray:
    """Autocovariance per chain via FFT, biased estimator, shape (m, n)."""
    m, n = chains.shape
    x = chains - chains.mean(axis=1, keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def effective_sample_size(chains) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float("nan")
    acov = _autocov_multi(chains)
    chain_mean = chains.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    if not W > 0:
        return float("nan")
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, enforce monotonicity
    pairs = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def _split(chains: np.ndarray) -> np.ndarray:
    m, n = chains.shape
    half = n // 2
    return np.vstack([chains[:, :half], chains[:, n - half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    S = x.size
    return stats.norm.ppf((r - 0.375) / (S + 0.25))


def _rhat_basic(chains: np.ndarray) -> float:
    m, n = chains.shape
    W = chains.var(axis=1, ddof=1).mean()
    B = n * chains.mean(axis=1).var(ddof=1)
    if not W > 0:
        return float("nan")
    var_plus = (n - 1.0) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def rhat(chains) -> float:
    """Rank-normalized split R-hat (max of bulk and folded-tail versions)."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[0] < 2:
        warnings.warn("R-hat needs at least two chains; omitted", RuntimeWarning, stacklevel=2)
        return float("nan")
    s = _split(chains)
    bulk = _rhat_basic(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_basic(_rank_normalize(folded))
    return float(np.nanmax([bulk, tail])) if np.isfinite([bulk, tail]).any() else float("nan")


def ess_bulk(chains) -> float:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    return effective_sample_size(_rank_normalize(_split(chains)))


def diagnose(chains) -> Diagnostic:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if np.ptp(chains) == 0:
        return Diagnostic(float("nan"), float("nan"), float("nan"), 0.0, degenerate=True)
    ess_m = effective_sample_size(_split(chains)) if chains.shape[1] >= 8 else effective_sample_size(chains)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rh = rhat(chains) if chains.shape[0] > 1 else float("nan")
    return Diagnostic(ess_bulk(chains), ess_m, rh, float(chains.std(ddof=1) / np.sqrt(ess_m)))


def diagnostics(samples: PosteriorSamples) -> dict:
    """Per scalar parameter ESS, R-hat and MCSE of the mean."""
    if samples.n_chains < 2:
        warnings.warn("single chain: R-hat omitted", RuntimeWarning, stacklevel=2)
    return {nm: diagnose(arr) for nm, arr in samples.scalars.items()}
