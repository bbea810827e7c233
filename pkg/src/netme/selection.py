"""DIC, WAIC, posterior summaries and effect interpretation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .model import Dataset, ModelSpec

BLOCK_CHOICES = ("outcome", "augmented")
LOG_2PI = math.log(2.0 * math.pi)


class CriterionError(FloatingPointError):
    pass


@dataclass
class DicResult:
    dic: float
    p_d: float
    dbar: float
    d_hat: float


@dataclass
class WaicResult:
    waic: float
    p_waic: float
    lppd: float


def _draw_arrays(samples):
    """Flattened (S, ...) arrays for every latent block."""
    beta = np.column_stack([samples.flat(nm) for nm in samples.beta_labels])
    out = {"beta": beta, "theta": samples.flat("theta")}
    if samples.alpha_labels:
        out["alpha"] = np.column_stack([samples.flat(nm) for nm in samples.alpha_labels])
    for nm in ("x", "phi"):
        if nm in samples.fields:
            out[nm] = samples.flat(nm)
    for nm in ("tau_eps", "tau_u"):
        if nm in samples.scalars:
            out[nm] = samples.flat(nm)
    return out


def _eta_draws(arr: dict, data: Dataset, variant: str) -> np.ndarray:
    beta = arr["beta"]
    cov = data.w[None, :] if variant == "baseline" else arr["x"]
    return beta[:, :1] + beta[:, 1:2] * cov + beta[:, 2:] @ data.Z.T + arr["theta"]


def _gauss(v, mean, tau):
    r = v - mean
    return 0.5 * np.log(tau) - 0.5 * LOG_2PI - 0.5 * tau * r * r


def _pointwise_from_arrays(arr: dict, data: Dataset, spec: ModelSpec, blocks: str) -> np.ndarray:
    if blocks not in BLOCK_CHOICES:
        raise ValueError(f"blocks must be one of {BLOCK_CHOICES}")
    eta = _eta_draws(arr, data, spec.variant)
    if spec.outcome == "poisson":
        with np.errstate(over="ignore"):
            ll = data.y * (np.log(data.e) + eta) - data.e * np.exp(eta) - gammaln(data.y + 1.0)
    elif spec.outcome == "gaussian":
        ll = _gauss(data.y[None, :], eta, spec.outcome_precision)
    else:
        ll = np.zeros((eta.shape[0], 0))
    if blocks == "augmented" and spec.is_me:
        alpha = arr["alpha"]
        mu = alpha[:, :1] + alpha[:, 1:] @ data.Ztilde.T
        tau_e = np.asarray(arr["tau_eps"]).reshape(-1, 1)
        tau_u = np.asarray(arr["tau_u"]).reshape(-1, 1)
        expo = _gauss(arr["x"], mu, tau_e)
        wm = arr["x"] + arr["phi"] if spec.is_spatial_me else arr["x"]
        err = _gauss(data.w[None, :], wm, tau_u)
        ll = np.hstack([ll, expo, err])
    return ll


def pointwise_loglik(samples, data: Dataset, spec: ModelSpec, blocks: str = "outcome") -> np.ndarray:
    """Log density of every observation (rows) at every draw: shape (S, rows)."""
    return _pointwise_from_arrays(_draw_arrays(samples), data, spec, blocks)


def _mean_arrays(samples) -> dict:
    st = samples.mean_state()
    out = {"beta": st.beta[None, :], "theta": st.theta[None, :]}
    if st.alpha is not None:
        out["alpha"] = st.alpha[None, :]
    for nm in ("x", "phi"):
        v = getattr(st, nm)
        if v is not None:
            out[nm] = v[None, :]
    # precisions are hyperparameters, not latent coordinates; plug in on the log scale
    # so that a heavy right tail cannot dominate the augmented-block plug-in
    for nm in ("tau_eps", "tau_u"):
        if nm in samples.scalars:
            out[nm] = np.array([math.exp(np.log(samples.flat(nm)).mean())])
    return out


def dic(samples, data: Dataset, spec: ModelSpec, blocks: str = "outcome") -> DicResult:
    """DIC with the posterior-mean plug-in.

    ``blocks="outcome"`` uses the count likelihood only (conditional on the
    latent fields).  ``blocks="augmented"`` adds the exposure and error
    equations, i.e. all 3n stacked rows.
    """
    ll = pointwise_loglik(samples, data, spec, blocks)
    if ll.shape[0] == 0:
        raise ValueError("no posterior draws")
    dev = -2.0 * ll.sum(axis=1)
    bad = np.flatnonzero(~np.isfinite(dev))
    if bad.size:
        raise CriterionError(f"non-finite deviance at draw {int(bad[0])}")
    dbar = float(dev.mean())
    d_hat = float(-2.0 * _pointwise_from_arrays(_mean_arrays(samples), data, spec, blocks).sum())
    if ll.shape[0] == 1:
        d_hat = float(dev[0])
    p_d = dbar - d_hat
    return DicResult(dic=dbar + p_d, p_d=p_d, dbar=dbar, d_hat=d_hat)


def waic_from_pointwise(ll: np.ndarray) -> WaicResult:
    ll = np.asarray(ll, dtype=float)
    if ll.shape[0] < 2:
        raise ValueError("WAIC needs at least two posterior draws")
    S = ll.shape[0]
    bad = np.flatnonzero(~np.all(np.isfinite(ll), axis=0))
    if bad.size:
        raise CriterionError(f"non-finite pointwise density at observation {int(bad[0])}")
    lppd_i = logsumexp(ll, axis=0) - math.log(S)
    p_i = ll.var(axis=0, ddof=1)
    lppd = float(lppd_i.sum())
    p_waic = float(p_i.sum())
    return WaicResult(waic=-2.0 * (lppd - p_waic), p_waic=p_waic, lppd=lppd)


def waic(samples, data: Dataset, spec: ModelSpec, blocks: str = "outcome") -> WaicResult:
    return waic_from_pointwise(pointwise_loglik(samples, data, spec, blocks))


# ---------------------------------------------------------------------------
# summaries


@dataclass
class ParameterSummary:
    mean: float
    sd: float
    q05: float
    q95: float


@dataclass
class FitSummary:
    parameters: dict
    dic: DicResult | None
    waic: WaicResult | None
    lambda_mean: np.ndarray
    lambda_q05: np.ndarray
    lambda_q95: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def rows(self, labels: dict | None = None) -> list[dict]:
        labels = labels or {}
        out = []
        for name, s in self.parameters.items():
            row = {"parameter": name, "label": labels.get(name, name), "mean": s.mean, "sd": s.sd,
                   "q05": s.q05, "q95": s.q95}
            if name in self.diagnostics:
                dg = self.diagnostics[name]
                row.update({"ess_bulk": dg.ess_bulk, "rhat": dg.rhat, "mcse": dg.mcse})
            out.append(row)
        return out

    def text_table(self, labels: dict | None = None) -> str:
        rows = self.rows(labels)
        width = max([len(r["label"]) for r in rows] + [9])
        lines = [f"{'parameter':<{width}}  {'mean':>10}  {'(sd)':>10}  {'5%':>10}  {'95%':>10}"]
        for r in rows:
            lines.append(f"{r['label']:<{width}}  {r['mean']:>10.4f}  ({r['sd']:>8.4f})  "
                         f"{r['q05']:>10.4f}  {r['q95']:>10.4f}")
        if self.dic is not None:
            lines.append(f"DIC  {self.dic.dic:.2f}  (p_D {self.dic.p_d:.2f})")
        if self.waic is not None:
            lines.append(f"WAIC {self.waic.waic:.2f}  (p_WAIC {self.waic.p_waic:.2f})")
        return "\n".join(lines) + "\n"


def summarize_draws(draws) -> ParameterSummary:
    d = np.asarray(draws, dtype=float).reshape(-1)
    if d.size == 0:
        raise ValueError("no draws to summarize")
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    q05, q95 = np.quantile(d, [0.05, 0.95])
    return ParameterSummary(float(d.mean()), sd, float(q05), float(q95))


def summarize(samples, data: Dataset | None = None, spec: ModelSpec | None = None,
              blocks: str = "outcome", with_diagnostics: bool = True) -> FitSummary:
    """Mean, sd and central 90% interval per scalar; per-site rate summaries."""
    from .inference import diagnostics

    params = {nm: summarize_draws(arr) for nm, arr in samples.scalars.items()}
    lam_mean = lam_lo = lam_hi = np.zeros(0)
    d = w = None
    if data is not None and spec is not None:
        eta = _eta_draws(_draw_arrays(samples), data, spec.variant)
        lam = np.exp(eta)
        lam_mean = lam.mean(axis=0)
        lam_lo, lam_hi = np.quantile(lam, [0.05, 0.95], axis=0)
        if spec.outcome != "none":
            d = dic(samples, data, spec, blocks)
            if samples.n_chains * samples.n_draws >= 2:
                w = waic(samples, data, spec, blocks)
    diag = {}
    if with_diagnostics and samples.n_draws >= 4:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            diag = diagnostics(samples)
    return FitSummary(params, d, w, lam_mean, lam_lo, lam_hi, diag)


def rate_ratio(beta_std: float, delta_original: float, covariate_sd: float) -> float:
    """Multiplicative rate change for an increment given on the original covariate scale."""
    if not covariate_sd > 0:
        raise ValueError("covariate_sd must be positive")
    return math.exp(beta_std * delta_original / covariate_sd)


def predicted_vs_observed(samples, data: Dataset, spec: ModelSpec, top_class: int = 11,
                          max_draws: int = 1000) -> list[dict]:
    """Observed and posterior-expected number of segments per count class (last class is ``top_class+``)."""
    eta = _eta_draws(_draw_arrays(samples), data, spec.variant)
    step = max(1, eta.shape[0] // max_draws)
    mu = data.e * np.exp(eta[::step])
    ks = np.arange(top_class)
    # log pmf for classes 0..top_class-1, remainder for the open class
    logp = ks[:, None, None] * np.log(mu)[None] - mu[None] - gammaln(ks + 1.0)[:, None, None]
    p = np.exp(logp).mean(axis=1)  # (classes, n)
    pred = p.sum(axis=1)
    pred_top = data.n - pred.sum()
    rows = []
    for k in ks:
        rows.append({"count_class": str(k), "observed": int(np.sum(data.y == k)), "predicted": float(pred[k])})
    rows.append({"count_class": f"{top_class}+", "observed": int(np.sum(data.y >= top_class)),
                 "predicted": float(pred_top)})
    return rows


def compare(reports: list[dict]) -> dict:
    """Flag the minimiser of each criterion; no aggregate verdict."""
    if len(reports) < 2:
        raise ValueError("comparison needs at least two fits")
    digests = {r["data_digest"] for r in reports}
    if len(digests) != 1:
        raise ValueError("fits were made on different datasets; refusing to compare")
    best_dic = min(range(len(reports)), key=lambda i: reports[i]["dic"])
    best_waic = min(range(len(reports)), key=lambda i: reports[i]["waic"])
    rows = []
    for i, r in enumerate(reports):
        rows.append({
            "model": r["model"], "dic": r["dic"], "p_d": r["p_d"], "waic": r["waic"], "p_waic": r["p_waic"],
            "best_dic": i == best_dic, "best_waic": i == best_waic,
        })
    return {"data_digest": digests.pop(), "models": rows,
            "criteria_agree": best_dic == best_waic}
