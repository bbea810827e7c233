"""Prior families: Normal fixed effects, Gamma precisions, PC precisions.

The "logGamma(a, b) on log(tau)" prior is the Gamma(shape=a, rate=b) law on
tau itself; the two are the same distribution written on different scales.

The PC prior on a precision is defined by P(1/sqrt(tau) > sigma0) = alpha.
It puts an exponential law with rate lam = -log(alpha)/sigma0 on
sigma = tau^{-1/2}, which after the change of variables gives a type-2
Gumbel density on tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import gammaln

FAMILIES = ("normal", "loggamma", "pc_precision")


@dataclass(frozen=True)
class PriorSpec:
    family: str
    params: tuple

    @staticmethod
    def normal(mean: float = 0.0, variance: float = 50.0, scale: str = "variance") -> "PriorSpec":
        """Normal prior.  ``scale="precision"`` reads the second number as a precision."""
        if scale == "precision":
            variance = 1.0 / variance if variance != 0 else math.inf
        elif scale != "variance":
            raise ValueError(f"unknown normal scale {scale!r}")
        return PriorSpec("normal", (float(mean), float(variance)))

    @staticmethod
    def loggamma(a: float = 1.0, b: float = 5e-05) -> "PriorSpec":
        return PriorSpec("loggamma", (float(a), float(b)))

    @staticmethod
    def pc_precision(sigma0: float, alpha: float) -> "PriorSpec":
        return PriorSpec("pc_precision", (float(sigma0), float(alpha)))

    def logpdf(self, value: float) -> float:
        if self.family == "normal":
            return logdensity_normal(value, *self.params)
        if self.family == "loggamma":
            return logdensity_loggamma_precision(value, *self.params)
        if self.family == "pc_precision":
            return logdensity_pc_precision(value, *self.params)
        raise ValueError(f"unknown prior family {self.family!r}")

    @property
    def is_precision_prior(self) -> bool:
        return self.family in ("loggamma", "pc_precision")

    def median(self) -> float:
        """Median of the prior (precision families only)."""
        if self.family == "loggamma":
            from scipy.stats import gamma

            a, b = self.params
            return float(gamma.ppf(0.5, a, scale=1.0 / b))
        if self.family == "pc_precision":
            sigma0, alpha = self.params
            lam = pc_rate(sigma0, alpha)
            return float((lam / math.log(2.0)) ** 2)
        if self.family == "normal":
            return self.params[0]
        raise ValueError(self.family)

    def to_dict(self) -> dict:
        if self.family == "normal":
            return {"family": "normal", "mean": self.params[0], "variance": self.params[1]}
        if self.family == "loggamma":
            return {"family": "loggamma", "a": self.params[0], "b": self.params[1]}
        return {"family": "pc_precision", "sigma0": self.params[0], "alpha": self.params[1]}

    @classmethod
    def from_dict(cls, rec: dict) -> "PriorSpec":
        fam = rec.get("family")
        if fam == "normal":
            if "precision" in rec:
                return cls.normal(rec.get("mean", 0.0), rec["precision"], scale="precision")
            return cls.normal(rec.get("mean", 0.0), rec.get("variance", 50.0))
        if fam in ("loggamma", "gamma"):
            return cls.loggamma(rec.get("a", 1.0), rec.get("b", 5e-05))
        if fam in ("pc_precision", "pc"):
            return cls.pc_precision(rec["sigma0"], rec["alpha"])
        raise ValueError(f"unknown prior family {fam!r}")

    def __str__(self) -> str:
        if self.family == "normal":
            return f"N({self.params[0]:g}, {self.params[1]:g})"
        if self.family == "loggamma":
            return f"logGamma({self.params[0]:g}, {self.params[1]:g})"
        return f"PC({self.params[0]:g}, {self.params[1]:g})"


def logdensity_normal(x: float, mean: float, variance: float) -> float:
    return -0.5 * math.log(2.0 * math.pi * variance) - (x - mean) ** 2 / (2.0 * variance)


def logdensity_loggamma_precision(tau: float, a: float, b: float) -> float:
    """Gamma(a, rate=b) log density at ``tau``."""
    if tau <= 0:
        return -math.inf
    return a * math.log(b) - float(gammaln(a)) + (a - 1.0) * math.log(tau) - b * tau


def pc_rate(sigma0: float, alpha: float) -> float:
    return -math.log(alpha) / sigma0


def logdensity_pc_precision(tau: float, sigma0: float, alpha: float) -> float:
    if tau <= 0:
        return -math.inf
    lam = pc_rate(sigma0, alpha)
    return math.log(lam / 2.0) - 1.5 * math.log(tau) - lam / math.sqrt(tau)


def validate_prior(spec: PriorSpec) -> list[str]:
    """Parameter range checks; returns a list of violations (empty when valid)."""
    problems: list[str] = []
    if spec.family not in FAMILIES:
        return [f"unknown family {spec.family!r}"]
    vals = spec.params
    if len(vals) != 2 or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
        return ["parameters must be two finite numbers"]
    if spec.family == "normal":
        if vals[1] <= 0:
            problems.append("variance must be positive")
    elif spec.family == "loggamma":
        if vals[0] <= 0:
            problems.append("shape a must be positive")
        if vals[1] <= 0:
            problems.append("rate b must be positive")
    else:
        if vals[0] <= 0:
            problems.append("sigma0 must be positive")
        if not 0.0 < vals[1] < 1.0:
            problems.append("alpha in (0,1)")
    return problems
