"""Synthetic lattices, forward simulation and replication experiments."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .gmrf import icar_structure, sample_constrained
from .lattice import Segment, SegmentNetwork
from .model import Dataset, LatentState, ModelError, ModelSpec, default_priors

GENERATING_VARIANTS = ("baseline", "classical_me", "spatial_me")


def _pseudo_segments(coords) -> list[Segment]:
    # unit-length stubs that never touch each other; adjacency is given explicitly
    return [Segment(f"s{k}", [(3.0 * cx, 3.0 * cy), (3.0 * cx + 1.0, 3.0 * cy)])
            for k, (cx, cy) in enumerate(coords)]


def make_grid_lattice(rows: int, cols: int) -> SegmentNetwork:
    """Rook-adjacency grid of unit-length pseudo-segments (row-major order)."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    coords = [(c, r) for r in range(rows) for c in range(cols)]
    return SegmentNetwork.from_edges(_pseudo_segments(coords), np.vstack([horiz, vert]))


def make_path_lattice(n: int) -> SegmentNetwork:
    if n < 2:
        raise ValueError("path needs at least 2 sites")
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return SegmentNetwork.from_edges(_pseudo_segments([(k, 0) for k in range(n)]), edges)


@dataclass
class SimScenario:
    lattice: str = "grid"  # grid | path | file (network supplied by the caller)
    rows: int = 20
    cols: int = 20
    path_n: int = 100
    variant: str = "classical_me"
    beta0: float = 2.5
    beta_x: float = 1.0
    beta_z: tuple = (0.3,)
    alpha0: float = 0.0
    alpha: tuple = (0.8,)
    tau_theta: float = 4.0
    tau_eps: float = 1.0 / 0.36
    tau_u: float = 1.0
    tau_phi: float = 1.0
    include_theta: bool = True
    offsets: str = "lognormal"  # lognormal | constant
    offset_log_mean: float = math.log(67.5)
    offset_log_sd: float = 1.0
    offset_constant: float = 67.5
    offset_scale: float = 1e-3  # metres to kilometres
    seed: int = 1

    def __post_init__(self):
        if self.variant not in GENERATING_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for nm in ("tau_theta", "tau_eps", "tau_u", "tau_phi"):
            if not getattr(self, nm) > 0:
                raise ValueError(f"{nm} must be positive")
        if self.lattice not in ("grid", "path", "file"):
            raise ValueError(f"unknown lattice {self.lattice!r}")
        if self.offsets not in ("lognormal", "constant"):
            raise ValueError(f"unknown offsets policy {self.offsets!r}")
        self.beta_z = tuple(float(v) for v in self.beta_z)
        self.alpha = tuple(float(v) for v in self.alpha)

    def network(self) -> SegmentNetwork:
        if self.lattice == "grid":
            return make_grid_lattice(self.rows, self.cols)
        if self.lattice == "path":
            return make_path_lattice(self.path_n)
        raise ValueError("file lattices must be passed to simulate_dataset explicitly")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "SimScenario":
        return cls(**rec)


def _standardized_normals(rng, n: int, k: int) -> np.ndarray:
    M = rng.standard_normal((n, k))
    if k:
        M = (M - M.mean(axis=0)) / M.std(axis=0, ddof=1)
    return M


def simulate_dataset(scenario: SimScenario, network: SegmentNetwork | None = None):
    """Forward-simulate one dataset; returns ``(Dataset, truth LatentState, network)``.

    The proxy ``w`` stays on its generating scale so that the true slope and
    the attenuation factor keep their textbook meaning.
    """
    net = network if network is not None else scenario.network()
    if net.n_components != 1:
        raise ValueError("simulation lattice must be connected")
    icar = icar_structure(net)
    rng = np.random.default_rng(scenario.seed)
    n = net.n
    p, q = len(scenario.beta_z), len(scenario.alpha)
    Z = _standardized_normals(rng, n, p)
    Zt = _standardized_normals(rng, n, q)
    theta = sample_constrained(icar, scenario.tau_theta, rng) if scenario.include_theta else np.zeros(n)
    mu = scenario.alpha0 + Zt @ np.asarray(scenario.alpha)
    x = mu + rng.standard_normal(n) / math.sqrt(scenario.tau_eps)
    phi = None
    if scenario.variant == "baseline":
        w = x.copy()
    else:
        w = x + rng.standard_normal(n) / math.sqrt(scenario.tau_u)
        if scenario.variant == "spatial_me":
            phi = sample_constrained(icar, scenario.tau_phi, rng)
            w = w + phi
    if scenario.offsets == "lognormal":
        e = np.exp(scenario.offset_log_mean + scenario.offset_log_sd * rng.standard_normal(n))
    else:
        e = np.full(n, scenario.offset_constant)
    e = e * scenario.offset_scale
    eta = scenario.beta0 + scenario.beta_x * x + Z @ np.asarray(scenario.beta_z) + theta
    if np.max(np.abs(eta)) > 50:
        raise ModelError("simulated log rate exceeds 50; use smaller coefficients")
    y = rng.poisson(e * np.exp(eta))
    std = {f"z{j + 1}": {"kind": "numeric", "mean": 0.0, "sd": 1.0} for j in range(p)}
    std.update({f"ztilde{j + 1}": {"kind": "numeric", "mean": 0.0, "sd": 1.0} for j in range(q)})
    std["w"] = {"kind": "raw", "mean": 0.0, "sd": 1.0}
    data = Dataset(y=y, e=e, w=w, Z=Z, Ztilde=Zt, standardization=std, segment_ids=net.ids)
    truth = LatentState(
        beta=np.r_[scenario.beta0, scenario.beta_x, scenario.beta_z],
        theta=theta,
        alpha=np.r_[scenario.alpha0, scenario.alpha],
        x=x,
        phi=phi,
        tau_theta=scenario.tau_theta if scenario.include_theta else None,
        tau_eps=scenario.tau_eps,
        tau_u=scenario.tau_u,
        tau_phi=scenario.tau_phi if scenario.variant == "spatial_me" else None,
    )
    return data, truth, net


def truth_for(truth: LatentState, variant: str, include_theta: bool = True) -> LatentState:
    """Restrict a generating state to the blocks a fitted variant has."""
    st = truth.copy()
    if variant == "baseline":
        st.alpha = st.x = st.phi = None
        st.tau_eps = st.tau_u = st.tau_phi = None
    elif variant == "classical_me":
        st.phi = None
        st.tau_phi = None
    elif st.phi is None:
        raise ValueError("truth has no phi field")
    if not include_theta:
        st.tau_theta = None
    return st


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ModelFit:
    variant: str
    beta_x_mean: float
    beta_x_sd: float
    beta_x_low: float
    beta_x_high: float
    covers_truth: bool
    dic: float
    p_d: float
    waic: float
    p_waic: float
    accept: dict = field(default_factory=dict)


def fit_variant(data: Dataset, icar, variant: str, config, truth_beta_x: float,
                level: float = 0.9, criteria_blocks: str = "outcome", priors: dict | None = None) -> ModelFit:
    from .inference import run_mcmc
    from .selection import dic, waic

    spec = ModelSpec(variant=variant, priors=priors or default_priors(variant))
    samples = run_mcmc(data, spec, icar, config)
    bx = samples.flat("beta_x")
    lo, hi = np.quantile(bx, [(1 - level) / 2, (1 + level) / 2])
    d = dic(samples, data, spec, blocks=criteria_blocks)
    wv = waic(samples, data, spec, blocks=criteria_blocks)
    rates = {k: float(np.mean([a.get(k, np.nan) for a in samples.acceptance])) for k in samples.acceptance[0]}
    return ModelFit(variant, float(bx.mean()), float(bx.std(ddof=1)), float(lo), float(hi),
                    bool(lo <= truth_beta_x <= hi), d.dic, d.p_d, wv.waic, wv.p_waic, rates)


def attenuation_experiment(scenario: SimScenario, config, models=("baseline", "classical_me", "spatial_me"),
                           level: float = 0.9, criteria_blocks: str = "outcome") -> dict:
    """Fit each model to one simulated dataset and report slope recovery."""
    if scenario.variant == "baseline":
        raise ValueError("attenuation needs a scenario with measurement error")
    data, truth, net = simulate_dataset(scenario)
    icar = icar_structure(net)
    fits = [fit_variant(data, icar, m, config, scenario.beta_x, level, criteria_blocks) for m in models]
    sd_w = float(np.std(data.w, ddof=1))
    var_x = float(np.var(truth.x, ddof=1))
    return {
        "seed": scenario.seed,
        "data_digest": data.digest(),
        "empirical_attenuation_factor": var_x / sd_w**2,
        "fits": {f.variant: asdict(f) for f in fits},
    }


def model_selection_experiment(scenario: SimScenario, config, criteria_blocks: str = "outcome") -> dict:
    """Fit classical and spatial ME to data generated with phi; report which each criterion prefers."""
    if scenario.variant != "spatial_me":
        raise ValueError("model selection scenario must generate a spatial error field")
    rep = attenuation_experiment(scenario, config, ("classical_me", "spatial_me"), criteria_blocks=criteria_blocks)
    f = rep["fits"]
    rep["dic_prefers_spatial"] = f["spatial_me"]["dic"] < f["classical_me"]["dic"]
    rep["waic_prefers_spatial"] = f["spatial_me"]["waic"] < f["classical_me"]["waic"]
    return rep


def _one(args):
    fn, scenario, config, kwargs = args
    return fn(scenario, config, **kwargs)


def replicate(experiment, scenario: SimScenario, config, n_reps: int, workers: int = 1, **kwargs) -> list:
    """Run ``experiment`` on ``n_reps`` scenarios with seeds derived from ``scenario.seed``."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(scenario.seed).spawn(n_reps)]
    jobs = [(experiment, replace(scenario, seed=s), config, kwargs) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, jobs))
    return [_one(j) for j in jobs]
