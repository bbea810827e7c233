import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from netme.gmrf import icar_structure
from netme.model import (
    Dataset,
    LatentState,
    ModelError,
    ModelSpec,
    default_priors,
    dummy_code,
    error_logdensity,
    exposure_logdensity,
    joint_logposterior,
    linear_predictor,
    loglik_poisson,
    logposterior_components,
    standardize,
)
from netme.priors import PriorSpec
from netme.sim import make_path_lattice


def _data(n=10, p=2, q=1, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(y=rng.poisson(2.0, n), e=rng.uniform(0.5, 2.0, n), w=rng.standard_normal(n),
                   Z=rng.standard_normal((n, p)), Ztilde=rng.standard_normal((n, q)))


def _state(data, spec, S, seed=1):
    rng = np.random.default_rng(seed)
    st_ = LatentState.zeros(data, spec)
    st_.beta = 0.3 * rng.standard_normal(st_.beta.size)
    st_.theta = S.center(0.5 * rng.standard_normal(data.n))
    st_.tau_theta = 1.7
    if spec.is_me:
        st_.alpha = rng.standard_normal(st_.alpha.size)
        st_.x = rng.standard_normal(data.n)
        st_.tau_eps, st_.tau_u = 2.2, 0.8
    if spec.is_spatial_me:
        st_.phi = S.center(rng.standard_normal(data.n))
        st_.tau_phi = 1.3
    return st_


def _independent_logpost(st_, data, spec, S):
    """Single-expression reimplementation with scipy densities."""
    K = S.K.toarray()
    w_eig = np.linalg.eigvalsh(K)
    pos = w_eig[w_eig > 1e-9]
    r = pos.size

    def icar(v, tau):
        return 0.5 * r * math.log(tau) + 0.5 * np.sum(np.log(pos)) - 0.5 * tau * v @ K @ v - 0.5 * r * math.log(2 * math.pi)

    cov = data.w if spec.variant == "baseline" else st_.x
    eta = st_.beta[0] + st_.beta[1] * cov + data.Z @ st_.beta[2:] + st_.theta
    total = np.sum(stats.poisson.logpmf(data.y, data.e * np.exp(eta)))
    total += icar(st_.theta, st_.tau_theta)
    total += np.sum(stats.norm.logpdf(st_.beta, 0, math.sqrt(50)))
    total += stats.gamma.logpdf(st_.tau_theta, 1.0, scale=1 / 5e-5)
    if spec.is_me:
        mu = st_.alpha[0] + data.Ztilde @ st_.alpha[1:]
        total += np.sum(stats.norm.logpdf(st_.x, mu, 1 / math.sqrt(st_.tau_eps)))
        wm = st_.x + (st_.phi if spec.is_spatial_me else 0.0)
        total += np.sum(stats.norm.logpdf(data.w, wm, 1 / math.sqrt(st_.tau_u)))
        total += np.sum(stats.norm.logpdf(st_.alpha, 0, math.sqrt(50)))
        for tau, s0 in ((st_.tau_eps, 1.0), (st_.tau_u, 2.0)):
            lam = -math.log(0.1) / s0
            total += math.log(lam / 2) - 1.5 * math.log(tau) - lam / math.sqrt(tau)
    if spec.is_spatial_me:
        total += icar(st_.phi, st_.tau_phi)
        total += stats.gamma.logpdf(st_.tau_phi, 1.0, scale=1 / 5e-5)
    return float(total)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ModelError, match="nonnegative"):
            Dataset(y=[-1, 2], e=[1, 1], w=[0, 0], Z=np.zeros((2, 0)), Ztilde=np.zeros((2, 0)))
        with pytest.raises(ModelError, match="positive"):
            Dataset(y=[1, 2], e=[0, 1], w=[0, 0], Z=np.zeros((2, 0)), Ztilde=np.zeros((2, 0)))
        with pytest.raises(ModelError, match="non-finite"):
            Dataset(y=[1, 2], e=[1, 1], w=[0, np.nan], Z=np.zeros((2, 0)), Ztilde=np.zeros((2, 0)))

    def test_standardization_checked(self):
        std = {"z1": {"kind": "numeric", "mean": 0, "sd": 1}}
        with pytest.raises(ModelError, match="standardized"):
            Dataset(y=[1, 2, 3], e=[1, 1, 1], w=[0, 0, 0], Z=np.array([[1.0], [2.0], [3.0]]),
                    Ztilde=np.zeros((3, 0)), standardization=std)
        z, m, s = standardize([1.0, 2.0, 3.0])
        Dataset(y=[1, 2, 3], e=[1, 1, 1], w=[0, 0, 0], Z=z[:, None], Ztilde=np.zeros((3, 0)), standardization=std)
        assert (m, s) == (2.0, 1.0)

    def test_dummy_checked(self):
        std = {"z1": {"kind": "dummy"}}
        with pytest.raises(ModelError, match="0/1"):
            Dataset(y=[1, 2], e=[1, 1], w=[0, 0], Z=np.array([[0.5], [1.0]]), Ztilde=np.zeros((2, 0)),
                    standardization=std)

    def test_standardize_constant(self):
        with pytest.raises(ModelError):
            standardize([2.0, 2.0])

    def test_dummy_reference_is_smallest_class(self):
        M, levels = dummy_code(["3", "0", "10", "2", "0"])
        assert levels == ["2", "3", "10"]
        assert M.tolist() == [[0, 1, 0], [0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 0]]

    def test_digest_stable(self):
        assert _data().digest() == _data().digest()
        assert _data(seed=1).digest() != _data().digest()


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec("spatial_me")
        assert spec.priors["tau_eps"] == PriorSpec.pc_precision(1.0, 0.1)
        assert spec.priors["tau_u"] == PriorSpec.pc_precision(2.0, 0.1)
        assert spec.priors["tau_theta"] == PriorSpec.loggamma(1.0, 5e-5)
        assert spec.prior_for("beta[speed]") == PriorSpec.normal(0, 50)

    def test_missing_prior(self):
        pri = default_priors("classical_me")
        del pri["tau_u"]
        with pytest.raises(ModelError, match="tau_u"):
            ModelSpec("classical_me", priors=pri)

    def test_extra_spatial_prior_rejected(self):
        pri = default_priors("baseline")
        pri["tau_phi"] = PriorSpec.loggamma(1, 5e-5)
        with pytest.raises(ModelError):
            ModelSpec("baseline", priors=pri)

    def test_precision_family_on_coefficient_rejected(self):
        pri = default_priors("baseline")
        pri["beta_x"] = PriorSpec.pc_precision(1, 0.1)
        with pytest.raises(ModelError):
            ModelSpec("baseline", priors=pri)

    def test_unknown_variant(self):
        with pytest.raises(ModelError):
            ModelSpec("berkson")


class TestLinearPredictor:
    def test_zero_state(self):
        d = _data()
        st_ = LatentState.zeros(d, ModelSpec("baseline"))
        assert np.array_equal(linear_predictor(st_, d, "baseline"), np.zeros(d.n))

    def test_intercept_only(self):
        d = _data()
        st_ = LatentState.zeros(d, ModelSpec("baseline"))
        st_.beta[0] = 1.0
        assert np.allclose(linear_predictor(st_, d, "baseline"), 1.0)

    def test_dense_oracle(self):
        d = _data(n=20)
        S = icar_structure(make_path_lattice(20))
        for variant in ("baseline", "classical_me"):
            spec = ModelSpec(variant)
            st_ = _state(d, spec, S)
            cov = d.w if variant == "baseline" else st_.x
            X = np.column_stack([np.ones(20), cov, d.Z])
            assert np.allclose(linear_predictor(st_, d, variant), X @ st_.beta + st_.theta, atol=1e-12)

    def test_nonfinite_named(self):
        d = _data()
        st_ = LatentState.zeros(d, ModelSpec("baseline"))
        st_.theta[3] = np.inf
        with pytest.raises(ModelError, match="index 3"):
            linear_predictor(st_, d, "baseline")


class TestLikelihoods:
    def test_poisson_trivial(self):
        assert loglik_poisson([0], [1.0], [0.0]) == pytest.approx(-1.0)
        assert loglik_poisson([2], [1.0], [0.0]) == pytest.approx(-1.0 - math.log(2))

    def test_poisson_pmf_oracle(self):
        rng = np.random.default_rng(2)
        y = rng.poisson(3, 30)
        e = rng.uniform(0.2, 3, 30)
        eta = rng.normal(0, 1, 30)
        assert loglik_poisson(y, e, eta) == pytest.approx(np.sum(stats.poisson.logpmf(y, e * np.exp(eta))), rel=1e-12)

    def test_overflow_guard(self):
        with pytest.raises(FloatingPointError, match="index 1"):
            loglik_poisson([0, 1], [1.0, 1.0], [0.0, 51.0])

    def test_exposure_and_error(self):
        d = _data()
        spec = ModelSpec("spatial_me")
        S = icar_structure(make_path_lattice(10))
        st_ = _state(d, spec, S)
        mu = st_.alpha[0] + d.Ztilde @ st_.alpha[1:]
        st_.x = mu.copy()
        assert exposure_logdensity(st_, d) == pytest.approx(5 * math.log(st_.tau_eps / (2 * math.pi)))
        st_.x[4] += 1 / math.sqrt(st_.tau_eps)
        assert exposure_logdensity(st_, d) == pytest.approx(5 * math.log(st_.tau_eps / (2 * math.pi)) - 0.5)
        d.w = st_.x.copy()
        assert error_logdensity(st_, d, "classical_me") == pytest.approx(5 * math.log(st_.tau_u / (2 * math.pi)))
        d.w = st_.x + st_.phi
        assert error_logdensity(st_, d, "spatial_me") == pytest.approx(5 * math.log(st_.tau_u / (2 * math.pi)))


class TestDenseGaussianOracles:
    def test_exposure_and_error_random(self):
        d = _data(n=12, seed=3)
        S = icar_structure(make_path_lattice(12))
        for variant in ("classical_me", "spatial_me"):
            spec = ModelSpec(variant)
            st_ = _state(d, spec, S, seed=4)
            mu = st_.alpha[0] + d.Ztilde @ st_.alpha[1:]
            want_x = stats.multivariate_normal.logpdf(st_.x, mu, np.eye(12) / st_.tau_eps)
            assert exposure_logdensity(st_, d) == pytest.approx(want_x, rel=1e-12)
            wm = st_.x + (st_.phi if variant == "spatial_me" else 0.0)
            want_w = stats.multivariate_normal.logpdf(d.w, wm, np.eye(12) / st_.tau_u)
            assert error_logdensity(st_, d, variant) == pytest.approx(want_w, rel=1e-12)


class TestJointLogposterior:
    def test_zero_state_by_hand(self):
        # path-3 Laplacian has eigenvalues 0, 1, 3
        d = Dataset(y=[0, 2, 1], e=[1.0, 1.0, 1.0], w=[0.0, 0.0, 0.0], Z=np.array([[0.5], [-1.0], [0.5]]),
                    Ztilde=np.zeros((3, 0)))
        S = icar_structure(make_path_lattice(3))
        spec = ModelSpec("baseline")
        st_ = LatentState.zeros(d, spec)
        outcome = -3.0 - math.log(2)
        theta_prior = 0.5 * math.log(3) - math.log(2 * math.pi)
        beta_prior = -1.5 * math.log(2 * math.pi * 50)
        tau_prior = math.log(5e-5) - 5e-5
        comp = logposterior_components(st_, d, spec, S)
        assert comp["outcome"] == pytest.approx(outcome, rel=1e-14)
        assert comp["theta_prior"] == pytest.approx(theta_prior, rel=1e-12)
        assert joint_logposterior(st_, d, spec, S) == pytest.approx(outcome + theta_prior + beta_prior + tau_prior,
                                                                     rel=1e-12)

    @pytest.mark.parametrize("variant", ["baseline", "classical_me", "spatial_me"])
    def test_independent_oracle(self, variant):
        d = _data()
        S = icar_structure(make_path_lattice(10))
        spec = ModelSpec(variant)
        st_ = _state(d, spec, S)
        assert joint_logposterior(st_, d, spec, S) == pytest.approx(_independent_logpost(st_, d, spec, S),
                                                                     rel=1e-10, abs=1e-10)

    def test_additivity(self):
        d = _data()
        S = icar_structure(make_path_lattice(10))
        spec = ModelSpec("spatial_me")
        st_ = _state(d, spec, S)
        comp = logposterior_components(st_, d, spec, S)
        assert joint_logposterior(st_, d, spec, S) == pytest.approx(sum(comp.values()), rel=1e-14)
        assert set(comp) >= {"outcome", "exposure", "error", "theta_prior", "phi_prior", "tau_phi_prior"}

    def test_no_data_reduces_to_priors(self):
        d = Dataset(y=np.zeros(0, int), e=np.ones(0), w=np.zeros(0), Z=np.zeros((0, 1)), Ztilde=np.zeros((0, 0)))
        spec = ModelSpec("baseline", include_spatial_theta=False)
        st_ = LatentState(beta=np.array([0.5, -0.2, 0.1]), theta=np.zeros(0))
        want = sum(stats.norm.logpdf(v, 0, math.sqrt(50)) for v in st_.beta)
        assert joint_logposterior(st_, d, spec, None) == pytest.approx(want, rel=1e-12)

    def test_baseline_ignores_me_blocks(self):
        d = _data()
        S = icar_structure(make_path_lattice(10))
        spec = ModelSpec("baseline")
        st_ = _state(d, spec, S)
        ref = joint_logposterior(st_, d, spec, S)
        st_.x = np.ones(10)
        st_.alpha = np.ones(2)
        st_.tau_eps = st_.tau_u = st_.tau_phi = 9.0
        assert joint_logposterior(st_, d, spec, S) == ref

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_poisson_term_free_of_x_when_slope_zero(self, seed):
        d = _data(seed=seed % 7)
        S = icar_structure(make_path_lattice(10))
        spec = ModelSpec("classical_me")
        st_ = _state(d, spec, S, seed=seed)
        st_.beta[1] = 0.0
        a = logposterior_components(st_, d, spec, S)["outcome"]
        st_.x = st_.x + np.random.default_rng(seed).standard_normal(10)
        assert logposterior_components(st_, d, spec, S)["outcome"] == pytest.approx(a, rel=1e-13)

    def test_nonfinite_component_named(self):
        d = _data()
        S = icar_structure(make_path_lattice(10))
        spec = ModelSpec("classical_me")
        st_ = _state(d, spec, S)
        st_.tau_u = -1.0
        with np.errstate(invalid="ignore"), pytest.raises(ModelError, match="tau_u_prior|error"):
            joint_logposterior(st_, d, spec, S)
