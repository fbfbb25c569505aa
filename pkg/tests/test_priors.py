import math

import numpy as np
import pytest
from scipy.integrate import quad

from carscale.graphs import isolate_nodes, read_graph
from carscale.priors import (
    Bym2Spec,
    PcPriorSpec,
    PhiPrior,
    PriorError,
    bym2_covariance,
    gamma_prior_logpdf,
    pc_prior_phi_logpdf,
    pc_prior_precision_logpdf,
    _distance,
)
from carscale.scaling import component_pseudoinverse, scale_model


@pytest.fixture(scope="module")
def scotland_islands_model(scotland_graph_path):
    g = isolate_nodes(read_graph(scotland_graph_path), [5, 7, 10])
    return scale_model(g)


class TestPrecisionPrior:
    def test_normalized(self):
        spec = PcPriorSpec(u=1.0, tail_prob=0.01)
        total, _ = quad(lambda t: math.exp(pc_prior_precision_logpdf(t, spec)), 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_tail_identity(self):
        spec = PcPriorSpec(u=0.1 / 0.31, tail_prob=0.05)
        # P(sigma > u) = P(tau < u^-2)
        mass, _ = quad(lambda t: math.exp(pc_prior_precision_logpdf(t, spec)), 0, spec.u**-2)
        assert mass == pytest.approx(0.05, abs=1e-6)

    def test_tail_identity_on_grid(self):
        for u in (0.05, 0.31, 1.0, 3.0):
            for alpha in (0.01, 0.2, 0.7):
                spec = PcPriorSpec(u=u, tail_prob=alpha)
                lam = -math.log(alpha) / u
                # closed-form CDF of the induced distribution at u^-2
                assert math.exp(-lam * u) == pytest.approx(alpha, rel=1e-12)
                mass, _ = quad(
                    lambda t: math.exp(pc_prior_precision_logpdf(t, spec)), 0, spec.u**-2
                )
                assert mass == pytest.approx(alpha, abs=1e-6)

    def test_rate_doubles_when_tail_prob_squared(self):
        u = 0.8
        a = PcPriorSpec(u=u, tail_prob=0.3)
        b = PcPriorSpec(u=u, tail_prob=0.09)
        lam = -math.log(0.3) / u
        for tau in (0.2, 1.0, 9.0):
            diff = pc_prior_precision_logpdf(tau, b) - pc_prior_precision_logpdf(tau, a)
            assert diff == pytest.approx(math.log(2.0) - lam / math.sqrt(tau), rel=1e-12)

    def test_domain_errors(self):
        spec = PcPriorSpec(u=1.0, tail_prob=0.5)
        with pytest.raises(ValueError):
            pc_prior_precision_logpdf(0.0, spec)
        with pytest.raises(PriorError):
            PcPriorSpec(u=-1.0, tail_prob=0.5)
        with pytest.raises(PriorError):
            PcPriorSpec(u=1.0, tail_prob=1.0)


class TestGammaPrior:
    def test_exponential_at_origin(self):
        # shape 1, rate 1 is a unit exponential: density 1 at the origin
        assert gamma_prior_logpdf(1e-12, 1.0, 1.0) == pytest.approx(0.0, abs=1e-10)

    def test_mean_by_quadrature(self):
        shape, rate = 1.0, 5e-5
        hi = 60.0 / rate  # mass beyond is ~exp(-60)
        mean, _ = quad(
            lambda k: k * math.exp(gamma_prior_logpdf(k, shape, rate)),
            0,
            hi,
            limit=300,
        )
        assert mean == pytest.approx(2.0e4, rel=1e-6)

    def test_normalized(self):
        total, _ = quad(lambda k: math.exp(gamma_prior_logpdf(k, 2.0, 3.0)), 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            gamma_prior_logpdf(1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            gamma_prior_logpdf(-1.0, 1.0, 1.0)


class TestBym2Spec:
    def test_unit_geometric_means(self, fig1, fig2, scotland_islands_model):
        for model in (scale_model(fig1), scale_model(fig2), scotland_islands_model):
            spec = Bym2Spec.from_model(model)
            part = model.partition
            for k in range(part.n_components):
                idx = part.members[k]
                gm = np.exp(np.mean(np.log(spec.gen_inv_diag[idx])))
                assert gm == pytest.approx(1.0, abs=1e-8)

    def test_singleton_diag_is_one(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        assert spec.gen_inv_diag[5] == 1.0
        np.testing.assert_array_equal(spec.eigenvalues[2], [1.0])

    def test_covariance_endpoints(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        np.testing.assert_array_equal(bym2_covariance(0.0, 2.0, spec), np.eye(6) / 2.0)
        np.testing.assert_array_equal(bym2_covariance(1.0, 1.0, spec), spec.gen_inverse)

    def test_covariance_midpoint_against_pseudoinverse_oracle(self, fig2):
        model = scale_model(fig2)
        spec = Bym2Spec.from_model(model)
        got = bym2_covariance(0.5, 1.0, spec)[:3, :3]
        block = model.scaled_R.to_dense()[:3, :3]
        oracle = 0.5 * np.eye(3) + 0.5 * component_pseudoinverse(block)
        np.testing.assert_allclose(got, oracle, atol=1e-12)

    def test_covariance_validation(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        with pytest.raises(ValueError):
            bym2_covariance(-0.1, 1.0, spec)
        with pytest.raises(ValueError):
            bym2_covariance(0.5, 0.0, spec)


class TestPhiPrior:
    def test_distance_zero_at_base_model(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        assert _distance(0.0, spec._gamma_flat) == 0.0

    def test_kld_non_negative(self, fig1, fig2):
        for g in (fig1, fig2):
            spec = Bym2Spec.from_model(scale_model(g))
            d = _distance(np.linspace(0, 1, 200), spec._gamma_flat)
            assert np.all(d >= 0.0)
            # monotonicity is graph-dependent: report, do not assert
            if not np.all(np.diff(d) >= -1e-12):
                print(f"note: non-monotone distance on graph with n={g.n}")

    def test_integrates_to_one(self, fig2):
        prior = PhiPrior(Bym2Spec.from_model(scale_model(fig2)), PcPriorSpec(0.5, 0.5))
        total, _ = quad(lambda p: math.exp(prior.logpdf(p)), 1e-12, 1 - 1e-12, limit=200)
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_default_median_on_islands_graph(self, scotland_islands_model):
        prior = PhiPrior(Bym2Spec.from_model(scotland_islands_model), PcPriorSpec(0.5, 0.5))
        below, _ = quad(lambda p: math.exp(prior.logpdf(p)), 1e-12, 0.5, limit=200)
        assert below == pytest.approx(0.5, abs=1e-4)

    def test_informative_choice(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        prior = PhiPrior(spec, PcPriorSpec(0.5, 0.9))
        below, _ = quad(lambda p: math.exp(prior.logpdf(p)), 1e-12, 0.5, limit=200)
        assert below == pytest.approx(0.9, abs=1e-4)
        assert prior.lam > 0  # strong downweighting of the structured effect

    def test_cached_module_function(self, fig2):
        spec = Bym2Spec.from_model(scale_model(fig2))
        a = pc_prior_phi_logpdf(0.3, PcPriorSpec(0.5, 0.5), spec)
        b = pc_prior_phi_logpdf(0.3, PcPriorSpec(0.5, 0.5), spec)
        assert a == b
        assert len(spec._phi_cache) == 1

    def test_finite_on_open_domain(self, fig2):
        prior = PhiPrior(Bym2Spec.from_model(scale_model(fig2)), PcPriorSpec(0.5, 0.5))
        grid = np.linspace(1e-6, 1 - 1e-6, 101)
        assert np.all(np.isfinite(prior.logpdf(grid)))

    def test_boundary_rejected(self, fig2):
        prior = PhiPrior(Bym2Spec.from_model(scale_model(fig2)), PcPriorSpec(0.5, 0.5))
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError):
                prior.logpdf(bad)
