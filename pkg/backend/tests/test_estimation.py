import logging

import numpy as np
import pytest
from pydantic import ValidationError

import estimation.sbl as sbl_module
from afdm.core import AfdmConfig
from channel.doubly_selective import (
    ChannelRealization,
    PathTap,
    complex_awgn,
    effective_channel,
    propagate_symbol,
    sample_channel,
)
from estimation.baselines import bcrlb, mmse_equalize, mmse_estimate, omp_estimate
from estimation.dictionary import (
    Dictionary,
    build_dictionary,
    doppler_grid,
    genie_prior_covariance,
    reconstruct_channel,
    true_coefficients,
)
from estimation.sbl import (
    MStepResult,
    SblHyperConfig,
    SblState,
    alpha_update,
    keep_largest,
    lambda_update,
    resolved_atoms,
    sbl_e_step,
    sbl_estimate,
    sbl_m_step,
    solve_nu,
)
from simulation.metrics import nmse
from simulation.pilots import zc_pilot
from utils.errors import DomainError, EstimatorDivergedError, InputShapeError, ParameterError


@pytest.fixture
def observation(integer_dictionary, on_grid_channel, rng):
    """Pilot observation of the on-grid channel at noise variance 1e-3."""
    h_bar = true_coefficients(on_grid_channel, integer_dictionary)
    return integer_dictionary.phi @ h_bar + complex_awgn(rng, 64, 1e-3)


class TestDictionary:
    def test_doppler_grid(self):
        np.testing.assert_allclose(doppler_grid(0.1543, 4), np.linspace(-1.0, 1.0, 9))
        np.testing.assert_allclose(doppler_grid(1.0, 1), [-1.0, 0.0, 1.0])

    def test_atoms_are_delay_major(self, table1_cfg):
        dictionary = build_dictionary(zc_pilot(64), table1_cfg, 2, 0.1543, oversampling=4)
        assert dictionary.phi.shape == (64, 27)
        assert dictionary.atom_matrices.shape == (27, 64, 64)
        assert dictionary.atoms[0] == (0, -1.0)
        assert dictionary.atoms[9] == (1, -1.0)
        assert dictionary.atoms[26] == (2, 1.0)

    def test_integer_grid_columns_are_orthogonal(self, integer_dictionary):
        gram = integer_dictionary.phi.conj().T @ integer_dictionary.phi
        np.testing.assert_allclose(gram, 64 * np.eye(9), atol=1e-9)

    def test_overcomplete_dictionary_warns(self, caplog):
        cfg = AfdmConfig.from_channel_limits(16, max_delay=1, max_doppler=3.0)
        with caplog.at_level(logging.WARNING, logger="estimation.dictionary"):
            dictionary = build_dictionary(zc_pilot(16), cfg, 1, 3.0, oversampling=8)
        assert dictionary.n_atoms == 98
        assert any("atoms" in record.message for record in caplog.records)

    def test_rejects_bad_inputs(self, integer_cfg):
        with pytest.raises(InputShapeError):
            build_dictionary(np.ones(32), integer_cfg, 2, 1.0)
        with pytest.raises(DomainError):
            build_dictionary(np.zeros(64), integer_cfg, 2, 1.0)
        with pytest.raises(DomainError):
            build_dictionary(zc_pilot(64), integer_cfg, 2, 1.0, oversampling=0)

    def test_reconstruction_of_integer_grid_channel(self, integer_dictionary, on_grid_channel):
        coeffs = true_coefficients(on_grid_channel, integer_dictionary)
        assert np.count_nonzero(coeffs) == 3
        np.testing.assert_allclose(
            reconstruct_channel(coeffs, integer_dictionary), effective_channel(on_grid_channel), atol=1e-12
        )

    def test_reconstruction_of_fractional_grid_channel(self, table1_cfg):
        dictionary = build_dictionary(zc_pilot(64), table1_cfg, 2, 0.1543, oversampling=4)
        ch = ChannelRealization(taps=[PathTap(0.7, 0, 0.25), PathTap(-0.5j, 2, -0.5)], cfg=table1_cfg)
        np.testing.assert_allclose(
            reconstruct_channel(true_coefficients(ch, dictionary), dictionary), effective_channel(ch), atol=1e-12
        )

    def test_reconstruction_checks_length(self, integer_dictionary):
        with pytest.raises(InputShapeError):
            reconstruct_channel(np.ones(4), integer_dictionary)

    def test_nearest_atom(self, table1_cfg):
        dictionary = build_dictionary(zc_pilot(64), table1_cfg, 2, 0.1543, oversampling=4)
        assert dictionary.atoms[dictionary.nearest_atom(1, 0.3)] == (1, 0.25)
        with pytest.raises(DomainError):
            dictionary.nearest_atom(5, 0.0)

    def test_genie_prior(self, integer_dictionary, on_grid_channel):
        variances = np.real(np.diag(genie_prior_covariance(on_grid_channel, integer_dictionary)))
        support = np.flatnonzero(true_coefficients(on_grid_channel, integer_dictionary))
        np.testing.assert_allclose(variances[support], 1 / 3)
        assert np.all(variances[np.setdiff1d(np.arange(9), support)] == 1e-12)


class TestSblSteps:
    """Tests for the individual EM steps."""

    def test_e_step_matches_direct_inverse(self, integer_dictionary, observation, rng):
        state = SblState.initial(observation, 9, SblHyperConfig())
        state.alpha = rng.uniform(0.1, 1.0, 9)
        mu, sigma = sbl_e_step(observation, integer_dictionary, state)

        phi = integer_dictionary.phi
        expected_sigma = np.linalg.inv(phi.conj().T @ phi / state.beta + np.diag(1 / state.alpha))
        np.testing.assert_allclose(sigma, expected_sigma, atol=1e-10)
        np.testing.assert_allclose(mu, expected_sigma @ phi.conj().T @ observation / state.beta, atol=1e-8)

    def test_e_step_pins_pruned_atoms(self, integer_dictionary, observation):
        state = SblState.initial(observation, 9, SblHyperConfig())
        state.alpha[0] = 0.0
        mu, sigma = sbl_e_step(observation, integer_dictionary, state)
        assert mu[0] == 0
        assert not np.any(sigma[0]) and not np.any(sigma[:, 0])

        state.alpha[:] = 0.0
        mu, sigma = sbl_e_step(observation, integer_dictionary, state)
        assert not np.any(mu) and not np.any(sigma)

    def test_initial_noise_variance(self, observation):
        state = SblState.initial(observation, 9, SblHyperConfig())
        assert state.beta == pytest.approx(np.var(observation) / 10)
        assert SblState.initial(np.zeros(64), 9, SblHyperConfig()).beta == 1e-12

    def test_initial_noise_variance_from_pilot_snr(self, observation):
        assert SblState.initial(observation, 9, SblHyperConfig(), beta0=0.5).beta == 0.5
        with pytest.raises(ParameterError):
            SblState.initial(observation, 9, SblHyperConfig(), beta0=0.0)

    def test_m_step_flat_prior(self, integer_dictionary, observation):
        hyper = SblHyperConfig(laplace_prior=False)
        state = SblState.initial(observation, 9, hyper)
        state.mu, state.sigma = sbl_e_step(observation, integer_dictionary, state)
        step = sbl_m_step(observation, integer_dictionary, state, hyper)

        np.testing.assert_allclose(step.alpha, np.real(np.diag(state.sigma)) + np.abs(state.mu) ** 2)
        assert (step.lam, step.nu) == (state.lam, state.nu)

        phi = integer_dictionary.phi
        residual = observation - phi @ state.mu
        expected = (1e-4 + np.vdot(residual, residual).real
                    + np.trace(phi @ state.sigma @ phi.conj().T).real) / (64 + 1e-4 + 1)
        assert step.beta == pytest.approx(expected)

    def test_m_step_laplace_prior(self, integer_dictionary, observation):
        hyper = SblHyperConfig()
        state = SblState.initial(observation, 9, hyper)
        state.mu, state.sigma = sbl_e_step(observation, integer_dictionary, state)
        step = sbl_m_step(observation, integer_dictionary, state, hyper)

        s = np.real(np.diag(state.sigma)) + np.abs(state.mu) ** 2
        np.testing.assert_allclose(step.alpha, (np.sqrt(1 + 2 * state.lam * s) - 1) / state.lam)
        resolved = np.sum(1 - np.real(np.diag(state.sigma)) / state.alpha)
        assert step.lam == pytest.approx((resolved + state.nu / 2 - 1) / (step.alpha.sum() / 2 + state.nu / 2))
        assert step.nu_root_found

    def test_alpha_update_solves_complex_quadratic(self):
        s = np.array([0.0, 1e-9, 0.25, 3.0])
        for lam in (1e-8, 0.5, 40.0):
            alpha = alpha_update(s, lam)
            np.testing.assert_allclose(lam / 2 * alpha ** 2 + alpha, s, rtol=1e-10, atol=1e-18)
            assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha_update(s, 1e-12), s, rtol=1e-9)
        assert alpha_update(np.array([0.5]), 1.0)[0] == pytest.approx(np.sqrt(2.0) - 1.0)

    def test_lambda_update(self):
        assert lambda_update(2.0, 1, 2.0) == pytest.approx(0.5)
        assert lambda_update(2.0, 0.2, 2.0) == pytest.approx(0.5)
        assert lambda_update(0.0, 0.0, 1e-6) > 0

    def test_resolved_atoms(self, integer_dictionary, observation):
        state = SblState.initial(observation, 9, SblHyperConfig(), beta0=1e-3)
        state.mu, state.sigma = sbl_e_step(observation, integer_dictionary, state)
        # orthogonal columns of energy 64: gamma_i = 64 / (64 + beta)
        assert resolved_atoms(state) == pytest.approx(9 * 64 / (64 + 1e-3))
        state.alpha[:] = 0.0
        assert resolved_atoms(state) == 0.0

    def test_nu_root(self):
        nu, found = solve_nu(1.0, 1.0)
        assert found
        assert abs(sbl_module._nu_equation(nu, 1.0)) < 1e-6

    def test_nu_kept_without_sign_change(self):
        assert solve_nu(1e7, 3.0) == (3.0, False)

    def test_keep_largest(self):
        kept = keep_largest(np.array([0.1, -3.0, 2.0, 0.5j]), 2)
        np.testing.assert_array_equal(kept, [0, -3.0, 2.0, 0])


class TestSblEstimator:
    """Tests for the full EM loop."""

    def test_recovers_on_grid_channel(self, integer_dictionary, on_grid_channel, observation):
        h_hat, trace = sbl_estimate(observation, integer_dictionary)
        h_est = reconstruct_channel(h_hat, integer_dictionary)
        assert nmse(h_est, effective_channel(on_grid_channel)) < -20.0
        assert 1 <= trace.iterations <= 200

    def test_state_stays_valid(self, integer_dictionary, observation):
        _, trace = sbl_estimate(observation, integer_dictionary)
        for record in trace.records:
            assert record.beta > 0 and record.lam > 0 and record.nu > 0
            assert record.sigma_min_eig > 0

    def test_trace_frame(self, integer_dictionary, observation):
        _, trace = sbl_estimate(observation, integer_dictionary, SblHyperConfig(n_max=5, epsilon=1e-30))
        frame = trace.to_frame()
        assert list(frame.columns) == ["iteration", "mu_norm", "delta_alpha", "beta", "lambda", "nu"]
        assert list(frame["iteration"]) == [1, 2, 3, 4, 5]
        assert not trace.converged
        assert trace.mu_norms.shape == (5,)

    def test_flat_prior_recovers_channel(self, integer_dictionary, on_grid_channel, observation):
        h_hat, _ = sbl_estimate(observation, integer_dictionary, SblHyperConfig(laplace_prior=False))
        h_est = reconstruct_channel(h_hat, integer_dictionary)
        assert nmse(h_est, effective_channel(on_grid_channel)) < -20.0

    def test_low_snr_estimate_keeps_the_paths(self, table1_cfg):
        dictionary = build_dictionary(zc_pilot(64), table1_cfg, 2, 0.1543, oversampling=4)
        rng = np.random.default_rng(7)
        ratios, norms = [], []
        for _ in range(20):
            ch = sample_channel(rng, table1_cfg, 3, 2, 0.1543)
            y = propagate_symbol(zc_pilot(64), ch, 1.0, rng).y
            h_hat, trace = sbl_estimate(y, dictionary, beta0=1.0)
            ratios.append(10 ** (nmse(reconstruct_channel(h_hat, dictionary), effective_channel(ch)) / 10))
            norms.append(np.linalg.norm(h_hat))
            assert trace.records[-1].beta < 1.5

        assert 10 * np.log10(np.mean(ratios)) < -4.0
        assert np.median(norms) > 0.25

    def test_partial_combination_keeps_eta_p_entries(self, integer_dictionary, observation):
        h_hat, _ = sbl_estimate(observation, integer_dictionary, SblHyperConfig(eta=2.0), n_paths=3)
        assert np.count_nonzero(h_hat) <= 6

    def test_partial_combination_bounds(self, integer_dictionary, observation):
        with pytest.raises(ParameterError):
            sbl_estimate(observation, integer_dictionary, SblHyperConfig(eta=4.0), n_paths=3)
        with pytest.raises(ParameterError):
            sbl_estimate(observation, integer_dictionary, SblHyperConfig(eta=2.0))
        with pytest.raises(ValidationError):
            SblHyperConfig(eta=1.0)

    def test_rejects_bad_observations(self, integer_dictionary):
        with pytest.raises(InputShapeError):
            sbl_estimate(np.ones(10), integer_dictionary)
        y = np.ones(64, dtype=complex)
        y[3] = np.nan
        with pytest.raises(DomainError):
            sbl_estimate(y, integer_dictionary)

    def test_non_finite_state_raises_with_snapshot(self, integer_dictionary, observation, monkeypatch):
        def diverging_m_step(y, dictionary, state, hyper=None):
            return MStepResult(np.full(dictionary.n_atoms, np.nan), 1.0, 1.0, 1.0, True)

        monkeypatch.setattr(sbl_module, "sbl_m_step", diverging_m_step)
        with pytest.raises(EstimatorDivergedError) as excinfo:
            sbl_estimate(observation, integer_dictionary)
        assert excinfo.value.iteration == 1
        assert set(excinfo.value.snapshot) == {"alpha", "mu", "beta", "lambda", "nu"}

    def test_factorization_failure_raises(self, integer_dictionary, observation, monkeypatch):
        def failing_factor(*args, **kwargs):
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(sbl_module, "cho_factor", failing_factor)
        with pytest.raises(EstimatorDivergedError):
            sbl_estimate(observation, integer_dictionary)


class TestBaselines:
    def test_omp_recovers_on_grid_channel(self, integer_dictionary, on_grid_channel):
        h_bar = true_coefficients(on_grid_channel, integer_dictionary)
        h_hat = omp_estimate(integer_dictionary.phi @ h_bar, integer_dictionary, 3)
        np.testing.assert_allclose(h_hat, h_bar, atol=1e-10)

    def test_omp_sparsity_bounds(self, integer_dictionary, observation):
        with pytest.raises(DomainError):
            omp_estimate(observation, integer_dictionary, 0)
        with pytest.raises(DomainError):
            omp_estimate(observation, integer_dictionary, 10)

    def test_omp_stops_on_rank_deficiency(self):
        v = np.array([1.0, 0, 0, 0], dtype=complex)
        w = np.array([0, 1.0, 0, 0], dtype=complex)
        dictionary = Dictionary(phi=np.column_stack([v, v, w]), atoms=[(0, 0.0), (0, 0.0), (1, 0.0)],
                                atom_matrices=np.zeros((3, 4, 4), dtype=complex))
        np.testing.assert_allclose(omp_estimate(v, dictionary, 3), [1.0, 0, 0])

    def test_mmse_closed_form(self, integer_dictionary, observation):
        phi = integer_dictionary.phi
        h_hat = mmse_estimate(observation, integer_dictionary, np.eye(9), 1e-3 * np.eye(64))
        expected = np.linalg.solve(phi.conj().T @ phi + 1e-3 * np.eye(9), phi.conj().T @ observation)
        np.testing.assert_allclose(h_hat, expected, atol=1e-10)

    def test_bcrlb_trace(self, integer_dictionary):
        phi = integer_dictionary.phi
        r_h = np.eye(9) / 3
        bound = bcrlb(integer_dictionary, r_h, 1e-2 * np.eye(64))
        expected = np.trace(phi @ np.linalg.inv(phi.conj().T @ phi / 1e-2 + 3 * np.eye(9)) @ phi.conj().T).real
        assert bound == pytest.approx(expected)
        assert bcrlb(integer_dictionary, r_h, 1e-4 * np.eye(64)) < bound

    def test_mmse_equalizer(self, rng):
        y = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        np.testing.assert_allclose(mmse_equalize(y, np.eye(8), 0.0), y)
        with pytest.raises(InputShapeError):
            mmse_equalize(y, np.ones((8, 4)), 0.1)
