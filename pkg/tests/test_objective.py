import numpy as np
import pytest

from msir.core import HyperParams, PairParams, SourceDataset, seeded_rng
from msir.objective import evaluate, source_loss
from msir.solver import init_params

from conftest import central_fd, make_dataset, rel_err


def exact_bundle(rng, t=2, r=2, d=3, p=3, q=4, n=8):
    """Noiseless bundle generated from known PairParams."""
    params = init_params(t, r, d, p, q, 1.0, rng)
    bundle = []
    for t_i in range(t):
        z = rng.normal(size=(n, d))
        x = rng.normal(size=(n, p, q))
        c = np.tensordot(params.weights[t_i], params.components, axes=1)
        y = z @ params.betas[t_i] + x.reshape(n, -1) @ c.reshape(-1)
        bundle.append(SourceDataset(y=y, z=z, x=x, source_id=f"s{t_i}"))
    return bundle, params


def sample_away_from_kinks(rng, t, r, d, p, q, tau, margin=1e-3):
    """Random parameters whose penalty terms are differentiable with margin."""
    while True:
        params = init_params(t, r, d, p, q, 1.0, rng)
        w = params.weights
        scaled = np.abs(w) / tau
        sat = np.minimum(scaled, 1.0).sum(axis=0)
        if np.abs(w).min() < margin or np.abs(np.abs(w) - tau).min() < margin:
            continue
        if np.abs(sat - 1.0).min() < margin or np.abs(sat - 2.0).min() < margin:
            continue
        diffs_ok = all(
            np.abs(np.diff(b, axis=0)).min() > margin
            and np.abs(np.diff(b, axis=1)).min() > margin
            for b in params.components
        )
        if diffs_ok:
            return params


class TestSourceLoss:
    def test_perfect_fit_is_zero(self, rng):
        ds, beta, c = make_dataset(rng, n=10, d=3, p=3, q=3)
        assert source_loss(ds, beta, c) == pytest.approx(0.0, abs=1e-20)

    def test_null_model(self, rng):
        ds, _, _ = make_dataset(rng, n=10, d=3, p=3, q=3)
        expected = float((ds.y ** 2).sum()) / (2 * ds.n)
        assert source_loss(ds, np.zeros(3), np.zeros((3, 3))) == pytest.approx(expected)

    def test_matches_scalar_loop(self, rng):
        ds, _, _ = make_dataset(rng, n=5, d=2, p=3, q=3, noise_sd=1.0)
        beta = rng.normal(size=2)
        c = rng.normal(size=(3, 3))
        total = 0.0
        for i in range(ds.n):
            pred = float(ds.z[i] @ beta) + float((ds.x[i] * c).sum())
            total += (ds.y[i] - pred) ** 2
        assert source_loss(ds, beta, c) == pytest.approx(total / (2 * ds.n), rel=1e-12)

    def test_rejects_bad_shapes(self, rng):
        ds, beta, c = make_dataset(rng, n=4, d=2, p=3, q=3)
        with pytest.raises(ValueError):
            source_loss(ds, beta[:1], c)
        with pytest.raises(ValueError):
            source_loss(ds, beta, np.zeros((2, 3)))


class TestEvaluate:
    def test_zero_at_truth_without_penalties(self, rng):
        bundle, params = exact_bundle(rng)
        hp = HyperParams(r_components=2, lambda_tv=0.0, gamma_sip=0.0, tau=0.5)
        result = evaluate(bundle, params, hp)
        assert result.total == pytest.approx(0.0, abs=1e-18)
        assert np.abs(result.grad_betas).max() < 1e-9
        assert np.abs(result.grad_components).max() < 1e-9
        assert np.abs(result.grad_weights).max() < 1e-9

    def test_terms_sum_exactly(self, rng):
        bundle, _ = exact_bundle(rng)
        params = init_params(2, 2, 3, 3, 4, 1.0, rng)
        hp = HyperParams(r_components=2, lambda_tv=0.3, gamma_sip=0.8, tau=0.5)
        result = evaluate(bundle, params, hp)
        assert result.total == result.data_loss + result.tv_term + result.sip_term

    def _fd_all(self, bundle, params, hp):
        def at(betas=None, comps=None, weights=None):
            return evaluate(bundle, PairParams(
                betas=params.betas if betas is None else betas,
                components=params.components if comps is None else comps,
                weights=params.weights if weights is None else weights,
            ), hp).total

        fd_b = central_fd(lambda b: at(betas=b), params.betas)
        fd_c = central_fd(lambda c: at(comps=c), params.components)
        fd_w = central_fd(lambda w: at(weights=w), params.weights)
        return fd_b, fd_c, fd_w

    def test_gradients_match_fd_without_penalties(self, rng):
        bundle, _ = exact_bundle(rng, n=6)
        params = init_params(2, 2, 3, 3, 4, 1.0, rng)
        hp = HyperParams(r_components=2, lambda_tv=0.0, gamma_sip=0.0, tau=0.5)
        result = evaluate(bundle, params, hp)
        fd_b, fd_c, fd_w = self._fd_all(bundle, params, hp)
        assert rel_err(result.grad_betas, fd_b) <= 1e-6
        assert rel_err(result.grad_components, fd_c) <= 1e-6
        assert rel_err(result.grad_weights, fd_w) <= 1e-6

    def test_gradients_match_fd_full_objective(self, rng):
        bundle, _ = exact_bundle(rng, n=6)
        hp = HyperParams(r_components=2, lambda_tv=0.4, gamma_sip=0.9, tau=0.5)
        params = sample_away_from_kinks(rng, 2, 2, 3, 3, 4, hp.tau)
        result = evaluate(bundle, params, hp)
        fd_b, fd_c, fd_w = self._fd_all(bundle, params, hp)
        assert rel_err(result.grad_betas, fd_b) <= 1e-5
        assert rel_err(result.grad_components, fd_c) <= 1e-5
        assert rel_err(result.grad_weights, fd_w) <= 1e-5

    def test_scale_indeterminacy_preserves_data_loss(self, rng):
        bundle, _ = exact_bundle(rng)
        params = init_params(2, 2, 3, 3, 4, 1.0, rng)
        hp = HyperParams(r_components=2, lambda_tv=0.3, gamma_sip=0.7, tau=0.5)
        base = evaluate(bundle, params, hp)
        scale = 3.0
        comps = params.components.copy()
        comps[0] *= scale
        weights = params.weights.copy()
        weights[:, 0] /= scale
        rescaled = evaluate(bundle, PairParams(
            betas=params.betas, components=comps, weights=weights), hp)
        assert rescaled.data_loss == pytest.approx(base.data_loss, rel=1e-12)
        assert rescaled.total != pytest.approx(base.total, rel=1e-12)

    def test_identical_sources_average_to_single_source(self, rng):
        bundle, _ = exact_bundle(rng, t=1)
        params = init_params(1, 2, 3, 3, 4, 1.0, rng)
        hp = HyperParams(r_components=2, lambda_tv=0.2, gamma_sip=0.5, tau=0.5)
        single = evaluate(bundle, params, hp)

        tripled = [bundle[0], bundle[0], bundle[0]]
        params3 = PairParams(
            betas=np.repeat(params.betas, 3, axis=0),
            components=params.components,
            weights=np.repeat(params.weights, 3, axis=0),
        )
        triple = evaluate(tripled, params3, hp)
        assert triple.data_loss == pytest.approx(single.data_loss, rel=1e-12)
        assert triple.tv_term == pytest.approx(single.tv_term, rel=1e-12)

    def test_gradients_always_finite(self, rng):
        bundle, _ = exact_bundle(rng)
        hp = HyperParams(r_components=2, lambda_tv=1.0, gamma_sip=1.0, tau=0.5)
        for _ in range(5):
            params = init_params(2, 2, 3, 3, 4, 2.0, rng)
            result = evaluate(bundle, params, hp)
            assert np.all(np.isfinite(result.grad_betas))
            assert np.all(np.isfinite(result.grad_components))
            assert np.all(np.isfinite(result.grad_weights))

    def test_shape_mismatch_rejected(self, rng):
        bundle, params = exact_bundle(rng)
        hp = HyperParams(r_components=2)
        bad = init_params(3, 2, 3, 3, 4, 1.0, rng)
        with pytest.raises(ValueError):
            evaluate(bundle, bad, hp)
