"""
Monte-Carlo acceptance runs for the serial chain model.
Slow: run with ``pytest -m slow`` (deselect with ``-m "not slow"``).
"""

import os

import numpy as np
import pytest

from modules.cascade import calibrate, matcher_metrics, predict_roc, predicted_auc
from modules.error_model import ErrorParams, band, corrected_roc, estimate_params, inject_displacement
from modules.scores import correlation_matrix, load_score_matrices, synth_generate
from modules.sim import compare_rocs, empirical_roc, run_cascade

pytestmark = pytest.mark.slow

SEEDS = range(20)


class TestIndependentChain:

    def test_prediction_within_binomial_noise(self, gaussian_spec):
        train = synth_generate(gaussian_spec([4.0, 4.0, 3.0], 0.0, 50_000, 500_000), seed=100)
        probe = synth_generate(gaussian_spec([4.0, 4.0, 3.0], 0.0, 10_000, 100_000), seed=101)
        model = calibrate(train, ['m1', 'm2', 'm3'])

        measured = empirical_roc(model, probe)
        far_n, frr_n = model.last_roc.rates_at(measured.thresholds)
        far_pred, frr_pred = model.g_factor * far_n, model.h_factor * frr_n

        last = run_cascade(model, probe, 0.0).stages[-1]
        far_bound = np.maximum(0.005, 4 * np.sqrt(far_pred * (1 - far_pred) / last.impostor.inflow))
        frr_bound = np.maximum(0.005, 4 * np.sqrt(frr_pred * (1 - frr_pred) / last.genuine.inflow))

        assert np.all(np.abs(far_pred - measured.far) <= far_bound)
        assert np.all(np.abs(frr_pred - measured.frr) <= frr_bound)


class TestCorrelationSensitivity:

    @staticmethod
    def _divergence(gaussian_spec, rho, seed):
        train = synth_generate(gaussian_spec([4.0, 4.0, 3.0], rho, 2_000, 20_000), seed=2 * seed)
        probe = synth_generate(gaussian_spec([4.0, 4.0, 3.0], rho, 2_000, 20_000), seed=2 * seed + 1)
        model = calibrate(train, ['m1', 'm2', 'm3'])
        return compare_rocs(predict_roc(model).as_curve(), empirical_roc(model, probe)).mean_abs_dfar

    def test_correlated_matchers_diverge_more(self, gaussian_spec):
        independent = [self._divergence(gaussian_spec, 0.0, s) for s in SEEDS]
        correlated = [self._divergence(gaussian_spec, 0.7, s) for s in SEEDS]
        assert np.median(correlated) > np.median(independent)


class TestOrdering:

    def test_best_matcher_last(self, gaussian_spec):
        for seed in SEEDS:
            train = synth_generate(gaussian_spec([1.25, 5.8, 6.0], 0.0, 10_000, 100_000), seed=seed)
            best_individual = max(m['auc'] for m in matcher_metrics(train).values())
            best_last = predicted_auc(calibrate(train, ['m1', 'm2', 'm3']))
            swapped = predicted_auc(calibrate(train, ['m3', 'm2', 'm1']))

            assert best_last >= swapped, f"seed {seed}"
            assert best_last >= best_individual, f"seed {seed}"
            assert swapped >= best_individual, f"seed {seed}"


class TestErrorBand:

    def test_band_contains_displaced_truth(self, gaussian_spec):
        for seed in SEEDS:
            train = synth_generate(gaussian_spec([4.0, 2.0], 0.0, 10_000, 100_000), seed=2 * seed)
            probe = synth_generate(gaussian_spec([4.0, 2.0], 0.0, 10_000, 100_000), seed=2 * seed + 1)
            model = calibrate(train, ['m1', 'm2'])
            estimated = inject_displacement(model, 0.15)

            error_band = band(predict_roc(estimated), estimated, ErrorParams(0.30, 0.0, relative=True))
            last = train.column('m2')
            low = np.percentile(last[train.genuine], 10)
            high = np.percentile(last[~train.genuine], 90)
            grid = np.linspace(low, high, 50)

            coverage = error_band.coverage(empirical_roc(model, probe, grid), grid)
            assert coverage >= 0.95, f"seed {seed}: coverage {coverage:.3f}"


class TestErrorFitting:

    def test_correction_moves_toward_shifted_probe(self, gaussian_spec):
        closer = 0
        for seed in SEEDS:
            train = synth_generate(gaussian_spec([4.0, 3.0], 0.0, 5_000, 50_000), seed=2 * seed)
            probe = synth_generate(gaussian_spec([4.0, 3.0], 0.0, 5_000, 50_000, impostor_shift=0.5),
                                   seed=2 * seed + 1)
            model = calibrate(train, ['m1', 'm2'])
            prediction = predict_roc(model)
            measured = empirical_roc(model, probe)

            params = estimate_params(model, probe)
            assert params.alpha > 0.0
            plain = compare_rocs(prediction.as_curve(), measured).mean_abs_dfar
            fitted = compare_rocs(corrected_roc(prediction, model, params), measured).mean_abs_dfar
            closer += fitted < plain

        assert closer >= 18


BSSR1_DIR = os.getenv('SERIALROC_BSSR1_DIR')
BSSR1_FILES = {
    'FaceC': 'FaceC.txt',
    'FaceG': 'FaceG.txt',
    'FingerLI': 'FingerLI.txt',
    'FingerRI': 'FingerRI.txt',
}


@pytest.fixture(scope='module')
def bssr1_correlations():
    table = load_score_matrices({name: os.path.join(BSSR1_DIR, f) for name, f in BSSR1_FILES.items()})
    return correlation_matrix(table)


@pytest.mark.skipif(not BSSR1_DIR, reason="NIST BSSR1 score matrices not supplied (set SERIALROC_BSSR1_DIR)")
class TestBssr1Correlations:

    @pytest.mark.parametrize('a,b,expected', [
        ('FaceC', 'FaceG', 0.70),
        ('FingerLI', 'FingerRI', 0.41),
        ('FaceC', 'FingerLI', -0.12),
        ('FaceG', 'FingerLI', -0.13),
        ('FaceC', 'FingerRI', -0.02),
        ('FaceG', 'FingerRI', -0.02),
    ])
    def test_pooled_correlation(self, bssr1_correlations, a, b, expected):
        assert bssr1_correlations.value(a, b) == pytest.approx(expected, abs=0.03)
        assert bssr1_correlations.value(b, a) == bssr1_correlations.value(a, b)
