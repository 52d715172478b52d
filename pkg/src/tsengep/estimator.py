"""scikit-learn style front end for TV deblurring.

:class:`TVDeblurrer` follows the transformer protocol: ``fit(X)`` solves the
reconstruction problem for the degraded image ``X`` and stores the result;
``transform(X)`` returns the reconstruction of ``X`` (re-solving if ``X`` is
not the fitted image).  It is transductive: nothing learned on one image
carries over to another.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fbf_solver import SolverConfig, StepsizeError, StopRule
from .imaging import DeblurConfig, build_deblur_problem, isnr
from .primal_dual import run_blocks

__all__ = ["TVDeblurrer"]


class TVDeblurrer(TransformerMixin, BaseEstimator):
    """Reconstruct a blurred, noisy grayscale image in ``[0, 1]``.

    Parameters mirror :class:`~tsengep.imaging.DeblurConfig`; ``max_iter`` and
    ``tol`` (on ``||x_n - x_{n+1}||``, ``None`` to run the full budget) control
    the solver.
    """

    def __init__(self, lambda_reg=0.003, kernel_size=9, kernel_sigma=4.0, tau="const:1",
                 sigma1="const:1", sigma2="const:1", gamma_rule="error_free", error_rule="none",
                 init_scalar=0.466, max_iter=1000, tol=None):
        self.lambda_reg = lambda_reg
        self.kernel_size = kernel_size
        self.kernel_sigma = kernel_sigma
        self.tau = tau
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.gamma_rule = gamma_rule
        self.error_rule = error_rule
        self.init_scalar = init_scalar
        self.max_iter = max_iter
        self.tol = tol

    def _config(self) -> DeblurConfig:
        return DeblurConfig(
            lambda_reg=self.lambda_reg, kernel_size=self.kernel_size, kernel_sigma=self.kernel_sigma,
            noise_sigma=0.0, tau=self.tau, sigma1=self.sigma1, sigma2=self.sigma2,
            gamma_rule=self.gamma_rule, error_rule=self.error_rule, init_scalar=self.init_scalar,
        )

    def _solve(self, X):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2, ensure_min_features=2)
        if X.min() < 0 or X.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        setup = build_deblur_problem(X, self._config())
        stop = None if self.tol is None else StopRule("step_norm", self.tol)
        config = SolverConfig(gamma=setup.gamma, errors=setup.errors, max_iters=self.max_iter, stop_rule=stop)
        report = setup.stepsize_report(config)
        if not report.ok:
            raise StepsizeError(report.message)
        return X, setup, run_blocks(setup.problem, config, setup.initial_state(), objective=setup.fval)

    def fit(self, X, y=None):
        X, setup, result = self._solve(X)
        self.observed_ = X
        self.reconstruction_ = np.clip(result.solution, 0.0, 1.0)
        self.n_iter_ = result.iterations
        self.stop_reason_ = result.reason.value
        self.objective_ = setup.fval(result.solution)
        self.trace_ = result.trace
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "reconstruction_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=2, ensure_min_features=2)
        if X.shape == self.observed_.shape and np.array_equal(X, self.observed_):
            return self.reconstruction_.copy()
        return np.clip(self._solve(X)[2].solution, 0.0, 1.0)

    def score(self, X, y):
        """ISNR in decibels of the reconstruction of ``X`` against the clean image ``y``."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=2, ensure_min_features=2)
        return isnr(y, X, self.transform(X))
