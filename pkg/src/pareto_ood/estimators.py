"""scikit-learn style wrappers around the multi-environment trainer.

``fit`` takes the usual ``X, y`` plus an ``environments`` array of integer
labels saying which environment each row came from.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .epo import DEFAULT_PREFERENCE
from .objectives import EnvBatch
from .trainer import TrainConfig, predict_labels, train


def split_environments(X, y, environments):
    """Group rows by environment label, in sorted label order."""
    env = np.asarray(environments).ravel()
    if env.shape[0] != X.shape[0]:
        raise ValueError(f"environments has {env.shape[0]} labels for {X.shape[0]} rows")
    labels = np.unique(env)
    return [EnvBatch(i, X[env == lab], y[env == lab]) for i, lab in enumerate(labels)]


class _PairBase(BaseEstimator):
    _loss_kind = "mse"

    def __init__(self, method="pair", hidden=(16,), activation="tanh", pretrain_epochs=100,
                 balance_epochs=400, lr_descent=1e-2, lr_balance=0.1, preference=DEFAULT_PREFERENCE,
                 lambda_irm=0.0, lambda_vrex=0.0, batch_size=None, grad_scope="full",
                 optimizer_descent="adam", mu_tolerance=1e-3, random_state=0):
        self.method = method
        self.hidden = hidden
        self.activation = activation
        self.pretrain_epochs = pretrain_epochs
        self.balance_epochs = balance_epochs
        self.lr_descent = lr_descent
        self.lr_balance = lr_balance
        self.preference = preference
        self.lambda_irm = lambda_irm
        self.lambda_vrex = lambda_vrex
        self.batch_size = batch_size
        self.grad_scope = grad_scope
        self.optimizer_descent = optimizer_descent
        self.mu_tolerance = mu_tolerance
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            method=self.method, pretrain_epochs=self.pretrain_epochs,
            balance_epochs=self.balance_epochs, lr_descent=self.lr_descent,
            lr_balance=self.lr_balance, batch_size=self.batch_size, grad_scope=self.grad_scope,
            preference=self.preference, lambda_irm=self.lambda_irm,
            lambda_vrex=self.lambda_vrex, seed=self.random_state,
            optimizer_descent=self.optimizer_descent, loss_kind=self._loss_kind,
            hidden=self.hidden, activation=self.activation, mu_tolerance=self.mu_tolerance,
            log_interval=max(1, self.pretrain_epochs + self.balance_epochs))

    def _fit(self, X, y, environments):
        envs = split_environments(X, y, environments)
        self.net_, self.history_ = train(self._config(), envs)
        if self.history_.diverged:
            raise FloatingPointError(f"training diverged: {self.history_.error}")
        self.n_features_in_ = X.shape[1]
        self.n_environments_ = len(envs)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.net_.predict_scalar(X)


class PairRegressor(RegressorMixin, _PairBase):
    """Multi-environment regressor trained on (ERM, IRMv1, V-REx) with squared loss."""

    _loss_kind = "mse"

    def fit(self, X, y, environments):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        return self._fit(X, y, environments)

    def predict(self, X):
        return self.decision_function(X)


class PairClassifier(ClassifierMixin, _PairBase):
    """Binary multi-environment classifier trained with the logistic loss."""

    _loss_kind = "logistic"

    def fit(self, X, y, environments):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if classes.size != 2:
            raise ValueError(f"need exactly two classes, got {classes.size}")
        self.classes_ = classes
        signed = np.where(y == classes[1], 1.0, -1.0)
        return self._fit(X, signed, environments)

    def predict(self, X):
        signed = predict_labels(self.decision_function(X))
        return np.where(signed > 0, self.classes_[1], self.classes_[0])

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1 - p, p])
