"""Diagnostic probes: can simple classifiers/regressors recover integer
properties (parity, divisibility, primality, value, digit count) from
embedding vectors?

Binary probes train logistic regression on integers 1-1000 and report
accuracy on 1001-2000, using either the full vector ("All") or the single
most predictive dimension chosen by training accuracy ("Single").
Regressions fit ridge models on 1-2000 and report same-range R^2.
Integers the table cannot resolve are excluded and surface as coverage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .embeddings import EmbeddingTable

BINARY_PROPERTIES = ("even", "div3", "div4", "prime")
REGRESSION_TARGETS = ("value", "digits")

DEFAULT_TRAIN_RANGE = range(1, 1001)
DEFAULT_TEST_RANGE = range(1001, 2001)
DEFAULT_REGRESSION_RANGE = range(1, 2001)


@dataclass(frozen=True)
class PropertySpec:
    name: str
    kind: str  # "binary" or "regression"


PROPERTIES: dict[str, PropertySpec] = {
    "even": PropertySpec("even", "binary"),
    "div3": PropertySpec("div3", "binary"),
    "div4": PropertySpec("div4", "binary"),
    "prime": PropertySpec("prime", "binary"),
    "value": PropertySpec("value", "regression"),
    "digits": PropertySpec("digits", "regression"),
}


_sieve_flags = np.zeros(2, dtype=bool)


def _primes_up_to(bound: int) -> np.ndarray:
    """Sieve of Eratosthenes, cached and grown geometrically."""
    global _sieve_flags
    if bound >= _sieve_flags.size:
        size = max(bound + 1, 2 * _sieve_flags.size, 2048)
        flags = np.ones(size, dtype=bool)
        flags[:2] = False
        for p in range(2, int(size**0.5) + 1):
            if flags[p]:
                flags[p * p :: p] = False
        _sieve_flags = flags
    return _sieve_flags


def is_prime(n: int) -> bool:
    return bool(_primes_up_to(n)[n]) if n >= 2 else False


def property_oracle(n: int, p: PropertySpec | str) -> bool | int:
    """Ground truth for one integer: modular arithmetic for divisibility,
    a sieve for primality, the value itself, or the decimal digit count."""
    if n < 1:
        raise ValueError(f"oracle defined for positive integers, got {n}")
    name = p.name if isinstance(p, PropertySpec) else p
    if name == "even":
        return n % 2 == 0
    if name == "div3":
        return n % 3 == 0
    if name == "div4":
        return n % 4 == 0
    if name == "prime":
        return is_prime(n)
    if name == "value":
        return n
    if name == "digits":
        return len(str(n))
    raise ValueError(f"unknown property {name!r}")


def majority_baseline(p: PropertySpec | str, eval_range: Iterable[int]) -> float:
    """Accuracy of always predicting the more frequent class on the range."""
    labels = [bool(property_oracle(n, p)) for n in eval_range]
    if not labels:
        raise ValueError("empty evaluation range")
    positives = sum(labels)
    return max(positives, len(labels) - positives) / len(labels)


def logistic_loss_and_grad(
    w: np.ndarray, b: float, x: np.ndarray, sign: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss with an l2/2 weight penalty (bias unpenalized)."""
    z = x @ w + b
    margins = sign * z
    loss = float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * l2 * float(w @ w)
    coeff = -sign * expit(-margins) / x.shape[0]
    grad_w = x.T @ coeff + l2 * w
    grad_b = float(np.sum(coeff))
    return loss, grad_w, grad_b


def train_logistic(
    x: np.ndarray,
    y: Sequence[bool],
    l2: float = 1e-4,
    max_iters: int = 5000,
    tol: float = 1e-7,
) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent with backtracking line search.

    Stops when the gradient norm drops to ``tol`` or after ``max_iters``
    steps. Requires both classes to be present.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two examples")
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    sign = np.where(y, 1.0, -1.0)
    w = np.zeros(x.shape[1])
    b = 0.0
    step = 1.0
    loss, grad_w, grad_b = logistic_loss_and_grad(w, b, x, sign, l2)
    for _ in range(max_iters):
        grad_sq = float(grad_w @ grad_w) + grad_b * grad_b
        if np.sqrt(grad_sq) <= tol:
            break
        t = step
        for _ in range(60):  # Armijo backtracking
            w_new = w - t * grad_w
            b_new = b - t * grad_b
            loss_new, gw_new, gb_new = logistic_loss_and_grad(w_new, b_new, x, sign, l2)
            if loss_new <= loss - 1e-4 * t * grad_sq:
                break
            t *= 0.5
        w, b, loss, grad_w, grad_b = w_new, b_new, loss_new, gw_new, gb_new
        step = min(t * 2.0, 1e4)
    return w, b


def predict_logistic(w: np.ndarray, b: float, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) @ w + b) > 0.0


def fit_linear(x: np.ndarray, y: np.ndarray, ridge_eps: float = 1e-8) -> tuple[np.ndarray, float]:
    """Closed-form ridge regression on centered data."""
    if ridge_eps <= 0:
        raise ValueError("ridge_eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc + ridge_eps * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ yc)
    return w, y_mean - float(x_mean @ w)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size < 2:
        raise ValueError("need matching arrays of at least two values")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("zero variance in y_true")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class ProbeReport:
    source_tag: str
    property: str
    accuracy_all: float
    accuracy_single: float
    chosen_dimension: int
    coverage: float

    def as_record(self) -> dict:
        return {
            "source_tag": self.source_tag,
            "property": self.property,
            "accuracy_all": self.accuracy_all,
            "accuracy_single": self.accuracy_single,
            "chosen_dimension": self.chosen_dimension,
            "coverage": self.coverage,
        }


@dataclass
class RegressionReport:
    source_tag: str
    target: str
    r2_all: float
    r2_single: float
    chosen_dimension: int
    coverage: float

    def as_record(self) -> dict:
        return {
            "source_tag": self.source_tag,
            "target": self.target,
            "r2_all": self.r2_all,
            "r2_single": self.r2_single,
            "chosen_dimension": self.chosen_dimension,
            "coverage": self.coverage,
        }


def _resolve_range(table: EmbeddingTable, integers: Iterable[int]) -> tuple[np.ndarray, list[int]]:
    vectors, resolved = [], []
    for n in integers:
        vec = table.lookup(str(n))
        if vec is not None:
            vectors.append(vec)
            resolved.append(n)
    matrix = (
        np.asarray(vectors, dtype=np.float64) if vectors else np.zeros((0, table.dim))
    )
    return matrix, resolved


def probe_binary(
    table: EmbeddingTable,
    p: PropertySpec | str,
    train_range: Iterable[int] = DEFAULT_TRAIN_RANGE,
    test_range: Iterable[int] = DEFAULT_TEST_RANGE,
    l2: float = 1e-4,
    max_iters: int = 5000,
    tol: float = 1e-7,
) -> ProbeReport:
    """All-dimensions and best-single-dimension logistic probe accuracies.

    Features are standardized with train-range statistics before fitting;
    the "Single" dimension is picked by training accuracy (ties to the
    lowest index) and scored on the test range.
    """
    spec = PROPERTIES[p] if isinstance(p, str) else p
    if spec.kind != "binary":
        raise ValueError(f"{spec.name} is not a binary property")
    test_list = list(test_range)
    x_train, train_ints = _resolve_range(table, train_range)
    x_test, test_ints = _resolve_range(table, test_list)
    coverage = len(test_ints) / len(test_list) if test_list else 0.0
    if len(train_ints) == 0 or len(test_ints) == 0:
        raise ValueError(f"no resolvable integers for {table.source_tag or 'table'}")
    y_train = np.array([bool(property_oracle(n, spec)) for n in train_ints])
    y_test = np.array([bool(property_oracle(n, spec)) for n in test_ints])

    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0.0] = 1.0
    xs_train = (x_train - mean) / std
    xs_test = (x_test - mean) / std

    w, b = train_logistic(xs_train, y_train, l2=l2, max_iters=max_iters, tol=tol)
    accuracy_all = float(np.mean(predict_logistic(w, b, xs_test) == y_test))

    best_dim, best_train_acc, best_test_acc = 0, -1.0, 0.0
    for d in range(xs_train.shape[1]):
        wd, bd = train_logistic(xs_train[:, d : d + 1], y_train, l2=l2, max_iters=max_iters, tol=tol)
        train_acc = float(np.mean(predict_logistic(wd, bd, xs_train[:, d : d + 1]) == y_train))
        if train_acc > best_train_acc:
            best_train_acc = train_acc
            best_dim = d
            best_test_acc = float(
                np.mean(predict_logistic(wd, bd, xs_test[:, d : d + 1]) == y_test)
            )
    return ProbeReport(
        source_tag=table.source_tag,
        property=spec.name,
        accuracy_all=accuracy_all,
        accuracy_single=best_test_acc,
        chosen_dimension=best_dim,
        coverage=coverage,
    )


def probe_regression(
    table: EmbeddingTable,
    target: PropertySpec | str,
    eval_range: Iterable[int] = DEFAULT_REGRESSION_RANGE,
    ridge_eps: float = 1e-8,
) -> RegressionReport:
    """Ridge-regression R^2 for predicting the target, fit and evaluated on
    the same range (full vector and best single dimension)."""
    spec = PROPERTIES[target] if isinstance(target, str) else target
    if spec.kind != "regression":
        raise ValueError(f"{spec.name} is not a regression target")
    eval_list = list(eval_range)
    x, ints = _resolve_range(table, eval_list)
    coverage = len(ints) / len(eval_list) if eval_list else 0.0
    if len(ints) == 0:
        raise ValueError(f"no resolvable integers for {table.source_tag or 'table'}")
    y = np.array([float(property_oracle(n, spec)) for n in ints])

    w, b = fit_linear(x, y, ridge_eps=ridge_eps)
    r2_all = r_squared(y, x @ w + b)

    best_dim, best_r2 = 0, -np.inf
    for d in range(x.shape[1]):
        wd, bd = fit_linear(x[:, d : d + 1], y, ridge_eps=ridge_eps)
        r2 = r_squared(y, x[:, d : d + 1] @ wd + bd)
        if r2 > best_r2:
            best_r2, best_dim = r2, d
    return RegressionReport(
        source_tag=table.source_tag,
        target=spec.name,
        r2_all=r2_all,
        r2_single=best_r2,
        chosen_dimension=best_dim,
        coverage=coverage,
    )
