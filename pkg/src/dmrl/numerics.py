"""Mathematical kernels: distance correlation, activations, init, Adam.

Every differentiable kernel here ships with its analytic gradient, and the
module provides the central finite-difference checker used to verify them.
All accumulation happens in float64; callers may store parameters in a
narrower dtype, but gradient checks are only meaningful at 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

# Smoothing constant inside the Euclidean norm, sqrt(||.||^2 + EPS_DIST),
# keeping the distance-correlation gradient defined at coincident points.
EPS_DIST = 1e-12

# Below this denominator the distance correlation is defined as exactly 0
# (a constant sample carries no dependence signal and must not yield NaN).
EPS_DEN = 1e-10


def _as_sample_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-D sample matrix, got ndim={x.ndim}")
    if x.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 sample rows, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def pairwise_distance_matrix(x) -> np.ndarray:
    """Smoothed Euclidean distance matrix sqrt(||x_j - x_k||^2 + EPS_DIST).

    Symmetric with diagonal sqrt(EPS_DIST); input rows are samples. Squared
    distances are accumulated from explicit row differences (no Gram-matrix
    cancellation), which the finite-difference gradient contracts rely on.
    """
    x = _as_sample_matrix(x, "x")
    # cdist output is exactly symmetric (same per-pair summation order)
    d = cdist(x, x, "sqeuclidean")
    d += EPS_DIST
    return np.sqrt(d, out=d)


def double_center(d) -> np.ndarray:
    """Subtract row and column means and add back the grand mean.

    Every row and column of the result sums to zero.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {d.shape}")
    row = d.mean(axis=1, keepdims=True)
    col = d.mean(axis=0, keepdims=True)
    out = d - row
    out -= col
    out += row.mean()
    return out

def dcov2(a, b) -> float:
    """Squared sample distance covariance from two double-centered matrices.

    Returns max(0, (1/n^2) * sum(a * b)); tiny negatives from the epsilon
    smoothing are clamped to preserve the sqrt domain downstream.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    return max(0.0, float(np.sum(a * b)) / (n * n))


def dcor(x, y) -> float:
    """Distance correlation between two same-length sample matrices, in [0, 1].

    Returns 0 when the denominator sqrt(dVar(x) * dVar(y)) falls below
    EPS_DEN (degenerate, e.g. a constant sample).
    """
    x = _as_sample_matrix(x, "x")
    y = _as_sample_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    a = double_center(pairwise_distance_matrix(x))
    b = double_center(pairwise_distance_matrix(y))
    v_xy = dcov2(a, b)
    den = np.sqrt(np.sqrt(dcov2(a, a)) * np.sqrt(dcov2(b, b)))
    if den < EPS_DEN:
        return 0.0
    return float(np.sqrt(v_xy) / den)


def _distance_grad(g_d: np.ndarray, d: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Chain rule through D_jk = sqrt(||x_j - x_k||^2 + eps) for a symmetric
    # upstream gradient g_d: dL/dx = 2 * (diag(w 1) - w) @ x with w = g_d / d.
    # g_d is consumed (divided in place).
    w = np.divide(g_d, d, out=g_d)
    out = w @ x
    out *= -1.0
    out += w.sum(axis=1)[:, None] * x
    out *= 2.0
    return out


def dcor_gradient(x, y) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance correlation and its analytic gradient w.r.t. every entry.

    Returns (value, grad_x, grad_y). At degenerate points (denominator below
    EPS_DEN) the value and both gradients are exactly zero, matching dcor.
    """
    x = _as_sample_matrix(x, "x")
    y = _as_sample_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    dx = pairwise_distance_matrix(x)
    dy = pairwise_distance_matrix(y)
    a = double_center(dx)
    b = double_center(dy)
    v_xy = dcov2(a, b)
    v_xx = dcov2(a, a)
    v_yy = dcov2(b, b)
    den = np.sqrt(np.sqrt(v_xx) * np.sqrt(v_yy))
    if den < EPS_DEN:
        return 0.0, np.zeros_like(x), np.zeros_like(y)
    value = float(np.sqrt(v_xy) / den)

    # value = v_xy^(1/2) * v_xx^(-1/4) * v_yy^(-1/4); propagate through each
    # factor, then through double-centering (self-adjoint: H G H with the
    # already-centered matrices fixed points) and the smoothed distances.
    g_vxy = 0.5 / (np.sqrt(v_xy) * den) if v_xy > 0.0 else 0.0
    g_vxx = -0.25 * value / v_xx
    g_vyy = -0.25 * value / v_yy
    g_dx = (g_vxy * b + 2.0 * g_vxx * a) / (n * n)
    g_dy = (g_vxy * a + 2.0 * g_vyy * b) / (n * n)
    return value, _distance_grad(g_dx, dx, x), _distance_grad(g_dy, dy, y)


# ---------------------------------------------------------------------------
# Activations (elementwise, with derivatives)
# ---------------------------------------------------------------------------

def softplus(x):
    """ln(1 + e^x), overflow-safe: for large x returns x + ln(1 + e^-x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_grad(x):
    """d/dx softplus = sigmoid."""
    return sigmoid(x)


def log_sigmoid(x):
    """ln(sigmoid(x)) = -softplus(-x), overflow-safe."""
    return -softplus(-np.asarray(x, dtype=np.float64))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def tanh_grad(x):
    t = np.tanh(np.asarray(x, dtype=np.float64))
    return 1.0 - t * t


def leaky_relu(x, slope: float = 0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x, slope: float = 0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0, slope)


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis`; sums to 1 within 1e-9."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------

def xavier_init(shape, rng) -> np.ndarray:
    """Uniform Xavier/Glorot draw in +-sqrt(6 / (fan_in + fan_out)).

    `rng` is a numpy Generator or an integer seed; same seed, same tensor.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ValueError(f"all dimensions must be positive, got {shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    """Per-tensor Adam moment state; single-writer, mutated only by adam_step."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 0.0001

    @classmethod
    def for_param(cls, param: np.ndarray, learning_rate: float = 0.0001,
                  beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        # moments share the parameter's storage dtype so persisted state
        # round-trips exactly; the update itself always runs in float64
        return cls(first_moment=np.zeros(param.shape, dtype=param.dtype),
                   second_moment=np.zeros(param.shape, dtype=param.dtype),
                   step_count=0, beta1=beta1, beta2=beta2,
                   epsilon=epsilon, learning_rate=learning_rate)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter tensor.

    The moment state is updated in place (step_count increments by exactly
    1). The update is computed in float64 from the stored state, making the
    new parameters a deterministic function of (param, grad, state) in
    their storage dtype.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} does not match param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    m = state.beta1 * state.first_moment.astype(np.float64) + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment.astype(np.float64) + (1.0 - state.beta2) * (grad * grad)
    state.first_moment = m.astype(state.first_moment.dtype)
    state.second_moment = v.astype(state.second_moment.dtype)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = param.astype(np.float64) - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated.astype(param.dtype)


def finite_difference_check(f, analytic_grad, point, h: float = 1e-5) -> float:
    """Max relative error between central differences of `f` and `analytic_grad`.

    Per coordinate: fd = (f(x + h e) - f(x - h e)) / 2h and the relative
    error is |fd - an| / max(1e-8, |fd| + |an|).
    """
    point = np.asarray(point, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != point.shape:
        raise ValueError("analytic gradient shape does not match the point")
    flat = point.ravel()
    an = analytic_grad.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(point.reshape(point.shape)))
        flat[i] = orig - h
        f_minus = float(f(point.reshape(point.shape)))
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(fd - an[i]) / max(1e-8, abs(fd) + abs(an[i]))
        worst = max(worst, err)
    return worst
