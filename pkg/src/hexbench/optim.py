"""First-order momentum optimizer and gradient checking shared by all stages.

Adam runs with beta1 = beta2 = 0.9 and the per-stage default learning rates
(1e-3 while deforming, 1e-4 while hexahedralizing). The loop supports a
validity guard: when a step lands on a non-finite energy or an invalid state
(e.g. an inverted element), the step is retried from the same moments with a
halved learning rate, up to 8 times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_EPSILON = 1e-8
MAX_STEP_RETRIES = 8


class OptimizationError(Exception):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.9
    epsilon: float = ADAM_EPSILON
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure_shape(self, params: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        elif self.m.shape != params.shape:
            raise OptimizationError(
                f"moment shape {self.m.shape} does not match params {params.shape}"
            )


@dataclass
class EnergyReport:
    """Per-iteration energy breakdown; total always equals the sum of terms."""

    iteration: int
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns new params, mutates state."""
    if params.shape != grads.shape:
        raise OptimizationError("params/grads shape mismatch")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise OptimizationError(
            f"non-finite gradient at flat index {int(np.flatnonzero(bad)[0])}"
        )
    state.ensure_shape(params)
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    return params - state.lr * _direction(state)


def _direction(state: AdamState) -> np.ndarray:
    t = state.step_count
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return m_hat / (np.sqrt(v_hat) + state.epsilon)


def run_loop(
    energy,
    params: np.ndarray,
    n_steps: int,
    state: AdamState | None = None,
    callback=None,
    accept=None,
) -> tuple[np.ndarray, list[EnergyReport]]:
    """Minimize ``energy(params) -> (terms, grads)`` for n_steps Adam steps.

    ``callback(step, params, report)`` is invoked after every accepted step and
    may return True to cancel; the last valid state is returned. ``accept``
    vets trial positions (return False to trigger the halved-lr retry).
    """
    if state is None:
        state = AdamState()
    params = np.asarray(params, dtype=np.float64).copy()
    history: list[EnergyReport] = []
    for it in range(n_steps):
        terms, grads = energy(params)
        bad = ~np.isfinite(grads)
        if bad.any():
            raise OptimizationError(
                f"non-finite gradient at flat index {int(np.flatnonzero(bad)[0])}"
            )
        state.ensure_shape(params)
        state.step_count += 1
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
        direction = _direction(state)

        lr = state.lr
        accepted = None
        for _ in range(MAX_STEP_RETRIES + 1):
            trial = params - lr * direction
            if accept is None or accept(trial):
                accepted = trial
                break
            lr *= 0.5
        if accepted is None:
            raise OptimizationError(
                f"step {it}: no valid iterate after {MAX_STEP_RETRIES} retries"
            )
        params = accepted
        report = EnergyReport(iteration=it, terms=dict(terms))
        history.append(report)
        if callback is not None and callback(it, params, report):
            break
    return params, history


def check_gradient(energy, params: np.ndarray, n_probes: int = 24,
                   step: float = 1e-5, rng=0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Probes n_probes random flat coordinates; the energy callable returns
    (terms, grads) like in run_loop.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(rng)
    params = np.asarray(params, dtype=np.float64)
    terms, grads = energy(params)
    flat_grads = np.asarray(grads, dtype=np.float64).ravel()
    coords = rng.choice(params.size, size=min(n_probes, params.size), replace=False)
    worst = 0.0
    for c in coords:
        probe = params.copy().ravel()
        probe[c] += step
        plus = sum(energy(probe.reshape(params.shape))[0].values())
        probe[c] -= 2 * step
        minus = sum(energy(probe.reshape(params.shape))[0].values())
        fd = (plus - minus) / (2 * step)
        denom = max(abs(fd), abs(flat_grads[c]), 1e-8)
        worst = max(worst, abs(fd - flat_grads[c]) / denom)
    return worst
