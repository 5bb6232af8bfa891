"""Compiled recursions for the sequential detectors.

Plain Python when numba is absent.
"""

from typing import Any, Callable, Tuple

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(  # type: ignore[no-redef]
        *args: Any, **kwargs: Any
    ) -> Callable[[Any], Any]:
        def decorator(func: Any) -> Any:
            return func

        return decorator


@njit(cache=True)
def sr_path(lam: np.ndarray, r0: float) -> np.ndarray:
    """R_t = (1 + R_{t-1}) * Lambda_t starting from R_0 = r0."""
    out = np.empty(lam.shape[0])
    r = r0
    for t in range(lam.shape[0]):
        r = (1.0 + r) * lam[t]
        out[t] = r
    return out


@njit(cache=True)
def sr_alarm_path(
    lam: np.ndarray, threshold: float, reset: bool, suppress: int
) -> Tuple[np.ndarray, np.ndarray]:
    """SR path with alarms at R_t >= threshold.

    On alarm the statistic resets to 0 and re-alarms are held off for ``suppress``
    steps; without reset the path runs on and never alarms again.
    """
    n = lam.shape[0]
    out = np.empty(n)
    flags = np.zeros(n, dtype=np.bool_)
    r = 0.0
    hold = 0
    for t in range(n):
        r = (1.0 + r) * lam[t]
        out[t] = r
        if hold > 0:
            hold -= 1
        elif r >= threshold:
            flags[t] = True
            if reset:
                r = 0.0
                hold = suppress
            else:
                hold = n
    return out, flags


@njit(cache=True)
def cusum_path(increments: np.ndarray, s0: float) -> np.ndarray:
    """S_t = max(0, S_{t-1} + x_t) starting from S_0 = s0."""
    out = np.empty(increments.shape[0])
    s = s0
    for t in range(increments.shape[0]):
        s = max(0.0, s + increments[t])
        out[t] = s
    return out


@njit(cache=True)
def cusum_alarm_path(
    increments: np.ndarray, threshold: float, reset: bool, suppress: int
) -> Tuple[np.ndarray, np.ndarray]:
    n = increments.shape[0]
    out = np.empty(n)
    flags = np.zeros(n, dtype=np.bool_)
    s = 0.0
    hold = 0
    for t in range(n):
        s = max(0.0, s + increments[t])
        out[t] = s
        if hold > 0:
            hold -= 1
        elif s >= threshold:
            flags[t] = True
            if reset:
                s = 0.0
                hold = suppress
            else:
                hold = n
    return out, flags


@njit(cache=True)
def episode_alarm_flags(condition: np.ndarray, suppress: int) -> np.ndarray:
    """Alarm at the first step of each run of ``condition``, outside the hold-off."""
    n = condition.shape[0]
    flags = np.zeros(n, dtype=np.bool_)
    hold = 0
    previous = False
    for t in range(n):
        current = condition[t]
        if hold > 0:
            hold -= 1
        elif current and not previous:
            flags[t] = True
            hold = suppress
        previous = current
    return flags
