"""Classical fourth-order Runge-Kutta integration for data generation."""

import numpy as np


def rk4_integrate(rhs, y0, t_span, dt):
    """Integrate dy/dt = rhs(t, y) on a fixed grid.

    Returns (ts, ys) with ys[k] the state at ts[k]; the final step is
    shortened to land exactly on t_span[1].  Raises on non-finite states,
    naming the time of blow-up.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = np.asarray(y0, dtype=np.float64).copy()
    ts = [t0]
    ys = [y.copy()]
    t = t0
    while t < t1 - 1e-12:
        h = min(dt, t1 - t)
        k1 = np.asarray(rhs(t, y))
        k2 = np.asarray(rhs(t + h / 2, y + h / 2 * k1))
        k3 = np.asarray(rhs(t + h / 2, y + h / 2 * k2))
        k4 = np.asarray(rhs(t + h, y + h * k3))
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        if not np.isfinite(y).all():
            raise FloatingPointError(f"state became non-finite at t={t:g}")
        ts.append(t)
        ys.append(y.copy())
    return np.array(ts), np.array(ys)
