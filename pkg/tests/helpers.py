"""Shared test oracles: finite differences, closed-form arcs, slopes.

Everything here is computed independently of the library internals it
checks: finite differences only call a loss closure, and the arc
composition uses the matrix-exponential formulas rather than any
integrator.
"""

import numpy as np

E3 = np.array([0.0, 0.0, 1.0])


def rel_err(ga: np.ndarray, gf: np.ndarray, floor: float = 1e-6) -> float:
    """Worst relative disagreement, with a floor so near-zero entries
    are compared absolutely at floor scale."""
    ga = np.asarray(ga, dtype=np.float64)
    gf = np.asarray(gf, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), floor)
    return float(np.max(np.abs(ga - gf) / denom))


def fd_grad_at(loss_fn, array: np.ndarray, idx, eps: float = 1e-5) -> float:
    """Central finite difference of ``loss_fn()`` w.r.t. one entry of
    ``array`` (mutated in place and restored)."""
    orig = array[idx]
    array[idx] = orig + eps
    lp = loss_fn()
    array[idx] = orig - eps
    lm = loss_fn()
    array[idx] = orig
    return (lp - lm) / (2.0 * eps)


def fd_grad_full(loss_fn, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient for a small array."""
    g = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    while not it.finished:
        g[it.multi_index] = fd_grad_at(loss_fn, array, it.multi_index, eps)
        it.iternext()
    return g


def sample_coords(rng: np.random.Generator, shape, k: int):
    """Up to ``k`` distinct coordinates of an array of given shape."""
    size = int(np.prod(shape))
    k = min(k, size)
    flat = rng.choice(size, size=k, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def hat(u: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -u[2], u[1]],
            [u[2], 0.0, -u[0]],
            [-u[1], u[0], 0.0],
        ]
    )


def arc_transform(u: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form frame displacement for constant curvature ``u`` over
    arc length ``s``: Rodrigues rotation and its translation integral."""
    n = float(np.linalg.norm(u))
    K = hat(u)
    if n * s < 1e-8:
        # series expansions, adequate below the switch point
        R = np.eye(3) + s * K + 0.5 * s * s * (K @ K)
        V = s * np.eye(3) + 0.5 * s * s * K + (s**3 / 6.0) * (K @ K)
    else:
        th = n * s
        R = (
            np.eye(3)
            + (np.sin(th) / n) * K
            + ((1.0 - np.cos(th)) / n**2) * (K @ K)
        )
        V = (
            s * np.eye(3)
            + ((1.0 - np.cos(th)) / n**2) * K
            + ((th - np.sin(th)) / (n**2 * n)) * (K @ K)
        )
    return R, V @ E3


def arc_backbone(
    curvatures: np.ndarray,
    lengths,
    points_per_segment: int,
) -> np.ndarray:
    """Closed-form backbone points for piecewise-constant curvature.

    ``curvatures`` has one 3-vector row per segment.  Returns the same
    grid forward kinematics uses: base point plus ``points_per_segment``
    points per segment.
    """
    R = np.eye(3)
    p = np.zeros(3)
    pts = [p.copy()]
    for u, length in zip(curvatures, lengths):
        for k in range(1, points_per_segment + 1):
            Rl, pl = arc_transform(u, length * k / points_per_segment)
            pts.append(p + R @ pl)
        Re, pe = arc_transform(u, length)
        p = p + R @ pe
        R = R @ Re
    return np.array(pts)


def loglog_slope(hs, errs) -> float:
    """Least-squares slope of log(err) against log(h)."""
    return float(np.polyfit(np.log(np.asarray(hs)), np.log(np.asarray(errs)), 1)[0])
