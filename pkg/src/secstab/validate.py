"""Independent numerics: flows, frequency analysis, discrepancy reports.

Everything here deliberately avoids the normal-form machinery so it can
serve as an oracle for it: trajectories come from adaptive high-order
Runge-Kutta integration of the exact series gradient, and fundamental
frequencies from iterative refinement of windowed Fourier projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .series import PoissonSeries

__all__ = ["Trajectory", "FrequencySolution", "hamiltonian_rhs",
           "integrate_numeric", "integrate_semianalytic", "naff_frequencies",
           "secular_target_frequencies", "discrepancy_report",
           "integrate_newtonian"]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray            # (n_times, dim)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite values")


@dataclass
class FrequencySolution:
    frequencies: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    residuals: np.ndarray


class _SeriesGradient:
    """Compiled evaluator of all first derivatives of a cartesian series.

    The partial derivatives share one monomial basis so a right-hand-side
    call costs a single power table plus one matrix-vector product.
    """

    def __init__(self, H: PoissonSeries):
        rep = H.rep
        if rep.n_ang:
            raise ValueError("flow integration expects a cartesian series")
        self.n = rep.n_poly
        parts = [H.poly_derivative(j) for j in range(self.n)]
        rows = np.concatenate([p.expo for p in parts])
        basis, inverse = np.unique(rows, axis=0, return_inverse=True)
        self.basis = basis.astype(np.float64) / 2.0
        self.coefs = np.zeros((basis.shape[0], self.n))
        ofs = 0
        for j, p in enumerate(parts):
            idx = inverse[ofs:ofs + p.nterms]
            np.add.at(self.coefs[:, j], idx, p.coef)
            ofs += p.nterms
        self.pairs = rep.pairs

    def gradient(self, z):
        mono = np.prod(z[None, :] ** self.basis, axis=1)
        return mono @ self.coefs

    def __call__(self, t, z):
        grad = self.gradient(z)
        out = np.zeros_like(z)
        for kind, qi, pi in self.pairs:
            out[qi] += grad[pi]      # dq/dt = +dH/dp
            out[pi] -= grad[qi]      # dp/dt = -dH/dq
        return out


def hamiltonian_rhs(H: PoissonSeries):
    """Right-hand side of Hamilton's equations for a cartesian series."""
    return _SeriesGradient(H)


def integrate_numeric(H: PoissonSeries, state0, t_span, dt,
                      rtol: float = 1e-13, atol: float = 1e-13,
                      method: str = "DOP853") -> Trajectory:
    """Integrate the series flow with dense, uniform output every ``dt``.

    The returned metadata records the relative energy drift over the run,
    the cheapest global sanity check for a Hamiltonian flow.
    """
    rhs = hamiltonian_rhs(H)
    t0, t1 = float(t_span[0]), float(t_span[1])
    times = np.arange(t0, t1 + 0.5 * dt, dt)
    sol = solve_ivp(rhs, (t0, t1), np.asarray(state0, dtype=float),
                    method=method, t_eval=times, rtol=rtol, atol=atol,
                    dense_output=False)
    if not sol.success:
        raise ArithmeticError(f"integration failed: {sol.message}")
    states = sol.y.T
    e0 = H.evaluate(states[0])
    e1 = H.evaluate(states[-1])
    drift = abs(e1 - e0) / max(abs(e0), 1e-300)
    return Trajectory(sol.t, states,
                      {"integrator": method, "rtol": rtol, "atol": atol,
                       "energy_drift": float(drift)})


def integrate_semianalytic(state, xy0, t_span, dt,
                           frequency: str = "effective") -> Trajectory:
    """Torus flow through the normal form: q advances linearly, p is held.

    The deviation of p(0) from zero measures the distance of the initial
    point from the constructed torus and is reported in the metadata.  On
    the torus the rotation vector is the target frequency; off it, the
    normal form's own angle-free part prescribes the linear flow
    q(t) = q(0) + dH/dp(p(0)) t, which ``frequency="effective"`` uses
    (``"target"`` forces the bare target vector instead).
    """
    from .torus import push_forward
    z0 = push_forward(state, np.asarray(xy0, dtype=float), "inverse")
    p0, q0 = z0[:3], z0[3:]
    omega = state.omega.copy()
    if frequency == "effective":
        H = state.hamiltonian
        for (l, s), v in state.hamiltonian.classes.items():
            if s != 0 or l < 1:
                continue
            omega = omega + np.array(
                [v.poly_derivative(j).evaluate(p0, np.zeros(3))
                 for j in range(3)])
    elif frequency != "target":
        raise ValueError("frequency must be 'effective' or 'target'")
    t0, t1 = float(t_span[0]), float(t_span[1])
    times = np.arange(t0, t1 + 0.5 * dt, dt)
    out = np.zeros((times.size, 6))
    for i, t in enumerate(times):
        z = np.concatenate([p0, q0 + omega * t])
        out[i] = push_forward(state, z, "forward")
    return Trajectory(times, out, {"p0": p0.tolist(),
                                   "omega_used": omega.tolist(),
                                   "torus_distance": float(np.max(np.abs(p0)))})


# ---------------------------------------------------------------------------
# frequency analysis


def _windowed_projection(signal, times, freq, window):
    phase = np.exp(-1j * freq * times)
    return np.sum(window * signal * phase) / np.sum(window)


def naff_frequencies(signal, times, count: int = 1,
                     resolution_guard: float = 0.5) -> FrequencySolution:
    """Extract fundamental frequencies of a quasi-periodic complex signal.

    Iteratively: locate the strongest FFT peak of the Hann-windowed
    signal, refine the frequency by maximizing the windowed projection
    amplitude, then subtract the recovered component (re-orthogonalizing
    against previous ones).  Frequencies closer than the guard times the
    FFT bin width raise an error instead of silently merging.
    """
    signal = np.asarray(signal, dtype=complex)
    times = np.asarray(times, dtype=float)
    n = times.size
    if n < 16:
        raise ValueError("signal too short for frequency analysis")
    dt = times[1] - times[0]
    if not np.allclose(np.diff(times), dt, rtol=1e-9):
        raise ValueError("frequency analysis needs uniform sampling")
    window = np.hanning(n)
    span = times[-1] - times[0]
    bin_width = 2.0 * math.pi / span

    residual = signal.copy()
    freqs, amps, phases, resid = [], [], [], []
    basis = []
    for _ in range(count):
        spec = np.fft.fft(window * residual)
        grid = 2.0 * math.pi * np.fft.fftfreq(n, d=dt)
        k0 = int(np.argmax(np.abs(spec)))
        seed = grid[k0]

        def neg_amp(w):
            return -abs(_windowed_projection(residual, times, w, window))

        res = minimize_scalar(neg_amp,
                              bracket=(seed - bin_width, seed,
                                       seed + bin_width),
                              method="brent",
                              options={"xtol": 1e-15})
        freq = float(res.x)
        for known in freqs:
            if abs(freq - known) < resolution_guard * bin_width:
                raise ArithmeticError(
                    f"frequencies {known:.6e} and {freq:.6e} closer than "
                    f"the resolution {bin_width:.2e}")
        mode = np.exp(1j * freq * times)
        # Gram-Schmidt against previously extracted modes (Hann metric)
        vec = mode.copy()
        for b in basis:
            vec -= b * np.sum(window * np.conj(b) * vec) / np.sum(window)
        nrm = math.sqrt(abs(np.sum(window * np.abs(vec) ** 2))
                        / np.sum(window))
        vec /= nrm
        coef = np.sum(window * np.conj(vec) * residual) / np.sum(window)
        residual = residual - coef * vec
        amp = _windowed_projection(signal, times, freq, window)
        freqs.append(freq)
        amps.append(abs(amp))
        phases.append(math.atan2(amp.imag, amp.real))
        resid.append(math.sqrt(abs(np.sum(window * np.abs(residual) ** 2)
                                   / np.sum(window))))
    return FrequencySolution(np.array(freqs), np.array(amps),
                             np.array(phases), np.array(resid))


def secular_target_frequencies(H_D: PoissonSeries, xy0, n_samples: int = 4096,
                               n_periods: float = 32.0, rtol: float = 1e-12):
    """Torus frequencies from frequency analysis of the diagonalized flow.

    Integrates the flow of ``H_D`` from the reference initial conditions
    and runs the frequency analysis on x_j + i y_j, planet by planet.
    """
    # period scale from the quadratic part
    quad = H_D.select(H_D.secular_degrees() == 2)
    nus = []
    for j in range(3):
        e = np.zeros(6)
        e[j] = 2
        hit = np.all(quad.expo == 2 * e.astype(np.int16), axis=1)
        nus.append(2.0 * quad.coef[hit][0] if hit.any() else 1e-5)
    t_tot = n_periods * 2.0 * math.pi / min(abs(n) for n in nus)
    dt = t_tot / n_samples
    traj = integrate_numeric(H_D, xy0, (0.0, t_tot), dt, rtol=rtol,
                             atol=rtol)
    out = np.zeros(3)
    for j in range(3):
        sig = traj.states[:, j] + 1j * traj.states[:, 3 + j]
        sol = naff_frequencies(sig, traj.times, count=1)
        out[j] = sol.frequencies[0]
    return out, traj


def discrepancy_report(a: Trajectory, b: Trajectory, n_planets: int = 3):
    """Per-planet discrepancy between two trajectories on a common grid.

    ``b`` is linearly resampled onto ``a``'s times; the relative error
    normalizes by the largest radius of the planet's own signal.
    """
    t0 = max(a.times[0], b.times[0])
    t1 = min(a.times[-1], b.times[-1])
    if t1 <= t0:
        raise ValueError("trajectories do not overlap in time")
    keep = (a.times >= t0) & (a.times <= t1)
    times = a.times[keep]
    sa = a.states[keep]
    sb = np.column_stack([np.interp(times, b.times, b.states[:, j])
                          for j in range(b.states.shape[1])])
    report = {"times": times}
    for j in range(n_planets):
        da = sa[:, [j, n_planets + j]]
        db = sb[:, [j, n_planets + j]]
        dist = np.linalg.norm(da - db, axis=1)
        scale = np.linalg.norm(da, axis=1).max()
        report[f"abs_{j + 1}"] = dist
        report[f"rel_{j + 1}"] = dist / max(scale, 1e-300)
        report[f"max_abs_{j + 1}"] = float(dist.max())
        report[f"max_rel_{j + 1}"] = float(dist.max() / max(scale, 1e-300))
    return report


def integrate_newtonian(config, t_span, dt, rtol=1e-12, atol=1e-14):
    """Direct heliocentric integration of the full planetary system.

    Used to average the osculating semi-major axes that center the
    expansion of the fast actions.
    """
    from .planetary import (newtonian_rhs, osculating_a,
                            poincare_from_elements, elements_from_poincare,
                            solve_kepler, CanonicalState)
    st = poincare_from_elements(config)
    a, e, peri, mean = elements_from_poincare(config, st)
    pos = []
    vel = []
    for j in range(config.n_planets):
        from .planetary import _cartesian_two_body
        z, p = _cartesian_two_body(config, j, a[j], e[j], peri[j], mean[j])
        pos.extend([z.real, z.imag])
        vel.extend([p.real / config.beta(j), p.imag / config.beta(j)])
    y0 = np.array(pos + vel)
    rhs = newtonian_rhs(config)
    times = np.arange(t_span[0], t_span[1] + 0.5 * dt, dt)
    sol = solve_ivp(rhs, (float(t_span[0]), float(t_span[1])), y0,
                    method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise ArithmeticError(sol.message)
    a_samples = np.array([osculating_a(config, y) for y in sol.y.T])
    return Trajectory(sol.t, sol.y.T, {"a_samples": a_samples})
