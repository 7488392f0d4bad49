"""Exact unbalanced power flow via Newton's method in polar coordinates.

Each electrical class (channels merged across ideal couplings) carries one
complex voltage unknown, split into magnitude and angle. The residual is the
complex nodal current balance; its real and imaginary parts form the Newton
system together with the analytic partial derivatives of both the line
currents and the voltage-dependent load currents. Meshed topologies need no
special handling.

Volt-var units respond to voltage magnitude, so their reactive draw is held
fixed inside each Newton solve and updated in an outer fixed-point loop until
the draw is self-consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import Network

Channel = tuple[str, str]


class NonConvergenceError(RuntimeError):
    """Newton iteration failed to reach the residual tolerance."""

    def __init__(self, message: str, residual_history: list[float]):
        super().__init__(message)
        self.residual_history = residual_history


@dataclass(frozen=True)
class PhasorSolution:
    """Converged operating point of a network.

    ``I`` holds per-line phase currents oriented from -> to; ``S_line`` is
    the apparent power measured at the receiving end, ``V_to * conj(I)``.
    ``s_node`` is the net complex power consumed at each channel, including
    capacitors, controllable dispatch, and volt-var response.
    """

    V: dict[Channel, complex]
    I: dict[str, np.ndarray]
    S_line: dict[str, np.ndarray]
    s_node: dict[Channel, complex]
    vvc_q: dict[Channel, float]
    dispatch: dict[Channel, complex]
    iterations: int
    residual_norm: float

    def v_mag(self, node: str, phase: str) -> float:
        return abs(self.V[(node, phase)])

    def v_deg(self, node: str, phase: str) -> float:
        return float(np.degrees(np.angle(self.V[(node, phase)])))


class _ExactSystem:
    """Per-network arrays for residual and Jacobian assembly."""

    def __init__(self, net: Network, dispatch: Mapping[Channel, complex]):
        idx = net.index
        self.net = net
        self.idx = idx
        n_cls = len(idx.classes)
        self.n_cls = n_cls

        self.pinned = np.zeros(n_cls, dtype=bool)
        self.v_init = np.empty(n_cls, dtype=complex)
        for k, mem in enumerate(idx.classes):
            phase = mem[0][1]
            self.v_init[k] = net.slack_phasor(phase)
        for k, v in idx.slack_value.items():
            self.pinned[k] = True
            self.v_init[k] = v
        self.free = np.array(idx.free_classes, dtype=int)

        # Load aggregates per class: s(m) = s_const + s_zmag * m^2 + s_fixed,
        # where s_fixed collects caps, dispatch, and the frozen volt-var draw.
        self.s_const = np.zeros(n_cls, dtype=complex)
        self.s_zmag = np.zeros(n_cls, dtype=complex)
        self.s_fixed = np.zeros(n_cls, dtype=complex)
        for ld in net.loads:
            k = idx.class_of[(ld.node, ld.phase)]
            self.s_const[k] += ld.beta_s * ld.demand
            self.s_zmag[k] += ld.beta_z * ld.demand
            self.s_fixed[k] += -1j * ld.cap
        for ch, w in dispatch.items():
            if ch not in idx.class_of:
                raise KeyError(f"dispatch channel {ch} not in network")
            self.s_fixed[idx.class_of[ch]] += complex(w)
        self.vvc_cls = np.array(
            [idx.class_of[(u.node, u.phase)] for u in net.vvc_units], dtype=int
        )
        self.q_vvc = np.zeros(len(net.vvc_units))

        self.lines = [
            (idx.line_y[ln.name], idx.line_from_cls[ln.name], idx.line_to_cls[ln.name])
            for ln in idx.real_lines
        ]

    def set_vvc(self, q: np.ndarray) -> None:
        self.q_vvc = q

    def class_s(self, m: np.ndarray) -> np.ndarray:
        s = self.s_const + self.s_zmag * m**2 + self.s_fixed
        if len(self.vvc_cls):
            np.add.at(s, self.vvc_cls, 1j * self.q_vvc)
        return s

    def residual(self, v: np.ndarray, m: np.ndarray) -> np.ndarray:
        f = np.zeros(self.n_cls, dtype=complex)
        for y, fc, tc in self.lines:
            i = y @ (v[fc] - v[tc])
            np.add.at(f, tc, i)
            np.add.at(f, fc, -i)
        drawn = np.conj(self.class_s(m) / v)
        f -= drawn
        return f[self.free]

    def newton_matrices(self, v: np.ndarray, m: np.ndarray):
        n = self.n_cls
        f = np.zeros(n, dtype=complex)
        jm = np.zeros((n, n), dtype=complex)
        jt = np.zeros((n, n), dtype=complex)
        u = v / m  # unit phasors: dV/dm per class
        jv = 1j * v  # dV/dt per class
        for y, fc, tc in self.lines:
            i = y @ (v[fc] - v[tc])
            np.add.at(f, tc, i)
            np.add.at(f, fc, -i)
            yuf = y * u[fc][None, :]
            yut = y * u[tc][None, :]
            yvf = y * jv[fc][None, :]
            yvt = y * jv[tc][None, :]
            jm[np.ix_(tc, fc)] += yuf
            jm[np.ix_(tc, tc)] -= yut
            jm[np.ix_(fc, fc)] -= yuf
            jm[np.ix_(fc, tc)] += yut
            jt[np.ix_(tc, fc)] += yvf
            jt[np.ix_(tc, tc)] -= yvt
            jt[np.ix_(fc, fc)] -= yvf
            jt[np.ix_(fc, tc)] += yvt
        s = self.class_s(m)
        drawn = np.conj(s / v)
        f -= drawn
        didm = np.conj(2.0 * self.s_zmag * m) / np.conj(v) - drawn / m
        didt = 1j * drawn
        di = np.arange(n)
        jm[di, di] -= didm
        jt[di, di] -= didt
        fr = self.free
        return f[fr], jm[np.ix_(fr, fr)], jt[np.ix_(fr, fr)]


def _newton_solve(
    sys: _ExactSystem, tol: float, max_iter: int, history: list[float]
) -> tuple[np.ndarray, int, float]:
    """Run Newton iterations; return (class voltages, steps, final residual)."""
    m = np.abs(sys.v_init).astype(float)
    t = np.angle(sys.v_init).astype(float)
    free = sys.free
    steps = 0
    for _ in range(max_iter + 1):
        v = m * np.exp(1j * t)
        f, jm, jt = sys.newton_matrices(v, m)
        res = float(np.max(np.abs(f))) if len(f) else 0.0
        history.append(res)
        if res <= tol:
            return v, steps, res
        if steps >= max_iter:
            break
        jac = np.block([[jm.real, jt.real], [jm.imag, jt.imag]])
        rhs = np.concatenate([f.real, f.imag])
        try:
            delta = np.linalg.solve(jac, -rhs)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError(f"singular Jacobian: {exc}", history) from exc
        nf = len(free)
        dm, dt = delta[:nf], delta[nf:]
        # Backtracking keeps heavy-load starts from overshooting.
        alpha = 1.0
        for _ in range(40):
            m_try = m.copy()
            t_try = t.copy()
            m_try[free] = m[free] + alpha * dm
            t_try[free] = t[free] + alpha * dt
            if np.all(m_try[free] > 1e-6):
                v_try = m_try * np.exp(1j * t_try)
                r_try = sys.residual(v_try, m_try)
                if float(np.max(np.abs(r_try))) < res:
                    break
            alpha *= 0.5
        else:
            raise NonConvergenceError(
                f"line search stalled at residual {res:.3e}", history
            )
        m, t = m_try, t_try
        steps += 1
    raise NonConvergenceError(
        f"no convergence after {steps} iterations (residual {history[-1]:.3e})", history
    )


def solve_exact(
    net: Network,
    dispatch: Mapping[Channel, complex] | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
    vvc_tol: float = 1e-9,
    max_vvc_iter: int = 100,
) -> PhasorSolution:
    """Solve the exact power flow, iterating volt-var response to a fixed point.

    ``dispatch`` maps (node, phase) channels to controllable complex power,
    consumption-positive: a positive real part adds load, a negative one
    injects. Raises ``NonConvergenceError`` when Newton or the volt-var
    loop fails.
    """
    dispatch = {k: complex(v) for k, v in (dispatch or {}).items()}
    sys = _ExactSystem(net, dispatch)
    idx = net.index
    units = net.vvc_units

    history: list[float] = []
    total_steps = 0
    q = np.array([u.response(abs(net.slack_phasor(u.phase))) for u in units])
    if len(units) == 0:
        v, steps, res = _newton_solve(sys, tol, max_iter, history)
        total_steps = steps
    else:
        for outer in range(max_vvc_iter):
            sys.set_vvc(q)
            v, steps, res = _newton_solve(sys, tol, max_iter, history)
            total_steps += steps
            vm = np.abs(v[sys.vvc_cls])
            q_new = np.array([u.response(x) for u, x in zip(units, vm)])
            if np.max(np.abs(q_new - q)) <= vvc_tol:
                q = q_new
                break
            q = q_new
        else:
            raise NonConvergenceError("volt-var fixed point did not settle", history)
        sys.set_vvc(q)
        v, steps, res = _newton_solve(sys, tol, max_iter, history)
        total_steps += steps

    return _build_solution(net, sys, v, q, dispatch, total_steps, res)


def _channel_power(
    net: Network,
    v: dict[Channel, complex],
    vvc_q: Mapping[Channel, float],
    dispatch: Mapping[Channel, complex],
) -> dict[Channel, complex]:
    s: dict[Channel, complex] = {ch: 0.0 + 0.0j for ch in net.channels}
    for ld in net.loads:
        ch = (ld.node, ld.phase)
        vm2 = abs(v[ch]) ** 2
        s[ch] += (ld.beta_s + ld.beta_z * vm2) * ld.demand - 1j * ld.cap
    for ch, q in vvc_q.items():
        s[ch] += 1j * q
    for ch, w in dispatch.items():
        s[ch] += w
    return s


def _build_solution(
    net: Network,
    sys: _ExactSystem,
    v_cls: np.ndarray,
    q: np.ndarray,
    dispatch: dict[Channel, complex],
    steps: int,
    res: float,
) -> PhasorSolution:
    idx = net.index
    v = {ch: complex(v_cls[idx.class_of[ch]]) for ch in net.channels}
    vvc_q = {(u.node, u.phase): float(qi) for u, qi in zip(net.vvc_units, q)}
    # Channels can share a class but vvc channels are distinct per unit.
    s_node = _channel_power(net, v, vvc_q, dispatch)

    currents: dict[str, np.ndarray] = {}
    for ln in idx.real_lines:
        vf = np.array([v[(ln.from_node, p)] for p in ln.phases])
        vt = np.array([v[(ln.to_node, p)] for p in ln.phases])
        currents[ln.name] = idx.line_y[ln.name] @ (vf - vt)

    if idx.ideal_lines:
        defect: dict[Channel, complex] = {}
        for ch in net.channels:
            d = np.conj(s_node[ch] / v[ch]) if s_node[ch] != 0 else 0.0 + 0.0j
            defect[ch] = d
        for ln in idx.real_lines:
            i = currents[ln.name]
            for pi, p in enumerate(ln.phases):
                defect[(ln.from_node, p)] = defect.get((ln.from_node, p), 0j) + i[pi]
                defect[(ln.to_node, p)] = defect.get((ln.to_node, p), 0j) - i[pi]
        flows = idx.resolve_ideal_flows(defect)
        for ln in idx.ideal_lines:
            currents[ln.name] = np.array(
                [flows.get((ln.name, pi), 0j) for pi in range(len(ln.phases))]
            )

    s_line: dict[str, np.ndarray] = {}
    for name, i in currents.items():
        ln = net.line_map[name]
        vt = np.array([v[(ln.to_node, p)] for p in ln.phases])
        s_line[name] = vt * np.conj(i)

    return PhasorSolution(
        V=v,
        I=currents,
        S_line=s_line,
        s_node=s_node,
        vvc_q=vvc_q,
        dispatch=dispatch,
        iterations=steps,
        residual_norm=res,
    )


def kcl_residual(net: Network, sol: PhasorSolution) -> float:
    """Largest per-channel current imbalance implied by a solution.

    Recomputes the drawn current from the network data and the solution
    phasors (not from the stored per-channel powers), so it independently
    checks both the voltages and the recovered coupling flows.
    """
    s = _channel_power(net, sol.V, sol.vvc_q, sol.dispatch)
    bal = {ch: -np.conj(s[ch] / sol.V[ch]) for ch in net.channels}
    for ln in net.lines:
        if not ln.closed:
            continue
        i = sol.I[ln.name]
        for pi, p in enumerate(ln.phases):
            bal[(ln.to_node, p)] += i[pi]
            bal[(ln.from_node, p)] -= i[pi]
    worst = 0.0
    for ch, b in bal.items():
        if ch[0] == net.slack_id or net.index.class_of[ch] in net.index.slack_value:
            continue
        worst = max(worst, abs(b))
    return worst


def switch_flow_estimate(v_from: np.ndarray, v_to: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Receiving-end apparent power if a tie with admittance ``y`` closed now.

    Evaluates ``V_to * conj(Y (V_from - V_to))`` at the given (typically
    pre-closure) phasors; no network re-solve is involved.
    """
    v_from = np.asarray(v_from, dtype=complex)
    v_to = np.asarray(v_to, dtype=complex)
    return v_to * np.conj(np.asarray(y, dtype=complex) @ (v_from - v_to))
