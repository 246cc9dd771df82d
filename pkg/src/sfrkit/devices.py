"""Dynamic device equations: two-axis machine, IEEE Type-1 exciter, governors.

All electrical parameters are per unit on the *system* MVA base (the case
loader converts from machine base), time constants in seconds, speed as the
per-unit deviation ``dw`` from nominal. Device states are absolute values;
the droop response of every governor is zero at nominal speed.

Machine (two-axis): states ``delta`` (rad), ``omega`` (pu speed deviation),
``eqp``, ``edp`` (transient EMFs, pu).

Exciter (IEEE Type-1, no saturation): states ``efd``, ``rf`` (rate
feedback), ``vr`` (regulator output). ``vr`` limits are hard anti-windup
clamps, active only when the caller enables limits.

Governors settle at a mechanical-power deviation of ``-dw/R`` (plus the
optional turbine-damping term), the droop contract used by the
post-disturbance frequency arithmetic:

TGOV1   gv: T1 gv' = (p_c - dw/R) - gv          (valve servo, clamped)
        gr: T3 gr' = gv - gr                     (reheat)
        Pm = (T2/T3) gv + (1 - T2/T3) gr - Dt dw
IEESGO  y1: T1 y1' = -dw/R - y1                  (droop sensing)
        y2: T2 y2' = K2 (y1 - y3) - y2           (transient compensation)
        y3: T3 y3' = y1 - y3                     (reset)
        tm: T4 tm' = (p_c + y3 + y2) - tm        (turbine, clamped)
        Pm = tm
GAST    x1: T1 x1' = (p_c - dw/R) - x1           (valve positioner, clamped)
        x2: T2 x2' = x1 - x2                     (fuel system)
        x3: T3 x3' = x2 - x3                     (exhaust temperature; the
                                                  limit path is disabled)
        Pm = x2 - Dt dw

At equilibrium with speed deviation dw: y1 = y3 = -dw/R, y2 = 0 and
tm = p_c - dw/R for IEESGO; gv = gr = p_c - dw/R for TGOV1; x1 = x2 = x3 =
p_c - dw/R for GAST.
"""
from __future__ import annotations

import numpy as np

MACHINE_STATES = ("delta", "omega", "eqp", "edp")
EXCITER_STATES = ("efd", "rf", "vr")
GOVERNOR_STATES = {
    "TGOV1": ("gv", "gr"),
    "IEESGO": ("y1", "y2", "y3", "tm"),
    "GAST": ("x1", "x2", "x3"),
}
GOVERNOR_MODELS = tuple(GOVERNOR_STATES)


# ---------------------------------------------------------------------------
# two-axis machine
# ---------------------------------------------------------------------------

def machine_currents(delta, eqp, edp, vm, va, ra, xdp, xqp):
    """dq currents from the stator algebra, vectorized over machines.

    Returns (i_d, i_q, v_d, v_q) with v_d = V sin(delta - theta),
    v_q = V cos(delta - theta).
    """
    vd = vm * np.sin(delta - va)
    vq = vm * np.cos(delta - va)
    det = ra * ra + xdp * xqp
    id_ = (ra * (edp - vd) + xqp * (eqp - vq)) / det
    iq = (-xdp * (edp - vd) + ra * (eqp - vq)) / det
    return id_, iq, vd, vq


def electrical_torque(eqp, edp, id_, iq, xdp, xqp):
    return edp * id_ + eqp * iq + (xqp - xdp) * id_ * iq


def machine_derivs(omega, eqp, edp, id_, iq, tm, efd, h, d, xd, xq, xdp, xqp,
                   td0p, tq0p, omega_s):
    """State derivatives of the two-axis machine block."""
    te = electrical_torque(eqp, edp, id_, iq, xdp, xqp)
    ddelta = omega_s * omega
    domega = (tm - te - d * omega) / (2.0 * h)
    deqp = (-eqp - (xd - xdp) * id_ + efd) / td0p
    dedp = (-edp + (xq - xqp) * iq) / tq0p
    return ddelta, domega, deqp, dedp


def machine_init(vm, va, p, q, ra, xd, xq, xdp, xqp):
    """Equilibrium machine states and field voltage from a solved terminal
    condition (V, theta, P, Q on system base).

    Returns (delta, eqp, edp, efd, tm).
    """
    vbar = vm * np.exp(1j * va)
    ibar = np.conj((p + 1j * q) / vbar)
    ebar = vbar + (ra + 1j * xq) * ibar
    delta = np.angle(ebar)
    rot = np.exp(-1j * (delta - np.pi / 2.0))
    idq = ibar * rot
    vdq = vbar * rot
    id_, iq = idq.real, idq.imag
    vd, vq = vdq.real, vdq.imag
    eqp = vq + ra * iq + xdp * id_
    edp = vd + ra * id_ - xqp * iq
    efd = eqp + (xd - xdp) * id_
    tm = electrical_torque(eqp, edp, id_, iq, xdp, xqp)
    return delta, eqp, edp, efd, tm


# ---------------------------------------------------------------------------
# IEEE Type-1 exciter
# ---------------------------------------------------------------------------

def exciter_derivs(efd, rf, vr, vt, vref, ka, ta, ke, te, kf, tf,
                   vr_min, vr_max, limits):
    defd = (vr - ke * efd) / te
    drf = (-rf + (kf / tf) * efd) / tf
    dvr = (-vr + ka * rf - (ka * kf / tf) * efd + ka * (vref - vt)) / ta
    if limits:
        dvr = np.where((vr >= vr_max) & (dvr > 0.0), 0.0, dvr)
        dvr = np.where((vr <= vr_min) & (dvr < 0.0), 0.0, dvr)
    return defd, drf, dvr


def exciter_init(efd, vt, ka, ke, kf, tf):
    """Equilibrium exciter states and the regulator reference.

    Returns (rf, vr, vref) such that all three derivatives vanish.
    """
    rf = (kf / tf) * efd
    vr = ke * efd
    vref = vt + vr / ka
    return rf, vr, vref


# ---------------------------------------------------------------------------
# governors (vectorized over the machines of one model group)
# ---------------------------------------------------------------------------

def governor_init(model: str, p_c: np.ndarray) -> np.ndarray:
    """Stacked equilibrium states [n_states, n] at nominal speed."""
    n = len(p_c)
    if model == "TGOV1":
        return np.vstack([p_c, p_c])
    if model == "IEESGO":
        z = np.zeros(n)
        return np.vstack([z, z, z, p_c])
    if model == "GAST":
        return np.vstack([p_c, p_c, p_c])
    raise ValueError(f"unknown governor model {model!r}")


def governor_derivs(model: str, s: np.ndarray, dw: np.ndarray,
                    p_c: np.ndarray, par: dict, limits: bool) -> list:
    """Per-state derivative rows for one governor group.

    `s` holds the group's states stacked in the order of GOVERNOR_STATES;
    the returned list is aligned with that order.
    """
    r = par["r"]
    if model == "TGOV1":
        gv, gr = s
        dgv = ((p_c - dw / r) - gv) / par["t1"]
        if limits:
            dgv = _clamp_rate(gv, dgv, par["v_min"], par["v_max"])
        dgr = (gv - gr) / par["t3"]
        return [dgv, dgr]
    if model == "IEESGO":
        y1, y2, y3, tm = s
        dy1 = (-dw / r - y1) / par["t1"]
        dy2 = (par["k2"] * (y1 - y3) - y2) / par["t2"]
        dy3 = (y1 - y3) / par["t3"]
        dtm = ((p_c + y3 + y2) - tm) / par["t4"]
        if limits:
            dtm = _clamp_rate(tm, dtm, par["p_min"], par["p_max"])
        return [dy1, dy2, dy3, dtm]
    if model == "GAST":
        x1, x2, x3 = s
        dx1 = ((p_c - dw / r) - x1) / par["t1"]
        if limits:
            dx1 = _clamp_rate(x1, dx1, par["v_min"], par["v_max"])
        dx2 = (x1 - x2) / par["t2"]
        dx3 = (x2 - x3) / par["t3"]
        return [dx1, dx2, dx3]
    raise ValueError(f"unknown governor model {model!r}")


def governor_pmech(model: str, s: np.ndarray, dw: np.ndarray,
                   par: dict) -> np.ndarray:
    if model == "TGOV1":
        gv, gr = s
        frac = par["t2"] / par["t3"]
        return frac * gv + (1.0 - frac) * gr - par["dt"] * dw
    if model == "IEESGO":
        return s[3]
    if model == "GAST":
        return s[1] - par["dt"] * dw
    raise ValueError(f"unknown governor model {model!r}")


def governor_steady_deviation(model: str, dw: float, par_scalar: dict) -> dict:
    """Per-state deviations from nominal at a settled speed deviation dw."""
    droop = -dw / par_scalar["r"]
    if model == "TGOV1":
        return {"gv": droop, "gr": droop}
    if model == "IEESGO":
        return {"y1": droop, "y2": 0.0, "y3": droop, "tm": droop}
    if model == "GAST":
        return {"x1": droop, "x2": droop, "x3": droop}
    raise ValueError(f"unknown governor model {model!r}")


def _clamp_rate(value, rate, lo, hi):
    rate = np.where((value >= hi) & (rate > 0.0), 0.0, rate)
    rate = np.where((value <= lo) & (rate < 0.0), 0.0, rate)
    return rate
