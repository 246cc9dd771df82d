"""Nonlinear DAE residuals and the implicit-trapezoidal time-domain simulator.

The simulator is the ground-truth oracle for frequency trajectories: loads
are folded into the admittance matrix as constant impedances at the solved
voltages, machine/exciter/governor dynamics follow :mod:`sfrkit.devices`,
and each step solves the trapezoidal update with a damped-free Newton
iteration on the combined (state, algebraic) system. A generator trip
removes the machine's injection and freezes its states; a load step adds a
constant-impedance load sized to draw the requested power at the voltage
seen when the event fires.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import devices
from .errors import CaseError, SimulationError
from .grid import (GridCase, OperatingPoint, StateLayout, build_state_layout,
                   build_ybus, governor_sysbase, machine_sysbase)


@dataclass(frozen=True)
class DisturbanceEvent:
    """A single applied disturbance.

    ``kind`` is "trip" (target = machine id) or "load_step" (target = bus
    id). ``dp_mw`` is positive for lost generation or added load.
    """
    time: float
    kind: str
    target: object
    dp_mw: float = 0.0

    def validate(self, case: GridCase) -> None:
        if self.time < 0:
            raise CaseError("event time must be >= 0")
        if self.kind == "trip":
            k = case.machine_index(str(self.target))
            if not case.u_on[k]:
                raise CaseError(f"cannot trip decommitted machine "
                                f"{self.target!r}")
        elif self.kind == "load_step":
            case.bus_index(int(self.target))
        else:
            raise CaseError(f"unknown event kind {self.kind!r}")


@dataclass
class Trajectory:
    """Simulated time series on a uniform grid."""
    t: np.ndarray               # [T] s, absolute
    x: np.ndarray               # [T, n]
    y: np.ndarray               # [T, l]
    f_coi: np.ndarray           # [T] Hz
    layout: StateLayout
    event: Optional[DisturbanceEvent]
    f0_hz: float

    def since_event(self) -> tuple[np.ndarray, np.ndarray]:
        """(t - t_event, f_coi) restricted to t >= t_event."""
        t0 = self.event.time if self.event is not None else 0.0
        mask = self.t >= t0 - 1e-12
        return self.t[mask] - t0, self.f_coi[mask]


DEFAULT_LOAD_ZIP = (0.0, 0.0, 1.0)
"""Static-load split (constant-impedance, constant-current, constant-power).

Constant power is the default: it keeps the droop-sum steady state exact
for trips and load steps, so the time-domain oracle and the modal
machinery share one equilibrium. Constant impedance/current mixes are
available for sensitivity studies."""


class SystemModel:
    """Vectorized DAE assembly for the committed machines of one case.

    Pure evaluation object: residuals and Jacobians are functions of the
    supplied vectors plus optional overrides for the active-machine mask,
    the augmented admittance matrix, and the constant-power load vector
    (used by the simulator for events).
    """

    def __init__(self, case: GridCase, op: OperatingPoint,
                 load_zip: tuple = DEFAULT_LOAD_ZIP):
        if len(load_zip) != 3 or abs(sum(load_zip) - 1.0) > 1e-12 \
                or min(load_zip) < 0:
            raise SimulationError("load_zip must be three nonnegative "
                                  "fractions summing to 1")
        self.load_zip = tuple(float(v) for v in load_zip)
        self.case = case
        self.layout = op.layout if op.layout is not None else build_state_layout(case)
        self.omega_s = 2.0 * np.pi * case.f0_hz
        self.f0_hz = case.f0_hz

        committed = [(k, m) for k, m in enumerate(case.machines)
                     if case.u_on[k]]
        self.mach_case_pos = np.array([k for k, _ in committed], dtype=int)
        mids = [m.id for _, m in committed]
        self.machine_ids = mids
        self.n_mach = len(mids)

        pars = [machine_sysbase(m, case.base_mva) for _, m in committed]
        for name in ("h", "d", "ra", "xd", "xq", "xdp", "xqp", "td0p", "tq0p"):
            setattr(self, name, np.array([p[name] for p in pars]))
        self.bus_pos = np.array([case.bus_index(m.bus) for _, m in committed],
                                dtype=int)

        lay = self.layout
        self.idx_delta = np.array([lay.index(i, "delta") for i in mids])
        self.idx_omega = np.array([lay.index(i, "omega") for i in mids])
        self.idx_eqp = np.array([lay.index(i, "eqp") for i in mids])
        self.idx_edp = np.array([lay.index(i, "edp") for i in mids])

        # exciter group
        exc_rows = [(j, case.exciter_for(mid)) for j, mid in enumerate(mids)]
        self.exc_pos = np.array([j for j, e in exc_rows if e is not None],
                                dtype=int)
        excs = [e for _, e in exc_rows if e is not None]
        for name in ("ka", "ta", "ke", "te", "kf", "tf", "vr_min", "vr_max"):
            setattr(self, "exc_" + name,
                    np.array([getattr(e, name) for e in excs]))
        self.idx_efd = np.array([lay.index(mids[j], "efd") for j in self.exc_pos])
        self.idx_rf = np.array([lay.index(mids[j], "rf") for j in self.exc_pos])
        self.idx_vr = np.array([lay.index(mids[j], "vr") for j in self.exc_pos])
        self.vref = op.vref[self.mach_case_pos[self.exc_pos]] \
            if op.vref is not None else np.zeros(len(self.exc_pos))
        self.efd_const = np.zeros(self.n_mach)
        if op.efd_const is not None:
            no_exc = np.setdiff1d(np.arange(self.n_mach), self.exc_pos)
            self.efd_const[no_exc] = op.efd_const[self.mach_case_pos[no_exc]]

        # governor groups by model
        self.gov_groups = []
        self.tm_const = np.zeros(self.n_mach)
        if op.p_c is not None:
            self.tm_const[:] = op.p_c[self.mach_case_pos]
        for model in devices.GOVERNOR_MODELS:
            rows = [(j, case.governor_for(mid)) for j, mid in enumerate(mids)
                    if case.governor_for(mid) is not None
                    and case.governor_for(mid).model == model]
            if not rows:
                continue
            pos = np.array([j for j, _ in rows], dtype=int)
            govs = [g for _, g in rows]
            par = {}
            keys = ("r", "t1", "t2", "t3", "t4", "k2", "dt",
                    "v_min", "v_max", "p_min", "p_max")
            conv = [governor_sysbase(g, case.machines[self.mach_case_pos[j]].mva,
                                     case.base_mva) for j, g in rows]
            for kname in keys:
                par[kname] = np.array([c[kname] for c in conv])
            sidx = np.array([[lay.index(mids[j], s)
                              for s in devices.GOVERNOR_STATES[model]]
                             for j, _ in rows], dtype=int).T   # [n_states, n]
            pc = self.tm_const[pos].copy()
            self.gov_groups.append(
                {"model": model, "pos": pos, "par": par, "sidx": sidx,
                 "p_c": pc})
        self.has_gov = np.zeros(self.n_mach, dtype=bool)
        for grp in self.gov_groups:
            self.has_gov[grp["pos"]] = True

        # network; the impedance fraction of each load folds into the
        # admittance matrix at the solved voltage, the rest stays as
        # voltage-dependent current injection
        zf, if_, pf_ = self.load_zip
        ybus = build_ybus(case)
        yl = np.zeros(case.n_bus, dtype=complex)
        s_all = np.array([complex(b.pload_mw, b.qload_mvar) / case.base_mva
                          for b in case.buses])
        for i, b in enumerate(case.buses):
            if s_all[i] != 0 and zf > 0:
                yl[i] = np.conj(zf * s_all[i]) / (op.vm[i] ** 2)
        self.y_aug = ybus + np.diag(yl)
        self.s_p = pf_ * s_all                    # constant-power loads
        self.s_i = if_ * s_all                    # constant-current loads
        self.v0_mag = op.vm.copy()
        self.pi_buses = np.where((np.abs(self.s_p) > 0) |
                                 (np.abs(self.s_i) > 0))[0]

        self.n = lay.n
        self.l = lay.l

        self._jconst = self._constant_j1()
        self._j4_base = _expand_complex(-self.y_aug)
        self._g_mat = np.ascontiguousarray(self.y_aug.real)
        self._b_mat = np.ascontiguousarray(self.y_aug.imag)
        det = self.ra * self.ra + self.xdp * self.xqp
        self._inv_det = 1.0 / det
        self._inv_2h = 1.0 / (2.0 * self.h)
        self._inv_td0p = 1.0 / self.td0p
        self._inv_tq0p = 1.0 / self.tq0p
        self._n_exc = len(self.exc_pos)

        # hard-clamp registry: (state index, lo, hi, machine position)
        clamps = []
        for jj, j in enumerate(self.exc_pos):
            clamps.append((int(self.idx_vr[jj]), float(self.exc_vr_min[jj]),
                           float(self.exc_vr_max[jj]), int(j)))
        for grp in self.gov_groups:
            par = grp["par"]
            if grp["model"] == "TGOV1":
                row, lo_k, hi_k = 0, "v_min", "v_max"
            elif grp["model"] == "IEESGO":
                row, lo_k, hi_k = 3, "p_min", "p_max"
            else:
                row, lo_k, hi_k = 0, "v_min", "v_max"
            for c, j in enumerate(grp["pos"]):
                clamps.append((int(grp["sidx"][row, c]), float(par[lo_k][c]),
                               float(par[hi_k][c]), int(j)))
        self.clamps = tuple(clamps)

        # per-machine state index lists, for freezing tripped machines
        self.machine_state_idx = [
            np.array(sorted(lay.machine_states(mid).values()), dtype=int)
            for mid in mids]

    # -- evaluation -------------------------------------------------------

    def residual(self, x: np.ndarray, y: np.ndarray, limits: bool = False,
                 active: Optional[np.ndarray] = None,
                 y_aug: Optional[np.ndarray] = None,
                 s_p: Optional[np.ndarray] = None):
        """DAE residual (f, g) at (x, y).

        ``active`` masks tripped machines (frozen states, no injection);
        ``y_aug`` overrides the load-augmented admittance matrix; ``s_p``
        overrides the constant-power load vector (both used for events).
        """
        if x.shape != (self.n,) or y.shape != (self.l,):
            raise SimulationError(
                f"dimension mismatch: expected x[{self.n}], y[{self.l}], "
                f"got x[{x.shape}], y[{y.shape}]")
        if y_aug is None:
            y_aug = self.y_aug

        vre_all = y[0::2]
        vim_all = y[1::2]
        vre = vre_all[self.bus_pos]
        vim = vim_all[self.bus_pos]

        delta = x[self.idx_delta]
        omega = x[self.idx_omega]
        eqp = x[self.idx_eqp]
        edp = x[self.idx_edp]
        sd = np.sin(delta)
        cd = np.cos(delta)
        vd = sd * vre - cd * vim
        vq = cd * vre + sd * vim
        ed_vd = edp - vd
        eq_vq = eqp - vq
        id_ = (self.ra * ed_vd + self.xqp * eq_vq) * self._inv_det
        iq = (self.ra * eq_vq - self.xdp * ed_vd) * self._inv_det

        efd = self.efd_const.copy()
        if self._n_exc:
            efd[self.exc_pos] = x[self.idx_efd]

        tm = self.tm_const.copy()
        for grp in self.gov_groups:
            s = x[grp["sidx"]]
            tm[grp["pos"]] = devices.governor_pmech(
                grp["model"], s, omega[grp["pos"]], grp["par"])

        te = edp * id_ + eqp * iq + (self.xqp - self.xdp) * id_ * iq
        f = np.zeros(self.n)
        f[self.idx_delta] = self.omega_s * omega
        f[self.idx_omega] = (tm - te - self.d * omega) * self._inv_2h
        f[self.idx_eqp] = (efd - eqp - (self.xd - self.xdp) * id_) \
            * self._inv_td0p
        f[self.idx_edp] = ((self.xq - self.xqp) * iq - edp) * self._inv_tq0p

        if self._n_exc:
            e = self.exc_pos
            vt = np.sqrt(vre[e] ** 2 + vim[e] ** 2)
            defd, drf, dvr = devices.exciter_derivs(
                x[self.idx_efd], x[self.idx_rf], x[self.idx_vr], vt,
                self.vref, self.exc_ka, self.exc_ta, self.exc_ke,
                self.exc_te, self.exc_kf, self.exc_tf, self.exc_vr_min,
                self.exc_vr_max, limits)
            f[self.idx_efd] = defd
            f[self.idx_rf] = drf
            f[self.idx_vr] = dvr

        for grp in self.gov_groups:
            s = x[grp["sidx"]]
            ds = devices.governor_derivs(grp["model"], s, omega[grp["pos"]],
                                         grp["p_c"], grp["par"], limits)
            sidx = grp["sidx"]
            for r, row in enumerate(ds):
                f[sidx[r]] = row

        # network current balance (one machine per bus, validated at load)
        ire = id_ * sd + iq * cd
        iim = iq * sd - id_ * cd
        if active is not None and not active.all():
            for j in np.where(~active)[0]:
                f[self.machine_state_idx[j]] = 0.0
            ire = np.where(active, ire, 0.0)
            iim = np.where(active, iim, 0.0)
        if y_aug is self.y_aug:
            gre = -(self._g_mat @ vre_all - self._b_mat @ vim_all)
            gim = -(self._b_mat @ vre_all + self._g_mat @ vim_all)
        else:
            yv = y_aug @ (vre_all + 1j * vim_all)
            gre = -yv.real.copy()
            gim = -yv.imag.copy()
        gre[self.bus_pos] += ire
        gim[self.bus_pos] += iim

        sp = self.s_p if s_p is None else s_p
        lb = self.pi_buses if s_p is None else \
            np.where((np.abs(sp) > 0) | (np.abs(self.s_i) > 0))[0]
        if lb.size:
            vr_l = vre_all[lb]
            vi_l = vim_all[lb]
            d2 = vr_l * vr_l + vi_l * vi_l
            coef = np.conj(sp[lb]) / d2
            ci = np.conj(self.s_i[lb])
            if np.any(ci != 0):
                coef = coef + ci / (self.v0_mag[lb] * np.sqrt(d2))
            gre[lb] -= coef.real * vr_l - coef.imag * vi_l
            gim[lb] -= coef.real * vi_l + coef.imag * vr_l

        g = np.empty(self.l)
        g[0::2] = gre
        g[1::2] = gim
        return f, g

    def jacobians(self, x: np.ndarray, y: np.ndarray,
                  active: Optional[np.ndarray] = None,
                  y_aug: Optional[np.ndarray] = None, limits: bool = False,
                  s_p: Optional[np.ndarray] = None):
        """Central finite-difference Jacobian blocks (J1, J2, J3, J4).

        Per-variable step h = max(1e-6, 1e-6 |v|). Linearization passes
        limits=False (smooth map); the simulator differentiates the same
        clamped map it solves.
        """
        n, l = self.n, self.l
        j1 = np.zeros((n, n))
        j2 = np.zeros((n, l))
        j3 = np.zeros((l, n))
        j4 = np.zeros((l, l))
        for i in range(n):
            h = max(1e-6, 1e-6 * abs(x[i]))
            xp = x.copy(); xp[i] += h
            xm = x.copy(); xm[i] -= h
            fp, gp = self.residual(xp, y, limits, active, y_aug, s_p)
            fm, gm = self.residual(xm, y, limits, active, y_aug, s_p)
            j1[:, i] = (fp - fm) / (2 * h)
            j3[:, i] = (gp - gm) / (2 * h)
        for i in range(l):
            h = max(1e-6, 1e-6 * abs(y[i]))
            yp = y.copy(); yp[i] += h
            ym = y.copy(); ym[i] -= h
            fp, gp = self.residual(x, yp, limits, active, y_aug, s_p)
            fm, gm = self.residual(x, ym, limits, active, y_aug, s_p)
            j2[:, i] = (fp - fm) / (2 * h)
            j4[:, i] = (gp - gm) / (2 * h)
        return j1, j2, j3, j4

    def _constant_j1(self) -> np.ndarray:
        """State-Jacobian entries that do not depend on the operating state:
        governor and exciter internals, EMF self-terms, swing damping."""
        n = self.n
        j1 = np.zeros((n, n))
        det = self.ra * self.ra + self.xdp * self.xqp
        did_deq = self.xqp / det
        did_ded = self.ra / det
        diq_deq = self.ra / det
        diq_ded = -self.xdp / det
        j1[self.idx_delta, self.idx_omega] = self.omega_s
        j1[self.idx_omega, self.idx_omega] = -self.d / (2 * self.h)
        j1[self.idx_eqp, self.idx_eqp] = \
            (-1.0 - (self.xd - self.xdp) * did_deq) / self.td0p
        j1[self.idx_eqp, self.idx_edp] = \
            -(self.xd - self.xdp) * did_ded / self.td0p
        j1[self.idx_edp, self.idx_eqp] = \
            (self.xq - self.xqp) * diq_deq / self.tq0p
        j1[self.idx_edp, self.idx_edp] = \
            (-1.0 + (self.xq - self.xqp) * diq_ded) / self.tq0p
        if len(self.exc_pos):
            j1[self.idx_eqp[self.exc_pos], self.idx_efd] = \
                1.0 / self.td0p[self.exc_pos]
            j1[self.idx_efd, self.idx_efd] = -self.exc_ke / self.exc_te
            j1[self.idx_efd, self.idx_vr] = 1.0 / self.exc_te
            j1[self.idx_rf, self.idx_rf] = -1.0 / self.exc_tf
            j1[self.idx_rf, self.idx_efd] = self.exc_kf / self.exc_tf ** 2
            j1[self.idx_vr, self.idx_vr] = -1.0 / self.exc_ta
            j1[self.idx_vr, self.idx_rf] = self.exc_ka / self.exc_ta
            j1[self.idx_vr, self.idx_efd] = \
                -self.exc_ka * self.exc_kf / (self.exc_tf * self.exc_ta)
        for grp in self.gov_groups:
            par, sx = grp["par"], grp["sidx"]
            om = self.idx_omega[grp["pos"]]
            h2 = 2 * self.h[grp["pos"]]
            if grp["model"] == "TGOV1":
                gv, gr = sx
                j1[gv, gv] = -1.0 / par["t1"]
                j1[gv, om] = -1.0 / (par["r"] * par["t1"])
                j1[gr, gv] = 1.0 / par["t3"]
                j1[gr, gr] = -1.0 / par["t3"]
                frac = par["t2"] / par["t3"]
                j1[om, gv] = frac / h2
                j1[om, gr] = (1.0 - frac) / h2
                j1[om, om] += -par["dt"] / h2
            elif grp["model"] == "IEESGO":
                y1, y2, y3, tm = sx
                j1[y1, y1] = -1.0 / par["t1"]
                j1[y1, om] = -1.0 / (par["r"] * par["t1"])
                j1[y2, y1] = par["k2"] / par["t2"]
                j1[y2, y3] = -par["k2"] / par["t2"]
                j1[y2, y2] = -1.0 / par["t2"]
                j1[y3, y1] = 1.0 / par["t3"]
                j1[y3, y3] = -1.0 / par["t3"]
                j1[tm, y2] = 1.0 / par["t4"]
                j1[tm, y3] = 1.0 / par["t4"]
                j1[tm, tm] = -1.0 / par["t4"]
                j1[om, tm] = 1.0 / h2
            else:  # GAST
                x1, x2, x3 = sx
                j1[x1, x1] = -1.0 / par["t1"]
                j1[x1, om] = -1.0 / (par["r"] * par["t1"])
                j1[x2, x1] = 1.0 / par["t2"]
                j1[x2, x2] = -1.0 / par["t2"]
                j1[x3, x2] = 1.0 / par["t3"]
                j1[x3, x3] = -1.0 / par["t3"]
                j1[om, x2] = 1.0 / h2
                j1[om, om] += -par["dt"] / h2
        return j1

    def jacobians_analytic(self, x: np.ndarray, y: np.ndarray,
                           active: Optional[np.ndarray] = None,
                           y_aug: Optional[np.ndarray] = None,
                           s_p: Optional[np.ndarray] = None):
        """Closed-form Jacobian blocks of the smooth (limit-free) DAE map.

        Used by the simulator's Newton matrix; agrees with the central
        finite-difference blocks to truncation error.
        """
        if active is None:
            active = np.ones(self.n_mach, dtype=bool)
        if y_aug is None or y_aug is self.y_aug:
            j4 = self._j4_base.copy()
        else:
            j4 = _expand_complex(-y_aug)
        j1 = self._jconst.copy()
        j2 = np.zeros((self.n, self.l))
        j3 = np.zeros((self.l, self.n))

        sp = self.s_p if s_p is None else s_p
        lb = self.pi_buses if s_p is None else \
            np.where((np.abs(sp) > 0) | (np.abs(self.s_i) > 0))[0]
        if lb.size:
            vr_l = y[2 * lb]
            vi_l = y[2 * lb + 1]
            d2 = vr_l * vr_l + vi_l * vi_l
            cr = np.conj(sp[lb]).real / d2
            ci = np.conj(sp[lb]).imag / d2
            re_i = cr * vr_l - ci * vi_l
            im_i = ci * vr_l + cr * vi_l
            drr = cr - 2 * vr_l * re_i / d2
            dri = -ci - 2 * vi_l * re_i / d2
            dir_ = ci - 2 * vr_l * im_i / d2
            dii = cr - 2 * vi_l * im_i / d2
            cI = np.conj(self.s_i[lb])
            if np.any(cI != 0):
                nrm = self.v0_mag[lb] * np.sqrt(d2)
                cr2 = cI.real / nrm
                ci2 = cI.imag / nrm
                re2 = cr2 * vr_l - ci2 * vi_l
                im2 = ci2 * vr_l + cr2 * vi_l
                drr += cr2 - re2 * vr_l / d2
                dri += -ci2 - re2 * vi_l / d2
                dir_ += ci2 - im2 * vr_l / d2
                dii += cr2 - im2 * vi_l / d2
            j4[2 * lb, 2 * lb] -= drr
            j4[2 * lb, 2 * lb + 1] -= dri
            j4[2 * lb + 1, 2 * lb] -= dir_
            j4[2 * lb + 1, 2 * lb + 1] -= dii

        v = y[0::2] + 1j * y[1::2]
        vre = v.real[self.bus_pos]
        vim = v.imag[self.bus_pos]
        vm = np.abs(v)[self.bus_pos]
        delta = x[self.idx_delta]
        eqp = x[self.idx_eqp]
        edp = x[self.idx_edp]
        sd, cd = np.sin(delta), np.cos(delta)
        vd = sd * vre - cd * vim
        vq = cd * vre + sd * vim
        det = self.ra * self.ra + self.xdp * self.xqp
        id_ = (self.ra * (edp - vd) + self.xqp * (eqp - vq)) / det
        iq = (-self.xdp * (edp - vd) + self.ra * (eqp - vq)) / det

        did_deq = self.xqp / det
        did_ded = self.ra / det
        diq_deq = self.ra / det
        diq_ded = -self.xdp / det
        # through vd, vq
        did_dvd = -self.ra / det
        did_dvq = -self.xqp / det
        diq_dvd = self.xdp / det
        diq_dvq = -self.ra / det
        did_dd = did_dvd * vq + did_dvq * (-vd)
        diq_dd = diq_dvd * vq + diq_dvq * (-vd)
        did_dre = did_dvd * sd + did_dvq * cd
        did_dim = did_dvd * (-cd) + did_dvq * sd
        diq_dre = diq_dvd * sd + diq_dvq * cd
        diq_dim = diq_dvd * (-cd) + diq_dvq * sd

        xqd = self.xqp - self.xdp

        def dte(did, diq, extra=0.0):
            return edp * did + eqp * diq + xqd * (did * iq + id_ * diq) + extra

        h2 = 2 * self.h
        dte_dd = dte(did_dd, diq_dd)
        dte_deq = dte(did_deq, diq_deq, iq)
        dte_ded = dte(did_ded, diq_ded, id_)
        dte_dre = dte(did_dre, diq_dre)
        dte_dim = dte(did_dim, diq_dim)

        j1[self.idx_omega, self.idx_delta] = -dte_dd / h2
        j1[self.idx_omega, self.idx_eqp] = -dte_deq / h2
        j1[self.idx_omega, self.idx_edp] = -dte_ded / h2
        j1[self.idx_eqp, self.idx_delta] = \
            -(self.xd - self.xdp) * did_dd / self.td0p
        j1[self.idx_edp, self.idx_delta] = \
            (self.xq - self.xqp) * diq_dd / self.tq0p

        cre = 2 * self.bus_pos
        cim = cre + 1
        j2[self.idx_omega, cre] = -dte_dre / h2
        j2[self.idx_omega, cim] = -dte_dim / h2
        j2[self.idx_eqp, cre] = -(self.xd - self.xdp) * did_dre / self.td0p
        j2[self.idx_eqp, cim] = -(self.xd - self.xdp) * did_dim / self.td0p
        j2[self.idx_edp, cre] = (self.xq - self.xqp) * diq_dre / self.tq0p
        j2[self.idx_edp, cim] = (self.xq - self.xqp) * diq_dim / self.tq0p
        if len(self.exc_pos):
            e = self.exc_pos
            scale = -self.exc_ka / self.exc_ta / np.maximum(vm[e], 1e-12)
            j2[self.idx_vr, cre[e]] = scale * vre[e]
            j2[self.idx_vr, cim[e]] = scale * vim[e]

        # injection terms: inj = (id + j iq) (sin d - j cos d)
        for j in range(self.n_mach):
            if not active[j]:
                # frozen machine: zero its state rows entirely
                rows = self.machine_state_idx[j]
                j1[rows, :] = 0.0
                j2[rows, :] = 0.0
                continue
            rr, ri = cre[j], cim[j]
            s, c = sd[j], cd[j]
            dre = {"d": did_dd[j], "eq": did_deq[j], "ed": did_ded[j],
                   "re": did_dre[j], "im": did_dim[j]}
            dqe = {"d": diq_dd[j], "eq": diq_deq[j], "ed": diq_ded[j],
                   "re": diq_dre[j], "im": diq_dim[j]}

            def dinj(key, rot_extra_re=0.0, rot_extra_im=0.0):
                return (dre[key] * s + dqe[key] * c + rot_extra_re,
                        dqe[key] * s - dre[key] * c + rot_extra_im)

            re_d, im_d = dinj("d", id_[j] * c - iq[j] * s,
                              iq[j] * c + id_[j] * s)
            cols = (self.idx_delta[j], self.idx_eqp[j], self.idx_edp[j])
            re_q, im_q = dinj("eq")
            re_e, im_e = dinj("ed")
            j3[rr, cols[0]] = re_d
            j3[ri, cols[0]] = im_d
            j3[rr, cols[1]] = re_q
            j3[ri, cols[1]] = im_q
            j3[rr, cols[2]] = re_e
            j3[ri, cols[2]] = im_e
            re_r, im_r = dinj("re")
            re_i, im_i = dinj("im")
            j4[rr, rr] += re_r
            j4[rr, ri] += re_i
            j4[ri, rr] += im_r
            j4[ri, ri] += im_i
        return j1, j2, j3, j4

    def solve_algebraic(self, x: np.ndarray, y0: np.ndarray,
                        active: Optional[np.ndarray] = None,
                        y_aug: Optional[np.ndarray] = None,
                        s_p: Optional[np.ndarray] = None,
                        tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
        """Damped inner Newton solve of g(x, y) = 0 at fixed x.

        Backtracking keeps the iterate out of the low-voltage region where
        constant-power load currents diverge (needed right after a large
        topology event).
        """
        y = y0.copy()
        for attempt in range(2):
            y, worst = self._newton_algebraic(x, y, active, y_aug, s_p, tol,
                                              max_iter)
            if worst <= tol:
                return y
            if attempt == 0:
                # re-seed from a Gauss-style fixed point: loads Z-ified at
                # the iterate, machines evaluated there, linear solve
                y = self._algebraic_seed(x, y, active, y_aug, s_p)
        if worst <= 1e-8:
            return y
        raise SimulationError(
            f"algebraic solve did not converge (residual {worst:.3e})")

    def _newton_algebraic(self, x, y, active, y_aug, s_p, tol, max_iter):
        _, g = self.residual(x, y, False, active, y_aug, s_p)
        worst = np.max(np.abs(g))
        for _ in range(max_iter):
            if worst <= tol:
                break
            _, _, _, j4 = self.jacobians_analytic(x, y, active, y_aug, s_p)
            try:
                step = np.linalg.solve(j4, g)
            except np.linalg.LinAlgError:
                raise SimulationError("singular algebraic Jacobian")
            lam = 1.0
            for _ in range(12):
                y_try = y - lam * step
                _, g_try = self.residual(x, y_try, False, active, y_aug, s_p)
                w_try = np.max(np.abs(g_try))
                if np.isfinite(w_try) and w_try < worst:
                    break
                lam *= 0.5
            else:
                break
            y, g, worst = y_try, g_try, w_try
        return y, worst

    def _algebraic_seed(self, x, y, active, y_aug, s_p, iters: int = 20):
        """Fixed-point voltage re-seed for post-event algebraic solves."""
        if active is None:
            active = np.ones(self.n_mach, dtype=bool)
        if y_aug is None:
            y_aug = self.y_aug
        sp = self.s_p if s_p is None else s_p
        v = y[0::2] + 1j * y[1::2]
        delta = x[self.idx_delta]
        eqp = x[self.idx_eqp]
        edp = x[self.idx_edp]
        sd, cd = np.sin(delta), np.cos(delta)
        for _ in range(iters):
            vm2 = np.maximum(np.abs(v) ** 2, 0.25)
            vre = v.real[self.bus_pos]
            vim = v.imag[self.bus_pos]
            vd = sd * vre - cd * vim
            vq = cd * vre + sd * vim
            id_ = (self.ra * (edp - vd) + self.xqp * (eqp - vq)) * self._inv_det
            iq = (self.ra * (eqp - vq) - self.xdp * (edp - vd)) * self._inv_det
            inj = (id_ * sd + iq * cd) + 1j * (iq * sd - id_ * cd)
            i_bus = np.zeros(self.case.n_bus, dtype=complex)
            i_bus[self.bus_pos] = np.where(active, inj, 0.0)
            y_load = np.conj(sp + self.s_i * np.abs(v) / self.v0_mag) / vm2
            v = np.linalg.solve(y_aug + np.diag(y_load), i_bus)
        out = np.empty(self.l)
        out[0::2] = v.real
        out[1::2] = v.imag
        return out

    def coi_weights(self, active: Optional[np.ndarray] = None) -> np.ndarray:
        """Inertia weights C_z = H_z / H_t over active committed machines."""
        if active is None:
            active = np.ones(self.n_mach, dtype=bool)
        w = np.where(active, self.h, 0.0)
        return w / w.sum()


def dae_residual(case: GridCase, x: np.ndarray, y: np.ndarray,
                 op: Optional[OperatingPoint] = None, limits: bool = False,
                 load_zip: tuple = DEFAULT_LOAD_ZIP):
    """Evaluate (f, g) for a case around a given operating point.

    Convenience wrapper over :class:`SystemModel`; pass the initialized
    operating point to pin controller references and the load split.
    """
    if op is None or not op.initialized:
        raise SimulationError("dae_residual requires an initialized "
                              "operating point (init_dynamic_equilibrium)")
    return SystemModel(case, op, load_zip).residual(np.asarray(x, float),
                                                    np.asarray(y, float),
                                                    limits)


# ---------------------------------------------------------------------------
# time-domain simulation
# ---------------------------------------------------------------------------

def simulate(case: GridCase, op: OperatingPoint,
             event: Optional[DisturbanceEvent], horizon: float = 30.0,
             dt: float = 0.01, newton_tol: float = 1e-8,
             limits: bool = True,
             load_zip: tuple = DEFAULT_LOAD_ZIP) -> Trajectory:
    """Implicit-trapezoidal integration from the initialized equilibrium.

    The event is applied atomically at its timestamp (which must land on the
    time grid). Raises SimulationError with the failing time and residual if
    the per-step Newton iteration diverges.
    """
    if not op.initialized:
        raise SimulationError("simulate requires an initialized operating point")
    if not (0.0 < dt <= 0.05):
        raise SimulationError(f"dt must be in (0, 0.05], got {dt}")
    if horizon < 10.0:
        raise SimulationError(f"horizon must be >= 10 s, got {horizon}")
    if event is not None:
        event.validate(case)
        k_ev = event.time / dt
        if abs(k_ev - round(k_ev)) > 1e-9:
            raise SimulationError("event time must coincide with the time grid")

    model = SystemModel(case, op, load_zip)
    stepper = _TrapezoidStepper(model, dt, newton_tol, limits)
    nsteps = int(round(horizon / dt))
    t = np.arange(nsteps + 1) * dt
    x = np.empty((nsteps + 1, model.n))
    y = np.empty((nsteps + 1, model.l))
    x[0] = op.x_e
    y[0] = op.y_e

    event_step = int(round(event.time / dt)) if event is not None else -1
    tripped_pos = None
    stepper.start(x[0], y[0])

    for k in range(nsteps):
        if k == event_step:
            tripped_pos = stepper.apply_event(case, event)
        try:
            stepper.advance()
        except SimulationError as exc:
            raise SimulationError(f"at t = {t[k + 1]:.3f} s: {exc}") from None
        x[k + 1], y[k + 1] = stepper.xk, stepper.yk

    traj = Trajectory(t=t, x=x, y=y, f_coi=np.empty(0), layout=model.layout,
                      event=event, f0_hz=case.f0_hz)
    traj.f_coi = coi_frequency(case, traj, tripped_pos=tripped_pos,
                               event_step=event_step, model=model)
    return traj


def _expand_complex(m: np.ndarray) -> np.ndarray:
    """Real block expansion of a complex matrix acting on interleaved
    (re, im) vectors."""
    n = m.shape[0]
    out = np.empty((2 * n, 2 * n))
    out[0::2, 0::2] = m.real
    out[0::2, 1::2] = -m.imag
    out[1::2, 0::2] = m.imag
    out[1::2, 1::2] = m.real
    return out


class _TrapezoidStepper:
    """One-step trapezoidal solver with hard-clamp handling by pinning.

    Hard limits are enforced as a hybrid mode per clamped state: inside a
    step a state is either free (trapezoid row) or pinned to its bound
    (identity row). A free state that leaves its band gets pinned and the
    step is re-solved; a pinned state whose unconstrained derivative points
    back inward is released at the step boundary. This avoids the
    no-fixed-point chattering a derivative switch causes right at a bound.
    """

    def __init__(self, model: SystemModel, dt: float, tol: float,
                 limits: bool):
        self.m = model
        self.dt = dt
        self.a = 0.5 * dt
        self.tol = tol
        self.limits = limits
        self.active = np.ones(model.n_mach, dtype=bool)
        self.y_aug = model.y_aug
        self.s_p = None
        self.pinned: dict[int, float] = {}
        self._amat = None
        self._lu = None
        self._prev_iters = 0
        self._fk_prev = None

    # -- machinery --------------------------------------------------------

    def _deriv(self, x, y):
        """Unclamped derivatives with pinned and frozen rows zeroed."""
        f, g = self.m.residual(x, y, False, self.active, self.y_aug,
                               self.s_p)
        for i in self.pinned:
            f[i] = 0.0
        return f, g

    def _refresh(self, x, y):
        j1, j2, j3, j4 = self.m.jacobians_analytic(x, y, self.active,
                                                   self.y_aug, self.s_p)
        top = np.hstack([np.eye(self.m.n) - self.a * j1, -self.a * j2])
        self._amat = np.vstack([top, np.hstack([j3, j4])])
        self._factorize()

    def _factorize(self):
        amat = self._amat
        if self.pinned:
            amat = amat.copy()
            for i in self.pinned:
                amat[i, :] = 0.0
                amat[i, i] = 1.0
        self._lu = lu_factor(amat, check_finite=False)

    def start(self, x0, y0):
        self.xk = x0.copy()
        self.yk = y0.copy()
        self.fk, self.gk = self._deriv(self.xk, self.yk)
        self._refresh(self.xk, self.yk)

    def apply_event(self, case: GridCase, event: DisturbanceEvent):
        """Apply a disturbance atomically and reinitialize the algebra."""
        tripped_pos = None
        if event.kind == "trip":
            j = self.m.machine_ids.index(str(event.target))
            self.active = self.active.copy()
            self.active[j] = False
            tripped_pos = j
            for i, lo, hi, jm in self.m.clamps:
                if jm == j:
                    self.pinned.pop(i, None)
        else:
            b = self.m.case.bus_index(int(event.target))
            dp = event.dp_mw / case.base_mva
            if dp != 0.0:
                if self.m.load_zip[2] > 0.0:
                    # constant-power share present: step the P loads
                    self.s_p = (self.m.s_p if self.s_p is None
                                else self.s_p).copy()
                    self.s_p[b] += dp
                else:
                    v_now = abs(self.yk[2 * b] + 1j * self.yk[2 * b + 1])
                    self.y_aug = self.y_aug.copy()
                    self.y_aug[b, b] += dp / (v_now ** 2)
        self.yk = self.m.solve_algebraic(self.xk, self.yk, self.active,
                                         self.y_aug, self.s_p)
        self.fk, self.gk = self._deriv(self.xk, self.yk)
        self._fk_prev = None
        self._refresh(self.xk, self.yk)
        return tripped_pos

    def advance(self):
        # steady point: accept unchanged (keeps equilibria bit-exact flat)
        if max(self.dt * np.max(np.abs(self.fk), initial=0.0),
               np.max(np.abs(self.gk), initial=0.0)) <= self.tol:
            return
        # AB2-style predictor once two derivative samples exist
        if self._fk_prev is not None:
            x1 = self.xk + self.dt * (1.5 * self.fk - 0.5 * self._fk_prev)
        else:
            x1 = self.xk + self.dt * self.fk
        y1 = self.yk.copy()
        self._fk_prev = self.fk
        # chord strategy: keep the factorization while Newton stays fast,
        # rebuild at the predicted point when the previous step was slow
        if self._prev_iters > 2:
            self._refresh(x1, y1)
        for _ in range(len(self.m.clamps) + 1):
            x1, y1, f1, g1 = self._solve_step(x1, y1)
            if not self.limits or not self._pin_violations(x1):
                break
            self._factorize()
        else:
            raise SimulationError("clamp pinning did not stabilize")
        released = self._release_inward(x1, y1)
        self.xk, self.yk = x1, y1
        if released:
            self.fk, self.gk = self._deriv(x1, y1)
        else:
            self.fk, self.gk = f1, g1

    def _solve_step(self, x1, y1):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._solve_step_inner(x1, y1)

    def _solve_step_inner(self, x1, y1):
        for i, bound in self.pinned.items():
            x1[i] = bound
        refreshes = 0
        worst_prev = np.inf
        for it in range(40):
            f1, g1 = self._deriv(x1, y1)
            r1 = x1 - self.xk - self.a * (self.fk + f1)
            for i, bound in self.pinned.items():
                r1[i] = x1[i] - bound
            res = np.concatenate([r1, g1])
            worst = np.max(np.abs(res))
            if worst <= self.tol:
                self._prev_iters = it
                return x1, y1, f1, g1
            if not np.isfinite(worst):
                break
            if it >= 3 and worst > 0.1 * worst_prev and refreshes < 3:
                self._refresh(x1, y1)
                refreshes += 1
            step = lu_solve(self._lu, res, check_finite=False)
            if worst > max(4.0 * worst_prev, 1e3 * self.tol) and it >= 1:
                # residual grew sharply: damp toward the previous iterate
                lam = 1.0
                for _ in range(10):
                    x_try = x1 - lam * step[:self.m.n]
                    y_try = y1 - lam * step[self.m.n:]
                    f_t, g_t = self._deriv(x_try, y_try)
                    r_t = x_try - self.xk - self.a * (self.fk + f_t)
                    for i, bound in self.pinned.items():
                        r_t[i] = x_try[i] - bound
                    w_t = np.max(np.abs(np.concatenate([r_t, g_t])))
                    if np.isfinite(w_t) and w_t < worst:
                        break
                    lam *= 0.5
                x1, y1 = x_try, y_try
            else:
                x1 = x1 - step[:self.m.n]
                y1 = y1 - step[self.m.n:]
            worst_prev = worst
        raise SimulationError(
            f"Newton diverged (worst residual {worst:.3e}); the case may be "
            f"unstable or dt too large")

    def _pin_violations(self, x1) -> bool:
        """Pin any free clamped state outside its band. True if newly pinned."""
        hit = False
        for i, lo, hi, jm in self.m.clamps:
            if i in self.pinned or not self.active[jm]:
                continue
            if x1[i] > hi:
                self.pinned[i] = hi
                hit = True
            elif x1[i] < lo:
                self.pinned[i] = lo
                hit = True
        return hit

    def _release_inward(self, x1, y1) -> bool:
        """Release pinned states whose unconstrained derivative points in."""
        if not self.pinned:
            return False
        f_unc, _ = self.m.residual(x1, y1, False, self.active, self.y_aug,
                                   self.s_p)
        released = False
        for i, lo, hi, jm in self.m.clamps:
            if i not in self.pinned:
                continue
            bound = self.pinned[i]
            if (bound == hi and f_unc[i] < 0.0) or \
                    (bound == lo and f_unc[i] > 0.0):
                del self.pinned[i]
                released = True
        if released:
            self._factorize()
        return released


def coi_frequency(case: GridCase, traj: Trajectory,
                  tripped_pos: Optional[int] = None,
                  event_step: int = -1,
                  model: Optional[SystemModel] = None) -> np.ndarray:
    """Center-of-inertia frequency series, f0 (1 + sum_z C_z dω_z), in Hz.

    A tripped machine is excluded from the weights after the event.
    """
    lay = traj.layout
    omega = traj.x[:, list(lay.z_indices)]
    if model is None:
        hs = np.array([machine_sysbase(case.machines[case.machine_index(m)],
                                       case.base_mva)["h"]
                       for m in lay.machine_ids])
    else:
        hs = model.h
    if tripped_pos is None and traj.event is not None \
            and traj.event.kind == "trip":
        tripped_pos = list(lay.machine_ids).index(str(traj.event.target))
        event_step = int(round(traj.event.time /
                               (traj.t[1] - traj.t[0]))) if len(traj.t) > 1 else 0
    c_full = hs / hs.sum()
    dwc = omega @ c_full
    if tripped_pos is not None and event_step >= 0:
        mask = np.ones(len(hs), dtype=bool)
        mask[tripped_pos] = False
        c_post = np.where(mask, hs, 0.0)
        c_post = c_post / c_post.sum()
        dwc[event_step:] = omega[event_step:] @ c_post
    return case.f0_hz * (1.0 + dwc)


@dataclass(frozen=True)
class NadirResult:
    f_nadir: float              # Hz
    t_nadir: float              # s (same reference as the input grid)
    flags: tuple[str, ...] = ()


def measure_nadir(t: np.ndarray, series: np.ndarray) -> NadirResult:
    """Global minimum of a frequency series with quadratic refinement.

    Ties break to the earliest sample. A minimum at either end of the grid
    is returned as-is and flagged ``boundary_minimum``.
    """
    t = np.asarray(t, float)
    series = np.asarray(series, float)
    if series.size == 0:
        raise CaseError("empty series")
    k = int(np.argmin(series))
    if k == 0 or k == series.size - 1:
        return NadirResult(float(series[k]), float(t[k]),
                           ("boundary_minimum",))
    y0, y1, y2 = series[k - 1], series[k], series[k + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom <= 0.0:
        return NadirResult(float(y1), float(t[k]), ())
    h = t[k] - t[k - 1]
    off = 0.5 * (y0 - y2) / denom
    off = float(np.clip(off, -1.0, 1.0))
    t_star = t[k] + off * h
    f_star = y1 - 0.25 * (y0 - y2) * off
    return NadirResult(float(f_star), float(t_star), ())


def export_trajectory_csv(traj: Trajectory, path=None) -> Optional[str]:
    """CSV export: header ``t,f_coi,<machine:state ...>`` in layout order."""
    buf = io.StringIO()
    cols = [f"{m}:{s}" for m, s in traj.layout.entries]
    buf.write("t,f_coi," + ",".join(cols) + "\n")
    for i in range(len(traj.t)):
        row = [f"{traj.t[i]:.6f}", f"{traj.f_coi[i]:.9f}"]
        row += [f"{v:.12g}" for v in traj.x[i]]
        buf.write(",".join(row) + "\n")
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w") as fh:
        fh.write(text)
    return None
