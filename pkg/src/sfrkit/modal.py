"""Modal machinery: linearization, eigenstructure, frequency-control modes,
complex modal coefficients, SFR reconstruction, and the nadir solvers.

The linearized deviation dynamics are dx' = A_s dx with A_s the Schur
complement of the algebraic block. The center-of-inertia deviation is
approximated by the selected frequency-control modes as

    dw_coi(t) = sum_i gamma_i exp(lambda_i t),
    gamma_i   = <w_i, dx0> * sum_z C_z v_{i,z},

with left/right eigenvectors scaled to <w_i, v_k> = delta_ik, inertia
weights C_z = H_z / H_t, and dx0 the pre-disturbance state expressed as a
deviation from the post-disturbance equilibrium (speed and governor states
only; everything else zero). The nadir is found either by a dense scan of
the reconstruction or by the second-order polynomial approximation of the
derivative with Newton refinement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .devices import governor_steady_deviation
from .dynamics import DisturbanceEvent, SystemModel, measure_nadir
from .errors import EigenError, LinearizationError, ModalError
from .grid import (GridCase, OperatingPoint, StateLayout,
                   apply_unit_commitment, build_state_layout, commitment_key,
                   governor_sysbase, machine_sysbase)

DRIFT_TOL = 1e-6        # |lambda| below this is the angle-reference mode
_IM_TOL = 1e-9          # |Im| below this counts as a real eigenvalue


# ---------------------------------------------------------------------------
# linearization and eigenstructure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSpace:
    a_s: np.ndarray             # [n, n] reduced state matrix
    j1: np.ndarray
    j2: np.ndarray
    j3: np.ndarray
    j4: np.ndarray
    j4_condition: float
    layout: StateLayout


def linearize(case: GridCase, op: OperatingPoint, cond_limit: float = 1e12,
              load_zip=None) -> StateSpace:
    """Jacobian blocks by central finite differences and the Schur-complement
    reduction A_s = J1 - J2 J4^-1 J3, with limits disabled."""
    if not op.initialized:
        raise LinearizationError("linearize requires an initialized "
                                 "operating point")
    from .dynamics import DEFAULT_LOAD_ZIP
    model = SystemModel(case, op,
                        DEFAULT_LOAD_ZIP if load_zip is None else load_zip)
    j1, j2, j3, j4 = model.jacobians(op.x_e, op.y_e)
    cond = float(np.linalg.cond(j4))
    if not np.isfinite(cond) or cond > cond_limit:
        raise LinearizationError(
            f"algebraic Jacobian block is ill-conditioned "
            f"(cond = {cond:.3e})")
    a_s = j1 - j2 @ np.linalg.solve(j4, j3)
    return StateSpace(a_s=a_s, j1=j1, j2=j2, j3=j3, j4=j4,
                      j4_condition=cond, layout=model.layout)


@dataclass(frozen=True)
class EigenStructure:
    """Eigenvalues with biorthonormal right/left vectors.

    Columns of ``v`` are right eigenvectors; columns of ``w`` are left
    eigenvectors scaled so that w_i^T v_k = delta_ik. Conjugate pairs are
    adjacent with the positive-imaginary member first; ``units`` lists the
    column indices of each real mode or conjugate pair.
    """
    lambdas: np.ndarray         # [n] complex
    v: np.ndarray               # [n, n]
    w: np.ndarray               # [n, n]
    participation: np.ndarray   # [n states, n modes], |w_ki v_ki|
    units: tuple[tuple[int, ...], ...]
    layout: StateLayout


def eigendecompose(ss: StateSpace, biorth_tol: float = 1e-8) -> EigenStructure:
    """Dense nonsymmetric eigendecomposition with canonical conjugate pairing.

    Left vectors come from the inverse of V, which enforces biorthonormality
    up to roundoff; a residual above ``biorth_tol`` signals a defective or
    near-defective matrix.
    """
    a = ss.a_s
    if not np.all(np.isfinite(a)):
        raise EigenError("state matrix contains non-finite entries")
    lam, v = np.linalg.eig(a)

    order = _canonical_order(lam)
    lam = lam[order]
    v = v[:, order]
    lam, v = _force_conjugate_pairs(lam, v)

    try:
        vi = np.linalg.inv(v)
    except np.linalg.LinAlgError:
        raise EigenError("right eigenvector matrix is singular (defective "
                         "state matrix)")
    w = vi.T
    resid = float(np.max(np.abs(w.T @ v - np.eye(len(lam)))))
    if resid > biorth_tol:
        raise EigenError(f"biorthonormality residual {resid:.3e} exceeds "
                         f"{biorth_tol:.1e} (near-defective matrix)")
    part = np.abs(w * v)
    units = _pair_units(lam)
    return EigenStructure(lambdas=lam, v=v, w=w, participation=part,
                          units=units, layout=ss.layout)


def _canonical_order(lam: np.ndarray) -> np.ndarray:
    """Deterministic mode order: by real part, then |Im|; within a pair the
    positive-imaginary member first."""
    key = np.lexsort((-np.sign(lam.imag), np.abs(lam.imag), lam.real))
    return key


def _force_conjugate_pairs(lam: np.ndarray, v: np.ndarray):
    """Make conjugate pairs exactly conjugate (values and vectors)."""
    n = len(lam)
    used = np.zeros(n, dtype=bool)
    lam = lam.copy()
    v = v.copy()
    for i in range(n):
        if used[i] or abs(lam[i].imag) <= _IM_TOL:
            used[i] = True
            continue
        # partner is adjacent by canonical order
        j = i + 1
        if j >= n or used[j] or \
                abs(lam[j] - np.conj(lam[i])) > 1e-6 * max(1.0, abs(lam[i])):
            raise EigenError(
                f"complex eigenvalue {lam[i]:.6g} has no conjugate partner")
        if lam[i].imag < 0:
            i, j = j, i
        lam[j] = np.conj(lam[i])
        v[:, j] = np.conj(v[:, i])
        used[i] = used[j] = True
    return lam, v


def _pair_units(lam: np.ndarray) -> tuple[tuple[int, ...], ...]:
    units = []
    i = 0
    n = len(lam)
    while i < n:
        if abs(lam[i].imag) > _IM_TOL:
            units.append((i, i + 1))
            i += 2
        else:
            units.append((i,))
            i += 1
    return tuple(units)


# ---------------------------------------------------------------------------
# frequency-control mode selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalStructure:
    """Selected frequency-control modes with just enough eigenvector data to
    evaluate modal coefficients for speed/governor-supported deviations."""
    lambdas: np.ndarray                 # [mu] complex, pair-adjacent
    w_s: np.ndarray                     # [mu, |S|] left-vector rows on S
    v_z: np.ndarray                     # [mu, |Z|] right-vector speed rows
    s_entries: tuple[tuple[str, str], ...]   # (machine, state) defining S
    s_indices: tuple[int, ...]          # positions of S in the full state
    z_machines: tuple[str, ...]         # machine ids of the speed rows
    h_z: np.ndarray                     # [n_mach] inertia, system base
    u_on: str                           # commitment key
    f0_hz: float
    n: int                              # full state dimension
    scores: np.ndarray                  # [mu] speed-participation scores
    units: tuple[tuple[int, ...], ...]  # positions into lambdas

    @property
    def mu(self) -> int:
        return len(self.lambdas)

    @property
    def h_t(self) -> float:
        return float(self.h_z.sum())

    def c_z(self, exclude: Optional[str] = None) -> np.ndarray:
        """Inertia weights C_z = H_z/H_t, optionally without one machine."""
        h = self.h_z.copy()
        if exclude is not None:
            if exclude not in self.z_machines:
                raise ModalError(f"machine {exclude!r} not in modal structure")
            h[self.z_machines.index(exclude)] = 0.0
        tot = h.sum()
        if tot <= 0:
            raise ModalError("no inertia left after exclusion")
        return h / tot

    def stable(self, drift_tol: float = DRIFT_TOL) -> bool:
        keep = np.abs(self.lambdas) >= drift_tol
        return bool(np.all(self.lambdas[keep].real < 0.0))


def select_frequency_modes(case: GridCase, eig: EigenStructure,
                           mu_target: Optional[int],
                           drop_drift: bool = True,
                           drift_tol: float = DRIFT_TOL) -> ModalStructure:
    """Rank modes by aggregate speed-state participation and keep the top
    ones (conjugate pairs whole) until ``mu_target`` mode slots are covered.

    ``mu_target=None`` keeps every mode (the full basis). The near-zero
    angle-drift mode is excluded unless ``drop_drift`` is false. Ranking
    ties break toward smaller |Im| and then smaller position.
    """
    lay = eig.layout
    n = len(eig.lambdas)
    if mu_target is not None and mu_target > n:
        raise ModalError(f"mu_target {mu_target} exceeds state count {n}")
    z = list(lay.z_indices)
    if not z:
        raise ModalError("layout has no speed states")
    speed_part = eig.participation[z, :].sum(axis=0)

    units = []
    for unit in eig.units:
        lam0 = eig.lambdas[unit[0]]
        if drop_drift and abs(lam0) < drift_tol:
            continue
        units.append((unit, float(speed_part[unit[0]]),
                      abs(lam0.imag), unit[0]))
    units.sort(key=lambda u: (-u[1], u[2], u[3]))

    sel: list[int] = []
    scores: list[float] = []
    for unit, score, _, _ in units:
        if mu_target is not None and len(sel) >= mu_target:
            break
        sel.extend(unit)
        scores.extend([score] * len(unit))

    s_idx = lay.speed_governor_indices
    lam_sel = eig.lambdas[sel]
    committed = [m for m, on in zip(case.machines, case.u_on) if on]
    h_z = np.array([machine_sysbase(m, case.base_mva)["h"] for m in committed])
    return ModalStructure(
        lambdas=lam_sel,
        w_s=eig.w[np.ix_(list(s_idx), sel)].T.copy(),
        v_z=eig.v[np.ix_(z, sel)].T.copy(),
        s_entries=tuple(lay.entries[i] for i in s_idx),
        s_indices=tuple(int(i) for i in s_idx),
        z_machines=lay.machine_ids,
        h_z=h_z,
        u_on=commitment_key(case.u_on),
        f0_hz=case.f0_hz,
        n=lay.n,
        scores=np.asarray(scores),
        units=_pair_units(lam_sel))


# ---------------------------------------------------------------------------
# post-disturbance equilibrium and modal coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaX0:
    """Pre-disturbance state as a deviation from the post-disturbance
    equilibrium; nonzero only on speed and governor states."""
    dx0: np.ndarray
    delta_omega: float          # settled speed deviation, pu
    f_e_hz: float               # post-disturbance steady-state frequency
    excluded_machine: Optional[str] = None
    descriptor: Optional[tuple] = None      # (dp_mw, type, index)


@dataclass(frozen=True)
class GammaSet:
    """Ordered complex modal coefficients aligned with a mode set."""
    gammas: np.ndarray
    descriptor: Optional[tuple] = None
    tag: str = "analytic"       # "analytic" | "estimated"


def _droop_settle(case: GridCase, machines: Sequence[str], dp_pu: float,
                  droop_excluded: Optional[str] = None,
                  dev_excluded: Optional[str] = None):
    """Settled deviation dw = -dP / sum(1/R) over responsive machines and
    the per-state deviation map {(machine, state): value}.

    ``droop_excluded`` drops a machine from the droop sum (a tripped unit
    no longer regulates); ``dev_excluded`` additionally freezes its state
    deviations at zero.
    """
    inv_r = 0.0
    gov_info = []
    for mid in machines:
        m = case.machines[case.machine_index(mid)]
        gov = case.governor_for(mid)
        if gov is None:
            continue
        par = governor_sysbase(gov, m.mva, case.base_mva)
        if mid != droop_excluded:
            inv_r += 1.0 / par["r"]
        gov_info.append((mid, gov, par))
    if dp_pu != 0.0 and inv_r <= 0.0:
        raise ModalError("no responsive governor after the disturbance: "
                         "steady-state frequency is undefined")
    dw = 0.0 if dp_pu == 0.0 else -dp_pu / inv_r
    devs: dict[tuple[str, str], float] = {}
    if dw != 0.0:
        for mid in machines:
            if mid == dev_excluded:
                continue
            devs[(mid, "omega")] = dw
        for mid, gov, par in gov_info:
            if mid == dev_excluded:
                continue
            for state, dev in governor_steady_deviation(gov.model, dw,
                                                        par).items():
                devs[(mid, state)] = dev
    return dw, devs


def disturbance_gamma(ms: ModalStructure, case: GridCase, dp_mw: float,
                      exclude: Optional[str] = None,
                      tripped_states: str = "follow",
                      descriptor: Optional[tuple] = None):
    """Coefficients and settled frequency for a power imbalance, evaluated
    directly on a stored modal structure.

    ``exclude`` names a machine still present in the structure whose droop
    and COI weight must be ignored (the reuse-pre-trip variant; "follow"
    displaces its states with everybody else, "freeze" zeroes them). With
    relinearized structures the tripped machine is already absent and
    ``exclude`` stays None. Returns (GammaSet, f_e_hz).
    """
    dp_pu = dp_mw / case.base_mva
    dev_excluded = exclude if tripped_states == "freeze" else None
    dw, devs = _droop_settle(case, ms.z_machines, dp_pu, exclude,
                             dev_excluded)
    dx0_s = np.zeros(len(ms.s_entries))
    for i, entry in enumerate(ms.s_entries):
        if entry in devs:
            dx0_s[i] = -devs[entry]
    inner = ms.w_s @ dx0_s
    gam = inner * (ms.v_z @ ms.c_z(exclude=exclude))
    f_e = case.f0_hz * (1.0 + dw)
    return GammaSet(gammas=gam, descriptor=descriptor, tag="analytic"), f_e


def post_disturbance_equilibrium(case: GridCase, dist: DisturbanceEvent,
                                 layout: Optional[StateLayout] = None,
                                 tripped_states: str = "follow") -> DeltaX0:
    """Initial deviation vector from the droop-settled equilibrium.

    The settled deviation is dw = -dP / sum_z 1/R_z over committed,
    responsive machines, a tripped unit excluded so the asymptote matches
    the surviving system. Speed states get -dw, governor states the negated
    droop deviations, everything else zero.

    ``tripped_states`` controls the tripped machine's own entries when the
    pre-disturbance eigenstructure is reused: "follow" displaces them like
    every other machine (the disturbance acts as a pure power imbalance on
    the intact linear model, which keeps the initial condition swing-free),
    "freeze" zeroes them. Re-linearizing without the machine is the third
    variant, handled at the pipeline level.
    """
    if tripped_states not in ("follow", "freeze"):
        raise ModalError(f"unknown tripped-state variant {tripped_states!r}")
    dist.validate(case)
    layout = layout or build_state_layout(case)
    dp = dist.dp_mw / case.base_mva
    excluded = str(dist.target) if dist.kind == "trip" else None
    dev_excluded = excluded if tripped_states == "freeze" else None
    dw, devs = _droop_settle(case, layout.machine_ids, dp, excluded,
                             dev_excluded)
    dx0 = np.zeros(layout.n)
    for (mid, state), dev in devs.items():
        dx0[layout.index(mid, state)] = -dev
    desc = (dist.dp_mw, 0 if dist.kind == "trip" else 1, dist.target)
    return DeltaX0(dx0=dx0, delta_omega=dw,
                   f_e_hz=case.f0_hz * (1.0 + dw),
                   excluded_machine=excluded, descriptor=desc)


def post_trip_case(case: GridCase, machine_index: int,
                   droop_share: bool = True) -> GridCase:
    """Case describing the system after tripping one committed machine.

    The tripped unit is decommitted; its dispatch is redistributed to the
    surviving governors in proportion to their droop gains (so the new
    operating point approximates the primary-response sharing rather than
    dumping the imbalance on the slack). If the tripped machine held the
    slack bus, the largest-MVA surviving machine's bus becomes the slack.
    """
    if not case.u_on[machine_index]:
        raise ModalError("machine is not committed")
    u2 = list(case.u_on)
    u2[machine_index] = 0
    if not any(u2):
        raise ModalError("cannot trip the only committed machine")
    tripped = case.machines[machine_index]
    machines = list(case.machines)
    if droop_share:
        weights = {}
        for j, m in enumerate(case.machines):
            gov = case.governor_for(m.id)
            if u2[j] and gov is not None:
                weights[j] = 1.0 / governor_sysbase(gov, m.mva,
                                                    case.base_mva)["r"]
        tot = sum(weights.values())
        if tot > 0:
            for j, w in weights.items():
                machines[j] = replace(machines[j],
                                      p_mw=machines[j].p_mw
                                      + tripped.p_mw * w / tot)
    buses = case.buses
    slack_bus = next(b.id for b in case.buses if b.type == "slack")
    if tripped.bus == slack_bus:
        surv = [(m.mva, j, m) for j, m in enumerate(case.machines) if u2[j]]
        new_slack = max(surv)[2].bus
        bl = []
        for b in case.buses:
            if b.id == slack_bus:
                bl.append(replace(b, type="pq"))
            elif b.id == new_slack:
                bl.append(replace(b, type="slack"))
            else:
                bl.append(b)
        buses = tuple(bl)
    return apply_unit_commitment(
        replace(case, machines=tuple(machines), buses=buses), u2)


def modal_coefficients(ms: ModalStructure, dx0: DeltaX0) -> GammaSet:
    """Analytic coefficients gamma_i = <w_i, dx0> sum_z C_z v_{i,z}.

    The COI weights exclude a tripped machine; the inner product only needs
    the speed/governor rows because dx0 vanishes elsewhere.
    """
    if len(dx0.dx0) != ms.n:
        raise ModalError(f"deviation vector length {len(dx0.dx0)} does not "
                         f"match state dimension {ms.n}")
    outside = np.delete(dx0.dx0, list(ms.s_indices))
    if outside.size and np.max(np.abs(outside)) > 0.0:
        raise ModalError("dx0 has nonzero entries outside speed/governor "
                         "states")
    inner = ms.w_s @ dx0.dx0[list(ms.s_indices)]
    c = ms.c_z(exclude=dx0.excluded_machine)
    gam = inner * (ms.v_z @ c)
    return GammaSet(gammas=gam, descriptor=dx0.descriptor, tag="analytic")


# ---------------------------------------------------------------------------
# SFR reconstruction and nadir solvers
# ---------------------------------------------------------------------------

def reconstruct_sfr(lambdas: np.ndarray, gammas: np.ndarray,
                    t: np.ndarray) -> tuple[np.ndarray, float]:
    """Evaluate dw_coi(t) = sum_i gamma_i exp(lambda_i t).

    Returns the real series (pu) and the largest imaginary residue, which is
    at roundoff level whenever the coefficient set is conjugate-closed.
    """
    lambdas = np.asarray(lambdas, complex)
    gammas = np.asarray(gammas, complex)
    if lambdas.shape != gammas.shape:
        raise ModalError(f"misaligned sets: {lambdas.shape} modes vs "
                         f"{gammas.shape} coefficients")
    t = np.atleast_1d(np.asarray(t, float))
    series = np.exp(np.outer(t, lambdas)) @ gammas
    return series.real, float(np.max(np.abs(series.imag), initial=0.0))


@dataclass(frozen=True)
class NadirEstimate:
    f_nadir_hz: float
    t_nadir_s: float
    flags: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)


def nadir_scan(lambdas, gammas, f_e_hz: float, f0_hz: float,
               horizon: float = 30.0, dt: float = 0.01) -> NadirEstimate:
    """Dense-grid minimum of the reconstructed response with quadratic
    interpolation around the discrete argmin."""
    if horizon <= 0 or dt <= 0 or dt > 0.01 + 1e-12:
        raise ModalError("scan requires horizon > 0 and dt <= 10 ms")
    t = np.arange(0.0, horizon + 0.5 * dt, dt)
    series, _ = reconstruct_sfr(lambdas, gammas, t)
    f = f_e_hz + f0_hz * series
    res = measure_nadir(t, f)
    return NadirEstimate(res.f_nadir, res.t_nadir, res.flags)


def nadir_polynomial(lambdas, gammas, f_e_hz: float, f0_hz: float,
                     newton_iters: int = 5,
                     scan_horizon: float = 30.0) -> NadirEstimate:
    """Nadir timing from the second-order expansion of d(dw_coi)/dt.

    Each modal term of the derivative is expanded to second order around
    t_hat (a quarter period of the dominant oscillatory mode, or zero for a
    purely real mode set); the aggregated quadratic is solved for the
    smallest positive root and polished with a few Newton iterations on the
    exact derivative. Falls back to the dense scan when no valid stationary
    minimum emerges; a monotone all-real response reports the settled
    frequency with the ``no_interior_nadir`` flag.
    """
    lam = np.asarray(lambdas, complex)
    gam = np.asarray(gammas, complex)
    if lam.shape != gam.shape:
        raise ModalError("misaligned mode/coefficient sets")
    keep = np.abs(lam) >= 1e-14
    lam, gam = lam[keep], gam[keep]
    if len(lam) == 0 or np.max(np.abs(gam)) == 0.0:
        return NadirEstimate(f_e_hz, 0.0, ("no_interior_nadir",))
    if np.any(lam.real >= 0.0):
        raise ModalError("nadir solver requires a stable mode set "
                         "(Re lambda < 0)")

    d = lam * gam

    def gfun(tt):
        return float(np.real(np.sum(d * np.exp(lam * tt))))

    def gprime(tt):
        return float(np.real(np.sum(d * lam * np.exp(lam * tt))))

    def omega_val(tt):
        return float(np.real(np.sum(gam * np.exp(lam * tt))))

    osc = lam.imag > _IM_TOL
    if np.any(osc):
        dom = np.argmax(np.abs(gam) * osc)
        t_hat = np.pi / (2.0 * lam.imag[dom])
    else:
        t_hat = 0.0

    e_hat = d * np.exp(lam * t_hat)
    b0 = float(np.sum(e_hat).real)
    b1 = float(np.sum(e_hat * lam).real)
    b2 = 0.5 * float(np.sum(e_hat * lam * lam).real)

    cands = []
    if abs(b2) > 1e-300:
        disc = b1 * b1 - 4.0 * b2 * b0
        if disc >= 0.0:
            sq = np.sqrt(disc)
            cands = [t_hat + (-b1 - sq) / (2 * b2),
                     t_hat + (-b1 + sq) / (2 * b2)]
    elif abs(b1) > 1e-300:
        cands = [t_hat - b0 / b1]
    cands = sorted(tt for tt in cands if np.isfinite(tt) and tt > 0.0)

    g_scale = float(np.sum(np.abs(d)))
    t_limit = max(scan_horizon, 10.0 / np.max(-lam.real))
    diagnostics = {"t_hat": t_hat, "b": (b0, b1, b2), "candidates": cands}

    for t0 in cands:
        t_star = t0
        for _ in range(newton_iters):
            gp = gprime(t_star)
            if gp == 0.0:
                break
            step = gfun(t_star) / gp
            t_new = t_star - step
            if not np.isfinite(t_new) or t_new <= 0.0 or t_new > t_limit:
                t_star = -1.0
                break
            t_star = t_new
            if abs(step) < 1e-12:
                break
        if t_star <= 0.0 or t_star > t_limit:
            continue
        if abs(gfun(t_star)) > 1e-6 * max(g_scale, 1e-300):
            continue
        if gprime(t_star) <= 0.0:
            continue                      # stationary maximum
        dw_star = omega_val(t_star)
        if dw_star > 0.0:
            continue                      # trough above the settled value
        return NadirEstimate(f_e_hz + f0_hz * dw_star, float(t_star),
                             (), diagnostics)

    if not np.any(osc):
        probe = np.linspace(0.0, t_limit, 2049)
        gs = np.real(np.exp(np.outer(probe, lam)) @ d)
        if np.all(gs >= 0.0) or np.all(gs <= 0.0):
            return NadirEstimate(f_e_hz, float("inf"),
                                 ("no_interior_nadir",), diagnostics)

    scan = nadir_scan(lam, gam, f_e_hz, f0_hz, horizon=scan_horizon,
                      dt=0.001)
    return NadirEstimate(scan.f_nadir_hz, scan.t_nadir_s,
                         scan.flags + ("polynomial_fallback",), diagnostics)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def modal_structure_to_dict(ms: ModalStructure) -> dict:
    return {
        "format": "sfrkit-modal",
        "version": 1,
        "u_on": ms.u_on,
        "f0_hz": ms.f0_hz,
        "n": ms.n,
        "mu": ms.mu,
        "lambda": [[z.real, z.imag] for z in ms.lambdas],
        "w_s": [[[z.real, z.imag] for z in row] for row in ms.w_s],
        "v_z": [[[z.real, z.imag] for z in row] for row in ms.v_z],
        "s_entries": [list(e) for e in ms.s_entries],
        "s_indices": list(ms.s_indices),
        "z_machines": list(ms.z_machines),
        "h_z": [float(h) for h in ms.h_z],
        "scores": [float(s) for s in ms.scores],
        "units": [list(u) for u in ms.units],
    }


def modal_structure_from_dict(doc: dict) -> ModalStructure:
    if doc.get("format") != "sfrkit-modal" or doc.get("version") != 1:
        raise ModalError("not a version-1 modal structure document")

    def to_c(pairs):
        return np.array([complex(re, im) for re, im in pairs])

    ms = ModalStructure(
        lambdas=to_c(doc["lambda"]),
        w_s=np.array([[complex(re, im) for re, im in row]
                      for row in doc["w_s"]]),
        v_z=np.array([[complex(re, im) for re, im in row]
                      for row in doc["v_z"]]),
        s_entries=tuple((m, s) for m, s in doc["s_entries"]),
        s_indices=tuple(doc["s_indices"]),
        z_machines=tuple(doc["z_machines"]),
        h_z=np.array(doc["h_z"], dtype=float),
        u_on=doc["u_on"],
        f0_hz=doc["f0_hz"],
        n=doc["n"],
        scores=np.array(doc["scores"], dtype=float),
        units=tuple(tuple(u) for u in doc["units"]))
    _validate_modal_structure(ms)
    return ms


def _validate_modal_structure(ms: ModalStructure) -> None:
    if ms.w_s.shape != (ms.mu, len(ms.s_indices)):
        raise ModalError("w_s shape does not match the S index set")
    if ms.v_z.shape != (ms.mu, len(ms.z_machines)):
        raise ModalError("v_z shape does not match the speed rows")
    if np.any(ms.h_z <= 0):
        raise ModalError("inertia weights must be positive")
    for unit in ms.units:
        if len(unit) == 2:
            a, b = unit
            if abs(ms.lambdas[a] - np.conj(ms.lambdas[b])) > 1e-9 * max(
                    1.0, abs(ms.lambdas[a])):
                raise ModalError("stored pair is not conjugate-closed")


def save_modal_structure(ms: ModalStructure, path) -> None:
    with open(path, "w") as fh:
        json.dump(modal_structure_to_dict(ms), fh)
        fh.write("\n")


def load_modal_structure(path) -> ModalStructure:
    with open(path) as fh:
        return modal_structure_from_dict(json.load(fh))
