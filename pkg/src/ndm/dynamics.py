"""LIF membranes, conductance synapses and Ornstein-Uhlenbeck background current.

Units throughout: mV, ms, nF, nS, pA.  Membrane equation (forward Euler)::

    C dV/dt = -g_L (V - V_rest) - g_ampa (V - E_ampa)
              - g_nmda B(V) (V - E_nmda) - g_gaba (V - E_gaba) + I_ext + I_ou

AMPA and GABA are linear, so each neuron keeps one aggregated conductance per
channel (nS) that jumps by the edge weight on every presynaptic spike and
decays exponentially.  NMDA saturates, so gating ``s`` and its rise variable
``x`` are kept per presynaptic neuron and the postsynaptic conductance
``g_nmda = sum_j w_ij s_j`` is maintained incrementally.

One update, in order:

1. every neuron: synaptic + external current from the current state, Euler
   membrane step (refractory neurons are held at ``v_reset`` instead), OU
   update with one standard normal (drawn in neuron order), threshold test;
2. conductance decay, NMDA rise/decay;
3. delivery of this step's spikes (they act from the next update on).

``integrate`` runs whole trials in a compiled loop; ``step`` is the plain
numpy version of the same update used for checking and small experiments.
Both consume the random streams in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import NumericalDivergenceError, ParameterError

NMDA_X_CUTOFF = 1e-12
KIND_AMPA, KIND_GABA = 0, 1


@dataclass(frozen=True)
class NeuronParams:
    v_rest: float = -70.0
    v_threshold: float = -50.0
    v_reset: float = -55.0
    c_m: float = 0.5
    g_leak: float = 25.0
    t_refractory: float = 2.0

    def __post_init__(self):
        if not self.v_reset < self.v_threshold:
            raise ParameterError("v_reset", "must lie below v_threshold")
        for name in ("c_m", "g_leak", "t_refractory"):
            if not getattr(self, name) > 0:
                raise ParameterError(name, "must be positive")

    @property
    def tau_m(self) -> float:
        return self.c_m / self.g_leak * 1000.0

    @property
    def rheobase(self) -> float:
        return self.g_leak * (self.v_threshold - self.v_rest)


EXCITATORY = NeuronParams()
INHIBITORY = NeuronParams(c_m=0.2, g_leak=20.0, t_refractory=1.0)


@dataclass(frozen=True)
class OuNoiseParams:
    tau: float = 10.0
    mean: float = 400.0
    sigma_sq: float = 100.0  # stationary variance, pA^2

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError("tau", "must be positive")
        if not self.sigma_sq >= 0:
            raise ParameterError("sigma_sq", "must be non-negative")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)


@dataclass(frozen=True)
class SynapseKinetics:
    kind: str
    reversal: float
    decay_tau: float
    rise_tau: float = 0.0
    mg_conc: float = 0.0
    alpha: float = 0.0  # NMDA saturation rate, 1/ms

    def __post_init__(self):
        if not self.decay_tau > 0:
            raise ParameterError("decay_tau", "must be positive")
        if self.kind == "NMDA" and not self.rise_tau > 0:
            raise ParameterError("rise_tau", "NMDA needs a positive rise time")


AMPA = SynapseKinetics("AMPA", 0.0, 2.0)
NMDA = SynapseKinetics("NMDA", 0.0, 100.0, rise_tau=2.0, mg_conc=1.0, alpha=0.5)
GABA = SynapseKinetics("GABA", -70.0, 5.0)


def nmda_gate(v, mg=1.0):
    """Mg2+ unblock fraction ``1 / (1 + [Mg] exp(-0.062 V) / 3.57)``."""
    return 1.0 / (1.0 + mg * np.exp(-0.062 * np.asarray(v, dtype=float)) / 3.57)


def ou_coefficients(tau, sigma, dt):
    decay = math.exp(-dt / tau)
    return decay, sigma * math.sqrt(1.0 - decay * decay)


def ou_step(current, params: OuNoiseParams, dt, rng=None, xi=None):
    """Exact OU update over ``dt``.

    ``I' = mean + (I - mean) e^{-dt/tau} + sigma sqrt(1 - e^{-2 dt/tau}) xi``
    with ``xi`` standard normal, taken from ``xi`` if given else from ``rng``.
    """
    if not dt > 0:
        raise ParameterError("dt", "must be positive")
    current = np.asarray(current, dtype=float)
    decay, scale = ou_coefficients(params.tau, params.sigma, dt)
    if xi is None:
        xi = rng.standard_normal(current.shape) if rng is not None else 0.0
    return params.mean + (current - params.mean) * decay + scale * xi


# -- compiled circuit ----------------------------------------------------------


@dataclass
class Circuit:
    """Flat arrays describing a realised network, ready for integration.

    Linear synapses (AMPA, GABA) are stored CSR by presynaptic neuron in
    ``lin_*``; NMDA synapses likewise in ``nmda_*``. ``n_drive`` leading
    neurons receive the stimulus drive column-for-column.
    """

    v_rest: np.ndarray
    v_threshold: np.ndarray
    v_reset: np.ndarray
    c_m: np.ndarray
    g_leak: np.ndarray
    t_refractory: np.ndarray
    ou_mean: np.ndarray
    ou_sigma: np.ndarray
    ou_tau: np.ndarray
    alive: np.ndarray
    lin_indptr: np.ndarray
    lin_target: np.ndarray
    lin_weight: np.ndarray
    lin_kind: np.ndarray
    nmda_indptr: np.ndarray
    nmda_target: np.ndarray
    nmda_weight: np.ndarray
    pop_of: np.ndarray
    n_pops: int
    n_drive: int
    ampa: SynapseKinetics = AMPA
    nmda: SynapseKinetics = NMDA
    gaba: SynapseKinetics = GABA

    @property
    def n(self) -> int:
        return self.v_rest.shape[0]

    def kinetics_vector(self, dt) -> np.ndarray:
        a, m, g = self.ampa, self.nmda, self.gaba
        return np.array([
            math.exp(-dt / a.decay_tau), math.exp(-dt / g.decay_tau),
            math.exp(-dt / m.decay_tau), math.exp(-dt / m.rise_tau),
            m.alpha, m.mg_conc, a.reversal, m.reversal, g.reversal,
        ])


def uncoupled_circuit(n: int, neuron: NeuronParams = EXCITATORY, noise: OuNoiseParams = OuNoiseParams(),
                      n_drive: int = 0) -> Circuit:
    """``n`` identical neurons without synapses (one population)."""
    full = lambda x: np.full(n, float(x))
    return Circuit(
        full(neuron.v_rest), full(neuron.v_threshold), full(neuron.v_reset), full(neuron.c_m),
        full(neuron.g_leak), full(neuron.t_refractory), full(noise.mean), full(noise.sigma), full(noise.tau),
        np.ones(n, dtype=bool),
        np.zeros(n + 1, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
        np.zeros(n + 1, np.int64), np.zeros(0, np.int64), np.zeros(0),
        np.zeros(n, np.int64), 1, n_drive,
    )


@dataclass
class NetworkState:
    """Full dynamical state at one instant.

    ``g_ampa``/``g_gaba``/``g_nmda`` are postsynaptic conductances (nS);
    ``s_nmda``/``x_nmda`` are presynaptic NMDA gating and rise variables.
    """

    v: np.ndarray
    g_ampa: np.ndarray
    g_gaba: np.ndarray
    g_nmda: np.ndarray
    s_nmda: np.ndarray
    x_nmda: np.ndarray
    refractory_remaining: np.ndarray  # ms
    ou_current: np.ndarray
    t: float = 0.0

    @classmethod
    def resting(cls, circ: Circuit) -> "NetworkState":
        n = circ.n
        z = np.zeros(n)
        return cls(circ.v_rest.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(),
                   circ.ou_mean.copy(), 0.0)

    @classmethod
    def initial(cls, circ: Circuit, rng) -> "NetworkState":
        """Membranes uniform in ``[v_reset, v_threshold)``, OU at a stationary draw."""
        st = cls.resting(circ)
        u = rng.random(circ.n)
        st.v = circ.v_reset + u * (circ.v_threshold - circ.v_reset)
        st.ou_current = circ.ou_mean + circ.ou_sigma * rng.standard_normal(circ.n)
        return st

    def copy(self) -> "NetworkState":
        return replace(self, **{k: getattr(self, k).copy() for k in
                                ("v", "g_ampa", "g_gaba", "g_nmda", "s_nmda", "x_nmda",
                                 "refractory_remaining", "ou_current")})


def synaptic_current(circ: Circuit, st: NetworkState) -> np.ndarray:
    a, m, g = circ.ampa, circ.nmda, circ.gaba
    v = st.v
    nmda = np.zeros_like(v)
    on = st.g_nmda != 0.0
    nmda[on] = st.g_nmda[on] * (v[on] - m.reversal) / (1.0 + m.mg_conc * np.exp(-0.062 * v[on]) / 3.57)
    return st.g_ampa * (v - a.reversal) + nmda + st.g_gaba * (v - g.reversal)


def step(state: NetworkState, drive, circ: Circuit, dt: float, rng, extra=None,
         noise_sigma=None, noise_rng=None):
    """Advance ``state`` by one ``dt`` (numpy reference path).

    ``drive`` holds the stimulus current for the first ``circ.n_drive``
    neurons (or None); ``extra`` is a per-neuron constant current;
    ``noise_sigma``/``noise_rng`` add white current noise. Returns the new
    state and the indices of neurons that spiked.
    """
    if not 0 < dt <= 2.0:
        raise ParameterError("dt", "must lie in (0, 2] ms")
    st = state.copy()
    n = circ.n
    i_ext = st.ou_current.copy()
    if drive is not None:
        drive = np.asarray(drive, dtype=float)
        if drive.shape[0] != circ.n_drive:
            raise ParameterError("drive", f"expected {circ.n_drive} values, got {drive.shape[0]}")
        i_ext[:circ.n_drive] += drive
    if extra is not None:
        i_ext += extra
    if noise_sigma is not None:
        xi = np.zeros(n)
        idx = np.nonzero(noise_sigma > 0)[0]
        xi[idx] = noise_rng.standard_normal(idx.size)
        i_ext += noise_sigma * xi
    i_syn = synaptic_current(circ, st)

    ref_steps = np.rint(st.refractory_remaining / dt).astype(np.int64)
    refractory = ref_steps > 0
    active = circ.alive & ~refractory
    dv = dt * 1e-3 * (-circ.g_leak * (st.v - circ.v_rest) - i_syn + i_ext) / circ.c_m
    v_new = np.where(active, st.v + dv, st.v)
    v_new = np.where(refractory, circ.v_reset, v_new)
    ref_steps = np.where(refractory, ref_steps - 1, ref_steps)

    decay = np.exp(-dt / circ.ou_tau)
    scale = circ.ou_sigma * np.sqrt(1.0 - decay * decay)
    xi = rng.standard_normal(n)
    st.ou_current = circ.ou_mean + (st.ou_current - circ.ou_mean) * decay + scale * xi

    bad = ~np.isfinite(v_new)
    if bad.any():
        raise NumericalDivergenceError(np.nonzero(bad)[0][0], st.t)
    spiking = active & (v_new >= circ.v_threshold)
    v_new[spiking] = circ.v_reset[spiking]
    ref_steps[spiking] = np.rint(circ.t_refractory[spiking] / dt).astype(np.int64)
    st.v = v_new
    st.refractory_remaining = ref_steps * dt

    k = circ.kinetics_vector(dt)
    st.g_ampa *= k[0]
    st.g_gaba *= k[1]
    st.g_nmda *= k[2]
    pre = np.nonzero(circ.nmda_indptr[1:] > circ.nmda_indptr[:-1])[0]
    for j in pre:
        x = st.x_nmda[j]
        if x > 0.0:
            rise = dt * k[4] * x * (1.0 - st.s_nmda[j])
            st.s_nmda[j] = st.s_nmda[j] * k[2] + rise
            lo, hi = circ.nmda_indptr[j], circ.nmda_indptr[j + 1]
            np.add.at(st.g_nmda, circ.nmda_target[lo:hi], circ.nmda_weight[lo:hi] * rise)
            x *= k[3]
            st.x_nmda[j] = x if x >= NMDA_X_CUTOFF else 0.0
        else:
            st.s_nmda[j] *= k[2]

    spikes = np.nonzero(spiking)[0]
    for j in spikes:
        lo, hi = circ.lin_indptr[j], circ.lin_indptr[j + 1]
        tgt, w, kind = circ.lin_target[lo:hi], circ.lin_weight[lo:hi], circ.lin_kind[lo:hi]
        np.add.at(st.g_ampa, tgt[kind == KIND_AMPA], w[kind == KIND_AMPA])
        np.add.at(st.g_gaba, tgt[kind == KIND_GABA], w[kind == KIND_GABA])
        if circ.nmda_indptr[j + 1] > circ.nmda_indptr[j]:
            st.x_nmda[j] += 1.0
    st.t = state.t + dt
    return st, spikes


# -- compiled trial loop ---------------------------------------------------------


@dataclass
class Readout:
    """Decision rule: mean rate of two populations over a causal window."""

    pop_a: int = -1
    pop_b: int = -1
    threshold_hz: float = 30.0
    bin_ms: float = 10.0
    window_ms: float = 50.0
    interval_ms: float = 10.0


@dataclass
class IntegrationResult:
    counts: np.ndarray  # (n_bins, n_pops) spike counts per bin, whole run incl. settle
    decision_step: int  # stimulus step at which the threshold was crossed, -1 if never
    steps_run: int
    abs_input_sum: np.ndarray  # per population sum over neurons and steps of |I_in|
    abs_input_steps: int
    spike_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    spike_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    raster_overflow: bool = False


@numba.njit(cache=True)
def _run(v, g_ampa, g_gaba, g_nmda, s_nmda, x_nmda, ref_steps, ou,
         v_rest, v_th, v_reset, c_m, g_leak, ref_len, ou_mean, ou_decay, ou_scale, alive,
         lin_indptr, lin_target, lin_weight, lin_kind, nmda_indptr, nmda_target, nmda_weight,
         nmda_pre, pop_of, n_pops, kin, dt,
         drive, n_drive, drive_every, stim_current, noise_sigma, noise_idx,
         rng, noise_rng, n_settle, n_stim, bin_steps,
         pop_a, pop_b, alive_a, alive_b, window_bins, check_bins, threshold_hz, stop_on_decision,
         rec_lo, rec_hi, rec_steps, rec_ids):
    n = v.shape[0]
    n_total = n_settle + n_stim
    n_bins = (n_total + bin_steps - 1) // bin_steps
    counts = np.zeros((n_bins, n_pops), dtype=np.int64)
    abs_sum = np.zeros(n_pops)
    abs_steps = 0
    da, dg, dn, dr = kin[0], kin[1], kin[2], kin[3]
    alpha, mg, e_a, e_n, e_g = kin[4], kin[5], kin[6], kin[7], kin[8]
    spiked = np.empty(n, dtype=np.int64)
    xi_noise = np.zeros(n)
    n_rec = 0
    overflow = False
    decision = -1
    bin_len_s = bin_steps * dt * 1e-3
    status = 0
    bad_index = -1
    step_i = 0
    for step_i in range(n_total):
        in_stim = step_i >= n_settle
        row = -1
        if in_stim:
            row = (step_i - n_settle) // drive_every
            if row >= drive.shape[0]:
                row = drive.shape[0] - 1
            for q in range(noise_idx.shape[0]):
                xi_noise[noise_idx[q]] = noise_rng.standard_normal()
        n_spk = 0
        for i in range(n):
            vi = v[i]
            i_in = ou[i]
            if in_stim:
                if i < n_drive:
                    i_in += drive[row, i]
                i_in += stim_current[i]
                i_in += noise_sigma[i] * xi_noise[i]
            i_syn = g_ampa[i] * (vi - e_a)
            if g_nmda[i] != 0.0:
                i_syn += g_nmda[i] * (vi - e_n) / (1.0 + mg * math.exp(-0.062 * vi) / 3.57)
            i_syn += g_gaba[i] * (vi - e_g)
            if in_stim:
                abs_sum[pop_of[i]] += abs(i_in - i_syn)
            if ref_steps[i] > 0:
                v[i] = v_reset[i]
                ref_steps[i] -= 1
                active = False
            elif alive[i]:
                v[i] = vi + dt * 1e-3 * (-g_leak[i] * (vi - v_rest[i]) - i_syn + i_in) / c_m[i]
                active = True
            else:
                active = False
            ou[i] = ou_mean[i] + (ou[i] - ou_mean[i]) * ou_decay[i] + ou_scale[i] * rng.standard_normal()
            if not math.isfinite(v[i]):
                status = 1
                bad_index = i
                break
            if active and v[i] >= v_th[i]:
                v[i] = v_reset[i]
                ref_steps[i] = ref_len[i]
                spiked[n_spk] = i
                n_spk += 1
        if status != 0:
            break
        if in_stim:
            abs_steps += 1
        for i in range(n):
            g_ampa[i] *= da
            g_gaba[i] *= dg
            g_nmda[i] *= dn
        for q in range(nmda_pre.shape[0]):
            j = nmda_pre[q]
            x = x_nmda[j]
            if x > 0.0:
                rise = dt * alpha * x * (1.0 - s_nmda[j])
                s_nmda[j] = s_nmda[j] * dn + rise
                for e in range(nmda_indptr[j], nmda_indptr[j + 1]):
                    g_nmda[nmda_target[e]] += nmda_weight[e] * rise
                x *= dr
                if x < 1e-12:
                    x = 0.0
                x_nmda[j] = x
            else:
                s_nmda[j] *= dn
        b = step_i // bin_steps
        for k in range(n_spk):
            j = spiked[k]
            counts[b, pop_of[j]] += 1
            for e in range(lin_indptr[j], lin_indptr[j + 1]):
                if lin_kind[e] == 0:
                    g_ampa[lin_target[e]] += lin_weight[e]
                else:
                    g_gaba[lin_target[e]] += lin_weight[e]
            if nmda_indptr[j + 1] > nmda_indptr[j]:
                x_nmda[j] += 1.0
            if rec_lo <= j < rec_hi:
                if n_rec < rec_steps.shape[0]:
                    rec_steps[n_rec] = step_i
                    rec_ids[n_rec] = j
                    n_rec += 1
                else:
                    overflow = True
        # readout at the end of every check interval inside the stimulus period
        if pop_a >= 0 and in_stim and (step_i + 1 - n_settle) % (check_bins * bin_steps) == 0:
            last = (step_i + 1) // bin_steps  # bins [last - window, last)
            first = last - window_bins
            if first < 0:
                first = 0
            ca = 0
            cb = 0
            for bb in range(first, last):
                ca += counts[bb, pop_a]
                cb += counts[bb, pop_b]
            span = (last - first) * bin_len_s
            ra = ca / (max(alive_a, 1) * span)
            rb = cb / (max(alive_b, 1) * span)
            if decision < 0 and (ra > threshold_hz or rb > threshold_hz):
                decision = step_i + 1 - n_settle
                if stop_on_decision:
                    break
    return counts, decision, step_i + 1, abs_sum, abs_steps, n_rec, overflow, status, bad_index


def integrate(circ: Circuit, state: NetworkState, dt: float, rng, *, drive=None, drive_dt=2.0,
              n_settle=0, n_stim=0, stim_current=None, noise_sigma=None, noise_rng=None,
              bin_ms=10.0, readout: Readout | None = None, stop_on_decision=True,
              record=None, record_capacity=2_000_000) -> IntegrationResult:
    """Run ``n_settle`` steps without stimulus then ``n_stim`` with it, in place on ``state``.

    ``drive`` is ``(rows, circ.n_drive)`` float32 held for ``drive_dt`` ms per
    row. ``record=(lo, hi)`` stores spike times of neurons in that index range.
    """
    if not 0 < dt <= 2.0:
        raise ParameterError("dt", "must lie in (0, 2] ms")
    n = circ.n
    if drive is None:
        drive = np.zeros((1, circ.n_drive), dtype=np.float32)
    drive = np.ascontiguousarray(drive, dtype=np.float32)
    if drive.shape[1] != circ.n_drive:
        raise ParameterError("drive", f"expected {circ.n_drive} columns, got {drive.shape[1]}")
    drive_every = int(round(drive_dt / dt))
    if abs(drive_every * dt - drive_dt) > 1e-9:
        raise ParameterError("dt", f"must divide the drive step of {drive_dt} ms")
    bin_steps = int(round(bin_ms / dt))
    if abs(bin_steps * dt - bin_ms) > 1e-9:
        raise ParameterError("dt", f"must divide the {bin_ms} ms bin")
    if stim_current is None:
        stim_current = np.zeros(n)
    if noise_sigma is None:
        noise_sigma = np.zeros(n)
    noise_sigma = np.asarray(noise_sigma, dtype=float)
    noise_idx = np.nonzero(noise_sigma > 0)[0].astype(np.int64)
    if noise_rng is None:
        noise_rng = np.random.default_rng(0)
    ou_decay = np.exp(-dt / circ.ou_tau)
    ou_scale = circ.ou_sigma * np.sqrt(1.0 - ou_decay * ou_decay)
    ref_len = np.rint(circ.t_refractory / dt).astype(np.int64)
    ref_steps = np.rint(state.refractory_remaining / dt).astype(np.int64)
    nmda_pre = np.nonzero(circ.nmda_indptr[1:] > circ.nmda_indptr[:-1])[0].astype(np.int64)

    ro = readout or Readout()
    window_bins = int(round(ro.window_ms / ro.bin_ms)) if readout else 1
    check_bins = int(round(ro.interval_ms / ro.bin_ms)) if readout else 1
    if readout is not None and abs(ro.bin_ms - bin_ms) > 1e-9:
        raise ParameterError("bin_ms", "readout and recording bins must agree")
    alive_a = int(circ.alive[circ.pop_of == ro.pop_a].sum()) if readout else 0
    alive_b = int(circ.alive[circ.pop_of == ro.pop_b].sum()) if readout else 0

    if record is None:
        rec_lo, rec_hi, cap = 0, 0, 0
    else:
        rec_lo, rec_hi = record
        cap = record_capacity
    rec_steps = np.zeros(cap, dtype=np.int64)
    rec_ids = np.zeros(cap, dtype=np.int64)

    counts, decision, steps_run, abs_sum, abs_steps, n_rec, overflow, status, bad = _run(
        state.v, state.g_ampa, state.g_gaba, state.g_nmda, state.s_nmda, state.x_nmda, ref_steps,
        state.ou_current,
        circ.v_rest, circ.v_threshold, circ.v_reset, circ.c_m, circ.g_leak, ref_len, circ.ou_mean,
        ou_decay, ou_scale, circ.alive,
        circ.lin_indptr, circ.lin_target, circ.lin_weight, circ.lin_kind,
        circ.nmda_indptr, circ.nmda_target, circ.nmda_weight, nmda_pre,
        circ.pop_of, circ.n_pops, circ.kinetics_vector(dt), dt,
        drive, circ.n_drive, drive_every, np.asarray(stim_current, dtype=float), noise_sigma, noise_idx,
        rng, noise_rng, int(n_settle), int(n_stim), bin_steps,
        int(ro.pop_a) if readout else -1, int(ro.pop_b) if readout else -1, alive_a, alive_b,
        window_bins, check_bins, float(ro.threshold_hz), bool(stop_on_decision),
        int(rec_lo), int(rec_hi), rec_steps, rec_ids,
    )
    state.refractory_remaining = ref_steps * dt
    state.t += steps_run * dt
    if status:
        raise NumericalDivergenceError(bad, state.t)
    return IntegrationResult(counts, int(decision), int(steps_run), abs_sum, int(abs_steps),
                             rec_steps[:n_rec].copy(), rec_ids[:n_rec].copy(), bool(overflow))
