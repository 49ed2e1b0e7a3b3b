"""The LGN -> V1 -> MT -> LIP network: construction, edits and single trials.

Neuron index layout (contiguous, in this order)::

    LGN_ON, LGN_OFF   side x side lattices (row-major), driven by the retina
    V1_G1, V1_G2      (side/2) x (side/2) lattices
    MT_L, MT_R        mt_side x mt_side lattices
    LIP_A, LIP_B      excitatory decision pools (Left, Right)
    LIP_I             shared inhibitory pool

Wiring:

* V1 neuron ``(a, b)`` of G1 takes ON cell ``(2a, 2b)`` and OFF cell
  ``(2a, 2b+1)`` (ON left of OFF); G2 takes OFF ``(2a, 2b)`` and ON
  ``(2a, 2b+1)`` (ON right of OFF).
* MT neuron ``(p, q)`` of L (R) pools a ``patch x patch`` block of G1 (G2);
  block origins are evenly spread over the V1 lattice.
* every (MT_L, LIP_A) and (MT_R, LIP_B) pair connects with probability
  ``mt_lip_fraction``.
* LIP excitatory neurons connect all-to-all (no autapses) by AMPA and NMDA,
  scaled by ``hebb_strong`` within a pool and ``hebb_weak`` across pools;
  E -> I by AMPA and NMDA, I -> E (and optionally I -> I) by GABA.

Every weight is drawn from ``N(mean, weight_cv * mean)``; non-positive draws
are dropped (Dale truncation).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .behavior import TrialResult
from .dynamics import Circuit, NetworkState, NeuronParams, OuNoiseParams, Readout, SynapseKinetics
from .errors import ParameterError, PersistenceError, SpecError, StateError
from .retina import LgnDrive
from .seeding import derive_seed, rng_for
from .stimulus import Direction

POPULATIONS = ("LGN_ON", "LGN_OFF", "V1_G1", "V1_G2", "MT_L", "MT_R", "LIP_A", "LIP_B", "LIP_I")
AREAS = {
    "LGN": ("LGN_ON", "LGN_OFF"),
    "V1": ("V1_G1", "V1_G2"),
    "MT": ("MT_L", "MT_R"),
    "LIP": ("LIP_A", "LIP_B", "LIP_I"),
    "LIP_E": ("LIP_A", "LIP_B"),
}
MICROSTIM_TARGETS = {
    "MT_L": ("MT_L",),
    "MT_R": ("MT_R",),
    "MT_all": ("MT_L", "MT_R"),
    "V1_all": ("V1_G1", "V1_G2"),
    "LIP_E_all": ("LIP_A", "LIP_B"),
    "LGN_all": ("LGN_ON", "LGN_OFF"),
}
PROJECTION_GROUPS = {
    "LGN-V1": ("LGN-V1",),
    "V1-MT": ("V1-MT",),
    "MT-LIP": ("MT-LIP",),
    "LIP-EE": ("LIP-EE-AMPA", "LIP-EE-NMDA"),
    "LIP-EI": ("LIP-EI-AMPA", "LIP-EI-NMDA"),
    "LIP-IE": ("LIP-IE",),
    "LIP-II": ("LIP-II",),
}
CHOICE_OF_POOL = {"LIP_A": Direction.LEFT, "LIP_B": Direction.RIGHT}


@dataclass(frozen=True)
class KineticsSpec:
    ampa_decay: float = 2.0
    nmda_rise: float = 2.0
    nmda_decay: float = 100.0
    nmda_alpha: float = 0.5
    gaba_decay: float = 5.0
    mg_conc: float = 1.0
    e_excitatory: float = 0.0
    e_inhibitory: float = -70.0

    def channels(self):
        return (
            SynapseKinetics("AMPA", self.e_excitatory, self.ampa_decay),
            SynapseKinetics("NMDA", self.e_excitatory, self.nmda_decay, self.nmda_rise, self.mg_conc,
                            self.nmda_alpha),
            SynapseKinetics("GABA", self.e_inhibitory, self.gaba_decay),
        )


@dataclass(frozen=True)
class NetworkSpec:
    lgn_side: int = 100
    v1_side: int = 50
    mt_side: int = 20
    n_lip_e: int = 300  # per pool
    n_lip_i: int = 500
    g_lgn_v1: float = 3.0
    g_v1_mt: float = 2.0
    v1_mt_patch: int = 40  # V1 sites per side feeding one MT neuron
    g_mt_lip: float = 0.1
    mt_lip_fraction: float = 0.5
    lip_ee_ampa: float = 0.05
    lip_ee_nmda: float = 0.165
    lip_ei_ampa: float = 0.04
    lip_ei_nmda: float = 0.13
    lip_ie_gaba: float = 0.05
    lip_ii_gaba: float = 0.0
    hebb_strong: float = 1.3
    hebb_weak: float = 0.7
    weight_cv: float = 0.5
    excitatory: NeuronParams = NeuronParams()
    inhibitory: NeuronParams = NeuronParams(c_m=0.2, g_leak=20.0, t_refractory=1.0)
    noise: OuNoiseParams = OuNoiseParams()
    noise_lip_e: OuNoiseParams = OuNoiseParams(mean=550.0)
    kinetics: KineticsSpec = KineticsSpec()
    seed: int = 0

    def violations(self) -> list:
        out = []
        for name in ("lgn_side", "v1_side", "mt_side", "n_lip_e", "n_lip_i", "v1_mt_patch"):
            if getattr(self, name) <= 0:
                out.append(f"{name}: count must be positive")
        if self.lgn_side != 2 * self.v1_side:
            out.append(f"v1_side: pairing rule needs lgn_side == 2 * v1_side ({self.lgn_side} vs {self.v1_side})")
        if self.v1_mt_patch > self.v1_side:
            out.append("v1_mt_patch: patch larger than the V1 lattice")
        for name in ("g_lgn_v1", "g_v1_mt", "g_mt_lip", "lip_ee_ampa", "lip_ee_nmda", "lip_ei_ampa",
                     "lip_ei_nmda", "lip_ie_gaba", "lip_ii_gaba", "hebb_strong", "hebb_weak", "weight_cv"):
            if not getattr(self, name) >= 0:
                out.append(f"{name}: must be non-negative")
        if not 0.0 <= self.mt_lip_fraction <= 1.0:
            out.append("mt_lip_fraction: must lie in [0, 1]")
        return out

    def validate(self) -> "NetworkSpec":
        bad = self.violations()
        if bad:
            raise SpecError("; ".join(bad))
        return self

    @property
    def counts(self) -> dict:
        return {
            "LGN_ON": self.lgn_side**2, "LGN_OFF": self.lgn_side**2,
            "V1_G1": self.v1_side**2, "V1_G2": self.v1_side**2,
            "MT_L": self.mt_side**2, "MT_R": self.mt_side**2,
            "LIP_A": self.n_lip_e, "LIP_B": self.n_lip_e, "LIP_I": self.n_lip_i,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        nested = {"excitatory": NeuronParams, "inhibitory": NeuronParams, "noise": OuNoiseParams,
                  "noise_lip_e": OuNoiseParams, "kinetics": KineticsSpec}
        kw = {}
        names = {f.name for f in fields(cls)}
        for k, v in d.items():
            if k not in names:
                raise SpecError(f"unknown network spec key {k!r}")
            kw[k] = nested[k](**v) if k in nested and isinstance(v, dict) else v
        return cls(**kw)

    def spec_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Projection:
    name: str
    kind: str  # AMPA, NMDA or GABA
    pre: np.ndarray
    post: np.ndarray
    weight: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.pre.shape[0]

    def subset(self, keep: np.ndarray) -> "Projection":
        return Projection(self.name, self.kind, self.pre[keep], self.post[keep], self.weight[keep])


@dataclass
class Network:
    """A realised network. Treat as immutable: edits return new instances."""

    spec: NetworkSpec
    populations: dict  # name -> (start, stop)
    projections: dict  # name -> Projection
    alive: np.ndarray
    current_noise_sigma: np.ndarray
    perturbations: tuple = ()
    _circuit: Circuit | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.alive.shape[0]

    def indices(self, name: str) -> np.ndarray:
        pops = AREAS.get(name, MICROSTIM_TARGETS.get(name, (name,)))
        out = []
        for p in pops:
            if p not in self.populations:
                raise SpecError(f"unknown population {name!r}")
            lo, hi = self.populations[p]
            out.append(np.arange(lo, hi))
        return np.concatenate(out)

    def pop_index(self, name: str) -> int:
        return POPULATIONS.index(name)

    def pop_of(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        for k, p in enumerate(POPULATIONS):
            lo, hi = self.populations[p]
            out[lo:hi] = k
        return out

    def evolve(self, **changes) -> "Network":
        return replace(self, _circuit=None, **changes)

    def circuit(self) -> Circuit:
        if self._circuit is None:
            self._circuit = compile_circuit(self)
        return self._circuit

    def weights_into(self, projection: str, post_pop: str) -> np.ndarray:
        """Total weight each neuron of ``post_pop`` receives through ``projection``."""
        lo, hi = self.populations[post_pop]
        out = np.zeros(hi - lo)
        for name in PROJECTION_GROUPS.get(projection, (projection,)):
            pr = self.projections[name]
            m = (pr.post >= lo) & (pr.post < hi)
            np.add.at(out, pr.post[m] - lo, pr.weight[m])
        return out


def _layout(spec: NetworkSpec) -> dict:
    pops, start = {}, 0
    for name in POPULATIONS:
        n = spec.counts[name]
        pops[name] = (start, start + n)
        start += n
    return pops


def sample_weights(rng, mean, cv, size):
    """Draws from ``N(mean, cv * mean)`` and the mask of strictly positive ones."""
    if size == 0 or mean <= 0:
        return np.zeros(size), np.zeros(size, dtype=bool)
    w = rng.normal(mean, cv * mean, size) if cv > 0 else np.full(size, float(mean))
    return w, w > 0


def _projection(name, kind, pre, post, mean, cv, rng):
    mean = np.broadcast_to(np.asarray(mean, dtype=float), pre.shape)
    if pre.size == 0:
        w, keep = np.zeros(0), np.zeros(0, dtype=bool)
    elif cv > 0:
        w = rng.normal(0.0, 1.0, pre.size) * (cv * mean) + mean
        keep = w > 0
    else:
        w = mean.copy()
        keep = w > 0
    return Projection(name, kind, pre[keep].astype(np.int64), post[keep].astype(np.int64), w[keep])


def patch_origins(v1_side: int, mt_side: int, patch: int) -> np.ndarray:
    if mt_side == 1:
        return np.array([(v1_side - patch) // 2])
    return np.rint(np.linspace(0, v1_side - patch, mt_side)).astype(np.int64)


def build_network(spec: NetworkSpec) -> Network:
    spec.validate()
    pops = _layout(spec)
    cv = spec.weight_cv
    proj = {}

    def rng(name):
        return rng_for(spec.seed, "build", name)

    # LGN -> V1: one ON and one OFF afferent per V1 neuron
    L, V = spec.lgn_side, spec.v1_side
    a, b = np.divmod(np.arange(V * V), V)
    left = (2 * a) * L + 2 * b
    right = left + 1
    on0, off0 = pops["LGN_ON"][0], pops["LGN_OFF"][0]
    g1 = pops["V1_G1"][0] + np.arange(V * V)
    g2 = pops["V1_G2"][0] + np.arange(V * V)
    pre = np.concatenate([on0 + left, off0 + right, off0 + left, on0 + right])
    post = np.concatenate([g1, g1, g2, g2])
    proj["LGN-V1"] = _projection("LGN-V1", "AMPA", pre, post, spec.g_lgn_v1, cv, rng("LGN-V1"))

    # V1 -> MT: topographic patches, G1 -> L and G2 -> R
    M, P = spec.mt_side, spec.v1_mt_patch
    org = patch_origins(V, M, P)
    pre_l, post_l = [], []
    for p in range(M):
        for q in range(M):
            rr, cc = np.meshgrid(org[p] + np.arange(P), org[q] + np.arange(P), indexing="ij")
            pre_l.append((rr * V + cc).ravel())
            post_l.append(np.full(P * P, p * M + q))
    pre_l, post_l = np.concatenate(pre_l), np.concatenate(post_l)
    pre = np.concatenate([pops["V1_G1"][0] + pre_l, pops["V1_G2"][0] + pre_l])
    post = np.concatenate([pops["MT_L"][0] + post_l, pops["MT_R"][0] + post_l])
    proj["V1-MT"] = _projection("V1-MT", "AMPA", pre, post, spec.g_v1_mt, cv, rng("V1-MT"))

    # MT -> LIP: Bernoulli(fraction) per (pre, post) pair
    r = rng("MT-LIP")
    pres, posts = [], []
    for src, dst in (("MT_L", "LIP_A"), ("MT_R", "LIP_B")):
        s0, s1 = pops[src]
        d0, d1 = pops[dst]
        mask = r.random((s1 - s0, d1 - d0)) < spec.mt_lip_fraction
        i, j = np.nonzero(mask)
        pres.append(s0 + i)
        posts.append(d0 + j)
    proj["MT-LIP"] = _projection("MT-LIP", "AMPA", np.concatenate(pres), np.concatenate(posts),
                                 spec.g_mt_lip, cv, r)

    # LIP recurrent
    ea0, ea1 = pops["LIP_A"]
    eb0, eb1 = pops["LIP_B"]
    i0, i1 = pops["LIP_I"]
    exc = np.arange(ea0, eb1)
    pool = np.where(exc < ea1, 0, 1)
    pre_e, post_e = np.meshgrid(exc, exc, indexing="ij")
    same = pool[pre_e - ea0] == pool[post_e - ea0]
    not_self = pre_e != post_e
    pre_e, post_e, same = pre_e[not_self], post_e[not_self], same[not_self]
    hebb = np.where(same, spec.hebb_strong, spec.hebb_weak)
    proj["LIP-EE-AMPA"] = _projection("LIP-EE-AMPA", "AMPA", pre_e, post_e, hebb * spec.lip_ee_ampa, cv,
                                      rng("LIP-EE-AMPA"))
    proj["LIP-EE-NMDA"] = _projection("LIP-EE-NMDA", "NMDA", pre_e, post_e, hebb * spec.lip_ee_nmda, cv,
                                      rng("LIP-EE-NMDA"))
    inh = np.arange(i0, i1)
    pre_ei, post_ei = (m.ravel() for m in np.meshgrid(exc, inh, indexing="ij"))
    proj["LIP-EI-AMPA"] = _projection("LIP-EI-AMPA", "AMPA", pre_ei, post_ei, spec.lip_ei_ampa, cv,
                                      rng("LIP-EI-AMPA"))
    proj["LIP-EI-NMDA"] = _projection("LIP-EI-NMDA", "NMDA", pre_ei, post_ei, spec.lip_ei_nmda, cv,
                                      rng("LIP-EI-NMDA"))
    pre_ie, post_ie = (m.ravel() for m in np.meshgrid(inh, exc, indexing="ij"))
    proj["LIP-IE"] = _projection("LIP-IE", "GABA", pre_ie, post_ie, spec.lip_ie_gaba, cv, rng("LIP-IE"))
    pre_ii, post_ii = np.meshgrid(inh, inh, indexing="ij")
    keep = pre_ii != post_ii
    proj["LIP-II"] = _projection("LIP-II", "GABA", pre_ii[keep], post_ii[keep], spec.lip_ii_gaba, cv,
                                 rng("LIP-II"))

    n = pops["LIP_I"][1]
    return Network(spec, pops, proj, np.ones(n, dtype=bool), np.zeros(n))


def _csr(n, pre, *cols):
    order = np.argsort(pre, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(pre, minlength=n), out=indptr[1:])
    return (indptr,) + tuple(np.ascontiguousarray(c[order]) for c in cols)


def compile_circuit(net: Network) -> Circuit:
    spec = net.spec
    n = net.n
    params = {k: np.empty(n) for k in ("v_rest", "v_threshold", "v_reset", "c_m", "g_leak", "t_refractory",
                                       "ou_mean", "ou_sigma", "ou_tau")}
    for name, (lo, hi) in net.populations.items():
        np_ = spec.inhibitory if name == "LIP_I" else spec.excitatory
        ou = spec.noise_lip_e if name in ("LIP_A", "LIP_B") else spec.noise
        for k in ("v_rest", "v_threshold", "v_reset", "c_m", "g_leak", "t_refractory"):
            params[k][lo:hi] = getattr(np_, k)
        params["ou_mean"][lo:hi] = ou.mean
        params["ou_sigma"][lo:hi] = ou.sigma
        params["ou_tau"][lo:hi] = ou.tau
    lin = [p for p in net.projections.values() if p.kind in ("AMPA", "GABA")]
    nm = [p for p in net.projections.values() if p.kind == "NMDA"]
    cat = lambda ps, attr, dt: np.concatenate([getattr(p, attr) for p in ps] or [np.zeros(0, dt)]).astype(dt)
    kinds = np.concatenate([np.full(p.n_edges, dyn.KIND_GABA if p.kind == "GABA" else dyn.KIND_AMPA, np.int8)
                            for p in lin] or [np.zeros(0, np.int8)])
    lin_indptr, lin_target, lin_weight, lin_kind = _csr(n, cat(lin, "pre", np.int64), cat(lin, "post", np.int64),
                                                         cat(lin, "weight", np.float64), kinds)
    nmda_indptr, nmda_target, nmda_weight = _csr(n, cat(nm, "pre", np.int64), cat(nm, "post", np.int64),
                                                 cat(nm, "weight", np.float64))
    ampa, nmda, gaba = spec.kinetics.channels()
    n_drive = net.populations["LGN_OFF"][1]
    return Circuit(
        **params, alive=net.alive.copy(),
        lin_indptr=lin_indptr, lin_target=lin_target, lin_weight=lin_weight, lin_kind=lin_kind,
        nmda_indptr=nmda_indptr, nmda_target=nmda_target, nmda_weight=nmda_weight,
        pop_of=net.pop_of(), n_pops=len(POPULATIONS), n_drive=n_drive, ampa=ampa, nmda=nmda, gaba=gaba,
    )


# -- perturbation and stimulation ----------------------------------------------------

PERTURBATION_KINDS = ("DropNeurons", "DropConnections", "WeightNoise", "CurrentNoise")


@dataclass(frozen=True)
class Perturbation:
    """``magnitude`` is a fraction (drops, 0-0.9) or a multiple of mean |value| (noise, 0-2)."""

    kind: str
    target: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise SpecError(f"unknown perturbation kind {self.kind!r}")
        hi = 0.9 if self.kind.startswith("Drop") else 2.0
        if not 0.0 <= self.magnitude <= hi + 1e-12:
            raise ParameterError("magnitude", f"{self.kind} magnitude must lie in [0, {hi}]")
        if self.kind in ("DropConnections", "WeightNoise"):
            if self.target not in PROJECTION_GROUPS:
                raise SpecError(f"unknown projection {self.target!r}")
        elif self.target not in AREAS and self.target not in POPULATIONS:
            raise SpecError(f"unknown population {self.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Microstimulation:
    target: str
    amplitude: float  # pA, applied for the whole stimulus period

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ParameterError("amplitude", "must be non-negative")
        if self.target not in MICROSTIM_TARGETS and self.target not in POPULATIONS:
            raise SpecError(f"unknown stimulation target {self.target!r}")

    def current(self, net: Network) -> np.ndarray:
        out = np.zeros(net.n)
        if self.amplitude > 0:
            out[net.indices(self.target)] = self.amplitude
        return out


def apply_perturbation(net: Network, p: Perturbation, input_scale: dict | None = None) -> Network:
    """Return a perturbed copy of ``net``.

    ``input_scale`` maps population name -> mean |input current| (pA) and is
    only needed for ``CurrentNoise``; when omitted it is measured with
    ``calibrate_input_scale``.
    """
    rng = np.random.default_rng(derive_seed(p.seed, "perturbation", p.kind, p.target))
    tag = net.perturbations + (p,)
    if p.kind == "DropNeurons":
        idx = net.indices(p.target)
        k = int(round(p.magnitude * idx.size))
        alive = net.alive.copy()
        # one permutation per seed: lower levels drop a subset of higher ones
        alive[rng.permutation(idx)[:k]] = False
        return net.evolve(alive=alive, perturbations=tag)
    if p.kind == "CurrentNoise":
        if input_scale is None:
            input_scale = calibrate_input_scale(net)
        sigma = net.current_noise_sigma.copy()
        pops = AREAS.get(p.target, (p.target,))
        sizes = np.array([net.populations[q][1] - net.populations[q][0] for q in pops], dtype=float)
        scale = float(np.sum([input_scale[q] for q in pops] * sizes) / sizes.sum())
        sigma[net.indices(p.target)] = p.magnitude * scale
        return net.evolve(current_noise_sigma=sigma, perturbations=tag)

    names = PROJECTION_GROUPS[p.target]
    projections = dict(net.projections)
    if p.kind == "DropConnections":
        sizes = [net.projections[nm].n_edges for nm in names]
        total = sum(sizes)
        k = int(round(p.magnitude * total))
        drop = np.zeros(total, dtype=bool)
        drop[rng.permutation(total)[:k]] = True
        start = 0
        for nm, sz in zip(names, sizes):
            projections[nm] = net.projections[nm].subset(~drop[start:start + sz])
            start += sz
    else:  # WeightNoise
        w_all = np.concatenate([net.projections[nm].weight for nm in names])
        sigma = p.magnitude * float(np.mean(np.abs(w_all))) if w_all.size else 0.0
        for nm in names:
            pr = net.projections[nm]
            w = pr.weight + sigma * rng.standard_normal(pr.n_edges)
            keep = w > 0
            projections[nm] = Projection(pr.name, pr.kind, pr.pre[keep], pr.post[keep], w[keep])
    return net.evolve(projections=projections, perturbations=tag)


# -- trials -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialSettings:
    dt: float = 0.5
    settle_ms: float = 200.0
    threshold_hz: float = 30.0
    window_ms: float = 50.0
    interval_ms: float = 10.0
    bin_ms: float = 10.0
    stop_on_decision: bool = True
    record_traces: bool = True

    def validate(self):
        if not 0 < self.dt <= 2.0:
            raise ParameterError("dt", "must lie in (0, 2] ms")
        if not self.threshold_hz > 0:
            raise ParameterError("threshold_hz", "must be positive")
        if self.settle_ms < 0:
            raise ParameterError("settle_ms", "must be non-negative")
        for name in ("window_ms", "interval_ms", "bin_ms"):
            v = getattr(self, name)
            if not v > 0 or abs(v / self.bin_ms - round(v / self.bin_ms)) > 1e-9:
                raise ParameterError(name, "must be a positive multiple of bin_ms")
        return self


def run_trial(net: Network, drive: LgnDrive, stim_opt: Microstimulation | None = None,
              threshold_hz: float | None = None, seed: int = 0, settings: TrialSettings = TrialSettings(),
              coherence: float = float("nan"), direction=Direction.RIGHT,
              record_spikes: str | None = None) -> TrialResult:
    """Simulate one stimulus presentation and read out the decision.

    The network first settles for ``settings.settle_ms`` without input; the
    stimulus then runs for the full drive length (2 s for a 120-frame movie)
    or until the windowed mean rate of LIP_A or LIP_B exceeds the threshold.
    """
    if threshold_hz is not None:
        settings = replace(settings, threshold_hz=threshold_hz)
    settings.validate()
    side = net.spec.lgn_side
    if tuple(drive.lattice) != (side, side):
        raise SpecError(f"drive lattice {drive.lattice} does not match LGN lattice {(side, side)}")
    circ = net.circuit()
    dt = settings.dt
    n_settle = int(round(settings.settle_ms / dt))
    n_stim = int(round(drive.n_steps * drive.dt_ms / dt))
    state = NetworkState.initial(circ, rng_for(seed, "trial-init"))
    readout = Readout(net.pop_index("LIP_A"), net.pop_index("LIP_B"), settings.threshold_hz,
                      settings.bin_ms, settings.window_ms, settings.interval_ms)
    rec = None
    if record_spikes is not None:
        idx = net.indices(record_spikes)
        rec = (int(idx.min()), int(idx.max()) + 1)
    res = dyn.integrate(
        circ, state, dt, rng_for(seed, "trial-noise"), drive=drive.flat(), drive_dt=drive.dt_ms,
        n_settle=n_settle, n_stim=n_stim,
        stim_current=stim_opt.current(net) if stim_opt is not None else None,
        noise_sigma=net.current_noise_sigma, noise_rng=rng_for(seed, "current-noise"),
        bin_ms=settings.bin_ms, readout=readout, stop_on_decision=settings.stop_on_decision, record=rec,
    )
    return _trial_result(net, res, settings, n_settle, n_stim, seed, coherence, direction)


def _pool_rates(net, counts, first, last, bin_s):
    out = {}
    for name in ("LIP_A", "LIP_B"):
        lo, hi = net.populations[name]
        alive = max(int(net.alive[lo:hi].sum()), 1)
        c = counts[max(first, 0):last, net.pop_index(name)].sum()
        out[name] = c / (alive * max(last - max(first, 0), 1) * bin_s)
    return out


def _trial_result(net, res, settings, n_settle, n_stim, seed, coherence, direction) -> TrialResult:
    dt = settings.dt
    bin_steps = int(round(settings.bin_ms / dt))
    bin_s = settings.bin_ms / 1000.0
    window = int(round(settings.window_ms / settings.bin_ms))
    settle_bins = n_settle // bin_steps
    if res.decision_step >= 0:
        end_step = n_settle + res.decision_step
        no_decision = False
        decision_time = res.decision_step * dt
    else:
        end_step = n_settle + n_stim
        no_decision = True
        decision_time = n_stim * dt
    last = end_step // bin_steps
    rates = _pool_rates(net, res.counts, last - window, last, bin_s)
    tie = False
    if rates["LIP_A"] > rates["LIP_B"]:
        choice = Direction.LEFT
    elif rates["LIP_B"] > rates["LIP_A"]:
        choice = Direction.RIGHT
    else:
        tie = True
        total = _pool_rates(net, res.counts, settle_bins, last, bin_s)
        if total["LIP_A"] != total["LIP_B"]:
            choice = Direction.LEFT if total["LIP_A"] > total["LIP_B"] else Direction.RIGHT
        else:
            choice = Direction.LEFT if rng_for(seed, "tie").random() < 0.5 else Direction.RIGHT

    traces = None
    trace_end = -(-res.steps_run // bin_steps)
    if settings.record_traces:
        traces = {}
        for k, name in enumerate(POPULATIONS):
            lo, hi = net.populations[name]
            alive = max(int(net.alive[lo:hi].sum()), 1)
            traces[name] = res.counts[settle_bins:trace_end, k] / (alive * bin_s)
    mean_abs = {}
    if res.abs_input_steps:
        for k, name in enumerate(POPULATIONS):
            lo, hi = net.populations[name]
            mean_abs[name] = float(res.abs_input_sum[k] / ((hi - lo) * res.abs_input_steps))
    spikes = None
    if res.spike_ids.size or res.raster_overflow:
        spikes = ((res.spike_steps - n_settle) * dt, res.spike_ids)
    return TrialResult(
        coherence=float(coherence), true_direction=direction, choice=choice, decision_time=float(decision_time),
        no_decision_flag=no_decision, seed=int(seed), rate_traces=traces, mean_abs_input=mean_abs,
        tie_break=tie, spikes=spikes, rate_left=float(rates["LIP_A"]), rate_right=float(rates["LIP_B"]),
    )


# -- calibration of current-noise scale --------------------------------------------

_INPUT_SCALE_CACHE: dict = {}
CALIBRATION_COHERENCE = 0.5


def calibrate_input_scale(net: Network, retina=None, settings: TrialSettings = TrialSettings(),
                          cache_dir=None, stimulus=None) -> dict:
    """Mean |input current| per population over one unperturbed trial at coherence 0.5.

    Cached in memory, and under ``cache_dir`` when given, per
    (spec hash, retina, stimulus geometry, settings). ``stimulus`` is the base
    RdkParams whose geometry is used (coherence, direction and seed are set here).
    """
    from .retina import RetinaParams, compute_lgn_drive
    from .stimulus import RdkParams, generate_stimulus

    retina = retina or RetinaParams()
    seed = derive_seed(net.spec.seed, "input-calibration")
    params = replace(stimulus or RdkParams(), coherence=CALIBRATION_COHERENCE, direction=Direction.RIGHT, seed=seed)
    key = (net.spec.spec_hash(), repr(retina), repr(params), repr(replace(settings, record_traces=False)))
    if key in _INPUT_SCALE_CACHE:
        return dict(_INPUT_SCALE_CACHE[key])
    path = None
    if cache_dir is not None:
        digest = hashlib.sha256("|".join(key).encode()).hexdigest()[:24]
        path = Path(cache_dir) / f"input-scale-{digest}.json"
        if path.exists():
            _INPUT_SCALE_CACHE[key] = json.loads(path.read_text())
            return dict(_INPUT_SCALE_CACHE[key])
    base = build_network(net.spec)
    stim = generate_stimulus(params)
    full = replace(settings, stop_on_decision=False, record_traces=False)
    res = run_trial(base, compute_lgn_drive(stim, retina), seed=seed, settings=full,
                    coherence=CALIBRATION_COHERENCE)
    _INPUT_SCALE_CACHE[key] = dict(res.mean_abs_input)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps(_INPUT_SCALE_CACHE[key], sort_keys=True))
        os.replace(tmp, path)
    return dict(_INPUT_SCALE_CACHE[key])


# -- snapshots ----------------------------------------------------------------------


def save_network(net: Network, path) -> Path:
    path = Path(path)
    arrays = {"alive": net.alive, "current_noise_sigma": net.current_noise_sigma}
    for name, p in net.projections.items():
        arrays[f"{name}|pre"] = p.pre
        arrays[f"{name}|post"] = p.post
        arrays[f"{name}|weight"] = p.weight
        arrays[f"{name}|kind"] = np.array(p.kind)
    meta = {"spec": net.spec.to_dict(), "populations": net.populations,
            "perturbations": [p.to_dict() for p in net.perturbations]}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise PersistenceError(path, f"cannot write network snapshot: {exc}") from exc
    return path


def load_network(path) -> Network:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise PersistenceError(path, f"cannot read network snapshot: {exc}") from exc
    meta = json.loads(str(data["meta"]))
    projections = {}
    for key in data.files:
        if key.endswith("|pre"):
            name = key[:-4]
            projections[name] = Projection(name, str(data[f"{name}|kind"]), data[f"{name}|pre"],
                                           data[f"{name}|post"], data[f"{name}|weight"])
    pops = {k: tuple(v) for k, v in meta["populations"].items()}
    return Network(NetworkSpec.from_dict(meta["spec"]), pops, projections, data["alive"],
                   data["current_noise_sigma"], tuple(Perturbation(**p) for p in meta["perturbations"]))


def snapshot_path(root, spec: NetworkSpec) -> Path:
    return Path(root) / f"network-{spec.spec_hash()[:16]}-{spec.seed}.npz"


def cached_network(spec: NetworkSpec, root=None) -> Network:
    """Build ``spec``, reusing a snapshot under ``root`` when one exists."""
    if root is None:
        return build_network(spec)
    path = snapshot_path(root, spec)
    if path.exists():
        return load_network(path)
    net = build_network(spec)
    Path(root).mkdir(parents=True, exist_ok=True)
    save_network(net, path)
    return net


def require_traces(result: TrialResult) -> dict:
    if not result.rate_traces:
        raise StateError("trial was run without trace recording")
    return result.rate_traces
