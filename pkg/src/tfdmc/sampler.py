"""Metropolis-Hastings sampling of |Psi(x, y~)|^2 in the doubled space.

The composite kernel mixes three proposal rules:

* site exchange (default 79%): pick the physical or auxiliary copy uniformly,
  then one of the move types defined for the sector uniformly -- single
  nearest-neighbor hop, spin exchange across a bond, doublon hop (the latter
  two only in spinful sectors) -- then one concrete valid move uniformly;
* diagonal exchange (20%): one single-electron move applied to both copies
  at once, drawn among the moves valid in both simultaneously;
* swap (1%): exchange the two copies entirely.

Proposal ratios carry the forward/backward move multiplicities, so each rule
satisfies detailed balance exactly.  A drawn move type with no valid concrete
move leaves the chain unchanged and counts as a rejected proposal.

Umbrella tempering samples q ∝ |Psi|^alpha_u instead of the Born
distribution (alpha_u = 2); emitted samples then carry importance
log-weights (2 - alpha_u) log|Psi|.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tfdmc import fockspace as fk
from tfdmc.fockspace import AD, AU, PD, PU, DoubledConfig, SectorSpec

RULE_SITE, RULE_DIAG, RULE_SWAP = 0, 1, 2
TYPE_HOP, TYPE_EXCHANGE, TYPE_DOUBLON = 0, 1, 2

_ONE = np.uint64(1)


@dataclass(frozen=True)
class KernelMix:
    p_site_exchange: float = 0.79
    p_diag_exchange: float = 0.20
    p_swap: float = 0.01

    def __post_init__(self):
        probs = (self.p_site_exchange, self.p_diag_exchange, self.p_swap)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("kernel probabilities must be nonnegative and sum to 1")


@dataclass(frozen=True)
class UmbrellaSpec:
    """Tempered target q ∝ |Psi|^alpha_u; alpha_u = 2 is Born sampling."""

    alpha_u: float = 2.0


@dataclass
class SampleBatch:
    """One emitted sample per chain per pass, plus sampling diagnostics."""

    cfgs: np.ndarray  # (n, 4) uint64
    log_amps: np.ndarray  # (n,) complex
    log_weights: np.ndarray  # (n,) importance log-weights, unnormalized
    chain_ids: np.ndarray  # (n,) int
    alpha_u: float
    acceptance: dict = field(default_factory=dict)
    stuck_chains: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.cfgs.shape[0]

    def weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        return np.exp(lw)

    @staticmethod
    def concatenate(batches: list["SampleBatch"]) -> "SampleBatch":
        acc: dict = {}
        for b in batches:
            for k, (p, a) in b.acceptance.items():
                p0, a0 = acc.get(k, (0, 0))
                acc[k] = (p0 + p, a0 + a)
        return SampleBatch(
            cfgs=np.concatenate([b.cfgs for b in batches]),
            log_amps=np.concatenate([b.log_amps for b in batches]),
            log_weights=np.concatenate([b.log_weights for b in batches]),
            chain_ids=np.concatenate([b.chain_ids for b in batches]),
            alpha_u=batches[0].alpha_u,
            acceptance=acc,
            stuck_chains=sorted({c for b in batches for c in b.stuck_chains}),
        )


# ---------------------------------------------------------------------------
# move tables

@dataclass(frozen=True)
class MoveTables:
    """Directed/undirected move columns shared by both copies."""

    hop_frm: np.ndarray  # (C,) site indices, C = 2 * n_bonds * n_spin
    hop_to: np.ndarray
    hop_spin: np.ndarray
    bond_i: np.ndarray  # (B,) undirected bonds for spin exchange
    bond_j: np.ndarray
    dbl_frm: np.ndarray  # (2B,) directed, doublon moves
    dbl_to: np.ndarray
    n_types: int


def move_tables(spec: SectorSpec) -> MoveTables:
    geom = spec.geom
    bi = np.array([b[0] for b in geom.bonds], dtype=np.uint64)
    bj = np.array([b[1] for b in geom.bonds], dtype=np.uint64)
    dfrm = np.concatenate([bi, bj])
    dto = np.concatenate([bj, bi])
    spins = [0, 1] if spec.spinful else [0]
    hop_frm = np.concatenate([dfrm for _ in spins])
    hop_to = np.concatenate([dto for _ in spins])
    hop_spin = np.concatenate([np.full(dfrm.size, s, dtype=np.int64) for s in spins])
    return MoveTables(
        hop_frm=hop_frm,
        hop_to=hop_to,
        hop_spin=hop_spin,
        bond_i=bi,
        bond_j=bj,
        dbl_frm=dfrm,
        dbl_to=dto,
        n_types=3 if spec.spinful else 1,
    )


def _occ_bits(masks: np.ndarray, n_sites: int) -> np.ndarray:
    """(n, 4, n_sites) boolean occupancy from (n, 4) uint64 masks."""
    bits = np.arange(n_sites, dtype=np.uint64)
    return ((masks[:, :, None] >> bits) & _ONE).astype(bool)


def _mask_col(copy: int, spin: int) -> int:
    return 2 * copy + spin


def hop_validity(occ: np.ndarray, tables: MoveTables, copy: int) -> np.ndarray:
    cols = np.array([_mask_col(copy, s) for s in tables.hop_spin])
    return occ[:, cols, tables.hop_frm.astype(np.int64)] & ~occ[:, cols, tables.hop_to.astype(np.int64)]


def exchange_validity(occ: np.ndarray, tables: MoveTables, copy: int) -> np.ndarray:
    up = occ[:, _mask_col(copy, 0), :]
    dn = occ[:, _mask_col(copy, 1), :]
    i = tables.bond_i.astype(np.int64)
    j = tables.bond_j.astype(np.int64)
    a = up[:, i] & ~dn[:, i] & dn[:, j] & ~up[:, j]
    b = dn[:, i] & ~up[:, i] & up[:, j] & ~dn[:, j]
    return a | b


def doublon_validity(occ: np.ndarray, tables: MoveTables, copy: int) -> np.ndarray:
    up = occ[:, _mask_col(copy, 0), :]
    dn = occ[:, _mask_col(copy, 1), :]
    f = tables.dbl_frm.astype(np.int64)
    t = tables.dbl_to.astype(np.int64)
    return up[:, f] & dn[:, f] & ~up[:, t] & ~dn[:, t]


def diag_validity(occ: np.ndarray, tables: MoveTables) -> np.ndarray:
    return hop_validity(occ, tables, fk.PHYS) & hop_validity(occ, tables, fk.AUX)


def type_validity(occ: np.ndarray, tables: MoveTables, copy: int, mtype: int) -> np.ndarray:
    if mtype == TYPE_HOP:
        return hop_validity(occ, tables, copy)
    if mtype == TYPE_EXCHANGE:
        return exchange_validity(occ, tables, copy)
    return doublon_validity(occ, tables, copy)


def apply_type_move(masks: np.ndarray, tables: MoveTables, copy: int, mtype: int, col: np.ndarray) -> np.ndarray:
    """Apply the col-th move of a type to each row of ``masks`` (copy given)."""
    out = masks.copy()
    if mtype == TYPE_HOP:
        frm, to, spin = tables.hop_frm[col], tables.hop_to[col], tables.hop_spin[col]
        mc = np.array([_mask_col(copy, s) for s in spin])
        flip = (_ONE << frm) | (_ONE << to)
        out[np.arange(masks.shape[0]), mc] ^= flip
    elif mtype == TYPE_EXCHANGE:
        i, j = tables.bond_i[col], tables.bond_j[col]
        flip = (_ONE << i) | (_ONE << j)
        out[:, _mask_col(copy, 0)] ^= flip
        out[:, _mask_col(copy, 1)] ^= flip
    else:
        frm, to = tables.dbl_frm[col], tables.dbl_to[col]
        flip = (_ONE << frm) | (_ONE << to)
        out[:, _mask_col(copy, 0)] ^= flip
        out[:, _mask_col(copy, 1)] ^= flip
    return out


def apply_diag_move(masks: np.ndarray, tables: MoveTables, col: np.ndarray) -> np.ndarray:
    out = masks.copy()
    frm, to, spin = tables.hop_frm[col], tables.hop_to[col], tables.hop_spin[col]
    flip = (_ONE << frm) | (_ONE << to)
    n = np.arange(masks.shape[0])
    out[n, np.array([_mask_col(fk.PHYS, s) for s in spin])] ^= flip
    out[n, np.array([_mask_col(fk.AUX, s) for s in spin])] ^= flip
    return out


def swap_masks(masks: np.ndarray) -> np.ndarray:
    return masks[:, [AU, AD, PU, PD]]


def _pick_columns(valid: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly pick one True column per row; returns (col, count)."""
    counts = valid.sum(axis=1)
    target = np.minimum((u * counts).astype(np.int64), np.maximum(counts - 1, 0)) + 1
    csum = np.cumsum(valid, axis=1)
    col = np.argmax(csum >= target[:, None], axis=1)
    return col, counts


# ---------------------------------------------------------------------------
# single-configuration proposal API (delegates to the array core)

def list_type_moves(spec: SectorSpec, cfg: DoubledConfig, copy: int, mtype: int):
    """All valid concrete moves of one (copy, type) as proposed configs."""
    tables = move_tables(spec)
    masks = cfg.to_array()[None, :]
    occ = _occ_bits(masks, spec.n_sites)
    valid = type_validity(occ, tables, copy, mtype)[0]
    out = []
    for col in np.nonzero(valid)[0]:
        newm = apply_type_move(masks, tables, copy, mtype, np.array([col]))[0]
        out.append(DoubledConfig.from_array(newm))
    return out


def list_diag_moves(spec: SectorSpec, cfg: DoubledConfig):
    tables = move_tables(spec)
    masks = cfg.to_array()[None, :]
    occ = _occ_bits(masks, spec.n_sites)
    valid = diag_validity(occ, tables)[0]
    out = []
    for col in np.nonzero(valid)[0]:
        newm = apply_diag_move(masks, tables, np.array([col]))[0]
        out.append(DoubledConfig.from_array(newm))
    return out


def _count_type_moves(spec: SectorSpec, cfg: DoubledConfig, copy: int, mtype: int) -> int:
    tables = move_tables(spec)
    occ = _occ_bits(cfg.to_array()[None, :], spec.n_sites)
    return int(type_validity(occ, tables, copy, mtype)[0].sum())


def propose_site_exchange(spec: SectorSpec, cfg: DoubledConfig, rng) -> tuple[DoubledConfig, float]:
    """One site-exchange proposal; returns (cfg', proposal ratio M_fwd/M_rev).

    An inapplicable drawn move returns the unchanged configuration with
    ratio 1 (callers count it as a rejected proposal).
    """
    copy = fk.PHYS if rng.random() < 0.5 else fk.AUX
    n_types = 3 if spec.spinful else 1
    mtype = int(rng.random() * n_types)
    moves = list_type_moves(spec, cfg, copy, mtype)
    if not moves:
        return cfg, 1.0
    new = moves[int(rng.random() * len(moves))]
    m_rev = _count_type_moves(spec, new, copy, mtype)
    return new, len(moves) / m_rev


def propose_diag_exchange(spec: SectorSpec, cfg: DoubledConfig, rng) -> tuple[DoubledConfig, float]:
    moves = list_diag_moves(spec, cfg)
    if not moves:
        return cfg, 1.0
    new = moves[int(rng.random() * len(moves))]
    m_rev = len(list_diag_moves(spec, new))
    return new, len(moves) / m_rev


def propose_swap(spec: SectorSpec, cfg: DoubledConfig) -> tuple[DoubledConfig, float]:
    return fk.swap_copies(cfg), 1.0


# ---------------------------------------------------------------------------
# chain pool

class ChainPool:
    """Independent Markov chains with per-chain counter-based RNG streams."""

    def __init__(
        self,
        spec: SectorSpec,
        n_chains: int,
        seed: int,
        *,
        mix: KernelMix | None = None,
        umbrella: UmbrellaSpec | None = None,
        stream_offset: int = 0,
    ):
        self.spec = spec
        self.n_chains = n_chains
        self.mix = mix or KernelMix()
        self.umbrella = umbrella or UmbrellaSpec()
        self.tables = move_tables(spec)
        self.rngs = [
            np.random.Generator(np.random.Philox(key=[seed, stream_offset + c]))
            for c in range(n_chains)
        ]
        self.masks = self._random_masks()
        self.log_amps = np.full(n_chains, np.nan, dtype=np.complex128)
        self.reset_counters()

    def reset_counters(self):
        self.proposed = {RULE_SITE: 0, RULE_DIAG: 0, RULE_SWAP: 0}
        self.accepted = {RULE_SITE: 0, RULE_DIAG: 0, RULE_SWAP: 0}

    def _random_masks(self) -> np.ndarray:
        """Start chains on diagonal configurations x = y~, which carry
        nonzero weight for every positive-definite pair matrix."""
        spec = self.spec
        masks = np.zeros((self.n_chains, 4), dtype=np.uint64)
        for c, rng in enumerate(self.rngs):
            up = sum(1 << int(s) for s in rng.choice(spec.n_sites, spec.n_up, replace=False))
            dn = 0
            if spec.spinful and spec.n_down:
                dn = sum(1 << int(s) for s in rng.choice(spec.n_sites, spec.n_down, replace=False))
            masks[c] = (up, dn, up, dn)
        return masks

    def set_masks(self, masks: np.ndarray):
        self.masks = np.asarray(masks, dtype=np.uint64).reshape(self.n_chains, 4).copy()
        self.log_amps[:] = np.nan

    def refresh(self, evaluator):
        """Recompute cached log-amplitudes (call after parameter updates).

        A parameter update can park a chain on an exact zero of the new
        wavefunction; such walkers are reseeded on their diagonal
        configuration x = y~, which carries nonzero weight for every
        positive-definite pair matrix, and re-equilibrated by later sweeps.
        """
        self.log_amps = evaluator.log_amp(self.masks)
        dead = ~np.isfinite(self.log_amps.real)
        if dead.any():
            idx = np.nonzero(dead)[0]
            masks = self.masks[idx].copy()
            masks[:, AU] = masks[:, PU]
            masks[:, AD] = masks[:, PD]
            self.masks[idx] = masks
            self.log_amps[idx] = evaluator.log_amp(masks)
            if not np.all(np.isfinite(self.log_amps[idx].real)):
                raise RuntimeError(
                    "chains stranded at zeros of the wavefunction even on diagonal configurations"
                )

    def _sweep(self, evaluator, draws: np.ndarray):
        """One sweep of n_sites composite-kernel steps on every chain."""
        spec = self.spec
        mix = self.mix
        alpha_u = self.umbrella.alpha_u
        tables = self.tables
        n = self.n_chains

        for step in range(draws.shape[1]):
            u_rule, u_copy, u_type, u_move, u_acc = draws[:, step].T
            rule = np.where(
                u_rule < mix.p_site_exchange,
                RULE_SITE,
                np.where(u_rule < mix.p_site_exchange + mix.p_diag_exchange, RULE_DIAG, RULE_SWAP),
            )
            occ = _occ_bits(self.masks, spec.n_sites)
            proposed = self.masks.copy()
            log_ratio = np.zeros(n)
            has_move = np.zeros(n, dtype=bool)

            for copy in (fk.PHYS, fk.AUX):
                for mtype in range(tables.n_types):
                    sel = (
                        (rule == RULE_SITE)
                        & ((u_copy < 0.5) == (copy == fk.PHYS))
                        & ((u_type * tables.n_types).astype(np.int64) == mtype)
                    )
                    if not sel.any():
                        continue
                    idx = np.nonzero(sel)[0]
                    valid = type_validity(occ[idx], tables, copy, mtype)
                    col, counts = _pick_columns(valid, u_move[idx])
                    movable = counts > 0
                    if not movable.any():
                        continue
                    src = idx[movable]
                    newm = apply_type_move(self.masks[src], tables, copy, mtype, col[movable])
                    occ_new = _occ_bits(newm, spec.n_sites)
                    m_rev = type_validity(occ_new, tables, copy, mtype).sum(axis=1)
                    proposed[src] = newm
                    log_ratio[src] = np.log(counts[movable]) - np.log(m_rev)
                    has_move[src] = True

            sel = rule == RULE_DIAG
            if sel.any():
                idx = np.nonzero(sel)[0]
                valid = diag_validity(occ[idx], tables)
                col, counts = _pick_columns(valid, u_move[idx])
                movable = counts > 0
                if movable.any():
                    src = idx[movable]
                    newm = apply_diag_move(self.masks[src], tables, col[movable])
                    m_rev = diag_validity(_occ_bits(newm, spec.n_sites), tables).sum(axis=1)
                    proposed[src] = newm
                    log_ratio[src] = np.log(counts[movable]) - np.log(m_rev)
                    has_move[src] = True

            sel = rule == RULE_SWAP
            if sel.any():
                idx = np.nonzero(sel)[0]
                proposed[idx] = swap_masks(self.masks[idx])
                has_move[idx] = True

            new_amps = self.log_amps.copy()
            if has_move.any():
                hm = np.nonzero(has_move)[0]
                new_amps[hm] = evaluator.log_amp(proposed[hm])
            with np.errstate(invalid="ignore"):
                log_acc = alpha_u * (new_amps.real - self.log_amps.real) + log_ratio
            accept = has_move & (np.log(np.maximum(u_acc, 1e-300)) < log_acc)
            # proposals into exact zeros of Psi are rejected
            accept &= np.isfinite(new_amps.real)

            self.masks[accept] = proposed[accept]
            self.log_amps[accept] = new_amps[accept]
            for r in (RULE_SITE, RULE_DIAG, RULE_SWAP):
                rsel = rule == r
                self.proposed[r] += int(rsel.sum())
                self.accepted[r] += int((rsel & accept).sum())
            self._accepted_per_chain += accept.astype(np.int64)

    def sweep_draws(self, n_steps: int) -> np.ndarray:
        """Pre-draw per-chain uniforms for one sweep: (n_chains, n_steps, 5)."""
        return np.stack([rng.random((n_steps, 5)) for rng in self.rngs])

    def run_sweeps(self, evaluator, n_sweeps: int):
        if np.isnan(self.log_amps.real).any():
            self.refresh(evaluator)
        self._accepted_per_chain = np.zeros(self.n_chains, dtype=np.int64)
        for _ in range(n_sweeps):
            self._sweep(evaluator, self.sweep_draws(self.spec.n_sites))

    def run_pass(self, evaluator, n_sweeps: int) -> SampleBatch:
        """Advance all chains and emit one sample per chain."""
        self.reset_counters()
        self.run_sweeps(evaluator, n_sweeps)
        stuck = [int(c) for c in np.nonzero(self._accepted_per_chain == 0)[0]]
        alpha_u = self.umbrella.alpha_u
        # spot-check one cached amplitude against a fresh evaluation
        probe = int(self.rngs[0].integers(self.n_chains))
        fresh = evaluator.log_amp(self.masks[probe : probe + 1])[0]
        if abs(fresh - self.log_amps[probe]) > 1e-8 * max(1.0, abs(fresh)):
            raise RuntimeError("cached chain amplitude diverged from fresh evaluation")
        acc = {
            "site_exchange": (self.proposed[RULE_SITE], self.accepted[RULE_SITE]),
            "diag_exchange": (self.proposed[RULE_DIAG], self.accepted[RULE_DIAG]),
            "swap": (self.proposed[RULE_SWAP], self.accepted[RULE_SWAP]),
        }
        finite = np.isfinite(self.log_amps.real)
        return SampleBatch(
            cfgs=self.masks.copy(),
            log_amps=self.log_amps.copy(),
            log_weights=np.where(finite, (2.0 - alpha_u) * self.log_amps.real, -np.inf),
            chain_ids=np.arange(self.n_chains),
            alpha_u=alpha_u,
            acceptance=acc,
            stuck_chains=stuck,
        )


def run_pass(pool: ChainPool, evaluator, n_sweeps: int, umbrella: UmbrellaSpec | None = None) -> SampleBatch:
    """Functional wrapper around :meth:`ChainPool.run_pass`."""
    if umbrella is not None:
        pool.umbrella = umbrella
    return pool.run_pass(evaluator, n_sweeps)


# ---------------------------------------------------------------------------
# exact kernel matrix on enumerable sectors (oracle for detailed balance)

def transition_matrix(spec: SectorSpec, log_amp_fn, mix: KernelMix | None = None, alpha_u: float = 2.0):
    """Explicit transition matrix K[x, x'] of the composite kernel.

    ``log_amp_fn`` maps an (n, 4) uint64 array to complex log-amplitudes.
    Rows sum to one; diag(q) K is symmetric for the tempered target
    q ∝ |Psi|^alpha_u.  Intended for enumerable sectors only.
    """
    mix = mix or KernelMix()
    cfgs = list(fk.enumerate_sector(spec))
    arr = fk.configs_to_array(cfgs)
    index = {c.masks(): k for k, c in enumerate(cfgs)}
    logv = log_amp_fn(arr).real
    dim = len(cfgs)
    K = np.zeros((dim, dim))
    n_types = 3 if spec.spinful else 1

    def acc_prob(k, kp, log_mratio):
        if not np.isfinite(logv[kp]):
            return 0.0
        if not np.isfinite(logv[k]):
            return 1.0  # never visited in practice; kept finite for row sums
        return min(1.0, np.exp(alpha_u * (logv[kp] - logv[k]) + log_mratio))

    for k, cfg in enumerate(cfgs):
        # site exchange
        for copy in (fk.PHYS, fk.AUX):
            for mtype in range(n_types):
                w = mix.p_site_exchange * 0.5 / n_types
                moves = list_type_moves(spec, cfg, copy, mtype)
                if not moves:
                    K[k, k] += w
                    continue
                for new in moves:
                    kp = index[new.masks()]
                    m_rev = _count_type_moves(spec, new, copy, mtype)
                    a = acc_prob(k, kp, np.log(len(moves)) - np.log(m_rev))
                    K[k, kp] += w / len(moves) * a
                    K[k, k] += w / len(moves) * (1 - a)
        # diagonal exchange
        moves = list_diag_moves(spec, cfg)
        if not moves:
            K[k, k] += mix.p_diag_exchange
        else:
            for new in moves:
                kp = index[new.masks()]
                m_rev = len(list_diag_moves(spec, new))
                a = acc_prob(k, kp, np.log(len(moves)) - np.log(m_rev))
                K[k, kp] += mix.p_diag_exchange / len(moves) * a
                K[k, k] += mix.p_diag_exchange / len(moves) * (1 - a)
        # swap
        new = fk.swap_copies(cfg)
        kp = index[new.masks()]
        a = acc_prob(k, kp, 0.0)
        K[k, kp] += mix.p_swap * a
        K[k, k] += mix.p_swap * (1 - a)

    return K, cfgs
