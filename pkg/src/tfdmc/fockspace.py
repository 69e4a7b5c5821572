"""Doubled Fock configurations with fixed particle numbers and fermion signs.

A doubled configuration holds four occupation bitmasks over lattice sites:
physical up, physical down, auxiliary up, auxiliary down.  The global mode
ordering is

    [phys up sites 0..n-1][phys down][aux up][aux down]

and basis states are built by applying creation operators in ascending global
mode order to the vacuum.  Every determinant amplitude and every local-energy
sign in the package relies on this single convention.  Because the four
blocks are contiguous, a hop inside one (copy, spin) block only ever crosses
modes of that same block, so its fermion sign can be computed on the block's
own mask.

Bit ``k`` of a mask is the occupation of site ``k`` (row-major site index).
Masks are limited to 64 sites per species.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from tfdmc.lattice import LatticeGeom

# Column order for (n, 4) uint64 batch arrays of configurations.
PU, PD, AU, AD = 0, 1, 2, 3

UP, DOWN = 0, 1
PHYS, AUX = 0, 1


@dataclass(frozen=True)
class SectorSpec:
    """Fixed-particle-number sector of the doubled space."""

    geom: LatticeGeom
    spinful: bool
    n_up: int
    n_down: int = 0

    def __post_init__(self):
        n = self.geom.n_sites
        if n > 64:
            raise ValueError("at most 64 sites per species mask")
        if not (0 <= self.n_up <= n and 0 <= self.n_down <= n):
            raise ValueError("particle numbers must lie in [0, n_sites]")
        if not self.spinful and self.n_down != 0:
            raise ValueError("spinless sectors carry no down fermions")

    @property
    def n_sites(self) -> int:
        return self.geom.n_sites

    @property
    def n_spin(self) -> int:
        return 2 if self.spinful else 1

    @property
    def n_modes_per_copy(self) -> int:
        return self.n_spin * self.n_sites

    @property
    def doping(self) -> float:
        return 1.0 - (self.n_up + self.n_down) / self.n_sites

    def single_copy_dim(self) -> int:
        d = comb(self.n_sites, self.n_up)
        if self.spinful:
            d *= comb(self.n_sites, self.n_down)
        return d

    def doubled_dim(self) -> int:
        return self.single_copy_dim() ** 2


@dataclass(frozen=True)
class DoubledConfig:
    """Occupation state of both copies; immutable value type."""

    phys_up: int
    phys_down: int
    aux_up: int
    aux_down: int

    def masks(self) -> tuple[int, int, int, int]:
        return (self.phys_up, self.phys_down, self.aux_up, self.aux_down)

    def to_array(self) -> np.ndarray:
        return np.array(self.masks(), dtype=np.uint64)

    @staticmethod
    def from_array(row: np.ndarray) -> "DoubledConfig":
        return DoubledConfig(*(int(v) for v in row))

    def mask(self, copy: int, spin: int) -> int:
        return self.masks()[2 * copy + spin]

    def replace_mask(self, copy: int, spin: int, new: int) -> "DoubledConfig":
        m = list(self.masks())
        m[2 * copy + spin] = new
        return DoubledConfig(*m)


def swap_copies(cfg: DoubledConfig) -> DoubledConfig:
    """Exchange the physical and auxiliary copies; an involution."""
    return DoubledConfig(cfg.aux_up, cfg.aux_down, cfg.phys_up, cfg.phys_down)


# ---------------------------------------------------------------------------
# mode indexing

def mode_index(spec: SectorSpec, site: int, spin: int, copy: int) -> int:
    """Global mode index of (site, spin, copy) under the block ordering."""
    if not (0 <= site < spec.n_sites):
        raise ValueError(f"site {site} outside lattice")
    if spin not in (UP, DOWN) or (spin == DOWN and not spec.spinful):
        raise ValueError(f"invalid spin {spin}")
    if copy not in (PHYS, AUX):
        raise ValueError(f"invalid copy {copy}")
    return copy * spec.n_modes_per_copy + spin * spec.n_sites + site


def mode_decompose(spec: SectorSpec, mode: int) -> tuple[int, int, int]:
    """Inverse of :func:`mode_index`; returns (site, spin, copy)."""
    if not (0 <= mode < 2 * spec.n_modes_per_copy):
        raise ValueError(f"mode {mode} out of range")
    copy, rest = divmod(mode, spec.n_modes_per_copy)
    spin, site = divmod(rest, spec.n_sites)
    return site, spin, copy


# ---------------------------------------------------------------------------
# fermionic hops

def hop_mask(mask: int, frm: int, to: int) -> tuple[int, int] | None:
    """Move a fermion ``frm -> to`` inside one species mask.

    Returns (new_mask, sign) with sign = (-1)^(occupied modes strictly
    between), or None when the move is Pauli-blocked.  ``frm == to`` returns
    the unchanged mask with sign +1 when occupied.
    """
    if not (mask >> frm) & 1 or (frm != to and (mask >> to) & 1):
        return None
    if frm == to:
        return mask, 1
    lo, hi = (frm, to) if frm < to else (to, frm)
    between = mask & (((1 << hi) - 1) ^ ((1 << (lo + 1)) - 1))
    sign = 1 - 2 * (bin(between).count("1") & 1)
    return mask ^ (1 << frm) ^ (1 << to), sign


def apply_hop(
    spec: SectorSpec, cfg: DoubledConfig, from_mode: int, to_mode: int
) -> tuple[DoubledConfig, int] | None:
    """Matrix element bookkeeping for f^dag_to f_from on a configuration.

    Both modes must belong to the same copy and spin species.  Returns
    (new_config, sign) or None when the amplitude vanishes.
    """
    fs, fspin, fcopy = mode_decompose(spec, from_mode)
    ts, tspin, tcopy = mode_decompose(spec, to_mode)
    if (fspin, fcopy) != (tspin, tcopy):
        raise ValueError("hop must stay within one copy and spin species")
    res = hop_mask(cfg.mask(fcopy, fspin), fs, ts)
    if res is None:
        return None
    new_mask, sign = res
    return cfg.replace_mask(fcopy, fspin, new_mask), sign


# vectorized versions over (n,) uint64 mask arrays -------------------------

_ONE = np.uint64(1)


def hop_valid(masks: np.ndarray, frm: np.ndarray, to: np.ndarray) -> np.ndarray:
    """Boolean validity of site hops frm -> to on an array of masks."""
    occ_f = (masks >> frm.astype(np.uint64)) & _ONE
    occ_t = (masks >> to.astype(np.uint64)) & _ONE
    return (occ_f == 1) & (occ_t == 0)


def hop_apply(masks: np.ndarray, frm: np.ndarray, to: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply valid site hops; caller guarantees validity.

    Returns (new_masks, signs) with signs in {-1, +1} as int8.
    """
    f = frm.astype(np.uint64)
    t = to.astype(np.uint64)
    lo = np.minimum(f, t)
    hi = np.maximum(f, t)
    between = masks & (((_ONE << hi) - _ONE) ^ ((_ONE << (lo + _ONE)) - _ONE))
    signs = np.where(np.bitwise_count(between) & _ONE, -1, 1).astype(np.int8)
    return masks ^ (_ONE << f) ^ (_ONE << t), signs


def occupations(masks: np.ndarray, n_sites: int) -> np.ndarray:
    """Unpack uint64 masks of shape (...,) into 0/1 arrays (..., n_sites)."""
    bits = np.arange(n_sites, dtype=np.uint64)
    return ((masks[..., None] >> bits) & _ONE).astype(np.int8)


def occupied_sites(mask: int, n_sites: int) -> list[int]:
    return [s for s in range(n_sites) if (mask >> s) & 1]


def occupied_rows(masks: np.ndarray, n_sites: int, n_occ: int) -> np.ndarray:
    """Ascending occupied-site lists for a mask array, shape (n, n_occ)."""
    occ = occupations(masks, n_sites)
    rows = np.nonzero(occ)[1].reshape(masks.shape[0], n_occ)
    return rows.astype(np.int32)


# ---------------------------------------------------------------------------
# sector enumeration

ENUMERATION_CAP = 10**7


def _masks_with_popcount(n_sites: int, n_occ: int):
    for occ in itertools.combinations(range(n_sites), n_occ):
        m = 0
        for s in occ:
            m |= 1 << s
        yield m


def enumerate_single_masks(spec: SectorSpec):
    """All (up_mask, down_mask) pairs of one copy, in a fixed order."""
    ups = list(_masks_with_popcount(spec.n_sites, spec.n_up))
    downs = (
        list(_masks_with_popcount(spec.n_sites, spec.n_down)) if spec.spinful else [0]
    )
    for up in ups:
        for dn in downs:
            yield up, dn


def enumerate_sector(spec: SectorSpec, copy_product: bool = True, cap: int = ENUMERATION_CAP):
    """Iterate the sector exactly once per configuration.

    With ``copy_product`` the doubled sector is enumerated (DoubledConfig
    values, physical copy fastest-varying in the auxiliary loop); otherwise
    single-copy (up_mask, down_mask) tuples are yielded.  Refuses sectors
    above ``cap``, reporting the exact dimension.
    """
    dim = spec.doubled_dim() if copy_product else spec.single_copy_dim()
    if dim > cap:
        raise ValueError(f"sector dimension {dim} exceeds enumeration cap {cap}")
    if not copy_product:
        yield from enumerate_single_masks(spec)
        return
    singles = list(enumerate_single_masks(spec))
    for pu, pd in singles:
        for au, ad in singles:
            yield DoubledConfig(pu, pd, au, ad)


def sector_array(spec: SectorSpec, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Doubled sector as an (dim, 4) uint64 array (same order as the iterator)."""
    return np.array(
        [c.to_array() for c in enumerate_sector(spec, cap=cap)], dtype=np.uint64
    ).reshape(-1, 4)


def configs_to_array(cfgs) -> np.ndarray:
    return np.array([c.to_array() for c in cfgs], dtype=np.uint64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# textual serialization, used by logs and test fixtures

def _bits(mask: int, n: int) -> str:
    return "".join("1" if (mask >> s) & 1 else "0" for s in range(n))


def _unbits(s: str) -> int:
    m = 0
    for k, ch in enumerate(s):
        if ch == "1":
            m |= 1 << k
    return m


def serialize_config(cfg: DoubledConfig, n_sites: int) -> str:
    """Render as ``up:...|down:...‖up:...|down:...`` (physical ‖ auxiliary)."""
    return (
        f"up:{_bits(cfg.phys_up, n_sites)}|down:{_bits(cfg.phys_down, n_sites)}"
        f"‖up:{_bits(cfg.aux_up, n_sites)}|down:{_bits(cfg.aux_down, n_sites)}"
    )


def parse_config(text: str) -> DoubledConfig:
    phys, aux = text.split("‖")

    def split(part):
        up, down = part.split("|")
        return _unbits(up.removeprefix("up:")), _unbits(down.removeprefix("down:"))

    pu, pd = split(phys)
    au, ad = split(aux)
    return DoubledConfig(pu, pd, au, ad)
