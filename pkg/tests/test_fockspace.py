import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfdmc import fockspace as fk
from tfdmc.exactref import fock_creation
from tfdmc.fockspace import (
    DoubledConfig,
    SectorSpec,
    apply_hop,
    enumerate_sector,
    hop_mask,
    mode_decompose,
    mode_index,
    parse_config,
    serialize_config,
    swap_copies,
)
from tfdmc.lattice import build_lattice


@pytest.fixture(scope="module")
def spinful_4x4():
    return SectorSpec(build_lattice(4, 4), spinful=True, n_up=2, n_down=2)


def test_mode_index_examples(spinful_4x4):
    assert mode_index(spinful_4x4, 0, fk.UP, fk.PHYS) == 0
    assert mode_index(spinful_4x4, 0, fk.UP, fk.AUX) == 32


def test_mode_roundtrip_2x3():
    spec = SectorSpec(build_lattice(2, 3), spinful=True, n_up=1, n_down=1)
    for mode in range(2 * spec.n_modes_per_copy):
        site, spin, copy = mode_decompose(spec, mode)
        assert mode_index(spec, site, spin, copy) == mode


def test_hop_mask_examples():
    # only mode 0 occupied: no modes in between
    assert hop_mask(0b0001, 0, 1) == (0b0010, 1)
    # modes {0,1,2}: two occupied between 0 and 3
    assert hop_mask(0b0111, 0, 3) == (0b1110, 1)
    # Pauli blocking
    assert hop_mask(0b0011, 0, 1) is None
    # source empty
    assert hop_mask(0b0010, 0, 2) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**8 - 1), st.integers(0, 7), st.integers(0, 7))
def test_hop_and_reverse(mask, a, b):
    res = hop_mask(mask, a, b)
    if res is None:
        return
    new_mask, sign = res
    back = hop_mask(new_mask, b, a)
    assert back is not None
    assert back[0] == mask
    assert back[1] * sign == 1


def test_signs_against_explicit_anticommutation():
    """Signs must match matrix elements of f^dag_b f_a built from explicit
    creation operators on a 6-mode Fock space."""
    n_modes = 6
    cre = [fock_creation(n_modes, k) for k in range(n_modes)]
    ann = [c.T for c in cre]
    for a, b in itertools.permutations(range(n_modes), 2):
        op = cre[b] @ ann[a]
        for state in range(1 << n_modes):
            res = hop_mask(state, a, b)
            col = op[:, state]
            if res is None:
                assert not col.any()
            else:
                new_state, sign = res
                assert col[new_state] == sign
                assert np.count_nonzero(col) == 1


def test_apply_hop_validates_species():
    spec = SectorSpec(build_lattice(2, 2), spinful=True, n_up=1, n_down=1)
    cfg = DoubledConfig(0b0001, 0b0010, 0b0001, 0b0010)
    with pytest.raises(ValueError):
        apply_hop(spec, cfg, mode_index(spec, 0, fk.UP, fk.PHYS), mode_index(spec, 1, fk.DOWN, fk.PHYS))
    moved = apply_hop(spec, cfg, mode_index(spec, 0, fk.UP, fk.PHYS), mode_index(spec, 1, fk.UP, fk.PHYS))
    assert moved == (DoubledConfig(0b0010, 0b0010, 0b0001, 0b0010), 1)


def test_enumerate_counts():
    geom = build_lattice(4, 1)
    spec = SectorSpec(geom, spinful=False, n_up=2)
    assert len(list(enumerate_sector(spec, copy_product=False))) == 6
    assert len(list(enumerate_sector(spec))) == 36
    spec23 = SectorSpec(build_lattice(2, 3), spinful=True, n_up=2, n_down=2)
    assert len(list(enumerate_sector(spec23, copy_product=False))) == 225


def test_enumerate_unique_and_popcounts():
    spec = SectorSpec(build_lattice(2, 2), spinful=True, n_up=1, n_down=2)
    seen = set()
    for cfg in enumerate_sector(spec):
        assert cfg.masks() not in seen
        seen.add(cfg.masks())
        assert bin(cfg.phys_up).count("1") == 1
        assert bin(cfg.aux_up).count("1") == 1
        assert bin(cfg.phys_down).count("1") == 2
        assert bin(cfg.aux_down).count("1") == 2
    assert len(seen) == spec.doubled_dim()


def test_enumerate_cap():
    spec = SectorSpec(build_lattice(4, 4), spinful=True, n_up=8, n_down=8)
    with pytest.raises(ValueError, match=r"\d+ exceeds"):
        list(enumerate_sector(spec, cap=1000))


def test_swap_involution():
    cfg = DoubledConfig(0b0110, 0b0001, 0b1010, 0b0100)
    assert swap_copies(swap_copies(cfg)) == cfg
    assert swap_copies(cfg).phys_up == cfg.aux_up


def test_serialization_roundtrip():
    cfg = DoubledConfig(0b011000, 0b000110, 0b100001, 0b010010)
    text = serialize_config(cfg, 6)
    assert text.startswith("up:000110|down:011000")  # site 0 leftmost
    assert parse_config(text) == cfg


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(0, 2**6 - 1)] * 4))
def test_serialization_roundtrip_property(masks):
    cfg = DoubledConfig(*masks)
    assert parse_config(serialize_config(cfg, 6)) == cfg


def test_vectorized_hops_match_scalar():
    rng = np.random.Generator(np.random.Philox(key=[3, 0]))
    masks = rng.integers(0, 2**8, size=50, dtype=np.uint64)
    for frm, to in [(0, 3), (5, 2), (7, 0)]:
        valid = fk.hop_valid(masks, np.uint64(frm), np.uint64(to))
        new, signs = fk.hop_apply(masks[valid], np.uint64(frm), np.uint64(to))
        k = 0
        for m in masks:
            res = hop_mask(int(m), frm, to)
            if res is None:
                continue
            assert res[0] == int(new[k]) and res[1] == signs[k]
            k += 1
