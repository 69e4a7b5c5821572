"""Bipartite-attention backflow network for pair-orbital amplitudes.

The log-amplitude of a doubled configuration (x, y~) is

    log Psi = sum_spin logdet[ phi(x, y~) restricted to occupied modes ]
              - J_intra(x) - J_intra(y~) - J_inter(x, y~)

where the pair-orbital entries are the supplied mean-field pair matrix plus
a learned correction,

    phi(x, y~)[i, j] = phi_mf[i, j] + s * head(m_ij) * exp(-alpha r_ij^2).

Node features of both copies pass through shared factored-attention encoder
blocks (constant, translation-symmetric attention masks), then through
bipartite cross-attention blocks coupling the copies; pairwise features feed
a combine layer and a cosh-product head with complex output.  The residual
scale s, the cross-attention output projection, the combine-network output
layer, the Jastrow weights, and the envelope exponent all start at zero, so
a freshly initialized model reproduces the mean-field amplitude exactly.

Parameters are a flat real vector; all functions here are pure and jit-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from jax.flatten_util import ravel_pytree

from tfdmc._jax import jax, jnp

LN_EPS = 1e-6


@dataclass(frozen=True)
class AnsatzConfig:
    """Architecture hyperparameters; ``tier`` selects the model family."""

    tier: str = "bivit"  # meanfield | jastrow | bivit
    d_h: int = 24
    n_heads: int = 6
    n_layers: int = 2
    ffn_factor: int = 2
    symmetrize_swap: bool = False
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.tier not in ("meanfield", "jastrow", "bivit"):
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.tier == "bivit" and self.d_h % self.n_heads != 0:
            raise ValueError("d_h must be divisible by n_heads")


# ---------------------------------------------------------------------------
# geometry constants baked into the network

@dataclass(frozen=True)
class GeometryTables:
    trans_idx: np.ndarray  # (n, n) index of mod displacement, for masks
    disp_idx: np.ndarray  # (n, n) index into distinct |minimal image| vectors
    dist_idx: np.ndarray  # (n, n) index into distinct distances
    r2: np.ndarray  # (n, n) squared minimal-image distance
    n_disp: int
    n_dist: int


def geometry_tables(geom) -> GeometryTables:
    n = geom.n_sites
    trans_idx = (geom.disp_mod[..., 1] * geom.Lx + geom.disp_mod[..., 0]).astype(np.int32)

    flat = geom.disp_min.reshape(-1, 2)
    uniq, disp_idx = np.unique(flat, axis=0, return_inverse=True)
    disp_idx = disp_idx.reshape(n, n).astype(np.int32)

    dists = geom.dist.reshape(-1)
    uniq_d, dist_idx = np.unique(np.round(dists, 9), return_inverse=True)
    dist_idx = dist_idx.reshape(n, n).astype(np.int32)

    return GeometryTables(
        trans_idx=trans_idx,
        disp_idx=disp_idx,
        dist_idx=dist_idx,
        r2=geom.dist**2,
        n_disp=uniq.shape[0],
        n_dist=uniq_d.shape[0],
    )


# ---------------------------------------------------------------------------
# parameter initialization

def _glorot(rng, shape, scale=1.0):
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[-2] if len(shape) > 1 else shape[0]
    std = scale * np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal(shape) * std


def _ln_params(dim):
    return {"g": np.ones(dim), "b": np.zeros(dim)}


def init_param_tree(spec, arch: AnsatzConfig, tables: GeometryTables, rng) -> dict:
    """Parameter pytree at the identity-initialization point."""
    n = spec.n_sites
    n_spin = spec.n_spin
    n_cls = 4 if spec.spinful else 2
    d = arch.d_h
    s = arch.init_scale

    tree: dict = {
        "jastrow": {
            "intra": np.zeros((3 if spec.spinful else 1, n, n)),
            "inter": np.zeros((n_cls, n, n)),
        }
    }
    if arch.tier == "jastrow":
        return tree

    H = arch.n_heads
    d_eff = d // H
    f = arch.ffn_factor * d

    def ffn():
        return {
            "w1": _glorot(rng, (f, d), s),
            "b1": np.zeros(f),
            "w2": _glorot(rng, (d, f), s),
            "b2": np.zeros(d),
        }

    tree["embed"] = {
        "occ": _glorot(rng, (n_cls, d), s),
        "pos": _glorot(rng, (n, d), s),
        "disp": _glorot(rng, (tables.n_disp, d), s),
        "dist": _glorot(rng, (tables.n_dist, d), s),
        "disp_head": _glorot(rng, (tables.n_disp, d), s),
        "ln_node": _ln_params(d),
        "ln_edge": _ln_params(d),
    }
    tree["vit"] = [
        {
            "alpha": _glorot(rng, (H, n), s),
            "w_v": _glorot(rng, (H, d_eff, d), s),
            "w_o": _glorot(rng, (d, d), s),
            "ln1": _ln_params(d),
            "ln2": _ln_params(d),
            "ffn": ffn(),
        }
        for _ in range(arch.n_layers)
    ]
    tree["bivit"] = [
        {
            "alpha": _glorot(rng, (H, n), s),
            "w_i": _glorot(rng, (H, d_eff, d), s),
            "w_c": _glorot(rng, (H, d_eff, d_eff), s),
            "w_o": np.zeros((d, d)),  # zero: backflow correction off at start
            "ln_in": _ln_params(d),
            "ln_mid": _ln_params(d),
            "ffn": ffn(),
        }
        for _ in range(arch.n_layers)
    ]
    tree["head"] = {
        "w_u": _glorot(rng, (d, d), s),
        "ln_u": _ln_params(d),
        "ln_l": _ln_params(4 * d),
        "comb_w1": _glorot(rng, (4 * d, 4 * d), s),
        "comb_b1": np.zeros(4 * d),
        "comb_w2": np.zeros((4 * d, 4 * d)),  # zero: combine output off at start
        "comb_b2": np.zeros(4 * d),
        "w_e": _glorot(rng, (d, d), s),
        "mlp": [
            {
                "w1": _glorot(rng, (d, 5 * d), s),
                "b1": np.zeros(d),
                "rbm_w": _glorot(rng, (2 * d, d), s),
                "rbm_b": np.zeros(2 * d),
                "lin_w": _glorot(rng, (2, d), s),
                "lin_b": np.array([1.0, 0.0]),
                "scale": np.zeros(()),  # zero: head correction off at start
            }
            for _ in range(n_spin)
        ],
        "envelope_alpha": np.zeros(()),
    }
    return tree


# ---------------------------------------------------------------------------
# network building blocks

def _ln(x, p):
    mu = jnp.mean(x, axis=-1, keepdims=True)
    var = jnp.var(x, axis=-1, keepdims=True)
    return p["g"] * (x - mu) / jnp.sqrt(var + LN_EPS) + p["b"]


def _ffn(x, p):
    return jax.nn.gelu(x @ p["w1"].T + p["b1"]) @ p["w2"].T + p["b2"]


def _attention_mask(alpha_vec, trans_idx):
    # alpha[i, j] = alpha_vec[displacement(i -> j)]: translation symmetric
    return alpha_vec[:, trans_idx]  # (H, n, n)


def _vit_block(x, p, trans_idx):
    h = _ln(x, p["ln1"])
    am = _attention_mask(p["alpha"], trans_idx)
    v = jnp.einsum("hej,nj->hne", p["w_v"], h)
    att = jnp.einsum("hnm,hme->hne", am, v)
    cat = jnp.transpose(att, (1, 0, 2)).reshape(x.shape[0], -1)
    x = x + cat @ p["w_o"].T
    return x + _ffn(_ln(x, p["ln2"]), p["ffn"])


def _bivit_nodes(a, other, p, trans_idx):
    """Cross-attention node update: ``a`` attends over the other copy."""
    t = _ln(other, p["ln_in"])
    u = jnp.einsum("hej,nj->hne", p["w_i"], t)
    att = jnp.einsum("hnm,hme->hne", _attention_mask(p["alpha"], trans_idx), u)
    mapped = jnp.einsum("hfe,hne->hnf", p["w_c"], att)
    cat = jnp.transpose(mapped, (1, 0, 2)).reshape(a.shape[0], -1)
    u1 = a + cat @ p["w_o"].T
    return a + _ffn(_ln(u1, p["ln_mid"]), p["ffn"])


def _log_cosh(z):
    # cosh is even, so flipping the sign of Re z keeps the value while making
    # the exponential below decay; this is also safe under differentiation.
    zs = jnp.where(jnp.real(z) >= 0, z, -z)
    return zs - jnp.log(2.0) + jnp.log1p(jnp.exp(-2.0 * zs))


def _head_correction(h, h_aux, e, mlp, p, tables_r2, disp_head_e, alpha_env):
    """Head output for one spin block as (linear factor, log magnitude).

    The orbital entry is pm + scale * linc * exp(w); keeping w in log form
    lets the determinant factor out per-row exponents instead of
    materializing exp(w), which can overflow once parameters grow.
    """
    n = h.shape[0]
    u = _ln(h, p["ln_u"]) @ p["w_u"].T
    ut = _ln(h_aux, p["ln_u"]) @ p["w_u"].T
    ui = u[:, None, :]
    uj = ut[None, :, :]
    l = jnp.concatenate(
        [ui + uj, ui * uj, jnp.abs(ui - uj), jnp.broadcast_to(disp_head_e, (n, n, u.shape[-1]))],
        axis=-1,
    )
    l = _ln(l, p["ln_l"])
    l = jax.nn.gelu(l @ p["comb_w1"].T + p["comb_b1"]) @ p["comb_w2"].T + p["comb_b2"]
    m = jnp.concatenate([l, e @ p["w_e"].T], axis=-1)

    hid = jax.nn.gelu(m @ mlp["w1"].T + mlp["b1"])
    z = hid @ mlp["rbm_w"].T + mlp["rbm_b"]
    dh = z.shape[-1] // 2
    zc = z[..., :dh] + 1j * z[..., dh:]
    lin = hid @ mlp["lin_w"].T + mlp["lin_b"]
    linc = lin[..., 0] + 1j * lin[..., 1]
    w = jnp.sum(_log_cosh(zc), axis=-1) - alpha_env * tables_r2
    return mlp["scale"] * linc, w


def _logdet_scaled(pm_sub, linc_sub, w_sub):
    """logdet of pm + linc * exp(w) with per-row exponent extraction.

    Rewrites row i as exp(c_i) [pm exp(-c_i) + linc exp(w - c_i)] with
    c_i = max(0, max_j [Re w_ij + log|linc_ij|]); the identity holds for any
    c, so gradients stay exact while the correction term never exceeds unit
    magnitude.  With the correction gated off (linc = 0) every c_i is 0 and
    the plain pair-determinant path is reproduced bit for bit.
    """
    logmag = jnp.log(jnp.maximum(jnp.abs(linc_sub), 1e-300))
    c = jnp.maximum(jnp.max(jnp.real(w_sub) + logmag, axis=1), 0.0)
    scaled = pm_sub * jnp.exp(-c)[:, None] + linc_sub * jnp.exp(w_sub - c[:, None])
    sign, logabs = jnp.linalg.slogdet(scaled)
    return jnp.sum(c) + logabs + 1j * jnp.angle(sign)


def _logdet_block(entries, rows, cols):
    sub = entries[rows[:, None], cols[None, :]]
    sign, logabs = jnp.linalg.slogdet(sub)
    return logabs + 1j * jnp.angle(sign)


def _jastrow_intra(w_intra, nsp):
    if w_intra.shape[0] == 1:
        return nsp[0] @ w_intra[0] @ nsp[0]
    return (
        nsp[0] @ w_intra[0] @ nsp[0]
        + nsp[0] @ w_intra[1] @ nsp[1]
        + nsp[1] @ w_intra[2] @ nsp[1]
    )


def _jastrow_inter(w_inter, cls_p, cls_a):
    n_cls = w_inter.shape[0]
    onehot_p = jax.nn.one_hot(cls_p, n_cls, dtype=w_inter.dtype)  # (n, k)
    onehot_a = jax.nn.one_hot(cls_a, n_cls, dtype=w_inter.dtype)
    return jnp.einsum("ik,kij,jk->", onehot_p, w_inter, onehot_a)


# ---------------------------------------------------------------------------
# full forward pass for a single configuration

def make_apply(spec, arch: AnsatzConfig, tables: GeometryTables, unravel):
    """Return apply(theta, phi_blocks, inputs) -> (re, im) of log Psi."""
    n_spin = spec.n_spin
    trans_idx = jnp.asarray(tables.trans_idx)
    disp_idx = jnp.asarray(tables.disp_idx)
    dist_idx = jnp.asarray(tables.dist_idx)
    r2 = jnp.asarray(tables.r2)
    neural = arch.tier == "bivit"

    def apply(theta, phi_blocks, occ_cls_p, occ_cls_a, nsp_p, nsp_a, rows, cols):
        p = unravel(theta)

        if neural:
            emb = p["embed"]
            v = _ln(emb["occ"][occ_cls_p] + emb["pos"], emb["ln_node"])
            vt = _ln(emb["occ"][occ_cls_a] + emb["pos"], emb["ln_node"])
            e = _ln(emb["disp"][disp_idx] + emb["dist"][dist_idx], emb["ln_edge"])

            h, ht, g = v, vt, e
            for lv, lb in zip(p["vit"], p["bivit"]):
                a = _vit_block(h, lv, trans_idx)
                at = _vit_block(ht, lv, trans_idx)
                h = _bivit_nodes(a, at, lb, trans_idx)
                ht = _bivit_nodes(at, a, lb, trans_idx)
                g = g + h[:, None, :] * ht[None, :, :]
            h = v + h
            ht = vt + ht
            disp_head_e = emb["disp_head"][disp_idx]

        log_det = 0.0 + 0.0j
        for s in range(n_spin):
            if rows[s].shape[0] == 0:
                continue
            if neural:
                linc, wlog = _head_correction(
                    h, ht, g, p["head"]["mlp"][s], p["head"],
                    r2, disp_head_e, p["head"]["envelope_alpha"],
                )
                rc = (rows[s][:, None], cols[s][None, :])
                log_det = log_det + _logdet_scaled(phi_blocks[s][rc], linc[rc], wlog[rc])
            else:
                log_det = log_det + _logdet_block(phi_blocks[s], rows[s], cols[s])

        jas = p["jastrow"]
        j = (
            _jastrow_intra(jas["intra"], nsp_p)
            + _jastrow_intra(jas["intra"], nsp_a)
            + _jastrow_inter(jas["inter"], occ_cls_p, occ_cls_a)
        )
        log_psi = log_det - j
        return jnp.real(log_psi), jnp.imag(log_psi)

    return apply


@dataclass
class NetworkDef:
    """Compiled network: flat-parameter apply plus vmapped evaluation/grads."""

    spec: object
    arch: AnsatzConfig
    tables: GeometryTables
    theta0: np.ndarray
    unravel: object
    apply_single: object
    eval_batch: object
    grad_batch: object
    n_params: int


def build_network(spec, arch: AnsatzConfig) -> NetworkDef:
    tables = geometry_tables(spec.geom)
    rng = np.random.Generator(np.random.Philox(key=[arch.seed, 0xA5]))
    tree = init_param_tree(spec, arch, tables, rng)
    theta0, unravel = ravel_pytree(jax.tree.map(jnp.asarray, tree))
    base_apply = make_apply(spec, arch, tables, unravel)

    if arch.symmetrize_swap:

        def apply_single(theta, phi_blocks, ocp, oca, nsp, nsa, rows, cols):
            r1, i1 = base_apply(theta, phi_blocks, ocp, oca, nsp, nsa, rows, cols)
            r2, i2 = base_apply(theta, phi_blocks, oca, ocp, nsa, nsp, cols, rows)
            m = jnp.maximum(r1, r2)
            safe_m = jnp.where(jnp.isfinite(m), m, 0.0)
            s = jnp.exp((r1 - safe_m) + 1j * i1) + jnp.exp((r2 - safe_m) + 1j * i2)
            ls = safe_m + jnp.log(s) - jnp.log(2.0)
            ls = jnp.where(jnp.isfinite(m), ls, -jnp.inf + 0.0j)
            return jnp.real(ls), jnp.imag(ls)

    else:
        apply_single = base_apply

    @jax.jit
    def eval_batch(theta, phi_blocks, *inputs):
        re, im = jax.vmap(partial(apply_single, theta, phi_blocks))(*inputs)
        return re + 1j * im

    @jax.jit
    def grad_batch(theta, phi_blocks, *inputs):
        def re_fn(th, *args):
            return apply_single(th, phi_blocks, *args)[0]

        def im_fn(th, *args):
            return apply_single(th, phi_blocks, *args)[1]

        def per_sample(*args):
            re, gre = jax.value_and_grad(re_fn)(theta, *args)
            im, gim = jax.value_and_grad(im_fn)(theta, *args)
            return re + 1j * im, gre + 1j * gim

        return jax.vmap(per_sample)(*inputs)

    return NetworkDef(
        spec=spec,
        arch=arch,
        tables=tables,
        theta0=np.asarray(theta0),
        unravel=unravel,
        apply_single=apply_single,
        eval_batch=eval_batch,
        grad_batch=grad_batch,
        n_params=int(theta0.size),
    )
