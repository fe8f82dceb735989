"""Affine coupling blocks, fixed permutations, and the two composite flows.

The point-level flow transforms 3-vectors conditioned on a 64-dim embedding
(10 segments x 3 blocks, shift-right permutation after every block); the
embedding-level flow transforms 64-vectors unconditioned (5 segments x 2
blocks, swap-halves permutation). Each block leaves the first ``split``
coordinates untouched and maps the rest through ``x * exp(m) + a`` where the
log-scale ``m`` and shift ``a`` come from two residual conditioner networks
fed with the untouched slice (plus the embedding, when conditioned).

All flow math is expressed once, as graph-builder functions over the
primitive set in :mod:`pcflow.tensor`; the numeric forward/inverse wrappers
evaluate cached graphs, and the training objective reuses the same builders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Graph, ShapeError, evaluate

__all__ = [
    "EMBED_DIM",
    "PERM_SHIFT_RIGHT",
    "PERM_SWAP_HALVES",
    "FlowLayout",
    "FlowModel",
    "CouplingBlock",
    "point_flow_layout",
    "embedding_flow_layout",
    "init_flow",
    "init_conditioner_params",
    "coupling_forward",
    "coupling_inverse",
    "flow_forward",
    "flow_inverse",
    "apply_permutation",
    "invert_permutation",
    "std_normal_logdensity",
]

EMBED_DIM = 64

PERM_SHIFT_RIGHT = "shift-right"
PERM_SWAP_HALVES = "swap-halves"

_LOG_2PI = float(np.log(2.0 * np.pi))


def std_normal_logdensity(v):
    """Log density of N(0, I) at ``v``; row-wise for a 2-D array."""
    arr = np.asarray(v, dtype=np.float64)
    dim = arr.shape[-1]
    quad = np.sum(arr * arr, axis=-1)
    out = -0.5 * dim * _LOG_2PI - 0.5 * quad
    return float(out) if arr.ndim == 1 else out


def apply_permutation(kind, v):
    """Apply a fixed dimension permutation along the last axis."""
    arr = np.asarray(v, dtype=np.float64)
    dim = arr.shape[-1]
    if kind == PERM_SHIFT_RIGHT:
        return np.concatenate([arr[..., -1:], arr[..., :-1]], axis=-1)
    if kind == PERM_SWAP_HALVES:
        if dim % 2 != 0:
            raise ContractError("swap-halves permutation needs even dimension")
        half = dim // 2
        return np.concatenate([arr[..., half:], arr[..., :half]], axis=-1)
    raise ContractError(f"unknown permutation kind '{kind}'")


def invert_permutation(kind, v):
    """Inverse of :func:`apply_permutation` for the same kind."""
    arr = np.asarray(v, dtype=np.float64)
    if kind == PERM_SHIFT_RIGHT:
        return np.concatenate([arr[..., 1:], arr[..., :1]], axis=-1)
    if kind == PERM_SWAP_HALVES:
        return apply_permutation(kind, arr)
    raise ContractError(f"unknown permutation kind '{kind}'")


@dataclass(frozen=True)
class FlowLayout:
    """Architecture of one composite flow."""

    segments: int
    blocks_per_segment: int
    dim: int                 # width of the transformed vectors
    split: int               # untouched slice width, 0 < split < dim
    cond_dim: int | None     # embedding width, or None when unconditioned
    hidden: int = 128
    scale_clamp: float = 5.0
    permutation: str = PERM_SHIFT_RIGHT

    def __post_init__(self):
        if not (0 < self.split < self.dim):
            raise ContractError("split index must satisfy 0 < split < dim")
        if self.permutation == PERM_SWAP_HALVES and self.dim % 2 != 0:
            raise ContractError("swap-halves permutation needs even dim")
        if self.permutation not in (PERM_SHIFT_RIGHT, PERM_SWAP_HALVES):
            raise ContractError(f"unknown permutation kind '{self.permutation}'")
        if self.hidden < 1 or self.segments < 1 or self.blocks_per_segment < 1:
            raise ContractError("layout extents must be positive")
        if self.scale_clamp <= 0:
            raise ContractError("scale clamp must be positive")

    @property
    def n_blocks(self):
        return self.segments * self.blocks_per_segment

    @property
    def conditioned(self):
        return self.cond_dim is not None

    @property
    def conditioner_in(self):
        return self.split + (self.cond_dim or 0)

    def to_dict(self):
        return {
            "segments": self.segments,
            "blocks_per_segment": self.blocks_per_segment,
            "dim": self.dim,
            "split": self.split,
            "cond_dim": self.cond_dim,
            "hidden": self.hidden,
            "scale_clamp": self.scale_clamp,
            "permutation": self.permutation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def point_flow_layout(hidden=128):
    """Point-level flow: 10 segments x 3 blocks on 3-vectors, conditioned."""
    return FlowLayout(10, 3, 3, 2, EMBED_DIM, hidden=hidden,
                      permutation=PERM_SHIFT_RIGHT)


def embedding_flow_layout(hidden=128):
    """Embedding-level flow: 5 segments x 2 blocks on 64-vectors."""
    return FlowLayout(5, 2, EMBED_DIM, EMBED_DIM // 2, None, hidden=hidden,
                      permutation=PERM_SWAP_HALVES)


# -- parameter construction --------------------------------------------------


def _stage_widths(in_width, hidden):
    # (stage input width, needs linear skip projection)
    return [(in_width, in_width != hidden), (hidden, False)]


def init_conditioner_params(rng, in_width, hidden, out_width, head_scale=0.0):
    """Parameters of one residual conditioner, keyed by relative name.

    Two residual stages (dense -> tanh -> dense, plus identity or linear
    skip), then a dense head. The head is zero-initialized by default so a
    fresh block is exactly the identity map; ``head_scale`` > 0 randomizes
    the head instead (used to exercise non-trivial transforms in tests).
    """
    params = {}
    for si, (win, projected) in enumerate(_stage_widths(in_width, hidden), start=1):
        params[f"s{si}.w1"] = rng.standard_normal((win, hidden)) / np.sqrt(win)
        params[f"s{si}.b1"] = np.zeros(hidden)
        params[f"s{si}.w2"] = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        params[f"s{si}.b2"] = np.zeros(hidden)
        if projected:
            params[f"s{si}.wp"] = rng.standard_normal((win, hidden)) / np.sqrt(win)
            params[f"s{si}.bp"] = np.zeros(hidden)
    if head_scale > 0.0:
        params["head.w"] = head_scale * rng.standard_normal((hidden, out_width)) / np.sqrt(hidden)
        params["head.b"] = head_scale * rng.standard_normal(out_width)
    else:
        params["head.w"] = np.zeros((hidden, out_width))
        params["head.b"] = np.zeros(out_width)
    return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}


def init_block_params(rng, layout, head_scale=0.0):
    """Parameters of one coupling block (nets M then A), relative names."""
    out = {}
    for net in ("M", "A"):
        net_params = init_conditioner_params(
            rng, layout.conditioner_in, layout.hidden, layout.dim - layout.split,
            head_scale=head_scale)
        for key, value in net_params.items():
            out[f"{net}.{key}"] = value
    return out


# -- graph builders ----------------------------------------------------------


def _append_conditioner(g, leaf, prefix, x, in_width, hidden):
    """Nodes for one conditioner net; returns the raw head output node."""
    h = x
    for si, (win, projected) in enumerate(_stage_widths(in_width, hidden), start=1):
        pre = g.add(g.matmul(h, leaf(f"{prefix}.s{si}.w1")), leaf(f"{prefix}.s{si}.b1"))
        core = g.add(g.matmul(g.tanh(pre), leaf(f"{prefix}.s{si}.w2")),
                     leaf(f"{prefix}.s{si}.b2"))
        if projected:
            skip = g.add(g.matmul(h, leaf(f"{prefix}.wp_{si}")), leaf(f"{prefix}.bp_{si}"))
        else:
            skip = h
        h = g.add(core, skip)
    return g.add(g.matmul(h, leaf(f"{prefix}.head.w")), leaf(f"{prefix}.head.b"))


def _append_clamp(g, raw, scale_clamp):
    # Squash the raw log-scale into (-s, s); the log-det uses the squashed value.
    return g.scalar_mul(g.tanh(g.scalar_mul(raw, 1.0 / scale_clamp)), scale_clamp)


def _append_perm(g, kind, v, dim):
    if kind == PERM_SHIFT_RIGHT:
        return g.concat([g.slice_last(v, dim - 1, dim), g.slice_last(v, 0, dim - 1)])
    half = dim // 2
    return g.concat([g.slice_last(v, half, dim), g.slice_last(v, 0, half)])


def _append_perm_inverse(g, kind, v, dim):
    if kind == PERM_SHIFT_RIGHT:
        return g.concat([g.slice_last(v, 1, dim), g.slice_last(v, 0, 1)])
    half = dim // 2
    return g.concat([g.slice_last(v, half, dim), g.slice_last(v, 0, half)])


def _append_block_forward(g, leaf, block_prefix, layout, x, e_pts):
    x1 = g.slice_last(x, 0, layout.split)
    x2 = g.slice_last(x, layout.split, layout.dim)
    inp = g.concat([x1, e_pts]) if layout.conditioned else x1
    m = _append_clamp(g, _append_conditioner(g, leaf, f"{block_prefix}.M", inp,
                                             layout.conditioner_in, layout.hidden),
                      layout.scale_clamp)
    a = _append_conditioner(g, leaf, f"{block_prefix}.A", inp,
                            layout.conditioner_in, layout.hidden)
    h2 = g.add(g.mul(x2, g.exp(m)), a)
    h = g.concat([x1, h2])
    ld = g.sum(m, axis=-1)
    return h, ld


def _append_block_inverse(g, leaf, block_prefix, layout, h, e_pts):
    h1 = g.slice_last(h, 0, layout.split)
    h2 = g.slice_last(h, layout.split, layout.dim)
    inp = g.concat([h1, e_pts]) if layout.conditioned else h1
    m = _append_clamp(g, _append_conditioner(g, leaf, f"{block_prefix}.M", inp,
                                             layout.conditioner_in, layout.hidden),
                      layout.scale_clamp)
    a = _append_conditioner(g, leaf, f"{block_prefix}.A", inp,
                            layout.conditioner_in, layout.hidden)
    x2 = g.mul(g.add(h2, g.neg(a)), g.exp(g.neg(m)))
    return g.concat([h1, x2])


def _make_leaf(g, params, prefix, kind):
    """Leaf declaration callback: names are resolved against ``params``."""
    declared = {}

    def leaf(rel_name):
        full = f"{prefix}.{rel_name}" if prefix else rel_name
        if full in declared:
            return declared[full]
        value = params[full]
        node = g.parameter(full, value) if kind == "parameter" else g.input(full)
        declared[full] = node
        return node

    return leaf


def append_flow_forward(g, layout, params, x, e_pts, prefix, leaf_kind="parameter"):
    """Append the whole forward flow; returns (z node, per-row logdet node).

    A permutation follows every block, including the last one; a fixed
    rotation of the output leaves the spherical prior invariant.
    """
    leaf = _make_leaf(g, params, prefix, leaf_kind)
    h = x
    ld_total = None
    for i in range(layout.n_blocks):
        h, ld = _append_block_forward(g, leaf, f"b{i:02d}", layout, h, e_pts)
        ld_total = ld if ld_total is None else g.add(ld_total, ld)
        h = _append_perm(g, layout.permutation, h, layout.dim)
    return h, ld_total


def append_flow_inverse(g, layout, params, z, e_pts, prefix, leaf_kind="parameter"):
    """Append the whole inverse flow; returns the reconstructed input node."""
    leaf = _make_leaf(g, params, prefix, leaf_kind)
    h = z
    for i in reversed(range(layout.n_blocks)):
        h = _append_perm_inverse(g, layout.permutation, h, layout.dim)
        h = _append_block_inverse(g, leaf, f"b{i:02d}", layout, h, e_pts)
    return h


# Relative names used inside _append_conditioner differ from the stored
# parameter names only for the skip projection; map them here.
def _rename_proj(params):
    out = {}
    for key, value in params.items():
        out[key.replace(".s1.wp", ".wp_1").replace(".s1.bp", ".bp_1")
              .replace(".s2.wp", ".wp_2").replace(".s2.bp", ".bp_2")] = value
    return out


# -- models ------------------------------------------------------------------


class CouplingBlock:
    """One coupling transform with its two conditioner networks."""

    def __init__(self, layout: FlowLayout, params):
        self.layout = layout
        self.params = dict(params)      # relative names: "M.s1.w1", ...
        self._fwd = None
        self._inv = None

    def _graphs(self):
        if self._fwd is None:
            single = FlowLayout(1, 1, self.layout.dim, self.layout.split,
                                self.layout.cond_dim, self.layout.hidden,
                                self.layout.scale_clamp, self.layout.permutation)
            renamed = _rename_proj(self.params)
            gf = Graph()
            x = gf.input("x")
            e = gf.input("e") if single.conditioned else None
            leaf = _make_leaf(gf, renamed, "", "input")
            h, ld = _append_block_forward(gf, leaf, "", single, x, e)
            # block-level prefix is empty: strip the leading dot used above
            self._fwd = (gf, h, ld)
            gi = Graph()
            z = gi.input("x")
            ei = gi.input("e") if single.conditioned else None
            leaf_i = _make_leaf(gi, renamed, "", "input")
            xr = _append_block_inverse(gi, leaf_i, "", single, z, ei)
            self._inv = (gi, xr)
        return self._fwd, self._inv

    def _bindings(self, v, e):
        arr = np.asarray(v, dtype=np.float64)
        single = arr.ndim == 1
        rows = np.atleast_2d(arr)
        if rows.shape[-1] != self.layout.dim:
            raise ShapeError(f"expected width {self.layout.dim}, got {rows.shape[-1]}")
        bindings = dict(_rename_proj(self.params))
        if self.layout.conditioned:
            if e is None:
                raise ContractError("block is conditioned but no embedding given")
            e_arr = np.asarray(e, dtype=np.float64)
            if e_arr.ndim == 1:
                e_arr = np.broadcast_to(e_arr, (rows.shape[0], e_arr.shape[0]))
            if e_arr.shape != (rows.shape[0], self.layout.cond_dim):
                raise ShapeError(f"embedding shape {e_arr.shape} does not match")
            bindings["e"] = e_arr
        elif e is not None:
            raise ContractError("block is unconditioned but an embedding was given")
        bindings["x"] = rows
        return bindings, single

    def forward(self, x, e=None):
        (gf, h, ld), _ = self._graphs()
        bindings, single = self._bindings(x, e)
        out = evaluate(gf, bindings, outputs=[h, ld])
        hv, ldv = out[h].data, out[ld].data
        return (hv[0], float(ldv[0])) if single else (hv, ldv)

    def inverse(self, h, e=None):
        _, (gi, xr) = self._graphs()
        bindings, single = self._bindings(h, e)
        out = evaluate(gi, bindings, outputs=[xr])
        xv = out[xr].data
        return xv[0] if single else xv


def coupling_forward(x, e, block: CouplingBlock):
    """Eq.-style coupling transform; returns (h, logdet)."""
    return block.forward(x, e)


def coupling_inverse(h, e, block: CouplingBlock):
    """Exact inverse of :func:`coupling_forward`."""
    return block.inverse(h, e)


class FlowModel:
    """A composite flow: coupling blocks interleaved with fixed permutations.

    Holds the flat parameter dict (names ``<prefix>.b<k>.<net>.<layer>``) and
    lazily builds one forward and one inverse evaluation graph. Parameters
    are treated as immutable during evaluation; replace them wholesale with
    :meth:`load_params`.
    """

    def __init__(self, layout: FlowLayout, params, prefix):
        self.layout = layout
        self.prefix = prefix
        self.params = dict(params)
        self._fwd = None
        self._inv = None

    # parameter bookkeeping

    def param_names(self):
        return list(self.params)

    def load_params(self, params):
        missing = set(self.params) - set(params)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)[:3]}...")
        self.params = {k: np.ascontiguousarray(params[k], dtype=np.float64)
                       for k in self.params}

    def block(self, index):
        """Extract block ``index`` as a standalone CouplingBlock (copy)."""
        pfx = f"{self.prefix}.b{index:02d}."
        rel = {k[len(pfx):]: v for k, v in self.params.items() if k.startswith(pfx)}
        if not rel:
            raise ContractError(f"no block {index} in this model")
        return CouplingBlock(self.layout, rel)

    # graphs

    def _forward_graph(self):
        if self._fwd is None:
            g = Graph()
            x = g.input("x")
            e = g.input("e") if self.layout.conditioned else None
            z, ld = append_flow_forward(g, self.layout, _rename_proj(self.params),
                                        x, e, self.prefix, leaf_kind="input")
            self._fwd = (g, z, ld)
        return self._fwd

    def _inverse_graph(self):
        if self._inv is None:
            g = Graph()
            z = g.input("x")
            e = g.input("e") if self.layout.conditioned else None
            xr = append_flow_inverse(g, self.layout, _rename_proj(self.params),
                                     z, e, self.prefix, leaf_kind="input")
            self._inv = (g, xr)
        return self._inv

    def _bindings(self, v, e):
        arr = np.asarray(v, dtype=np.float64)
        single = arr.ndim == 1
        rows = np.atleast_2d(arr)
        if rows.ndim != 2 or rows.shape[-1] != self.layout.dim:
            raise ShapeError(f"expected rows of width {self.layout.dim}, "
                             f"got shape {np.shape(v)}")
        bindings = dict(_rename_proj(self.params))
        if self.layout.conditioned:
            if e is None:
                raise ContractError("flow is conditioned but no embedding given")
            e_arr = np.asarray(e, dtype=np.float64)
            if e_arr.ndim == 1:
                if e_arr.shape[0] != self.layout.cond_dim:
                    raise ShapeError(f"embedding width {e_arr.shape[0]} != "
                                     f"{self.layout.cond_dim}")
                e_arr = np.broadcast_to(e_arr, (rows.shape[0], e_arr.shape[0]))
            elif e_arr.shape != (rows.shape[0], self.layout.cond_dim):
                raise ShapeError(f"embedding shape {e_arr.shape} does not match "
                                 f"{rows.shape[0]} rows")
            bindings["e"] = e_arr
        elif e is not None:
            raise ContractError("flow is unconditioned but an embedding was given")
        bindings["x"] = rows
        return bindings, single

    def forward(self, x, e=None):
        """Map data to latent; returns (z, logdet) with per-row logdet."""
        g, z, ld = self._forward_graph()
        bindings, single = self._bindings(x, e)
        out = evaluate(g, bindings, outputs=[z, ld])
        zv, ldv = out[z].data, out[ld].data
        return (zv[0], float(ldv[0])) if single else (zv, ldv)

    def inverse(self, z, e=None):
        """Map latent to data; exact inverse of :meth:`forward`."""
        g, xr = self._inverse_graph()
        bindings, single = self._bindings(z, e)
        out = evaluate(g, bindings, outputs=[xr])
        xv = out[xr].data
        return xv[0] if single else xv


def flow_forward(x, e, model: FlowModel):
    return model.forward(x, e)


def flow_inverse(z, e, model: FlowModel):
    return model.inverse(z, e)


def init_flow(layout, prefix, seed=0, head_scale=0.0):
    """Fresh FlowModel; zero heads by default (the flow starts as identity)."""
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = {}
    for i in range(layout.n_blocks):
        for key, value in init_block_params(rng, layout, head_scale).items():
            params[f"{prefix}.b{i:02d}.{key}"] = value
    return FlowModel(layout, params, prefix)
