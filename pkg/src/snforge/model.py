"""Decoder-only transformer with sub-network activation and extraction.

Weights are stored (out, in). Query rows are grouped per head: head ``j``
owns rows ``j*head_size .. (j+1)*head_size`` of ``wq``; key/value rows are
grouped per query group the same way. Query heads are group-major, so head
``j`` reads the keys of group ``j // heads_per_group``. With that layout
every structured choice (heads, head channels, groups, neurons, embedding
channels) is a row/column index set, and a masked forward and an extracted
model run on identical values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DenseArch, LayerArch, SubnetworkConfig, SupernetConfig
from .errors import ValidationError

LN_EPS = 1e-5
INIT_STD = 0.02


def layer_param_shapes(prefix: str, e: int, la: LayerArch) -> dict[str, tuple[int, ...]]:
    hq = la.n_head * la.head_size
    hkv = la.n_query_groups * la.head_size
    return {
        f"{prefix}.ln1.g": (e,), f"{prefix}.ln1.b": (e,),
        f"{prefix}.attn.wq": (hq, e), f"{prefix}.attn.bq": (hq,),
        f"{prefix}.attn.wk": (hkv, e), f"{prefix}.attn.bk": (hkv,),
        f"{prefix}.attn.wv": (hkv, e), f"{prefix}.attn.bv": (hkv,),
        f"{prefix}.attn.wo": (e, hq), f"{prefix}.attn.bo": (e,),
        f"{prefix}.ln2.g": (e,), f"{prefix}.ln2.b": (e,),
        f"{prefix}.mlp.w1": (la.intermediate_size, e), f"{prefix}.mlp.b1": (la.intermediate_size,),
        f"{prefix}.mlp.w2": (e, la.intermediate_size), f"{prefix}.mlp.b2": (e,),
    }


def param_shapes(arch: DenseArch) -> dict[str, tuple[int, ...]]:
    e = arch.n_embd
    shapes = {"wte": (arch.vocab_size, e), "wpe": (arch.max_seq, e)}
    for i, la in enumerate(arch.layers):
        shapes.update(layer_param_shapes(f"h.{i}", e, la))
    shapes.update({"ln_f.g": (e,), "ln_f.b": (e,), "lm_head": (arch.vocab_size, e)})
    return shapes


def arch_param_count(arch: DenseArch) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(arch).values())


def init_params(arch: DenseArch, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, zero biases, unit norm gains.

    Residual output projections (``attn.wo``, ``mlp.w2``) use std scaled by
    ``1/sqrt(2 * n_layer)``.
    """
    rng = np.random.default_rng(seed)
    resid_std = INIT_STD / math.sqrt(2 * max(1, len(arch.layers)))
    out = {}
    for name, shape in param_shapes(arch).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            arr = rng.normal(0.0, resid_std, size=shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        out[name] = arr.astype(dtype)
    return out


def _causal_mask(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)


def gpt_forward(params: dict[str, Tensor], arch: DenseArch, ids, record: dict | None = None) -> Tensor:
    """Logits ``[B, T, vocab]`` for token ids ``[B, T]``.

    When ``record`` is a dict it receives numpy copies of the activations used
    for importance scoring: block inputs/outputs, norm outputs, MLP
    pre-activations and per-head attention outputs.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    if T > arch.max_seq:
        raise ValidationError(f"sequence length {T} exceeds max_seq={arch.max_seq}")
    pos = ad.take(params["wpe"], np.arange(T), axis=0)
    x = ad.add(ad.embedding(params["wte"], ids), pos)
    dtype = x.dtype
    mask = _causal_mask(T, dtype)
    if record is not None:
        record.update(block_in=[], block_out=[], norm_out=[], mlp_pre=[], head_out=[])
    for i, la in enumerate(arch.layers):
        p = f"h.{i}"
        if record is not None:
            record["block_in"].append(x.data.copy())
        nh, nq, hs = la.n_head, la.n_query_groups, la.head_size
        a_in = ad.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS)
        q = ad.linear(a_in, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = ad.linear(a_in, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = ad.linear(a_in, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        q = q.reshape(B, T, nh, hs).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, nq, hs).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, nq, hs).transpose(0, 2, 1, 3)
        if nq != nh:
            group_of = np.arange(nh) // (nh // nq)
            k = ad.take(k, group_of, axis=1)
            v = ad.take(v, group_of, axis=1)
        att = ad.scale(ad.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(hs))
        att = ad.softmax(ad.add(att, mask))
        y = ad.matmul(att, v)
        if record is not None:
            record["head_out"].append(y.data.transpose(0, 2, 1, 3).copy())
            record["norm_out"].append(a_in.data.copy())
        y = y.transpose(0, 2, 1, 3).reshape(B, T, nh * hs)
        x = ad.add(x, ad.linear(y, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"]))
        m_in = ad.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS)
        pre = ad.linear(m_in, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"])
        if record is not None:
            record["norm_out"].append(m_in.data.copy())
            w1 = params[f"{p}.mlp.w1"].data
            record["mlp_pre"].append(m_in.data @ w1.T)
        x = ad.add(x, ad.linear(ad.gelu(pre), params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"]))
        if record is not None:
            record["block_out"].append(x.data.copy())
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    if record is not None:
        record["norm_out"].append(x.data.copy())
    return ad.linear(x, params["lm_head"])


class DenseModel:
    """A standalone transformer; layers may have different widths."""

    def __init__(self, arch: DenseArch, params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 dtype=np.float32):
        self.arch = arch
        if params is None:
            params = init_params(arch, seed, dtype)
        shapes = param_shapes(arch)
        if set(params) != set(shapes):
            raise ValidationError(f"parameter names do not match architecture: "
                                  f"{sorted(set(params) ^ set(shapes))[:4]}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name])
            if arr.shape != shape:
                raise ValidationError(f"{name}: shape {arr.shape} != expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    def forward(self, ids, record: dict | None = None) -> Tensor:
        return gpt_forward(self.params, self.arch, ids, record)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def reinitialize(self, seed: int) -> None:
        self.load_state_dict(init_params(self.arch, seed, self.params["wte"].dtype))

    def clone(self) -> "DenseModel":
        return DenseModel(self.arch, self.state_dict())


@dataclass
class SlicePlan:
    """Where every tensor of a sub-network comes from in the supernet.

    ``sources[name] = (supernet_name, row_idx, col_idx)``; ``None`` means the
    full axis.
    """

    arch: DenseArch
    sources: dict[str, tuple[str, np.ndarray | None, np.ndarray | None]]


def _selection(cfg: SubnetworkConfig, sup: SupernetConfig):
    """Concrete index lists per dimension, coarse configs as prefixes."""
    G = sup.heads_per_group
    if not cfg.fine_grained:
        layers = list(range(cfg.l))
        emb = list(range(cfg.e))
        per_layer = []
        for i in range(cfg.l):
            groups = list(range(cfg.q[i]))
            per_group = cfg.h[i] // cfg.q[i]
            heads = [g * G + j for g in groups for j in range(per_group)]
            per_layer.append((heads, groups, list(range(cfg.h_s[i])), list(range(cfg.d[i]))))
        return layers, emb, per_layer
    order = sorted(range(cfg.l), key=lambda i: cfg.layer_indices[i])
    layers = [cfg.layer_indices[i] for i in order]
    per_layer = []
    for i in order:
        groups = list(cfg.query_group_indices[i])
        rank = {g: n for n, g in enumerate(groups)}
        heads = sorted(cfg.head_indices[i], key=lambda hd: (rank[hd // G], cfg.head_indices[i].index(hd)))
        per_layer.append((heads, groups, list(cfg.head_size_indices[i]), list(cfg.intermediate_indices[i])))
    return layers, list(cfg.embd_indices), per_layer


def slice_plan(sup: SupernetConfig, cfg: SubnetworkConfig) -> SlicePlan:
    cfg.validate(sup)
    layers, emb, per_layer = _selection(cfg, sup)
    E = np.asarray(emb, dtype=np.int64)
    full_e = len(emb) == sup.n_embd and emb == list(range(sup.n_embd))
    E_sel = None if full_e else E
    src: dict[str, tuple] = {
        "wte": ("wte", None, E_sel), "wpe": ("wpe", None, E_sel),
        "ln_f.g": ("ln_f.g", E_sel, None), "ln_f.b": ("ln_f.b", E_sel, None),
        "lm_head": ("lm_head", None, E_sel),
    }
    archs = []
    Hs = sup.head_size
    for j, (li, (heads, groups, hs_idx, d_idx)) in enumerate(zip(layers, per_layer)):
        a, b = f"h.{j}", f"h.{li}"
        la = LayerArch(len(heads), len(groups), len(hs_idx), len(d_idx))
        archs.append(la)
        hs_arr = np.asarray(hs_idx, dtype=np.int64)
        q_rows = (np.asarray(heads)[:, None] * Hs + hs_arr[None, :]).reshape(-1)
        kv_rows = (np.asarray(groups)[:, None] * Hs + hs_arr[None, :]).reshape(-1)
        D = np.asarray(d_idx, dtype=np.int64)
        full_q = q_rows.size == sup.n_head * Hs and np.array_equal(q_rows, np.arange(q_rows.size))
        full_kv = kv_rows.size == sup.n_query_groups * Hs and np.array_equal(kv_rows, np.arange(kv_rows.size))
        full_d = D.size == sup.intermediate_size and np.array_equal(D, np.arange(D.size))
        Q = None if full_q else q_rows
        KV = None if full_kv else kv_rows
        Dsel = None if full_d else D
        for n in ("ln1", "ln2"):
            src[f"{a}.{n}.g"] = (f"{b}.{n}.g", E_sel, None)
            src[f"{a}.{n}.b"] = (f"{b}.{n}.b", E_sel, None)
        src[f"{a}.attn.wq"] = (f"{b}.attn.wq", Q, E_sel)
        src[f"{a}.attn.bq"] = (f"{b}.attn.bq", Q, None)
        for w in ("k", "v"):
            src[f"{a}.attn.w{w}"] = (f"{b}.attn.w{w}", KV, E_sel)
            src[f"{a}.attn.b{w}"] = (f"{b}.attn.b{w}", KV, None)
        src[f"{a}.attn.wo"] = (f"{b}.attn.wo", E_sel, Q)
        src[f"{a}.attn.bo"] = (f"{b}.attn.bo", E_sel, None)
        src[f"{a}.mlp.w1"] = (f"{b}.mlp.w1", Dsel, E_sel)
        src[f"{a}.mlp.b1"] = (f"{b}.mlp.b1", Dsel, None)
        src[f"{a}.mlp.w2"] = (f"{b}.mlp.w2", E_sel, Dsel)
        src[f"{a}.mlp.b2"] = (f"{b}.mlp.b2", E_sel, None)
    arch = DenseArch(len(emb), tuple(archs), sup.vocab_size, sup.max_seq)
    return SlicePlan(arch, src)


def _slice_tensor(t: Tensor, rows, cols) -> Tensor:
    if rows is not None:
        t = ad.take(t, rows, axis=0)
    if cols is not None:
        t = ad.take(t, cols, axis=1)
    return t


def _slice_array(a: np.ndarray, rows, cols) -> np.ndarray:
    if rows is not None:
        a = a[rows]
    if cols is not None:
        a = a[:, cols]
    return np.array(a, copy=True)


class Supernet:
    """The full-size model plus an optional active sub-network.

    Activation is shared mutable state: one thread at a time. For parallel
    evaluation extract independent dense models instead.
    """

    def __init__(self, config: SupernetConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.model = DenseModel(DenseArch.from_supernet(config), params, seed=seed, dtype=dtype)
        self.active: SubnetworkConfig | None = None
        self._plan: SlicePlan | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params

    def parameters(self) -> list[Tensor]:
        return self.model.parameters()

    def set_sub_network(self, cfg: SubnetworkConfig) -> SubnetworkConfig:
        self._plan = slice_plan(self.config, cfg)
        self.active = cfg.copy()
        return self.active

    def reset_super_network(self) -> None:
        self.active = None
        self._plan = None

    def mask_attention_variant(self, q_groups, heads=None) -> SubnetworkConfig:
        """Re-mask attention of the active (or full) network to ``q_groups``.

        ``q == h`` per layer yields multi-head, ``q == 1`` multi-query.
        Optionally also sets the per-layer head counts.
        """
        cfg = (self.active or self.config.full_subnet()).copy()
        qs = [q_groups] * cfg.l if isinstance(q_groups, int) else list(q_groups)
        if heads is not None:
            cfg.h = [heads] * cfg.l if isinstance(heads, int) else list(heads)
        if len(qs) != cfg.l:
            raise ValidationError(f"{len(qs)} query-group entries for {cfg.l} layers")
        for i, (h, q) in enumerate(zip(cfg.h, qs)):
            if q < 1 or h % q:
                raise ValidationError(f"layer {i}: h={h} not divisible by q={q}")
        if cfg.fine_grained:
            G = self.config.heads_per_group
            for i in range(cfg.l):
                groups = cfg.query_group_indices[i][: qs[i]]
                per = cfg.h[i] // qs[i]
                cfg.query_group_indices[i] = groups
                cfg.head_indices[i] = [g * G + j for g in groups for j in range(per)]
        cfg.q = qs
        return self.set_sub_network(cfg)

    def active_arch(self) -> DenseArch:
        return self._plan.arch if self._plan else self.model.arch

    def active_params(self) -> dict[str, Tensor]:
        if self._plan is None:
            return self.model.params
        return {name: _slice_tensor(self.model.params[s], r, c)
                for name, (s, r, c) in self._plan.sources.items()}

    def forward(self, ids, record: dict | None = None) -> Tensor:
        return gpt_forward(self.active_params(), self.active_arch(), ids, record)

    __call__ = forward

    def extract(self, cfg: SubnetworkConfig | None = None) -> DenseModel:
        return extract_dense(self, cfg if cfg is not None else self.active)

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()


def extract_dense(supernet: Supernet, cfg: SubnetworkConfig | None) -> DenseModel:
    """Copy the selected slices into an independent dense model."""
    if cfg is None:
        return supernet.model.clone()
    plan = slice_plan(supernet.config, cfg)
    arrays = {name: _slice_array(supernet.model.params[s].data, r, c)
              for name, (s, r, c) in plan.sources.items()}
    return DenseModel(plan.arch, arrays)


def subnet_arch(sup: SupernetConfig, cfg: SubnetworkConfig) -> DenseArch:
    layers = [LayerArch(h, q, hs, d) for h, q, hs, d in zip(cfg.h, cfg.q, cfg.h_s, cfg.d)]
    return DenseArch(cfg.e, tuple(layers), sup.vocab_size, sup.max_seq)


def count_params(sup: SupernetConfig, cfg: SubnetworkConfig) -> int:
    """Trainable parameters of the dense model ``extract_dense`` would build."""
    cfg.validate(sup)
    e, V = cfg.e, sup.vocab_size
    total = 2 * V * e + sup.max_seq * e + 2 * e
    for h, q, hs, d in zip(cfg.h, cfg.q, cfg.h_s, cfg.d):
        hq, hkv = h * hs, q * hs
        total += 4 * e                      # two layer norms
        total += hq * e + hq                # query projection
        total += 2 * (hkv * e + hkv)        # key and value projections
        total += e * hq + e                 # output projection
        total += d * e + d + e * d + e      # MLP
    return total


def load_supernet_from_dense(config: SupernetConfig, model: DenseModel) -> Supernet:
    return Supernet(config, model.state_dict())
