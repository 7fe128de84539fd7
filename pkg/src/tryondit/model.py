"""Toy pixel-space diffusion transformer with in-context image conditions.

One sequence carries [text tokens][noisy image tokens][reference image
tokens...]. All images share one patch embedding; references are clean
images riding along as context. Timestep conditioning is adaLN:
per-block scale/shift/gate for the attention and MLP paths, gates and
the final projection zero-initialized so the net starts as the zero
velocity field.

Attention alternates window parity every two layers (regular, regular,
shifted, shifted, ...), with mask semantics from the attention module:
text/noisy tokens see everything, reference tokens see only their own
window of their own reference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import numerics as nx
from . import rng
from .layout import assign_positions, axis_split, rope_tables
from .attention import attend, build_mask, plan_windows
from .tensorio import read_odt, write_odt

NULL_TOKEN = 0  # reserved text id for classifier-free guidance


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 4
    window_size: int = 4
    text_vocab: int = 32
    text_len: int = 3
    mlp_ratio: int = 4
    dtype: str = "f32"

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image {self.image_size}")
        if self.dim % self.heads:
            raise ValueError(f"heads {self.heads} do not divide dim {self.dim}")
        if self.depth % 2:
            raise ValueError(f"depth must be even for parity alternation, got {self.depth}")
        axis_split(self.head_dim)  # validates head_dim

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def grid_side(self):
        return self.image_size // self.patch


def parity_of_layer(layer):
    """Window parity alternates every two layers."""
    return "regular" if (layer // 2) % 2 == 0 else "shifted"


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    d, r, v = config.dim, config.mlp_ratio, config.text_vocab
    pc = config.patch * config.patch * config.channels
    patch = pc * d + d
    text = v * d
    time = 2 * (d * d + d)
    block = (d * 3 * d + 3 * d) + (d * d + d) \
        + (d * r * d + r * d) + (r * d * d + d) \
        + (d * 6 * d + 6 * d)
    final = d * pc + pc
    return patch + text + time + config.depth * block + final


def init_params(config: ModelConfig, seed: int) -> dict:
    """Truncated-normal weights (std 0.02), zero modulation and final head."""
    dt = config.dtype
    npdt = nx.DTYPES[dt]
    d, r = config.dim, config.mlp_ratio
    pc = config.patch * config.patch * config.channels

    def tn(name, shape):
        return nx.Tensor(rng.truncated_normal(rng.stream(seed, "init", name), shape,
                                              std=0.02, dtype=npdt),
                         requires_grad=True)

    def zeros(shape):
        return nx.Tensor(np.zeros(shape, dtype=npdt), requires_grad=True)

    p = {
        "patch.w": tn("patch.w", (pc, d)),
        "patch.b": zeros((d,)),
        "text.table": tn("text.table", (config.text_vocab, d)),
        "time.w1": tn("time.w1", (d, d)),
        "time.b1": zeros((d,)),
        "time.w2": tn("time.w2", (d, d)),
        "time.b2": zeros((d,)),
        "final.w": zeros((d, pc)),
        "final.b": zeros((pc,)),
    }
    for i in range(config.depth):
        p[f"block{i}.qkv.w"] = tn(f"block{i}.qkv.w", (d, 3 * d))
        p[f"block{i}.qkv.b"] = zeros((3 * d,))
        p[f"block{i}.attn_out.w"] = tn(f"block{i}.attn_out.w", (d, d))
        p[f"block{i}.attn_out.b"] = zeros((d,))
        p[f"block{i}.mlp.w1"] = tn(f"block{i}.mlp.w1", (d, r * d))
        p[f"block{i}.mlp.b1"] = zeros((r * d,))
        p[f"block{i}.mlp.w2"] = tn(f"block{i}.mlp.w2", (r * d, d))
        p[f"block{i}.mlp.b2"] = zeros((d,))
        p[f"block{i}.mod.w"] = zeros((d, 6 * d))
        p[f"block{i}.mod.b"] = zeros((6 * d,))
    return p


class ToyDiT:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._layout_cache = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0):
        return cls(config, init_params(config, seed))

    # -- persistence ---------------------------------------------------

    def save(self, dirpath):
        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "config.json"), "w") as f:
            json.dump(asdict(self.config), f, indent=1)
        for name, t in self.params.items():
            write_odt(os.path.join(dirpath, name + ".odt"), t.data)

    @classmethod
    def load(cls, dirpath, dtype=None):
        with open(os.path.join(dirpath, "config.json")) as f:
            cfg = ModelConfig(**json.load(f))
        if dtype is not None and dtype != cfg.dtype:
            cfg = replace(cfg, dtype=dtype)
        npdt = nx.DTYPES[cfg.dtype]
        params = {}
        for name in init_params(cfg, 0):
            arr = read_odt(os.path.join(dirpath, name + ".odt")).astype(npdt)
            params[name] = nx.Tensor(arr, requires_grad=True)
        return cls(cfg, params)

    # -- bookkeeping ---------------------------------------------------

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def layer_table(self):
        rows = []
        for i in range(self.config.depth):
            n = sum(t.size for name, t in self.params.items()
                    if name.startswith(f"block{i}."))
            rows.append({"layer": i, "parity": parity_of_layer(i), "params": n})
        return rows

    # -- geometry cache --------------------------------------------------

    def _layout(self, text_len, ref_grids):
        key = (text_len, tuple(ref_grids))
        hit = self._layout_cache.get(key)
        if hit is None:
            seq = assign_positions((self.config.grid_side, self.config.grid_side),
                                   list(ref_grids), text_len)
            cos, sin = rope_tables(seq, self.config.head_dim)
            npdt = nx.DTYPES[self.config.dtype]
            masks = {
                par: build_mask(seq, plan_windows(seq, self.config.window_size, par))
                for par in ("regular", "shifted")
            }
            hit = (seq, (cos.astype(npdt), sin.astype(npdt)), masks)
            self._layout_cache[key] = hit
        return hit

    # -- forward ---------------------------------------------------------

    def _patchify(self, img):
        # (B, C, H, W) -> (B, h*w, p*p*C), tokens row-major h outer
        b, c, hh, ww = img.shape
        p = self.config.patch
        x = nx.reshape(img, (b, c, hh // p, p, ww // p, p))
        x = nx.transpose(x, (0, 2, 4, 3, 5, 1))
        return nx.reshape(x, (b, (hh // p) * (ww // p), p * p * c))

    def _unpatchify(self, toks, hh, ww):
        b = toks.shape[0]
        c, p = self.config.channels, self.config.patch
        x = nx.reshape(toks, (b, hh // p, ww // p, p, p, c))
        x = nx.transpose(x, (0, 5, 1, 3, 2, 4))
        return nx.reshape(x, (b, c, hh, ww))

    def _time_embedding(self, t):
        # sinusoidal features of t scaled onto the usual 0..1000 grid
        d = self.config.dim
        half = d // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
        ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
        emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
        emb = nx.Tensor(emb.astype(nx.DTYPES[self.config.dtype]))
        p = self.params
        h = nx.silu(nx.add(nx.matmul(emb, p["time.w1"]), p["time.b1"]))
        return nx.add(nx.matmul(h, p["time.w2"]), p["time.b2"])

    def _modulate(self, x, mod, lo, n_tokens):
        # slice one (B, dim) chunk out of the (B, 6*dim) modulation vector
        d = self.config.dim
        b = mod.shape[0]
        chunk = nx.narrow(mod, 1, lo * d, d)
        return nx.expand(nx.reshape(chunk, (b, 1, d)), (b, n_tokens, d))

    def forward_batch(self, x_t, t, conditions=(), text_ids=None, return_hidden=False):
        """x_t: (B, C, H, W); t: (B,); conditions: list of (B, C, Hc, Wc);
        text_ids: (B, text_len) ints. Returns velocity (B, C, H, W)."""
        cfg = self.config
        npdt = nx.DTYPES[cfg.dtype]
        x_t = x_t if isinstance(x_t, nx.Tensor) else nx.Tensor(np.asarray(x_t, dtype=npdt))
        conditions = [c if isinstance(c, nx.Tensor) else nx.Tensor(np.asarray(c, dtype=npdt))
                      for c in conditions]
        if text_ids is None:
            text_ids = np.zeros((x_t.shape[0], cfg.text_len), dtype=np.int64)
        text_ids = np.asarray(text_ids)
        b, c, hh, ww = x_t.shape
        if (hh, ww) != (cfg.image_size, cfg.image_size) or c != cfg.channels:
            raise nx.ShapeError(f"x_t shape {x_t.shape} does not match config "
                                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
        if not conditions and cfg.text_len == 0:
            raise ValueError("no conditioning: need image conditions or text tokens")
        if text_ids.shape != (b, cfg.text_len):
            raise nx.ShapeError(f"text_ids shape {text_ids.shape}, want ({b}, {cfg.text_len})")
        if cfg.text_len and (text_ids.min() < 0 or text_ids.max() >= cfg.text_vocab):
            raise ValueError("text id outside vocabulary")

        p = self.params
        ref_grids = [(cond.shape[3] // cfg.patch, cond.shape[2] // cfg.patch)
                     for cond in conditions]
        seq, rope, masks = self._layout(cfg.text_len, ref_grids)

        parts = [nx.take_rows(p["text.table"], text_ids)]
        for img in (x_t, *conditions):
            toks = nx.add(nx.matmul(self._patchify(img), p["patch.w"]), p["patch.b"])
            parts.append(toks)
        h = nx.concat(parts, axis=1)
        n = h.shape[1]
        assert n == seq.total_len

        t_emb = self._time_embedding(t)
        mod_in = nx.silu(t_emb)

        hiddens = [] if return_hidden == "all" else None
        for i in range(cfg.depth):
            mask = masks[parity_of_layer(i)]
            mod = nx.add(nx.matmul(mod_in, p[f"block{i}.mod.w"]), p[f"block{i}.mod.b"])
            scale1 = self._modulate(h, mod, 0, n)
            shift1 = self._modulate(h, mod, 1, n)
            gate1 = self._modulate(h, mod, 2, n)
            scale2 = self._modulate(h, mod, 3, n)
            shift2 = self._modulate(h, mod, 4, n)
            gate2 = self._modulate(h, mod, 5, n)

            hn = self._ln(h)
            hn = nx.add(nx.mul(hn, nx.add(scale1, self._one(scale1.shape, npdt))), shift1)
            hn = self._attention(i, hn, mask, rope, b, n)
            h = nx.add(h, nx.mul(gate1, hn))

            hm = self._ln(h)
            hm = nx.add(nx.mul(hm, nx.add(scale2, self._one(scale2.shape, npdt))), shift2)
            hm = nx.matmul(nx.gelu(nx.matmul(hm, p[f"block{i}.mlp.w1"])
                                   + p[f"block{i}.mlp.b1"]),
                           p[f"block{i}.mlp.w2"]) + p[f"block{i}.mlp.b2"]
            h = nx.add(h, nx.mul(gate2, hm))
            if hiddens is not None:
                hiddens.append(h)

        out = nx.add(nx.matmul(self._ln(h), p["final.w"]), p["final.b"])
        noisy = seq.segment("noisy")
        v_tokens = nx.narrow(out, 1, noisy.start, noisy.length)
        v = self._unpatchify(v_tokens, hh, ww)
        if return_hidden == "all":
            return v, hiddens
        if return_hidden:
            return v, h
        return v

    def _one(self, shape, npdt):
        return nx.Tensor(np.ones(1, dtype=npdt))

    def _ln(self, x):
        npdt = nx.DTYPES[self.config.dtype]
        g = nx.Tensor(np.ones(x.shape[-1], dtype=npdt))
        bta = nx.Tensor(np.zeros(x.shape[-1], dtype=npdt))
        return nx.layernorm_affine(x, g, bta)

    def _attention(self, i, x, mask, rope, b, n):
        cfg = self.config
        p = self.params
        qkv = nx.add(nx.matmul(x, p[f"block{i}.qkv.w"]), p[f"block{i}.qkv.b"])
        heads, hd = cfg.heads, cfg.head_dim

        def split(off):
            part = nx.narrow(qkv, 2, off * cfg.dim, cfg.dim)
            part = nx.reshape(part, (b, n, heads, hd))
            return nx.transpose(part, (0, 2, 1, 3))

        q, k, v = split(0), split(1), split(2)
        o = attend(q, k, v, mask, rope)
        o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (b, n, cfg.dim))
        return nx.add(nx.matmul(o, p[f"block{i}.attn_out.w"]), p[f"block{i}.attn_out.b"])

    def forward(self, x_t, t, conditions=(), text_ids=None):
        """Single-sample forward: x_t (C, H, W) -> velocity (C, H, W)."""
        npdt = nx.DTYPES[self.config.dtype]
        x = x_t if isinstance(x_t, nx.Tensor) else nx.Tensor(np.asarray(x_t, dtype=npdt))
        xb = nx.reshape(x, (1,) + x.shape)
        conds = []
        for cnd in conditions:
            ct = cnd if isinstance(cnd, nx.Tensor) else nx.Tensor(np.asarray(cnd, dtype=npdt))
            conds.append(nx.reshape(ct, (1,) + ct.shape))
        ids = None if text_ids is None else np.asarray(text_ids)[None, :]
        vb = self.forward_batch(xb, np.array([float(t)]), conds, ids)
        return nx.reshape(vb, vb.shape[1:])

    def velocity_fn(self, conditions=(), text_ids=None):
        """Close over the conditioning: returns v(x, t) for the losses/sampler."""
        def v(x, t):
            return self.forward(x, t, conditions, text_ids)
        return v

    def velocity_batch_fn(self, conditions=(), text_ids=None):
        def v(x, t):
            return self.forward_batch(x, t, conditions, text_ids)
        return v
