"""Toy transformer blocks with bottleneck adapters and cross-modal attention.

Tokens are rows, so a projection written ``W x`` for a column token is
``x @ W`` here. Each block exposes a cached forward and a matching backward
that returns gradients for the trainable parameters only (adapters,
cross-modal projections, layer-norm affine terms); the attention and FFN
weights of the backbone are frozen and never get a gradient.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from otat.numeric import (
    DegenerateInputError,
    ShapeError,
    as_matrix,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    softmax_rows,
    softmax_rows_backward,
)

__all__ = [
    "AdapterParams",
    "CmamParams",
    "AttentionWeights",
    "FfnWeights",
    "OtaBlockParams",
    "ConfigError",
    "ACTIVATIONS",
    "adapter_forward",
    "cmam_forward",
    "cmam_attention",
    "ota_text_block",
    "vision_block",
    "standard_block",
    "block_forward",
    "block_backward",
    "init_block",
]


class ConfigError(ValueError):
    """A block or run is configured inconsistently."""


def _relu_grad(x):
    return (x > 0).astype(np.float64)


ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), _relu_grad),
}


@dataclass
class AdapterParams:
    w_down: np.ndarray
    w_up: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.w_down = as_matrix(self.w_down)
        self.w_up = as_matrix(self.w_up)
        d, r = self.w_down.shape
        if self.w_up.shape != (r, d):
            raise ShapeError(f"w_up must be {(r, d)}, got {self.w_up.shape}")
        if not r < d:
            raise ShapeError(f"adapter bottleneck {r} must be narrower than width {d}")


@dataclass
class CmamParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    gamma: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            w = as_matrix(getattr(self, name))
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ShapeError(f"{name} must be square, got {w.shape}")
            setattr(self, name, w)
        if not (np.isfinite(self.gamma) and np.isfinite(self.beta)):
            raise ValueError("gamma and beta must be finite")


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class FfnWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class OtaBlockParams:
    """One transformer block: frozen MHSA/FFN plus its trainable side paths.

    ``adapter`` runs parallel to the attention sub-layer. A plain block also
    has ``adapter_ffn`` parallel to the FFN; a cross-modal block instead has
    ``cmam`` and no FFN adapter.
    """

    attention: AttentionWeights
    ffn: FfnWeights
    adapter: AdapterParams
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    adapter_ffn: AdapterParams = None
    cmam: CmamParams = None
    activation: str = field(default="gelu")

    @property
    def is_cross_modal(self):
        return self.cmam is not None

    def trainable(self):
        """Trainable arrays by name; the arrays are the live parameters."""
        out = {
            "adapter.w_down": self.adapter.w_down,
            "adapter.w_up": self.adapter.w_up,
            "ln1_gain": self.ln1_gain,
            "ln1_bias": self.ln1_bias,
            "ln2_gain": self.ln2_gain,
            "ln2_bias": self.ln2_bias,
        }
        if self.adapter_ffn is not None:
            out["adapter_ffn.w_down"] = self.adapter_ffn.w_down
            out["adapter_ffn.w_up"] = self.adapter_ffn.w_up
        if self.cmam is not None:
            out["cmam.w_q"] = self.cmam.w_q
            out["cmam.w_k"] = self.cmam.w_k
            out["cmam.w_v"] = self.cmam.w_v
        return out

    def frozen(self):
        out = {}
        for group, prefix in ((self.attention, "attention"), (self.ffn, "ffn")):
            for f in fields(group):
                out[f"{prefix}.{f.name}"] = getattr(group, f.name)
        return out


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _wgrad(x, dy):
    return _flat(x).T @ _flat(dy)


# -- adapter -----------------------------------------------------------------


def _adapter_fwd(x_prev, x_main, p, activation):
    act, _ = ACTIVATIONS[activation]
    h = x_prev @ p.w_down
    a = act(h)
    out = x_main + p.alpha * (a @ p.w_up)
    return out, (x_prev, h, a, p, activation)


def _adapter_bwd(dout, cache):
    x_prev, h, a, p, activation = cache
    _, act_grad = ACTIVATIONS[activation]
    dw_up = p.alpha * _wgrad(a, dout)
    dh = p.alpha * (dout @ p.w_up.T) * act_grad(h)
    dw_down = _wgrad(x_prev, dh)
    dx_prev = dh @ p.w_down.T
    return dx_prev, dw_down, dw_up


def adapter_forward(x_prev, x_main, p, activation="gelu"):
    """``x_main + alpha * sigma(x_prev @ W_down) @ W_up`` for every token row."""
    x_prev = as_matrix(x_prev)
    x_main = as_matrix(x_main)
    if x_prev.shape != x_main.shape:
        raise ShapeError(f"adapter inputs differ in shape: {x_prev.shape} vs {x_main.shape}")
    if x_prev.shape[-1] != p.w_down.shape[0]:
        raise ShapeError(f"adapter width {p.w_down.shape[0]} does not match tokens {x_prev.shape}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    return _adapter_fwd(x_prev, x_main, p, activation)[0]


# -- frozen sub-layers ---------------------------------------------------------


def _attn_fwd(x, w):
    d = x.shape[-1]
    q = x @ w.w_q
    k = x @ w.w_k
    v = x @ w.w_v
    att = softmax_rows(q @ np.swapaxes(k, -1, -2) / np.sqrt(d))
    o = att @ v
    return o @ w.w_o, (x, q, k, v, att, w)


def _attn_bwd(dout, cache):
    x, q, k, v, att, w = cache
    d = x.shape[-1]
    do = dout @ w.w_o.T
    datt = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(att, -1, -2) @ do
    ds = softmax_rows_backward(datt, att) / np.sqrt(d)
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq @ w.w_q.T + dk @ w.w_k.T + dv @ w.w_v.T


def _ffn_fwd(x, w):
    h = x @ w.w1 + w.b1
    return gelu(h) @ w.w2 + w.b2, (h, w)


def _ffn_bwd(dout, cache):
    h, w = cache
    return ((dout @ w.w2.T) * gelu_grad(h)) @ w.w1.T


# -- cross-modal attention -----------------------------------------------------


def _check_images(t_res, images):
    if isinstance(images, (list, tuple)):
        if len(images) == 0:
            raise DegenerateInputError("cross-modal attention needs at least one image")
        images = np.stack([as_matrix(im) for im in images])
    images = as_matrix(images)
    if images.ndim < 3 or images.shape[-3] == 0:
        raise DegenerateInputError("cross-modal attention needs at least one image")
    if images.shape[-1] != t_res.shape[-1]:
        raise ShapeError(f"image width {images.shape[-1]} does not match text width {t_res.shape[-1]}")
    return images


def _cmam_fwd(t_res, images, p):
    d = t_res.shape[-1]
    n_images = images.shape[-3]
    q = t_res @ p.w_q
    keys = images @ p.w_k
    values = images @ p.w_v
    scores = q[..., None, :, :] @ np.swapaxes(keys, -1, -2) / np.sqrt(d)
    att = softmax_rows(scores)
    attended = att @ values
    out = t_res + p.gamma * attended.sum(axis=-3) / n_images
    return out, (t_res, images, q, keys, values, att, p)


def _cmam_bwd(dout, cache):
    t_res, images, q, keys, values, att, p = cache
    d = t_res.shape[-1]
    n_images = images.shape[-3]
    dattended = np.broadcast_to((p.gamma / n_images) * dout[..., None, :, :], att.shape[:-1] + (d,))
    datt = dattended @ np.swapaxes(values, -1, -2)
    dvalues = np.swapaxes(att, -1, -2) @ dattended
    dscores = softmax_rows_backward(datt, att) / np.sqrt(d)
    dq = (dscores @ keys).sum(axis=-3)
    dkeys = np.swapaxes(dscores, -1, -2) @ q[..., None, :, :]
    dt_res = dout + dq @ p.w_q.T
    grads = {
        "cmam.w_q": _wgrad(t_res, dq),
        "cmam.w_k": _wgrad(images, dkeys),
        "cmam.w_v": _wgrad(images, dvalues),
    }
    dimages = dkeys @ p.w_k.T + dvalues @ p.w_v.T
    return dt_res, grads, dimages


def cmam_attention(t_res, images, p):
    """Per-image attention weights of text tokens over image tokens, (K, L2t, L1)."""
    t_res = as_matrix(t_res)
    images = _check_images(t_res, images)
    return _cmam_fwd(t_res, images, p)[1][5]


def cmam_forward(t_res, images, p):
    """Enrich text tokens with the average attention readout over K same-class images."""
    t_res = as_matrix(t_res)
    images = _check_images(t_res, images)
    return _cmam_fwd(t_res, images, p)[0]


# -- blocks --------------------------------------------------------------------


def block_forward(x, blk, images=None):
    """Run one block; returns ``(out, cache)`` for :func:`block_backward`."""
    x = as_matrix(x)
    ln1, ln1_cache = layer_norm(x, blk.ln1_gain, blk.ln1_bias, return_cache=True)
    att_out, att_cache = _attn_fwd(ln1, blk.attention)
    t_att = x + att_out
    t_res, ad_cache = _adapter_fwd(x, t_att, blk.adapter, blk.activation)
    ln2, ln2_cache = layer_norm(t_res, blk.ln2_gain, blk.ln2_bias, return_cache=True)
    ffn_out, ffn_cache = _ffn_fwd(ln2, blk.ffn)
    cache = {
        "ln1": ln1_cache,
        "att": att_cache,
        "ad": ad_cache,
        "ln2": ln2_cache,
        "ffn": ffn_cache,
    }
    if blk.cmam is None:
        if blk.adapter_ffn is None:
            raise ConfigError("plain block needs an FFN-parallel adapter")
        f = t_res + ffn_out
        out, adf_cache = _adapter_fwd(t_res, f, blk.adapter_ffn, blk.activation)
        cache["adf"] = adf_cache
    else:
        if images is None:
            raise ConfigError("cross-modal block needs support images")
        images = _check_images(t_res, images)
        t_cmam, cm_cache = _cmam_fwd(t_res, images, blk.cmam)
        # printed form: no separate residual of t_res besides the one inside t_cmam
        out = ffn_out + blk.cmam.beta * t_cmam
        cache["cm"] = cm_cache
    cache["blk"] = blk
    return out, cache


def block_backward(dout, cache):
    """Return ``(dx, grads, dimages)``; ``dimages`` is None for plain blocks."""
    blk = cache["blk"]
    grads = {}
    dimages = None
    if blk.cmam is None:
        dx_adf, dwd, dwu = _adapter_bwd(dout, cache["adf"])
        grads["adapter_ffn.w_down"], grads["adapter_ffn.w_up"] = dwd, dwu
        dffn = dout
        dres = dout + dx_adf
    else:
        dcm = blk.cmam.beta * dout
        dres_cm, cm_grads, dimages = _cmam_bwd(dcm, cache["cm"])
        grads.update(cm_grads)
        dffn = dout
        dres = dres_cm
    dln2 = _ffn_bwd(dffn, cache["ffn"])
    dres_ln, grads["ln2_gain"], grads["ln2_bias"] = layer_norm_backward(dln2, cache["ln2"])
    dres = dres + dres_ln
    dx_ad, grads["adapter.w_down"], grads["adapter.w_up"] = _adapter_bwd(dres, cache["ad"])
    dln1 = _attn_bwd(dres, cache["att"])
    dx_ln, grads["ln1_gain"], grads["ln1_bias"] = layer_norm_backward(dln1, cache["ln1"])
    dx = dres + dx_ad + dx_ln
    return dx, grads, dimages


def vision_block(v_prev, blk):
    """Plain block: adapters parallel to both the attention and the FFN sub-layer."""
    if blk.cmam is not None:
        raise ConfigError("vision blocks carry no cross-modal attention")
    v_prev = as_matrix(v_prev)
    if v_prev.shape[-1] != blk.adapter.w_down.shape[0]:
        raise ShapeError(f"tokens {v_prev.shape} do not match block width {blk.adapter.w_down.shape[0]}")
    return block_forward(v_prev, blk)[0]


standard_block = vision_block


def ota_text_block(t_prev, images, blk):
    """Text block with an attention-parallel adapter and cross-modal enrichment."""
    if blk.cmam is None:
        raise ConfigError("cross-modal text block is missing its cmam parameters")
    return block_forward(t_prev, blk, images=images)[0]


def init_block(backbone_rng, side_rng, dim, rank=8, hidden=None, cross_modal=False, alpha=1.0,
               gamma=1.0, beta=1.0, activation="gelu", adapter_init="zero_up",
               cmam_value_init="identity"):
    """Random frozen backbone weights plus freshly initialized side paths.

    The backbone and the side paths draw from separate generators, so the
    frozen weights do not depend on which side paths a block carries.
    ``adapter_init="zero_up"`` zeroes the up-projections so a new block
    starts out equal to its frozen backbone; ``"random"`` draws them too.
    ``cmam_value_init="identity"`` starts the cross-modal value projection at
    the identity, so the readout begins as attention pooling of the support
    features; ``"random"`` draws it like the query/key projections.
    """
    hidden = hidden or 2 * dim
    scale = 1.0 / np.sqrt(dim)

    def draw(rng, *shape, s=scale):
        return rng.normal(0.0, s, size=shape)

    br = backbone_rng
    attention = AttentionWeights(draw(br, dim, dim), draw(br, dim, dim), draw(br, dim, dim), draw(br, dim, dim))
    ffn = FfnWeights(draw(br, dim, hidden), np.zeros(hidden), draw(br, hidden, dim, s=1.0 / np.sqrt(hidden)),
                     np.zeros(dim))

    def adapter():
        down = draw(side_rng, dim, rank)
        if adapter_init == "random":
            up = draw(side_rng, rank, dim, s=1.0 / np.sqrt(rank))
        else:
            up = np.zeros((rank, dim))
        return AdapterParams(down, up, alpha)

    attn_adapter = adapter()
    kwargs = {}
    if cross_modal:
        w_v = draw(side_rng, dim, dim)
        if cmam_value_init == "identity":
            w_v = np.eye(dim)
        kwargs["cmam"] = CmamParams(draw(side_rng, dim, dim), draw(side_rng, dim, dim), w_v, gamma, beta)
    else:
        kwargs["adapter_ffn"] = adapter()
    return OtaBlockParams(
        attention=attention,
        ffn=ffn,
        adapter=attn_adapter,
        ln1_gain=np.ones(dim),
        ln1_bias=np.zeros(dim),
        ln2_gain=np.ones(dim),
        ln2_bias=np.zeros(dim),
        activation=activation,
        **kwargs,
    )
