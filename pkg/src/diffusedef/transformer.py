"""Post-norm transformer encoder layer built from the numerics kernels.

Parameters live in a flat ``dict[str, ndarray]``; a layer owns every entry
under its ``prefix``. Backward passes add into a caller-supplied grads dict.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx


def init_layer(params: dict, prefix: str, width: int, ffn: int, rng: nx.Rng, dtype, std=0.02):
    for name in ("Wq", "Wk", "Wv", "Wo"):
        params[f"{prefix}.attn.{name}"] = (rng.gaussian((width, width)) * std).astype(dtype)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.attn.{name}"] = np.zeros(width, dtype=dtype)
    params[f"{prefix}.ln1.g"] = np.ones(width, dtype=dtype)
    params[f"{prefix}.ln1.b"] = np.zeros(width, dtype=dtype)
    params[f"{prefix}.ffn.W1"] = (rng.gaussian((width, ffn)) * std).astype(dtype)
    params[f"{prefix}.ffn.b1"] = np.zeros(ffn, dtype=dtype)
    params[f"{prefix}.ffn.W2"] = (rng.gaussian((ffn, width)) * std).astype(dtype)
    params[f"{prefix}.ffn.b2"] = np.zeros(width, dtype=dtype)
    params[f"{prefix}.ln2.g"] = np.ones(width, dtype=dtype)
    params[f"{prefix}.ln2.b"] = np.zeros(width, dtype=dtype)


def layer_forward(x, mask, params, prefix, n_heads, dropout=0.0, rng=None):
    """y = LN(x + attn(x)); out = LN(y + FFN(y)). Dropout only when ``rng`` is given."""
    attn = {k: params[f"{prefix}.attn.{k}"] for k in nx.ATTN_KEYS}
    a, c_attn = nx.multihead_attention_forward(x, attn, mask, n_heads)
    a, k1 = nx.dropout_forward(a, dropout, rng)
    y, c_ln1 = nx.layernorm_forward(x + a, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    f, c_l1 = nx.linear_forward(y, params[f"{prefix}.ffn.W1"], params[f"{prefix}.ffn.b1"])
    f, c_act = nx.gelu_forward(f)
    f, c_l2 = nx.linear_forward(f, params[f"{prefix}.ffn.W2"], params[f"{prefix}.ffn.b2"])
    f, k2 = nx.dropout_forward(f, dropout, rng)
    out, c_ln2 = nx.layernorm_forward(y + f, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return out, (prefix, c_attn, k1, c_ln1, c_l1, c_act, c_l2, k2, c_ln2)


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def layer_backward(dout, cache, grads: dict):
    prefix, c_attn, k1, c_ln1, c_l1, c_act, c_l2, k2, c_ln2 = cache
    ds, dg, db = nx.layernorm_backward(dout, c_ln2)
    _acc(grads, f"{prefix}.ln2.g", dg)
    _acc(grads, f"{prefix}.ln2.b", db)
    df = nx.dropout_backward(ds, k2)
    df, dW, db = nx.linear_backward(df, c_l2)
    _acc(grads, f"{prefix}.ffn.W2", dW)
    _acc(grads, f"{prefix}.ffn.b2", db)
    df = nx.gelu_backward(df, c_act)
    dy, dW, db = nx.linear_backward(df, c_l1)
    _acc(grads, f"{prefix}.ffn.W1", dW)
    _acc(grads, f"{prefix}.ffn.b1", db)
    dy = dy + ds
    ds, dg, db = nx.layernorm_backward(dy, c_ln1)
    _acc(grads, f"{prefix}.ln1.g", dg)
    _acc(grads, f"{prefix}.ln1.b", db)
    da = nx.dropout_backward(ds, k1)
    dx, ag = nx.multihead_attention_backward(da, c_attn)
    for k, g in ag.items():
        _acc(grads, f"{prefix}.attn.{k}", g)
    return dx + ds
