"""Independent reference implementations for test oracles.

Everything here is written loop-by-loop from the mathematical definitions,
never by calling into the package, so agreement is evidence rather than
tautology. Slow on purpose; keep oracle inputs small.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_lse_loops(scores):
    """Max-shifted softmax and log-sum-exp over a 1-d score vector."""
    s = [float(v) for v in scores]
    m = max(s)
    exps = [math.exp(v - m) for v in s]
    z = sum(exps)
    lse = m + math.log(z)
    return np.array([e / z for e in exps]), lse


def rmsnorm_loops(x, gain, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    n = x.shape[-1]
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        ms = sum(float(v) ** 2 for v in row) / n
        scale = 1.0 / math.sqrt(ms + eps)
        for j in range(n):
            out[idx + (j,)] = row[j] * scale * gain[j]
    return out


def rope_loops(x, position, base=10000.0):
    """Rotate consecutive pairs (x[2j], x[2j+1]) by position * base^(-2j/d)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    out = np.array(x, copy=True)
    for idx in np.ndindex(x.shape[:-1]):
        for j in range(d // 2):
            theta = position * base ** (-2.0 * j / d)
            c, s = math.cos(theta), math.sin(theta)
            a, b = x[idx + (2 * j,)], x[idx + (2 * j + 1,)]
            out[idx + (2 * j,)] = a * c - b * s
            out[idx + (2 * j + 1,)] = a * s + b * c
    return out


def attention_loops(q, keys, values, scale):
    """Dense single-query attention, one head at a time.

    q: [H, D], keys: [L, H, D], values: [L, H, Dv]. Returns ([H, Dv], [H]).
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    h_count, d = q.shape
    length = keys.shape[0]
    dv = values.shape[2]
    out = np.zeros((h_count, dv))
    lse = np.zeros(h_count)
    for h in range(h_count):
        scores = []
        for t in range(length):
            acc = 0.0
            for j in range(d):
                acc += q[h, j] * keys[t, h, j]
            scores.append(acc * scale)
        probs, lse_h = softmax_lse_loops(scores)
        lse[h] = lse_h
        for t in range(length):
            for j in range(dv):
                out[h, j] += probs[t] * values[t, h, j]
    return out, lse


def combine_loops(out_a, lse_a, out_b, lse_b):
    """Merge two attention partials by their per-head normalizers."""
    h_count = len(lse_a)
    out = np.zeros_like(np.asarray(out_a, dtype=np.float64))
    lse = np.zeros(h_count)
    for h in range(h_count):
        la, lb = float(lse_a[h]), float(lse_b[h])
        if la == -math.inf and lb == -math.inf:
            raise ValueError("both partials empty")
        m = max(la, lb)
        wa, wb = math.exp(la - m), math.exp(lb - m)
        out[h] = (wa * np.asarray(out_a[h]) + wb * np.asarray(out_b[h])) / (wa + wb)
        lse[h] = m + math.log(wa + wb)
    return out, lse


def mla_forward_loops(weights, hiddens, query_index):
    """Whole decode attention from hidden states, expanded KV throughout.

    Projects every context token to its latent, decompresses per head, ropes
    queries and keys at their absolute positions, and attends densely from
    the token at query_index over positions [0, query_index].
    """
    c = weights.config
    total = query_index + 1
    d_l, d_r = c.kv_lora_rank, c.rope_dim

    keys = np.zeros((total, c.num_heads, c.nope_head_dim + d_r))
    vals = np.zeros((total, c.num_heads, c.v_head_dim))
    for t in range(total):
        kv = matmul_loops(hiddens[t][None, :], np.asarray(weights.w_kva, dtype=np.float64))[0]
        nope = rmsnorm_loops(kv[:d_l], np.asarray(weights.kv_gain, dtype=np.float64))
        pe = rope_loops(kv[d_l:], t)
        for h in range(c.num_heads):
            k_nope = matmul_loops(nope[None, :], np.asarray(weights.w_kb[h], dtype=np.float64))[0]
            keys[t, h, : c.nope_head_dim] = k_nope
            keys[t, h, c.nope_head_dim :] = pe
            vals[t, h] = matmul_loops(nope[None, :], np.asarray(weights.w_vb[h], dtype=np.float64))[0]

    hq = hiddens[query_index]
    q_lat = matmul_loops(hq[None, :], np.asarray(weights.w_qa, dtype=np.float64))[0]
    q_lat = rmsnorm_loops(q_lat, np.asarray(weights.q_gain, dtype=np.float64))
    q_full = matmul_loops(q_lat[None, :], np.asarray(weights.w_qb, dtype=np.float64))[0]
    q = q_full.reshape(c.num_heads, c.nope_head_dim + d_r)
    q = np.concatenate(
        [q[:, : c.nope_head_dim], rope_loops(q[:, c.nope_head_dim :], query_index)], axis=1
    )

    scale = 1.0 / math.sqrt(c.nope_head_dim + d_r)
    heads, _ = attention_loops(q, keys, vals, scale)
    return matmul_loops(
        heads.reshape(1, c.num_heads * c.v_head_dim), np.asarray(weights.w_o, dtype=np.float64)
    )[0]
