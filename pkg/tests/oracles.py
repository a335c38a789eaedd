"""Independent reference implementations used by the test suite.

Everything here is written as plain loops over Python floats (or explicit
per-element numpy code) so that a bug in the package's vectorized torch
code cannot hide inside its own oracle. Finite-difference helpers and an
instrumented multiply counter for the conv+recurrent forward live here too.
"""

import math

import numpy as np
import torch


# ---- probability / loss references ----------------------------------------- #

def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        m = max(float(v) for v in z[i])
        e = [math.exp(float(v) - m) for v in z[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def ce_terms(z_list, labels, smoothing):
    """Per-peer smoothed cross entropy by explicit summation."""
    per = []
    for z in z_list:
        z = np.asarray(z, dtype=np.float64)
        n, c = z.shape
        p = softmax_rows(z)
        acc = 0.0
        for i in range(n):
            for j in range(c):
                q = (1.0 - smoothing) * (1.0 if j == labels[i] else 0.0) \
                    + smoothing / c
                acc += -q * math.log(p[i][j])
        per.append(acc / n)
    return per, sum(per)


def soften_onehot_rows(labels, class_count, temperature):
    rows = []
    for y in labels:
        hot = [(1.0 if j == y else 0.0) / temperature for j in range(class_count)]
        rows.append(softmax_rows(np.asarray([hot]))[0])
    return np.asarray(rows)


def kl_terms(soft_labels, preds_list, floor=1e-12):
    """Batch-mean KL(target || prediction) per peer, zero-target terms skipped."""
    soft_labels = np.asarray(soft_labels, dtype=np.float64)
    per = []
    for p in preds_list:
        p = np.asarray(p, dtype=np.float64)
        n, c = soft_labels.shape
        acc = 0.0
        for i in range(n):
            for j in range(c):
                t = soft_labels[i][j]
                if t > 0.0:
                    acc += t * math.log(max(t / max(p[i][j], floor), floor))
        per.append(acc / n)
    return per, sum(per)


def pair_contrastive(v_a, v_b, labels, temperature):
    """Directed cross-peer supervised contrastive loss, literal form:
    per positive pair, denominator = that pair + the anchor's negatives."""
    v_a = np.asarray(v_a, dtype=np.float64)
    v_b = np.asarray(v_b, dtype=np.float64)
    n = v_a.shape[0]
    total = 0.0
    for i in range(n):
        positives = [j for j in range(n) if labels[j] == labels[i]]
        z_i = sum(math.exp(float(v_a[i] @ v_b[k]) / temperature)
                  for k in range(n) if labels[k] != labels[i])
        inner = 0.0
        for j in positives:
            e = math.exp(float(v_a[i] @ v_b[j]) / temperature)
            inner += math.log(e / (e + z_i))
        total += -inner / len(positives)
    return total


def all_pairs_contrastive(views, labels, temperature):
    m = len(views)
    total = 0.0
    for a in range(m):
        for b in range(a + 1, m):
            total += pair_contrastive(views[a], views[b], labels, temperature)
            total += pair_contrastive(views[b], views[a], labels, temperature)
    return total


def combined(z_list, labels, vr_list, vc_list, w):
    """Straight-line recomputation of the full objective from raw inputs.
    w: dict with distill_temperature, contrastive_temperature, region_weight,
    channel_weight, label_smoothing."""
    _, ce = ce_terms(z_list, labels, w["label_smoothing"])
    c = np.asarray(z_list[0]).shape[1]
    temp = w["distill_temperature"]
    soft_y = soften_onehot_rows(labels, c, temp)
    preds = [softmax_rows(np.asarray(z, dtype=np.float64) / temp) for z in z_list]
    _, kl = kl_terms(soft_y, preds)
    rg = all_pairs_contrastive(vr_list, labels, w["contrastive_temperature"])
    ch = all_pairs_contrastive(vc_list, labels, w["contrastive_temperature"])
    return ce + temp * temp * kl + w["region_weight"] * rg + w["channel_weight"] * ch


# ---- finite differences ----------------------------------------------------- #

def rel_err(g_a, g_fd):
    """max |diff| / (max(max|g_a|, max|g_fd|) + 1e-12)"""
    g_a = np.asarray(g_a, dtype=np.float64).ravel()
    g_fd = np.asarray(g_fd, dtype=np.float64).ravel()
    scale = max(np.abs(g_a).max(initial=0.0), np.abs(g_fd).max(initial=0.0))
    return float(np.abs(g_a - g_fd).max(initial=0.0) / (scale + 1e-12))


def fd_grad_tensor(fn, tensor, h=1e-5):
    """Central differences of scalar fn() w.r.t. every element of `tensor`
    (modified in place and restored). Returns a flat float64 array."""
    flat = tensor.detach().reshape(-1)
    base = flat.clone()
    grad = np.zeros(flat.numel(), dtype=np.float64)
    for k in range(flat.numel()):
        with torch.no_grad():
            flat[k] = base[k] + h
        f_plus = float(fn().detach())
        with torch.no_grad():
            flat[k] = base[k] - h
        f_minus = float(fn().detach())
        with torch.no_grad():
            flat[k] = base[k]
        grad[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---- instrumented multiply counter ------------------------------------------ #

class Counter:
    def __init__(self):
        self.multiplies = 0


def _matvec(W, x, b, ctr):
    out = np.zeros(W.shape[0], dtype=np.float64)
    for o in range(W.shape[0]):
        s = 0.0
        for i in range(W.shape[1]):
            s += float(W[o, i]) * float(x[i])
            ctr.multiplies += 1
        out[o] = s + (float(b[o]) if b is not None else 0.0)
    return out


def _conv1d(x, W, b, stride, ctr):
    """x [Cin][T], W [Cout][Cin][k] -> [Cout][L]"""
    cin, t = x.shape
    cout, _, k = W.shape
    length = (t - k) // stride + 1
    out = np.zeros((cout, length), dtype=np.float64)
    for o in range(cout):
        for pos in range(length):
            s = 0.0
            start = pos * stride
            for i in range(cin):
                for j in range(k):
                    s += float(W[o, i, j]) * float(x[i, start + j])
                    ctr.multiplies += 1
            out[o, pos] = s + float(b[o])
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _lstm_layer(x_frames, w_ih, w_hh, b_ih, b_hh, ctr):
    """One LSTM layer over [T][in]; returns the sequence of hidden states.
    Gate order follows the torch convention (input, forget, cell, output)."""
    hidden = w_hh.shape[1]
    h = np.zeros(hidden, dtype=np.float64)
    c = np.zeros(hidden, dtype=np.float64)
    outs = []
    for frame in x_frames:
        gates = _matvec(w_ih, frame, b_ih, ctr) + _matvec(w_hh, h, b_hh, ctr)
        i_g = np.array([_sigmoid(v) for v in gates[:hidden]])
        f_g = np.array([_sigmoid(v) for v in gates[hidden:2 * hidden]])
        g_g = np.array([math.tanh(v) for v in gates[2 * hidden:3 * hidden]])
        o_g = np.array([_sigmoid(v) for v in gates[3 * hidden:]])
        new_c = np.empty(hidden, dtype=np.float64)
        new_h = np.empty(hidden, dtype=np.float64)
        for u in range(hidden):
            new_c[u] = f_g[u] * c[u] + i_g[u] * g_g[u]
            ctr.multiplies += 2
            new_h[u] = o_g[u] * math.tanh(new_c[u])
            ctr.multiplies += 1
        h, c = new_h, new_c
        outs.append(h)
    return outs


def counted_cnn_lstm_forward(peer, sample, phase, ctr):
    """Naive forward of one [2][n][T] sample through a conv+recurrent peer,
    counting every scalar multiply of the layer arithmetic. Returns logits."""
    cfg = peer.config
    x = np.asarray(sample, dtype=np.float64).reshape(2 * cfg.n_channels,
                                                     cfg.n_samples)
    w = {name: p.detach().cpu().numpy().astype(np.float64)
         for name, p in peer.named_parameters()}

    h1 = _conv1d(x, w["conv1.weight"], w["conv1.bias"],
                 cfg.conv_strides[0], ctr)
    h1 = np.maximum(h1, 0.0)
    h2 = _conv1d(h1, w["conv2.weight"], w["conv2.bias"],
                 cfg.conv_strides[1], ctr)
    h2 = np.maximum(h2, 0.0)
    e_rg = _matvec(w["region_out.weight"], h2.reshape(-1),
                   w["region_out.bias"], ctr)

    frames = [x[:, t] for t in range(cfg.n_samples)]
    seq = _lstm_layer(frames, w["lstm.weight_ih_l0"], w["lstm.weight_hh_l0"],
                      w["lstm.bias_ih_l0"], w["lstm.bias_hh_l0"], ctr)
    seq = _lstm_layer(seq, w["lstm.weight_ih_l1"], w["lstm.weight_hh_l1"],
                      w["lstm.bias_ih_l1"], w["lstm.bias_hh_l1"], ctr)
    e_ch = seq[-1]

    z = _matvec(w["classifier.weight"], np.concatenate([e_rg, e_ch]),
                w["classifier.bias"], ctr)
    if phase == "training":
        for name, e in (("proj_region", e_rg), ("proj_channel", e_ch)):
            p = _matvec(w[f"{name}.weight"], e, w[f"{name}.bias"], ctr)
            s = 0.0
            for v in p:
                s += v * v
                ctr.multiplies += 1
            _ = math.sqrt(s)  # the division/sqrt are FLOPs, not multiplies
    return z
