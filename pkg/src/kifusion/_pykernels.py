"""Pure numpy kernels; reference implementation for the compiled ones."""

import numpy as np


def ema(prev, observed, alpha):
    return alpha * prev + (1.0 - alpha) * observed


def masked_add(base, mask_a, delta_a, mask_b, delta_b):
    # only masked entries are touched, so unmasked ones (even -0.0) keep their bits
    out = base.copy()
    a, b = mask_a != 0, mask_b != 0
    out[a] += delta_a[a]
    out[b] += delta_b[b]
    return out


def abs_product(w, g):
    return np.abs(w * g)


def _adapters(params, dims, offsets, rank):
    for (d_in, d_out), off in zip(dims, offsets):
        a = params[off:off + rank * d_in].reshape(rank, d_in)
        b = params[off + rank * d_in:off + rank * (d_in + d_out)].reshape(d_out, rank)
        yield a, b


def mlp_forward(weights, biases, params, dims, offsets, rank, scaling, x):
    h = x
    last = len(weights) - 1
    for i, (a, b) in enumerate(_adapters(params, dims, offsets, rank)):
        z = h @ weights[i].T + biases[i] + scaling * ((h @ a.T) @ b.T)
        h = np.tanh(z) if i < last else z
    return h


def mlp_loss_grad(weights, biases, params, dims, offsets, rank, scaling, x, labels, dropout_masks=None):
    adapters = list(_adapters(params, dims, offsets, rank))
    last = len(weights) - 1
    acts = [x]
    lowrank = []
    adapter_in = []
    h = x
    for i, (a, b) in enumerate(adapters):
        hd = h if dropout_masks is None else h * dropout_masks[i]
        adapter_in.append(hd)
        u = hd @ a.T
        z = h @ weights[i].T + biases[i] + scaling * (u @ b.T)
        lowrank.append(u)
        h = np.tanh(z) if i < last else z
        acts.append(h)

    logits = acts[-1]
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))

    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    dz = probs / n

    grad = np.empty_like(params)
    for i in range(last, -1, -1):
        a, b = adapters[i]
        d_in, d_out = dims[i]
        off = offsets[i]
        h_in = acts[i]
        dzb = dz @ b
        grad[off:off + rank * d_in] = (scaling * (dzb.T @ adapter_in[i])).ravel()
        grad[off + rank * d_in:off + rank * (d_in + d_out)] = (scaling * (dz.T @ lowrank[i])).ravel()
        if i > 0:
            dlow = scaling * (dzb @ a)
            if dropout_masks is not None:
                dlow *= dropout_masks[i]
            dh = dz @ weights[i] + dlow
            dz = dh * (1.0 - h_in * h_in)
    return loss, grad
