"""Independent ELBO evaluation over stacks of parameter vectors.

Central differences need two loss evaluations per parameter. Evaluating the
perturbed copies together (one batched matmul per layer) keeps an exhaustive check
over every parameter cheap. The loss here is written from the formulas, not
from the package, so it doubles as a cross-check of the package's loss.
"""

import numpy as np

LEAK = 0.01
LOG2PI = np.log(2 * np.pi)
BOUND = 10.0


def stacked_mlp(sizes, P, x, signs=None):
    """Forward ``x`` (B, in) or (S, B, in) through S parameter vectors ``P`` (S, n).

    Hidden pre-activation signs are appended to ``signs`` as (S, -1) arrays.
    """
    S = P.shape[0]
    h = np.broadcast_to(x, (S,) + x.shape[-2:]) if x.ndim == 2 else x
    off = 0
    last = len(sizes) - 2
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = P[:, off:off + a * b].reshape(S, a, b)
        off += a * b
        bias = P[:, off:off + b]
        off += b
        h = np.matmul(h, W) + bias[:, None, :]
        if k != last:
            if signs is not None:
                signs.append((h > 0).reshape(S, -1))
            h = np.where(h > 0, h, LEAK * h)
    return h


def _gauss(out, width):
    mean = out[..., :width]
    logvar = BOUND * np.tanh(out[..., width:] / BOUND)
    return mean, logvar


def _kl(mq, lvq, mp, lvp):
    return 0.5 * (lvp - lvq + (np.exp(lvq) + (mq - mp) ** 2) / np.exp(lvp) - 1.0)


def _cat(S, *parts):
    B = parts[0].shape[-2]
    return np.concatenate([np.broadcast_to(p, (S, B, p.shape[-1])) for p in parts], axis=-1)


def node_loss(model, j, P, s, u, eps):
    """Negative per-node ELBO for each row of ``P`` (the node's enc|prior|dec params),
    plus the hidden-unit sign pattern of each row."""
    node = model.nodes[j]
    cfg = model.cfg
    S = P.shape[0]
    ne, npr = node.encoder.params.size, node.prior.params.size
    Pe, Pp, Pd = P[:, :ne], P[:, ne:ne + npr], P[:, ne + npr:]
    pa = s[:, list(node.parents)]
    xj = s[:, [j]]
    sg = []
    mq, lvq = _gauss(stacked_mlp(node.encoder.sizes, Pe, _cat(S, pa, xj, u), sg), 1)
    p_in = _cat(S, pa, u) if cfg.prior_parents else _cat(S, u)
    mp, lvp = _gauss(stacked_mlp(node.prior.sizes, Pp, p_in, sg), 1)
    z = mq + np.exp(0.5 * lvq) * eps[None, :, None]
    d_in = _cat(S, z, pa, u) if cfg.decoder_label else _cat(S, z, pa)
    xhat = stacked_mlp(node.decoder.sizes, Pd, d_in, sg)
    rec = -0.5 * ((xj - xhat) ** 2 / cfg.obs_var + np.log(cfg.obs_var) + LOG2PI)
    kl = _kl(mq, lvq, mp, lvp)
    loss = -(rec.mean(axis=(1, 2)) - cfg.kl_weight * kl.mean(axis=(1, 2)))
    return loss, np.concatenate(sg, axis=1)


def flat_loss(model, P, s, u, eps):
    cfg = model.cfg
    S = P.shape[0]
    N = s.shape[1]
    ne, npr = model.encoder.params.size, model.prior.params.size
    Pe, Pp, Pd = P[:, :ne], P[:, ne:ne + npr], P[:, ne + npr:]
    sg = []
    mq, lvq = _gauss(stacked_mlp(model.encoder.sizes, Pe, _cat(S, s, u), sg), N)
    mp, lvp = _gauss(stacked_mlp(model.prior.sizes, Pp, _cat(S, u), sg), N)
    z = mq + np.exp(0.5 * lvq) * eps[None]
    xhat = stacked_mlp(model.decoder.sizes, Pd, _cat(S, z, u), sg)
    rec = -0.5 * ((s - xhat) ** 2 / cfg.obs_var + np.log(cfg.obs_var) + LOG2PI)
    kl = _kl(mq, lvq, mp, lvp)
    loss = -(rec.sum(axis=2) - cfg.kl_weight * kl.sum(axis=2)).mean(axis=1)
    return loss, np.concatenate(sg, axis=1)


def fd_errors(loss_of, base, grad, h=1e-5, chunk=256):
    """Central differences of ``loss_of`` (stacked) at ``base``.

    Returns (max relative error vs ``grad``, loss at base, skipped count).
    A parameter is skipped when either perturbation flips the sign of some
    leaky-ReLU pre-activation: the difference quotient then straddles a kink
    and says nothing about the derivative.
    """
    n = base.size
    worst = 0.0
    skipped = 0
    base_val, base_sig = loss_of(base[None])
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        m = idx.size
        P = np.repeat(base[None], 2 * m, axis=0)
        P[np.arange(m), idx] += h
        P[m + np.arange(m), idx] -= h
        vals, sig = loss_of(P)
        same = np.all(sig == base_sig, axis=1)
        ok = same[:m] & same[m:]
        skipped += int(m - ok.sum())
        num = (vals[:m] - vals[m:]) / (2 * h)
        ana = grad[idx]
        rel = np.abs(num - ana) / np.maximum(1.0, np.maximum(np.abs(num), np.abs(ana)))
        if ok.any():
            worst = max(worst, float(rel[ok].max()))
    return worst, float(base_val[0]), skipped
