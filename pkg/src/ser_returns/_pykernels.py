"""Reference kernels in plain Python/NumPy.

These are the fallback path when the compiled ``_ckernels`` extension is not
built. They share signatures and float semantics with the Cython versions so
that the Gibbs sweep produces identical assignments under either backend.
"""
import numpy as np


def masked_softmax_fwd(x, mask):
    """Row softmax of ``x`` (B, R, C) over entries where ``mask`` (B, R, C) is set.

    Rows with no set entry come back as all zeros.
    """
    keep = mask.astype(bool)
    shifted = np.where(keep, x, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(np.where(keep, x, 0.0) - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    return out


def masked_softmax_bwd(s, grad):
    """Vector-Jacobian product of the masked softmax given its output ``s``."""
    inner = (grad * s).sum(axis=-1, keepdims=True)
    return s * (grad - inner)


def gibbs_sweep(words, docs, z, n_dk, n_kw, n_k, uniforms, alpha, beta):
    """One collapsed-Gibbs pass over every token, updating counts in place.

    ``uniforms`` holds one U(0, 1) draw per token; the new topic is the first
    index whose cumulative unnormalised weight exceeds ``u * total``.
    """
    K = n_k.shape[0]
    V = n_kw.shape[1]
    vbeta = V * beta
    p = [0.0] * K
    for i in range(words.shape[0]):
        w = int(words[i])
        d = int(docs[i])
        k_old = int(z[i])
        n_dk[d, k_old] -= 1
        n_kw[k_old, w] -= 1
        n_k[k_old] -= 1
        total = 0.0
        for k in range(K):
            total += (n_dk[d, k] + alpha) * (n_kw[k, w] + beta) / (n_k[k] + vbeta)
            p[k] = total
        target = uniforms[i] * total
        k_new = K - 1
        for k in range(K):
            if p[k] > target:
                k_new = k
                break
        z[i] = k_new
        n_dk[d, k_new] += 1
        n_kw[k_new, w] += 1
        n_k[k_new] += 1
