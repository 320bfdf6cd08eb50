"""Shared helpers: independent oracle implementations and instance builders.

The oracles here deliberately avoid the package's vectorized code paths:
similarity goes through explicit projector/centering matrices, losses
through per-sample, per-class scalar loops.  Tests compare the package
against these.
"""

import numpy as np

from compset import ClassifierWeights, FeatureBatch, PrimitiveBank


def center_oracle(m: np.ndarray) -> np.ndarray:
    """Row centering via the explicit projector J = I - (1/d) 11^T."""
    m = np.asarray(m, dtype=np.float64)
    d = m.shape[1]
    j = np.eye(d) - np.ones((d, d)) / d
    return m @ j


def cka_oracle(x: np.ndarray, z: np.ndarray) -> float:
    """Direct evaluation: ||Xc Zc^T||_F^2 / (||Xc Xc^T||_F ||Zc Zc^T||_F)."""
    xc = center_oracle(x)
    zc = center_oracle(z)
    num = np.linalg.norm(xc @ zc.T) ** 2
    den = np.linalg.norm(xc @ xc.T) * np.linalg.norm(zc @ zc.T)
    return float(num / den)


def cka_rc_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Gram/centering evaluation with explicit H, tr-form HSIC."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nb = a.shape[0]
    h = np.eye(nb) - np.ones((nb, nb)) / nb
    k = a @ a.T
    l = b @ b.T
    hsic = lambda p, q: np.trace(p @ h @ q @ h) / (nb - 1) ** 2  # noqa: E731
    return float(hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l)))


def power_oracle(x: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    flat = np.asarray(x, dtype=np.float64).ravel()
    for i, v in enumerate(flat):
        out.ravel()[i] = (1.0 if v >= 0 else -1.0) * abs(v) ** alpha if v != 0 else 0.0
    return out


def softmax_ce_oracle(logits, label: int) -> float:
    """Scalar cross entropy from raw logits, direct formula."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    p = np.exp(logits - m)
    p /= p.sum()
    return float(-np.log(p[label]))


def cosine_oracle(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def attention_oracle(p_row: np.ndarray, donors: np.ndarray, gamma: float) -> np.ndarray:
    """Attention of one target row over donor rows, direct softmax."""
    sq = ((donors - p_row) ** 2).sum(axis=1)
    logits = -gamma * sq
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def replaced_block_oracle(block: np.ndarray, donors: np.ndarray, gamma: float) -> np.ndarray:
    return np.stack([attention_oracle(row, donors, gamma) @ donors for row in block])


def random_pair(rng: np.random.Generator, n=None, big_n=None, d=None):
    """One random (X, Z) pair in the acceptance ranges."""
    n = int(rng.integers(1, 65)) if n is None else n
    big_n = int(rng.integers(1, 17)) if big_n is None else big_n
    d = int(rng.integers(2, 129)) if d is None else d
    return rng.standard_normal((n, d)), rng.standard_normal((big_n, d))


def random_model(rng: np.random.Generator, n_classes=3, n_primitives=4, channels=6):
    """Unfrozen bank + weights over classes 0..n_classes-1."""
    ids = list(range(n_classes))
    bank = PrimitiveBank(
        ids, rng.standard_normal((n_classes, n_primitives, channels)), np.zeros(n_classes, bool)
    )
    weights = ClassifierWeights(
        ids, rng.standard_normal((n_classes, channels)), np.zeros(n_classes, bool)
    )
    return bank, weights


def random_batch(rng: np.random.Generator, n_classes=3, batch=4, patches=5, channels=6, nonneg=True):
    x = rng.standard_normal((batch, patches, channels))
    if nonneg:
        x = np.abs(x)
    labels = rng.integers(0, n_classes, batch)
    return FeatureBatch(
        X=x,
        labels=labels,
        sessions=np.zeros(batch, dtype=int),
        sample_ids=[f"r{i}" for i in range(batch)],
    )


def pack_params(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.concatenate([w.ravel(), z.ravel()])


def unpack_params(theta: np.ndarray, w_shape, z_shape):
    nw = int(np.prod(w_shape))
    return theta[:nw].reshape(w_shape), theta[nw:].reshape(z_shape)


def auc_score(pos: np.ndarray, neg: np.ndarray) -> float:
    """Exact rank AUC by pairwise comparison (ties count half)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))
