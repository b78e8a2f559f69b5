import numpy as np

LOG_FLOOR = 1e-12


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)`` where ``dlogits = (probs - onehot) / N``.
    """
    if not np.isfinite(logits).all():
        raise FloatingPointError("softmax_cross_entropy: non-finite logits")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    grad = probs.copy()
    grad[rows, labels] -= 1
    return loss, probs, grad / n


def floored_log(p):
    """log(max(p, 1e-12)) with its derivative and the number of floored entries."""
    floored = p < LOG_FLOOR
    safe = np.where(floored, LOG_FLOOR, p)
    dlog = np.where(floored, 0.0, 1.0 / safe).astype(p.dtype)
    return np.log(safe), dlog, int(floored.sum())


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
