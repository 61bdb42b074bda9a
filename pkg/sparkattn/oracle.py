"""Dense binary64 reference attention, its gradients and error metrics."""
import numpy as np

from .exceptions import DimensionMismatch, InvalidValue, VerificationFailed
from .prng import dropout_scale, dropout_uniform

__all__ = [
    "attention_ref",
    "attention_grad_ref",
    "output_loss",
    "finite_diff_grad",
    "error_metrics",
    "verify",
    "REL_FLOOR",
]

REL_FLOOR = 1e-6


def _check(cfg, **tensors):
    out = []
    for name, x in tensors.items():
        x = np.asarray(x, dtype=np.float64)
        if x.shape != cfg.shape:
            raise DimensionMismatch(f"{name} must have shape {cfg.shape}; got {x.shape}")
        out.append(x)
    return out


def _keep_scale(cfg):
    """Dropout multiplier ``keep / (1 - p)`` over the whole score grid, or 1."""
    if cfg.dropout_p == 0:
        return 1.0
    b = np.arange(cfg.batch, dtype=np.uint64)[:, None, None, None]
    h = np.arange(cfg.heads, dtype=np.uint64)[None, :, None, None]
    n = np.arange(cfg.seq_len, dtype=np.uint64)
    keep = dropout_uniform(cfg.seed, b, h, n[:, None], n[None, :]) >= cfg.dropout_p
    return keep * dropout_scale(cfg.dropout_p)


def attention_ref(Q, K, V, cfg):
    """Return ``(O, P, lse)``; ``P`` is the softmax before dropout.

    >>> from sparkattn.config import AttnConfig
    >>> cfg = AttnConfig(seq_len=8, head_dim=4)
    >>> V = np.random.default_rng(0).standard_normal(cfg.shape)
    >>> O, P, lse = attention_ref(np.zeros(cfg.shape), np.zeros(cfg.shape), V, cfg)
    >>> bool(np.allclose(P, 1 / 8)), bool(np.allclose(O, V.mean(axis=2, keepdims=True)))
    (True, True)
    """
    Q, K, V = _check(cfg, Q=Q, K=K, V=V)
    s = cfg.scale * np.einsum("bhnd,bhmd->bhnm", Q, K)
    if cfg.causal:
        s = np.where(np.triu(np.ones(s.shape[-2:], dtype=bool), 1), -np.inf, s)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    l = e.sum(axis=-1, keepdims=True)  # noqa: E741
    P = e / l
    O = (P * _keep_scale(cfg)) @ V
    return O, P, (m + np.log(l))[..., 0]


def attention_grad_ref(Q, K, V, dO, cfg):
    """Analytic ``(dQ, dK, dV)`` of ``sum(O * dO)``."""
    Q, K, V, dO = _check(cfg, Q=Q, K=K, V=V, dO=dO)
    _, P, _ = attention_ref(Q, K, V, cfg)
    z = _keep_scale(cfg)
    dV = np.swapaxes(P * z, -1, -2) @ dO
    dP = (dO @ np.swapaxes(V, -1, -2)) * z
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dQ = cfg.scale * dS @ K
    dK = cfg.scale * np.swapaxes(dS, -1, -2) @ Q
    return dQ, dK, dV


def output_loss(Q, K, V, dO, cfg):
    """``sum(O * dO)``, whose gradients ``attention_grad_ref`` returns."""
    O, _, _ = attention_ref(Q, K, V, cfg)
    return float((O * np.asarray(dO, dtype=np.float64)).sum())


def finite_diff_grad(loss, x, eps=1e-5):
    """Central-difference gradient of the scalar function ``loss`` at ``x``.

    >>> g = finite_diff_grad(lambda v: float((v**2).sum()), np.array([1.0, -2.0]))
    >>> bool(np.allclose(g, [2.0, -4.0], atol=1e-8))
    True
    """
    if not eps > 0:
        raise InvalidValue(f"eps must be positive; got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        saved = x[idx]
        x[idx] = saved + eps
        fplus = loss(x)
        x[idx] = saved - eps
        fminus = loss(x)
        x[idx] = saved
        grad[idx] = (fplus - fminus) / (2 * eps)
    return grad


def error_metrics(test, reference):
    """Element-wise relative and absolute errors, plus the norm-relative error.

    Element relative error is ``|t - r| / max(|r|, 1e-6)``; ``norm_rel`` is
    ``||t - r|| / ||r||`` over the whole tensor.  Outputs of random attention
    cross zero, so the element statistics are dominated by a few entries
    with tiny references; ``norm_rel`` is the one pass/fail checks use.

    >>> r = np.ones(4)
    >>> m = error_metrics(1.001 * r, r)
    >>> round(m["mean_rel"], 9), round(m["max_abs"], 9)
    (0.001, 0.001)
    """
    t = np.asarray(test, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if t.shape != r.shape:
        raise DimensionMismatch(f"cannot compare shapes {t.shape} and {r.shape}")
    diff = np.abs(t - r)
    rel = diff / np.maximum(np.abs(r), REL_FLOOR)
    return {
        "mean_rel": float(rel.mean()),
        "max_rel": float(rel.max()),
        "mean_abs": float(diff.mean()),
        "max_abs": float(diff.max()),
        "norm_rel": float(np.linalg.norm(diff) / max(np.linalg.norm(r), REL_FLOOR)),
    }


def verify(metrics, tolerance, what="result", key="norm_rel"):
    """Raise ``VerificationFailed`` when ``metrics[key]`` exceeds ``tolerance``."""
    if not metrics[key] <= tolerance:
        raise VerificationFailed(f"{what}: {key} {metrics[key]:.3e} exceeds {tolerance:.3e}")
    return metrics
