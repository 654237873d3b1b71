"""Numpy implementations of the hot kernels.

Same signatures and return conventions as the compiled ``_kernels`` module;
used when the extension is unavailable or ``FXFRONTIER_PURE=1`` is set.
"""
import numpy as np
from scipy.signal import lfilter
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def log_ndtr_array(x):
    return log_ndtr(np.asarray(x, dtype=float))


def mills(x):
    """phi(x) / Phi(x), stable for large negative x."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI - log_ndtr(x))


def sfa_terms(eps, mu, su2, sv2):
    """Per-observation log-density of the normal / truncated-normal cost error.

    ``eps = y - x'beta`` is the composed residual ``v + u`` with
    ``v ~ N(0, sv2)`` and ``u ~ N+(mu, su2)``.  Returns the log-density and its
    derivatives with respect to ``eps``, ``mu``, ``su2`` and ``sv2``.
    """
    eps = np.asarray(eps, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), eps.shape)
    s2 = su2 + sv2
    s = np.sqrt(s2)
    su = np.sqrt(su2)
    D = np.sqrt(s2 * su2 * sv2)
    r = (eps - mu) / s
    c = (sv2 * mu + su2 * eps) / D
    d = mu / su
    lc = log_ndtr(c)
    ld = log_ndtr(d)
    ll = -_LOG_SQRT_2PI - 0.5 * np.log(s2) - 0.5 * r * r + lc - ld
    lam_c = np.exp(-0.5 * c * c - _LOG_SQRT_2PI - lc)
    lam_d = np.exp(-0.5 * d * d - _LOG_SQRT_2PI - ld)
    g_eps = -r / s + lam_c * su2 / D
    g_mu = r / s + lam_c * sv2 / D - lam_d / su
    common = -0.5 / s2 + 0.5 * r * r / s2
    g_su2 = (common
             + lam_c * (eps / D - 0.5 * c * (su2 + s2) / (s2 * su2))
             + 0.5 * lam_d * d / su2)
    g_sv2 = common + lam_c * (mu / D - 0.5 * c * (sv2 + s2) / (s2 * sv2))
    return ll, g_eps, g_mu, g_su2, g_sv2


def bc_scores(eps, mu, su2, sv2):
    """Battese-Coelli E[exp(-u) | eps] (returned on the log scale) and E[u | eps]."""
    eps = np.asarray(eps, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), eps.shape)
    s2 = su2 + sv2
    mu_star = (sv2 * mu + su2 * eps) / s2
    sig_star = np.sqrt(su2 * sv2 / s2)
    c = mu_star / sig_star
    log_ce = -mu_star + 0.5 * sig_star ** 2 + log_ndtr(c - sig_star) - log_ndtr(c)
    u_hat = mu_star + sig_star * mills(c)
    return log_ce, u_hat


def garch_filter(resid, omega, alpha, beta, h0):
    """Conditional variance h[t] = omega + alpha*r[t-1]^2 + beta*h[t-1], h[0] = h0."""
    r = np.asarray(resid, dtype=float)
    n = r.shape[0]
    h = np.empty(n)
    h[0] = h0
    if n > 1:
        drive = omega + alpha * r[:-1] ** 2
        h[1:] = lfilter([1.0], [1.0, -beta], drive, zi=[beta * h0])[0]
    return h


def garch_loglik_grad(resid, omega, alpha, beta, h0):
    """Gaussian log-likelihood, gradient and per-observation scores in (omega, alpha, beta)."""
    r = np.asarray(resid, dtype=float)
    n = r.shape[0]
    h = garch_filter(r, omega, alpha, beta, h0)
    r2 = r * r
    ll_t = -0.5 * (2.0 * _LOG_SQRT_2PI + np.log(h) + r2 / h)
    dh = np.zeros((n, 3))
    if n > 1:
        drives = (np.ones(n - 1), r2[:-1], h[:-1])
        for k, drive in enumerate(drives):
            dh[1:, k] = lfilter([1.0], [1.0, -beta], drive)
    dl_dh = -0.5 * (1.0 / h - r2 / (h * h))
    scores = dh * dl_dh[:, None]
    return ll_t.sum(), scores.sum(axis=0), scores, h


def _image_kernel(x_eval, x_data, h):
    """Gaussian kernel values with reflection at 0 and 1; shape (len(x_eval), len(x_data))."""
    xe = x_eval[:, None]
    xd = x_data[None, :]
    out = np.exp(-0.5 * ((xe - xd) / h) ** 2)
    out += np.exp(-0.5 * ((xe + xd) / h) ** 2)
    out += np.exp(-0.5 * ((xe - 2.0 + xd) / h) ** 2)
    return out / (h * np.sqrt(2.0 * np.pi))


def lcv_grid(u, v, hu, hv, block=128):
    """Leave-one-out log-likelihood for every (hu[a], hv[b]) bandwidth pair."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    hu = np.asarray(hu, dtype=float)
    hv = np.asarray(hv, dtype=float)
    n = u.shape[0]
    out = np.zeros((hu.size, hv.size))
    for start in range(0, n, block):
        idx = np.arange(start, min(start + block, n))
        A = np.stack([_image_kernel(u[idx], u, h) for h in hu])
        B = np.stack([_image_kernel(v[idx], v, h) for h in hv])
        A[:, np.arange(idx.size), idx] = 0.0
        S = np.einsum("arn,brn->abr", A, B, optimize=True) / (n - 1)
        out += np.log(np.maximum(S, 1e-300)).sum(axis=2)
    return out


def kde_grid(u, v, hu, hv, grid):
    """Reflected product-kernel density on ``grid x grid``; rows index u, columns v."""
    A = _image_kernel(np.asarray(grid, float), np.asarray(u, float), hu)
    B = _image_kernel(np.asarray(grid, float), np.asarray(v, float), hv)
    n = A.shape[1]
    out = np.empty((A.shape[0], B.shape[0]))
    rows = max(1, int(2_000_000 // max(n * B.shape[0], 1)))
    # elementwise product then pairwise sum keeps swap(u, v) an exact transpose
    for s in range(0, A.shape[0], rows):
        out[s:s + rows] = (A[s:s + rows, None, :] * B[None, :, :]).sum(axis=2)
    return out / n
