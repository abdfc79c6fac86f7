"""Independent oracles shared by the unit tests and the acceptance suite."""
import math
from fractions import Fraction

import numpy as np
from scipy import sparse

from osmhedge import nn
from osmhedge.closed_form import margrabe
from osmhedge.hedging import lsqr_batched
from osmhedge.risk import risk_measures

# output shapes of the solver networks: Y (J,), Z (J, d), Gamma (J, d, d)
SHAPES = [(d, shape) for d in (1, 2, 5) for J in (1, 3)
          for shape in ((J,), (J, d), (J, d, d))]


def _loss_and_grads(params, x, w_out):
    out, cache = nn.forward(params, x, training=True, update_stats=False)
    grads, dx = nn.backward(params, cache, w_out)
    return float(np.sum(out * w_out)), grads, dx


def _central(f, arr, i, h):
    flat = arr.reshape(-1)
    old = flat[i]
    flat[i] = old + h
    lp = f()
    flat[i] = old - h
    lm = f()
    flat[i] = old
    return (lp - lm) / (2 * h)


def gradient_check(spec, seed=0, n=7, h=1e-5, per_array=6):
    """Relative mismatch ||g - fd|| / max(||g||, ||fd||) between backprop and
    central differences over sampled parameter and input coordinates."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)
    for k in params.weights:
        params.weights[k] = params.weights[k] + 0.1 * rng.standard_normal(params.weights[k].shape)
    x = rng.normal(size=(n, spec.input_dim))
    w_out = rng.normal(size=(n,) + spec.output_shape)
    _, grads, dx = _loss_and_grads(params, x, w_out)
    f = lambda: _loss_and_grads(params, x, w_out)[0]
    bp, fd = [], []
    for k, w in params.weights.items():
        for i in rng.choice(w.size, size=min(w.size, per_array), replace=False):
            bp.append(grads[k].reshape(-1)[i])
            fd.append(_central(f, w, i, h))
    for i in rng.choice(x.size, size=min(x.size, per_array), replace=False):
        bp.append(dx.reshape(-1)[i])
        fd.append(_central(f, x, i, h))
    bp, fd = np.array(bp), np.array(fd)
    return np.linalg.norm(bp - fd) / max(np.linalg.norm(bp), np.linalg.norm(fd))


def lsqr_dense(A, b, **kw):
    """Run the batched solver on dense systems by listing every nonzero."""
    A = np.atleast_3d(A) if A.ndim == 2 else A
    rows, cols = np.nonzero(np.any(A != 0, axis=0))
    return lsqr_batched(rows, cols, A[:, rows, cols], b, A.shape[2], **kw)


def random_sparse_system(rng):
    m, n = int(rng.integers(2, 201)), int(rng.integers(1, 121))
    density = rng.uniform(0.05, 0.5)
    A = sparse.random(m, n, density=density, random_state=rng, data_rvs=rng.standard_normal).toarray()
    if rng.random() < 0.3:
        # rank deficient: duplicate a column
        k = int(rng.integers(0, n))
        A[:, (k + 1) % n] = A[:, k]
    if not A.any():
        A[0, 0] = 1.0
    return A, rng.standard_normal(m)


def lsqr_agreement(n_systems=100, seed=0):
    """Largest relative gap to the pseudoinverse solution over random systems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_systems):
        A, b = random_sparse_system(rng)
        ref = np.linalg.pinv(A) @ b
        r = lsqr_dense(A[None], b[None], atol=1e-14, btol=1e-14, max_iter=20 * A.shape[1] + 50)
        worst = max(worst, np.linalg.norm(r.x[0] - ref) / max(np.linalg.norm(ref), 1e-300))
    return worst


def brute_force(values, alpha):
    """Sort-based VaR/ES/semivariance with exact rational tail index."""
    xs = sorted(float(v) for v in values)
    n = len(xs)
    k = math.ceil((1 - Fraction(str(alpha))) * n)
    var = xs[max(k, 1) - 1]
    tail = [v for v in xs if v < var]
    es = sum(tail) / len(tail) if tail else var
    mu = sum(xs) / n
    below = [(v - mu) ** 2 for v in xs if v < mu]
    svar = sum(below) / len(below) if below else 0.0
    return var, es, svar


def risk_oracle_gap(n_samples=1000, seed=0):
    """Largest gap between risk_measures and the brute-force oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        n = int(rng.integers(20, 400))
        x = rng.standard_t(3, size=n) * rng.uniform(0.01, 2)
        if rng.random() < 0.2:
            x = np.round(x, 1)  # ties
        rep = risk_measures(x)
        for a in (0.95, 0.99):
            var, es, svar = brute_force(x, a)
            worst = max(worst, abs(rep.var_at(a) - var), abs(rep.es_at(a) - es),
                        abs(rep.semivariance - svar) / max(svar, 1e-300) * 1e-6)
    return worst


def random_margrabe_params(rng):
    return dict(S_k=rng.uniform(60, 140), S_j=rng.uniform(60, 140), K=rng.uniform(0.7, 1.3),
                sigma_k=rng.uniform(0.1, 0.5), sigma_j=rng.uniform(0.1, 0.5),
                rho=rng.uniform(-0.8, 0.8), q_k=rng.uniform(0, 0.05), q_j=rng.uniform(0, 0.05),
                tau=rng.uniform(0.25, 4.0))


def margrabe_fd_errors(p):
    """Largest relative gap between the six analytic derivatives and central
    differences of the price (step 1e-3 S)."""
    f = lambda a, b: float(margrabe(a, b, *[p[k] for k in ("K", "sigma_k", "sigma_j", "rho", "q_k", "q_j", "tau")]).price)
    Sk, Sj = p["S_k"], p["S_j"]
    hk, hj = 1e-3 * Sk, 1e-3 * Sj
    e = margrabe(Sk, Sj, *[p[k] for k in ("K", "sigma_k", "sigma_j", "rho", "q_k", "q_j", "tau")])
    fd = {
        "dk": (f(Sk + hk, Sj) - f(Sk - hk, Sj)) / (2 * hk),
        "dj": (f(Sk, Sj + hj) - f(Sk, Sj - hj)) / (2 * hj),
        "dkk": (f(Sk + hk, Sj) - 2 * f(Sk, Sj) + f(Sk - hk, Sj)) / hk ** 2,
        "djj": (f(Sk, Sj + hj) - 2 * f(Sk, Sj) + f(Sk, Sj - hj)) / hj ** 2,
    }
    cross = (f(Sk + hk, Sj + hj) - f(Sk + hk, Sj - hj) - f(Sk - hk, Sj + hj)
             + f(Sk - hk, Sj - hj)) / (4 * hk * hj)
    fd["dkj"] = fd["djk"] = cross
    return {k: abs(float(getattr(e, k)) - v) / max(abs(v), 1e-12) for k, v in fd.items()}
