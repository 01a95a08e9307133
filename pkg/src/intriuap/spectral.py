"""Top singular pairs of linear layers and Lipschitz certificates."""
import logging
from dataclasses import dataclass, field

import numpy as np

from intriuap import linops
from intriuap.autodiff import ContractError
from intriuap.model import LINEAR_KINDS, forward

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 500
DEFAULT_BLOCK = 8


class NonFiniteOperator(ArithmeticError):
    pass


@dataclass
class SingularPair:
    layer_id: str
    sigma_max: float
    v_max: np.ndarray
    iterations: int
    residual: float
    converged: bool = True
    degenerate: bool = False


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v)


def power_iteration(view, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, seed=0,
                    block_size=DEFAULT_BLOCK, burn_in=3):
    """Largest singular value/right vector by power iteration on ``A^T A``.

    A block of ``block_size`` vectors is iterated and orthonormalized each
    step; the top pair is read off by a Rayleigh-Ritz projection. With
    ``block_size=1`` this is the textbook ``v <- A^T A v / |A^T A v|``.
    Clustered top singular values (the norm for convolutions) stall a single
    vector on a plateau; the block only has to separate sigma_1 from
    sigma_{block+1}.

    Stops when sigma's relative change and the estimated remaining geometric
    tail are both at most ``tol``. A zero operator yields ``degenerate=True``
    with sigma 0 instead of raising.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    rng = np.random.default_rng(seed)
    n = view.in_size
    k = max(1, min(int(block_size), n))
    geom = tuple(view.in_geometry)
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    sigma_prev = None
    delta_prev = None
    sigma = 0.0
    v = q[:, 0]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        aq = view.apply(q.T.reshape((k,) + geom)).reshape(k, -1)
        gram = aq @ aq.T
        if not np.all(np.isfinite(gram)):
            raise NonFiniteOperator(f"{view.layer_id}: non-finite values in A v at iteration {it}")
        evals, evecs = np.linalg.eigh((gram + gram.T) / 2)
        lam = max(float(evals[-1]), 0.0)
        sigma = float(np.sqrt(lam))
        v = q @ evecs[:, -1]
        if lam == 0.0:
            if it >= burn_in:
                return SingularPair(view.layer_id, 0.0, _unit(rng, geom), it, 0.0, False, True)
            q, _ = np.linalg.qr(rng.standard_normal((n, k)))
            continue
        w = view.adjoint(aq.reshape((k,) + tuple(view.out_geometry))).reshape(k, -1).T
        # exact singular vector: nothing left to iterate
        if np.linalg.norm(w @ evecs[:, -1] - lam * v) <= tol * lam:
            converged = True
            break
        q, _ = np.linalg.qr(w)
        if sigma_prev is not None:
            delta = abs(sigma - sigma_prev)
            # sigma rises geometrically towards its limit; bound the remaining
            # tail delta * r / (1 - r) with r estimated from successive steps
            r = min(delta / delta_prev, 0.999999) if delta_prev else 0.0
            if delta <= tol * sigma and delta * r / (1 - r) <= tol * sigma:
                converged = True
                break
            delta_prev = delta
        sigma_prev = sigma
    v = v.reshape(geom) / np.linalg.norm(v)
    sigma = float(np.linalg.norm(view.apply(v)))
    residual = float(np.linalg.norm(view.normal(v) - sigma ** 2 * v))
    if not converged:
        log.warning("power iteration on %s hit max_iters=%d", view.layer_id, max_iters)
    return SingularPair(view.layer_id, sigma, v, it, residual, converged, False)


def dense_svd_max(op, cap=linops.DEFAULT_DENSE_CAP):
    """Exact top singular pair of a dense operator via the smaller Gram matrix."""
    a = np.asarray(op.matrix, dtype=np.float64)
    if a.size > cap:
        raise linops.MemoryCapExceeded(f"matrix {a.shape} exceeds cap of {cap} entries")
    rows, cols = a.shape
    if cols <= rows:
        evals, evecs = np.linalg.eigh(a.T @ a)
        v = evecs[:, -1]
    else:
        evals, evecs = np.linalg.eigh(a @ a.T)
        u = evecs[:, -1]
        v = a.T @ u
        n = np.linalg.norm(v)
        v = v / n if n > 0 else np.eye(cols)[0]
    sigma = float(np.linalg.norm(a @ v))
    return sigma, v.reshape(op.in_geometry)


def oracle_sigma(model, layer_id, cap=linops.DEFAULT_DENSE_CAP):
    """Independent sigma_max of a layer: closed form for BatchNorm, dense SVD otherwise.

    Raises :class:`~intriuap.linops.MemoryCapExceeded` when the dense matrix is too large.
    """
    n = model.node(layer_id)
    if n.kind == "BatchNorm":
        return float(np.max(np.abs(linops.batchnorm_scale(n.params["gamma"], n.params["moving_var"],
                                                          n.eps))))
    return dense_svd_max(linops.materialize_layer(model, layer_id, cap), cap)[0]


def layer_singular_pairs(model, layers=None, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, seed=0):
    """Singular pairs for ``layers`` (default: all linear layers), in model order."""
    layers = list(model.linear_layer_order if layers is None else layers)
    m64 = model.astype(np.float64)
    return [power_iteration(linops.view_linear_layer(m64, lid), tol, max_iters, seed + i)
            for i, lid in enumerate(layers)]


@dataclass
class LipschitzCertificate:
    sigmas: list
    product_bound: float
    graph_bound: float
    probe_max: float
    probes: int
    violations: int = 0
    graph_violations: int = 0
    layer_ids: list = field(default_factory=list)


def graph_lipschitz_bound(model, sigmas):
    """Propagate Lipschitz bounds through the graph.

    Linear nodes multiply by their sigma, 1-Lipschitz nodes pass the bound
    through, residual adds sum the branch bounds and concatenation combines
    them in quadrature. Coincides with the plain product on chains.
    """
    bound = {"input": 1.0}
    for n in model.nodes:
        ins = [bound[i] for i in n.inputs]
        if n.kind in LINEAR_KINDS:
            bound[n.id] = sigmas[n.id] * ins[0]
        elif n.kind == "ResidualAdd":
            bound[n.id] = float(sum(ins))
        elif n.kind == "Concat":
            bound[n.id] = float(np.sqrt(sum(b * b for b in ins)))
        else:
            bound[n.id] = ins[0]
    return bound[model.nodes[-1].id]


def probe_lipschitz(model, probes=1000, seed=0, scales=(1e-3, 1e-1, 1.0), batch=250):
    """Largest ``|f(x) - f(y)| / |x - y|`` over random pairs ``y = x + s u``."""
    rng = np.random.default_rng(seed)
    m64 = model.astype(np.float64)
    worst = 0.0
    ratios = []
    done = 0
    while done < probes:
        b = min(batch, probes - done)
        x = rng.uniform(0.0, 1.0, (b,) + model.input_shape)
        u = rng.standard_normal(x.shape)
        u /= np.linalg.norm(u.reshape(b, -1), axis=1).reshape((b,) + (1,) * len(model.input_shape))
        s = np.asarray(scales)[rng.integers(0, len(scales), b)]
        d = u * s.reshape((b,) + (1,) * len(model.input_shape))
        fx = forward(m64, x).logits.value
        fy = forward(m64, x + d).logits.value
        r = np.linalg.norm(fx - fy, axis=1) / np.linalg.norm(d.reshape(b, -1), axis=1)
        ratios.append(r)
        worst = max(worst, float(r.max()))
        done += b
    return worst, np.concatenate(ratios)


def lipschitz_product_bound(model, pairs=None, probes=1000, seed=0, **kw):
    """Certificate: product of per-layer sigma_max versus probed local ratios."""
    pairs = pairs if pairs is not None else layer_singular_pairs(model, **kw)
    sig = {p.layer_id: p.sigma_max for p in pairs}
    missing = [lid for lid in model.linear_layer_order if lid not in sig]
    if missing:
        raise ContractError(f"singular pairs missing for layers {missing}")
    sigmas = [sig[lid] for lid in model.linear_layer_order]
    product = float(np.prod(sigmas))
    gbound = graph_lipschitz_bound(model, sig)
    probe_max, ratios = probe_lipschitz(model, probes, seed) if probes else (0.0, np.zeros(0))
    return LipschitzCertificate(sigmas, product, gbound, probe_max, int(probes),
                                int(np.sum(ratios > product)), int(np.sum(ratios > gbound)),
                                list(model.linear_layer_order))


def verify_max_direction(pair, view, trials=1000, seed=0, rtol=1e-6):
    """Check that no random unit direction beats ``|A v_max|`` by more than ``rtol``."""
    if trials < 100:
        raise ContractError("trials must be >= 100")
    rng = np.random.default_rng(seed)
    best = float(np.linalg.norm(view.apply(pair.v_max)))
    limit = best * (1 + rtol)
    for s in range(0, trials, 100):
        b = min(100, trials - s)
        u = rng.standard_normal((b,) + tuple(view.in_geometry))
        u /= np.linalg.norm(u.reshape(b, -1), axis=1).reshape((b,) + (1,) * len(view.in_geometry))
        norms = np.linalg.norm(view.apply(u).reshape(b, -1), axis=1)
        if np.any(norms > limit):
            return False
    return True
