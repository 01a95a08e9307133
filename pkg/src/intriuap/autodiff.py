"""Tape-based reverse-mode differentiation.

A :class:`Tape` records primitive ops in execution order. Values are plain
numpy arrays wrapped in :class:`Var`. An op only records a node when at least
one input requires a gradient, so forward passes without a tape (or with only
constant inputs) run at plain numpy speed.
"""
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class Var:
    __slots__ = ("value", "tape", "id", "requires_grad")

    def __init__(self, value, tape=None, id=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Var(id={self.id}, shape={self.value.shape}{rg})"


@dataclass
class _Node:
    out: int
    parents: tuple
    backward: object


@dataclass
class Tape:
    """Single-owner record of a computation. Not safe to share across threads."""

    nodes: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    _next: int = 0

    def _new_id(self):
        i = self._next
        self._next += 1
        return i

    def leaf(self, value, requires_grad=True):
        v = Var(np.asarray(value), self, self._new_id(), requires_grad)
        self.values[v.id] = v.value
        return v

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    def record(self, value, parents, backward):
        v = Var(value, self, self._new_id(), True)
        self.values[v.id] = value
        self.nodes.append(_Node(v.id, tuple(parents), backward))
        return v


def as_var(x):
    return x if isinstance(x, Var) else Var(np.asarray(x))


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def emit(value, parents, backward):
    """Wrap an op result, recording it when any parent needs a gradient.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    tape = None
    for p in parents:
        if isinstance(p, Var) and p.requires_grad and p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    return tape.record(value, parents, backward)


def backward(tape, loss, wrt=None):
    """Gradients of the scalar ``loss`` w.r.t. leaves on ``tape``.

    ``wrt`` is an iterable of Vars (or ids); when None, every leaf that
    requires a gradient is returned. Returns ``{id: ndarray}``.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not isinstance(p, Var) or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    if wrt is None:
        produced = {n.out for n in tape.nodes}
        leaf_ids = {i for i in tape.values if i not in produced}
        return {i: g for i, g in grads.items() if i in leaf_ids}
    out = {}
    for w in wrt:
        i = w.id if isinstance(w, Var) else w
        out[i] = grads.get(i, np.zeros_like(tape.values[i]))
    return out


def grad_check(fn, point, step=1e-6, kink_tol=1e-6, return_excluded=False):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a Var to a scalar Var. Coordinates where the forward and
    backward one-sided slopes disagree (a kink inside the step window) are
    excluded. The relative error uses a rounding floor in the denominator so
    coordinates with gradients below the finite-difference noise level are
    judged absolutely.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x0)
    out = fn(xv)
    analytic = backward(tape, out, [xv])[xv.id].ravel()

    f0 = float(value_of(fn(Var(x0))))
    flat = x0.ravel()
    eps = np.finfo(np.float64).eps
    errs = []
    excluded = []
    for j in range(flat.size):
        xp = flat.copy()
        xp[j] += step
        xm = flat.copy()
        xm[j] -= step
        fp = float(value_of(fn(Var(xp.reshape(x0.shape)))))
        fm = float(value_of(fn(Var(xm.reshape(x0.shape)))))
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        noise = 2 * eps * max(abs(fp), abs(fm), abs(f0)) / step
        if abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd)) + 10 * noise:
            excluded.append(j)
            continue
        central = (fp - fm) / (2 * step)
        tiny = 1e6 * noise + 1e-300
        errs.append(abs(analytic[j] - central) / (abs(analytic[j]) + abs(central) + tiny))
    err = max(errs) if errs else 0.0
    if return_excluded:
        return err, excluded
    return err
