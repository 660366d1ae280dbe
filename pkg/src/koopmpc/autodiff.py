"""Minimal reverse-mode differentiation tape.

Covers exactly the primitives this package needs: affine maps, tanh,
elementwise arithmetic, dot products, block assembly of problem matrices,
and opaque nodes with externally supplied vector-Jacobian products (used for
the QP solve). Every op accepts plain ndarrays as constants; when no tracked
variable is involved the op evaluates eagerly and returns an ndarray, so the
same assembly code serves both the taped and the plain numeric path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import koopman
from .koopman import KoopmanModel


class Var:
    """A tape-tracked value. Do not mutate ``value`` after creation."""

    __slots__ = ("value", "tape", "idx")

    def __init__(self, value, tape, idx):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _is_var(x):
    return isinstance(x, Var)


class Tape:
    """Operation record for one forward evaluation; single use, single owner."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []
        self.model_vars: "ModelVars | None" = None

    def _record(self, value, parents, vjp) -> Var:
        idx = len(self._parents)
        self._parents.append(tuple(p.idx for p in parents))
        self._vjps.append(vjp)
        return Var(value, self, idx)

    def leaf(self, value) -> Var:
        return self._record(np.asarray(value, dtype=float), (), None)

    def gradients(self, seeds: list[tuple[Var, np.ndarray]]) -> list:
        """Run the reverse sweep; returns a grad slot per node (None if the
        node does not influence any seeded output)."""
        grads: list = [None] * len(self._parents)
        for var, g in seeds:
            if var.tape is not self:
                raise ValueError("seed variable does not belong to this tape")
            g = np.asarray(g, dtype=float)
            if np.shape(g) != np.shape(var.value):
                raise ValueError(
                    f"seed gradient shape {np.shape(g)} != output shape "
                    f"{np.shape(var.value)}")
            grads[var.idx] = g if grads[var.idx] is None else grads[var.idx] + g
        for idx in range(len(self._parents) - 1, -1, -1):
            g = grads[idx]
            if g is None or self._vjps[idx] is None:
                continue
            parent_grads = self._vjps[idx](g)
            for pidx, pg in zip(self._parents[idx], parent_grads):
                if pg is None:
                    continue
                grads[pidx] = pg if grads[pidx] is None else grads[pidx] + pg
        return grads

    def grad_of(self, grads: list, var: Var) -> np.ndarray:
        g = grads[var.idx]
        return np.zeros_like(np.asarray(var.value, dtype=float)) if g is None else g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if _is_var(a):
            return a.tape
    return None


def _binary(a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = fwd(va, vb)
    if tape is None:
        return out
    parents, vjps = [], []
    if _is_var(a):
        parents.append(a)
        vjps.append(lambda g: vjp_a(g, va, vb))
    if _is_var(b):
        parents.append(b)
        vjps.append(lambda g: vjp_b(g, va, vb))
    return tape._record(out, parents, lambda g: [f(g) for f in vjps])


def add(a, b):
    return _binary(a, b, np.add,
                   lambda g, va, vb: _unbroadcast(g, np.shape(va)),
                   lambda g, va, vb: _unbroadcast(g, np.shape(vb)))


def sub(a, b):
    return _binary(a, b, np.subtract,
                   lambda g, va, vb: _unbroadcast(g, np.shape(va)),
                   lambda g, va, vb: _unbroadcast(-g, np.shape(vb)))


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, va, vb: _unbroadcast(g * vb, np.shape(va)),
                   lambda g, va, vb: _unbroadcast(g * va, np.shape(vb)))


def neg(a):
    tape = _tape_of(a)
    out = -value_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: [-g])


def scale(a, c: float):
    tape = _tape_of(a)
    out = value_of(a) * c
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: [g * c])


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: [g * (1.0 - out * out)])


def matmul(a, b):
    """Matrix product for the (2D @ 2D), (2D @ 1D) and (1D @ 2D) cases."""
    def fwd(va, vb):
        return va @ vb

    def vjp_a(g, va, vb):
        if va.ndim == 2 and vb.ndim == 2:
            return g @ vb.T
        if va.ndim == 2 and vb.ndim == 1:
            return np.outer(g, vb)
        if va.ndim == 1 and vb.ndim == 2:
            return vb @ g
        raise NotImplementedError("matmul supports 2D@2D, 2D@1D, 1D@2D")

    def vjp_b(g, va, vb):
        if va.ndim == 2 and vb.ndim == 2:
            return va.T @ g
        if va.ndim == 2 and vb.ndim == 1:
            return va.T @ g
        if va.ndim == 1 and vb.ndim == 2:
            return np.outer(va, g)
        raise NotImplementedError("matmul supports 2D@2D, 2D@1D, 1D@2D")

    return _binary(a, b, fwd, vjp_a, vjp_b)


def affine(w, x, b):
    """w @ x + b with the bias broadcast over batch columns when x is 2-D."""
    tape = _tape_of(w, x, b)
    vw, vx, vb = value_of(w), value_of(x), value_of(b)
    out = vw @ vx + (vb if vx.ndim == 1 else vb[:, None])
    if tape is None:
        return out
    parents, vjps = [], []
    if _is_var(w):
        parents.append(w)
        vjps.append(lambda g: g @ vx.T if vx.ndim == 2 else np.outer(g, vx))
    if _is_var(x):
        parents.append(x)
        vjps.append(lambda g: vw.T @ g)
    if _is_var(b):
        parents.append(b)
        vjps.append(lambda g: g.sum(axis=1) if vx.ndim == 2 else g)
    return tape._record(out, parents, lambda g: [f(g) for f in vjps])


def dot(a, b):
    return _binary(a, b, np.dot,
                   lambda g, va, vb: g * vb,
                   lambda g, va, vb: g * va)


def ssum(a):
    tape = _tape_of(a)
    va = value_of(a)
    out = np.sum(va)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: [np.full(np.shape(va), g)])


def sumsq(a):
    """sum(a**2) as a single node."""
    tape = _tape_of(a)
    va = value_of(a)
    out = np.sum(va * va)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: [2.0 * g * va])


def row(a, i: int):
    tape = _tape_of(a)
    va = value_of(a)
    out = va[i].copy() if hasattr(va[i], "copy") else va[i]
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(va)
        full[i] = g
        return [full]

    return tape._record(out, (a,), vjp)


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    vals = [np.asarray(value_of(p), dtype=float) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents, pieces = [], []
    for p, (a, b) in zip(parts, zip(offsets[:-1], offsets[1:])):
        if _is_var(p):
            parents.append(p)
            pieces.append((int(a), int(b)))

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for a, b in pieces:
            sl[axis] = slice(a, b)
            outs.append(g[tuple(sl)])
        return outs

    return tape._record(out, tuple(parents), vjp)


def assemble(base: np.ndarray, placements):
    """base + sum of blocks added at index positions.

    ``placements`` is a list of (index, source, coef) where ``index`` is any
    slice-style index whose positions are unique within that placement, and
    ``source`` is a Var or ndarray added as ``coef * source``. The base array
    is never mutated.
    """
    tape = _tape_of(*(src for _, src, _ in placements))
    out = np.array(base, dtype=float, copy=True)
    for index, src, coef in placements:
        out[index] += coef * np.asarray(value_of(src), dtype=float)
    if tape is None:
        return out
    parents, tracked = [], []
    for index, src, coef in placements:
        if _is_var(src):
            parents.append(src)
            tracked.append((index, coef, np.shape(src.value)))

    def vjp(g):
        return [_unbroadcast(coef * g[index], shape)
                for index, coef, shape in tracked]

    return tape._record(out, tuple(parents), vjp)


def custom(tape: Tape, inputs, out_value, vjp_fn) -> Var:
    """Opaque node: forward value computed externally, backward via vjp_fn.

    vjp_fn(g) must return one gradient per entry of ``inputs`` (None allowed);
    gradients for constant inputs are dropped.
    """
    tracked = [(pos, x) for pos, x in enumerate(inputs) if _is_var(x)]
    parents = tuple(x for _, x in tracked)

    def vjp(g):
        all_grads = vjp_fn(g)
        return [all_grads[pos] for pos, _ in tracked]

    return tape._record(np.asarray(out_value, dtype=float), parents, vjp)


# ---------------------------------------------------------------------------
# Model-parameter plumbing

@dataclass
class ModelVars:
    """The learnable parameters of a KoopmanModel as tape leaves."""

    enc_w: list[Var]
    enc_b: list[Var]
    A: Var
    B: Var
    C: Var
    D: Var
    E: Var

    @classmethod
    def from_model(cls, tape: Tape, model: KoopmanModel) -> "ModelVars":
        return cls(
            [tape.leaf(w) for w in model.enc_weights],
            [tape.leaf(b) for b in model.enc_biases],
            tape.leaf(model.A), tape.leaf(model.B), tape.leaf(model.C),
            tape.leaf(model.D), tape.leaf(model.E),
        )

    def all_vars(self) -> list[Var]:
        out = []
        for w, b in zip(self.enc_w, self.enc_b):
            out.extend((w, b))
        out.extend((self.A, self.B, self.C, self.D, self.E))
        return out

    def flat_gradient(self, tape: Tape, grads) -> np.ndarray:
        """Gradient in the same ordering as koopman.flatten."""
        parts = []
        for v in self.all_vars():
            parts.append(tape.grad_of(grads, v).ravel())
        return np.concatenate(parts)


def encode_program(tape_or_none, mv: ModelVars, x):
    """Taped twin of koopman.encode; x may be (n,) or (n, batch)."""
    h = x
    n_layers = len(mv.enc_w)
    for i, (w, b) in enumerate(zip(mv.enc_w, mv.enc_b)):
        h = affine(w, h, b)
        if i < n_layers - 1:
            h = tanh(h)
    return h


def record_forward(model: KoopmanModel, inputs, program):
    """Run ``program(tape, model_vars, *inputs)`` under a fresh tape.

    Outputs are identical to the un-taped evaluation of the same program.
    """
    tape = Tape()
    mv = ModelVars.from_model(tape, model)
    tape.model_vars = mv
    outputs = program(tape, mv, *inputs)
    return outputs, tape


def backward(tape: Tape, seed_gradients) -> np.ndarray:
    """Reverse sweep; returns dLoss/dtheta as a flat parameter vector.

    ``seed_gradients`` is a list of (output Var, gradient array) pairs.
    """
    if tape.model_vars is None:
        raise ValueError("tape was not created by record_forward")
    grads = tape.gradients(seed_gradients)
    return tape.model_vars.flat_gradient(tape, grads)


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    worst_index: int

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_err)


def check_gradients(model: KoopmanModel, inputs, program, tol: float = 1e-4,
                    n_coords: int = 25, h: float = 1e-5,
                    seed: int = 0) -> GradCheckReport:
    """Compare the tape gradient of a scalar program against central finite
    differences on a random parameter subset; reports the max relative error.
    """
    out, tape = record_forward(model, inputs, program)
    if np.shape(value_of(out)) != ():
        raise ValueError("check_gradients needs a scalar-valued program")
    analytic = backward(tape, [(out, 1.0)])

    theta = koopman.flatten(model)
    rng = np.random.default_rng(seed)
    coords = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    scratch = model.copy()

    def eval_at(vec):
        koopman.unflatten_into(vec, scratch)
        t = Tape()
        mv = ModelVars.from_model(t, scratch)
        return float(value_of(program(t, mv, *inputs)))

    max_rel = 0.0
    max_abs = 0.0
    worst = int(coords[0]) if coords.size else 0
    for i in coords:
        pert = theta.copy()
        pert[i] = theta[i] + h
        f_plus = eval_at(pert)
        pert[i] = theta[i] - h
        f_minus = eval_at(pert)
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(fd - analytic[i])
        rel = err / max(1.0, abs(fd), abs(analytic[i]))
        if rel > max_rel:
            max_rel, worst = rel, int(i)
        max_abs = max(max_abs, err)
    return GradCheckReport(max_rel, max_abs, len(coords), worst)
