"""Koopman surrogate model: tanh MLP encoder, linear latent dynamics, two decoders.

The model is

    z_0     = encoder(x_obs)
    z_{t+1} = A z_t + B u_t
    x_hat_t = C z_t
    y_t     = D z_t + E u_t        (direct feedthrough)

with a coarse-time-step transformation that chains k single-step predictions
under constant input into one step of k times the duration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scaling import check_matrix, check_vector

SERIAL_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    n_x_obs: int
    n_z: int
    n_u: int
    n_x_pred: int
    n_y: int

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not (isinstance(v, (int, np.integer)) and v > 0):
                raise ValueError(f"dims.{name} must be a positive integer, got {v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.n_x_obs, self.n_z, self.n_u, self.n_x_pred, self.n_y])

    @classmethod
    def from_array(cls, a) -> "ModelDims":
        return cls(*(int(v) for v in a))


@dataclass
class KoopmanModel:
    """Parameter container; all operations on it are pure functions below."""

    enc_weights: list[np.ndarray]  # per layer, shape (n_out, n_in)
    enc_biases: list[np.ndarray]
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    dt_model: float  # minutes advanced by one application of (A, B)
    dims: ModelDims

    def __post_init__(self):
        d = self.dims
        if self.dt_model <= 0:
            raise ValueError("dt_model must be positive")
        if len(self.enc_weights) != len(self.enc_biases) or not self.enc_weights:
            raise ValueError("encoder needs matching, non-empty weight/bias lists")
        n_in = d.n_x_obs
        for i, (w, b) in enumerate(zip(self.enc_weights, self.enc_biases)):
            w = np.asarray(w, dtype=float)
            if w.ndim != 2 or w.shape[1] != n_in:
                raise ValueError(f"encoder layer {i}: weight shape {w.shape} "
                                 f"does not accept input of size {n_in}")
            self.enc_weights[i] = w
            self.enc_biases[i] = check_vector(b, w.shape[0], f"encoder bias {i}")
            n_in = w.shape[0]
        if n_in != d.n_z:
            raise ValueError(f"encoder output size {n_in} != n_z {d.n_z}")
        self.A = check_matrix(self.A, (d.n_z, d.n_z), "A")
        self.B = check_matrix(self.B, (d.n_z, d.n_u), "B")
        self.C = check_matrix(self.C, (d.n_x_pred, d.n_z), "C")
        self.D = check_matrix(self.D, (d.n_y, d.n_z), "D")
        self.E = check_matrix(self.E, (d.n_y, d.n_u), "E")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.enc_weights[:-1])

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(
            [w.copy() for w in self.enc_weights],
            [b.copy() for b in self.enc_biases],
            self.A.copy(), self.B.copy(), self.C.copy(), self.D.copy(),
            self.E.copy(), self.dt_model, self.dims,
        )


def init_model(dims: ModelDims, dt_model: float, hidden=(50, 50),
               seed: int = 0) -> KoopmanModel:
    """Fresh model: uniform fan-in encoder init, A = I, small random B..E.

    Identity A makes the untrained latent a stable integrator.
    """
    rng = np.random.default_rng(seed)
    sizes = (dims.n_x_obs, *hidden, dims.n_z)
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        bs.append(rng.uniform(-bound, bound, size=n_out))
    small = 0.01
    return KoopmanModel(
        ws, bs,
        A=np.eye(dims.n_z),
        B=small * rng.standard_normal((dims.n_z, dims.n_u)),
        C=small * rng.standard_normal((dims.n_x_pred, dims.n_z)),
        D=small * rng.standard_normal((dims.n_y, dims.n_z)),
        E=small * rng.standard_normal((dims.n_y, dims.n_u)),
        dt_model=float(dt_model), dims=dims,
    )


def encode(model: KoopmanModel, x_obs) -> np.ndarray:
    """z = MLP(x_obs); tanh on hidden layers, linear output layer.

    Accepts a vector (n_x_obs,) or a batch (n_x_obs, B).
    """
    h = np.asarray(x_obs, dtype=float)
    expect = model.dims.n_x_obs
    if h.shape[0] != expect:
        raise ValueError(f"x_obs has leading size {h.shape[0]}, expected {expect}")
    if not np.all(np.isfinite(h)):
        raise ValueError("x_obs contains non-finite entries")
    n_layers = len(model.enc_weights)
    for i, (w, b) in enumerate(zip(model.enc_weights, model.enc_biases)):
        h = w @ h + (b if h.ndim == 1 else b[:, None])
        if i < n_layers - 1:
            h = np.tanh(h)
    return h


def step_latent(model: KoopmanModel, z, u) -> np.ndarray:
    z = check_vector(z, model.dims.n_z, "z") if np.ndim(z) == 1 else np.asarray(z, float)
    u = check_vector(u, model.dims.n_u, "u") if np.ndim(u) == 1 else np.asarray(u, float)
    return model.A @ z + model.B @ u


def decode_state(model: KoopmanModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[0] != model.dims.n_z:
        raise ValueError(f"z has leading size {z.shape[0]}, expected {model.dims.n_z}")
    return model.C @ z


def decode_output(model: KoopmanModel, z, u) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape[0] != model.dims.n_z or u.shape[0] != model.dims.n_u:
        raise ValueError("z/u leading sizes do not match model dims")
    return model.D @ z + model.E @ u


def rollout(model: KoopmanModel, x_obs_0, u_seq):
    """Open-loop prediction from one observation and an input sequence.

    Returns (z_seq (N+1, n_z), x_hat_seq (N+1, n_x_pred), y_seq (N, n_y)).
    An empty u_seq yields only the initial latent and decoded state.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.size == 0:
        u_seq = u_seq.reshape(0, model.dims.n_u)
    if u_seq.ndim != 2 or u_seq.shape[1] != model.dims.n_u:
        raise ValueError(f"u_seq must be (N, {model.dims.n_u})")
    if not np.all(np.isfinite(u_seq)):
        raise ValueError("u_seq contains non-finite entries")
    n = u_seq.shape[0]
    z = np.empty((n + 1, model.dims.n_z))
    z[0] = encode(model, x_obs_0)
    y = np.empty((n, model.dims.n_y))
    for t in range(n):
        y[t] = model.D @ z[t] + model.E @ u_seq[t]
        z[t + 1] = model.A @ z[t] + model.B @ u_seq[t]
    x_hat = z @ model.C.T
    return z, x_hat, y


def upscale(model: KoopmanModel, k: int) -> KoopmanModel:
    """Chain k single steps under constant input into one coarse step.

    A' = A^k, B' = sum_{i<k} A^i B, D' = D A^k, E' = D (sum_{i<k} A^i) B + E.
    The coarse output decoder evaluates the output at the end of the coarse
    interval, which is what the chained fine-step recursion produces.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 1):
        raise ValueError(f"upscale factor must be an integer >= 1, got {k!r}")
    a_pow = np.linalg.matrix_power(model.A, k)
    geom = np.zeros_like(model.A)  # sum_{i=0}^{k-1} A^i
    acc = np.eye(model.dims.n_z)
    for _ in range(k):
        geom += acc
        acc = acc @ model.A
    b_new = geom @ model.B
    return KoopmanModel(
        [w.copy() for w in model.enc_weights],
        [b.copy() for b in model.enc_biases],
        A=a_pow,
        B=b_new,
        C=model.C.copy(),
        D=model.D @ a_pow,
        E=model.D @ b_new + model.E,
        dt_model=model.dt_model * k,
        dims=model.dims,
    )


def flatten(model: KoopmanModel) -> np.ndarray:
    """Parameter vector: encoder layers (weight then bias, in order), then
    A, B, C, D, E row-major."""
    parts = []
    for w, b in zip(model.enc_weights, model.enc_biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    for m in (model.A, model.B, model.C, model.D, model.E):
        parts.append(m.ravel())
    return np.concatenate(parts)


def unflatten(theta, like: KoopmanModel) -> KoopmanModel:
    """Inverse of flatten; shapes and metadata are taken from ``like``."""
    theta = np.asarray(theta, dtype=float)
    out = like.copy()
    pos = unflatten_into(theta, out)
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, "
                         f"model needs {pos}")
    return out


def unflatten_into(theta, model: KoopmanModel) -> int:
    """Write a flat parameter vector into an existing model; returns the
    number of entries consumed. Raises on length mismatch."""
    theta = np.asarray(theta, dtype=float)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > theta.size:
            raise ValueError("parameter vector too short for model")
        block = theta[pos:pos + size].reshape(shape)
        pos += size
        return block

    for i in range(len(model.enc_weights)):
        model.enc_weights[i][...] = take(model.enc_weights[i].shape)
        model.enc_biases[i][...] = take(model.enc_biases[i].shape)
    for m in (model.A, model.B, model.C, model.D, model.E):
        m[...] = take(m.shape)
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, "
                         f"model needs {pos}")
    return pos


def n_params(model: KoopmanModel) -> int:
    return flatten(model).size


def save_model(path, model: KoopmanModel) -> None:
    arrays = {
        "version": np.array(SERIAL_VERSION),
        "dims": model.dims.as_array(),
        "dt_model": np.array(model.dt_model),
        "n_layers": np.array(len(model.enc_weights)),
        "A": model.A, "B": model.B, "C": model.C, "D": model.D, "E": model.E,
    }
    for i, (w, b) in enumerate(zip(model.enc_weights, model.enc_biases)):
        arrays[f"enc_w{i}"] = w
        arrays[f"enc_b{i}"] = b
    np.savez(path, **arrays)


def load_model(path) -> KoopmanModel:
    with np.load(path) as data:
        version = int(data["version"])
        if version != SERIAL_VERSION:
            raise ValueError(f"unsupported model file version {version}")
        n_layers = int(data["n_layers"])
        return KoopmanModel(
            [data[f"enc_w{i}"] for i in range(n_layers)],
            [data[f"enc_b{i}"] for i in range(n_layers)],
            A=data["A"], B=data["B"], C=data["C"], D=data["D"], E=data["E"],
            dt_model=float(data["dt_model"]),
            dims=ModelDims.from_array(data["dims"]),
        )
