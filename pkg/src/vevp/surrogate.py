"""Two-layer LSTM surrogate of the material model, written directly in numpy.

The network maps the nine input features per step (``voigt(B)``, ``dt``,
``w_w``, ``v_np``) to the six undamaged Cauchy stress components.  Gate
blocks in the packed ``4H`` parameter arrays are ordered (input, forget,
candidate, output).  Inputs are standardized with statistics fitted on the
training split; outputs are produced in standardized units by a linear
dense head and mapped back to MPa with the target statistics, so
``forward`` returns MPa while the training loss (mean absolute error) weighs
every stress component equally.

Gradients come from hand-written backpropagation through time over whole
sequences; Adam performs the updates.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import material as mat
from . import tensor3 as t3

log = logging.getLogger(__name__)

N_INPUTS = 9
N_OUTPUTS = 6
STD_FLOOR = 1e-8
WEIGHTS_VERSION = 1
GATE_ORDER = "ifgo"

PARAM_NAMES = ("W1", "R1", "b1", "W2", "R2", "b2", "Wd", "bd")


class TrainingError(RuntimeError):
    """Non-finite loss during training."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


class WeightsFormatError(ValueError):
    """A weight document is truncated, of the wrong version, or of the wrong shape."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmLayerParams:
    """``W`` ``(4H, D)``, ``R`` ``(4H, H)`` and ``b`` ``(4H,)`` in (i, f, g, o) blocks."""

    W: np.ndarray
    R: np.ndarray
    b: np.ndarray

    @property
    def H(self) -> int:
        return self.R.shape[1]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    def __post_init__(self):
        h4 = self.R.shape[0]
        if h4 % 4 or self.R.shape != (h4, h4 // 4) or self.W.shape[0] != h4 or self.b.shape != (h4,):
            raise ValueError(f"inconsistent LSTM shapes W{self.W.shape} R{self.R.shape} b{self.b.shape}")


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Normalization":
        return cls(np.zeros(n), np.ones(n))


@dataclass
class NetworkParams:
    """Two LSTM layers, a dense head, and input/target standardization.

    ``arrays`` holds the trainable arrays under ``PARAM_NAMES``.
    """

    arrays: dict
    norm: Normalization
    target_norm: Normalization

    def __post_init__(self):
        if set(self.arrays) != set(PARAM_NAMES):
            raise ValueError(f"NetworkParams needs exactly {PARAM_NAMES}")
        self.layer1, self.layer2  # shape validation
        if self.layer2.D != self.layer1.H:
            raise ValueError("layer 2 input size must equal layer 1 hidden size")
        if self.arrays["Wd"].shape != (N_OUTPUTS, self.layer2.H) or self.arrays["bd"].shape != (N_OUTPUTS,):
            raise ValueError("dense head must be 6 x H")
        if np.any(self.norm.std <= 0) or np.any(self.target_norm.std <= 0):
            raise ValueError("normalization std must be positive")

    @property
    def layer1(self) -> LstmLayerParams:
        a = self.arrays
        return LstmLayerParams(a["W1"], a["R1"], a["b1"])

    @property
    def layer2(self) -> LstmLayerParams:
        a = self.arrays
        return LstmLayerParams(a["W2"], a["R2"], a["b2"])

    @property
    def hidden(self) -> int:
        return self.layer1.H

    @classmethod
    def initialize(cls, hidden: int, seed: int = 0) -> "NetworkParams":
        """Uniform ``+-1/sqrt(H)`` weights, zero biases except forget-gate bias 1."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden)

        def uniform(*shape):
            return rng.uniform(-bound, bound, size=shape)

        def bias():
            b = np.zeros(4 * hidden)
            b[hidden : 2 * hidden] = 1.0
            return b

        arrays = {
            "W1": uniform(4 * hidden, N_INPUTS),
            "R1": uniform(4 * hidden, hidden),
            "b1": bias(),
            "W2": uniform(4 * hidden, hidden),
            "R2": uniform(4 * hidden, hidden),
            "b2": bias(),
            "Wd": uniform(N_OUTPUTS, hidden),
            "bd": np.zeros(N_OUTPUTS),
        }
        return cls(arrays, Normalization.identity(N_INPUTS), Normalization.identity(N_OUTPUTS))

    @classmethod
    def zeros(cls, hidden: int) -> "NetworkParams":
        p = cls.initialize(hidden)
        return p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays.items()})

    def with_arrays(self, arrays: dict) -> "NetworkParams":
        return NetworkParams(dict(arrays), self.norm, self.target_norm)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            {k: v.copy() for k, v in self.arrays.items()},
            Normalization(self.norm.mean.copy(), self.norm.std.copy()),
            Normalization(self.target_norm.mean.copy(), self.target_norm.std.copy()),
        )


@dataclass
class NetworkState:
    """Recurrent state ``(h1, c1, h2, c2)``, each ``(..., H)``."""

    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: tuple[int, ...] = ()) -> "NetworkState":
        z = np.zeros(batch + (hidden,))
        return cls(z, z.copy(), z.copy(), z.copy())


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    batch_size: int = 64
    epochs: int = 300
    lr_initial: float = 1e-3
    lr_drop_epoch: int = 200
    lr_after: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if min(self.hidden, self.batch_size, self.epochs) < 1:
            raise ValueError("TrainConfig: hidden, batch_size and epochs must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("TrainConfig.validation_fraction must lie in (0, 1)")
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise ValueError("TrainConfig: learning rates must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Learning rate of 1-based ``epoch``."""
        return self.lr_initial if epoch <= self.lr_drop_epoch else self.lr_after

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# forward pass


def _gates(z: np.ndarray, hidden: int):
    """Split pre-activations into (i, f, g, o) using a single tanh call.

    ``logistic(x) = (1 + tanh(x/2)) / 2`` avoids overflow for large ``|x|``.
    """
    scale = np.ones(4 * hidden)
    scale[: 2 * hidden] = 0.5
    scale[3 * hidden :] = 0.5
    t = np.tanh(z * scale)
    i = 0.5 + 0.5 * t[..., :hidden]
    f = 0.5 + 0.5 * t[..., hidden : 2 * hidden]
    g = t[..., 2 * hidden : 3 * hidden]
    o = 0.5 + 0.5 * t[..., 3 * hidden :]
    return i, f, g, o


def lstm_cell(x, h, c, p: LstmLayerParams):
    """One LSTM step; returns ``(h', c')``."""
    z = x @ p.W.T + h @ p.R.T + p.b
    i, f, g, o = _gates(z, p.H)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def _layer_forward(x: np.ndarray, p: LstmLayerParams, h0=None, c0=None, keep: bool = False):
    """Run one layer over ``x`` ``(T, B, D)``.

    Returns the hidden sequence ``(T, B, H)``, the final ``(h, c)``, and
    with ``keep`` the cache needed for backpropagation.
    """
    steps, batch = x.shape[:2]
    hidden = p.H
    wr = np.concatenate([p.W, p.R], axis=1).T
    h = np.zeros((batch, hidden)) if h0 is None else h0
    c = np.zeros((batch, hidden)) if c0 is None else c0
    hs = np.empty((steps, batch, hidden))
    cache = None
    if keep:
        cache = {
            "x": x,
            "h_prev": np.empty((steps, batch, hidden)),
            "c_prev": np.empty((steps, batch, hidden)),
            "gates": np.empty((steps, 4, batch, hidden)),
            "tanh_c": np.empty((steps, batch, hidden)),
        }
    for t in range(steps):
        # one product per step keeps each step's rounding independent of T
        z = np.concatenate([x[t], h], axis=1) @ wr + p.b
        i, f, g, o = _gates(z, hidden)
        if keep:
            cache["h_prev"][t] = h
            cache["c_prev"][t] = c
            cache["gates"][t] = (i, f, g, o)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache["tanh_c"][t] = tc
        hs[t] = h
    return hs, (h, c), cache


def normalize_fit(inputs) -> Normalization:
    """Per-feature mean and standard deviation over every step of every sequence.

    Raises:
        ValueError: for an empty collection or fewer than two samples.
    """
    rows = [np.asarray(x, dtype=float).reshape(-1, np.shape(x)[-1]) for x in inputs]
    if not rows:
        raise ValueError("normalize_fit: empty dataset")
    stacked = np.concatenate(rows)
    if len(stacked) < 2:
        raise ValueError("normalize_fit: need at least two samples")
    # a constant column keeps its exact value as mean so it normalizes to 0
    constant = np.all(stacked == stacked[0], axis=0)
    mean = np.where(constant, stacked[0], stacked.mean(axis=0))
    std = np.where(constant, STD_FLOOR, np.maximum(stacked.std(axis=0), STD_FLOOR))
    return Normalization(mean, std)


def normalize_apply(x, stats: Normalization) -> np.ndarray:
    return (np.asarray(x, dtype=float) - stats.mean) / stats.std


def _as_batch(inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, 9) or (B, T, 9) inputs, got {x.shape}")
    return x, False


def forward(inputs, p: NetworkParams) -> np.ndarray:
    """Stress predictions in MPa for ``(T, 9)`` or ``(B, T, 9)`` inputs."""
    x, single = _as_batch(inputs)
    if x.shape[-1] != N_INPUTS:
        raise ValueError(f"expected {N_INPUTS} input features, got {x.shape[-1]}")
    xt = np.swapaxes(normalize_apply(x, p.norm), 0, 1)
    h1, _, _ = _layer_forward(xt, p.layer1)
    h2, _, _ = _layer_forward(h1, p.layer2)
    y = h2 @ p.arrays["Wd"].T + p.arrays["bd"]
    out = np.swapaxes(y * p.target_norm.std + p.target_norm.mean, 0, 1)
    return out[0] if single else out


def step(x_row, state: NetworkState, p: NetworkParams) -> tuple[np.ndarray, NetworkState]:
    """Advance the network by one input row ``(..., 9)`` from ``state``."""
    x = normalize_apply(x_row, p.norm)
    batch = x.shape[:-1]
    x2 = x.reshape(-1, N_INPUTS)[None]
    flat = [s.reshape(-1, p.hidden) for s in (state.h1, state.c1, state.h2, state.c2)]
    h1, (h1n, c1n), _ = _layer_forward(x2, p.layer1, flat[0], flat[1])
    h2, (h2n, c2n), _ = _layer_forward(h1, p.layer2, flat[2], flat[3])
    y = h2[0] @ p.arrays["Wd"].T + p.arrays["bd"]
    y = y * p.target_norm.std + p.target_norm.mean
    shape = batch + (p.hidden,)
    new = NetworkState(h1n.reshape(shape), c1n.reshape(shape), h2n.reshape(shape), c2n.reshape(shape))
    return y.reshape(batch + (N_OUTPUTS,)), new


def mae(pred, targ) -> float:
    """Mean absolute error over all entries."""
    pred = np.asarray(pred, dtype=float)
    targ = np.asarray(targ, dtype=float)
    if pred.shape != targ.shape:
        raise ValueError(f"mae: shape mismatch {pred.shape} vs {targ.shape}")
    if pred.size == 0:
        raise ValueError("mae: empty input")
    return float(np.mean(np.abs(pred - targ)))


# ---------------------------------------------------------------------------
# backpropagation through time


def _layer_backward(dh_seq: np.ndarray, p: LstmLayerParams, cache: dict):
    """Gradients of one layer given ``dL/dh_t`` for every step.

    Returns ``(dW, dR, db, dx)`` with ``dx`` the gradient for the layer input.
    """
    steps, batch, hidden = dh_seq.shape
    dz = np.empty((steps, batch, 4 * hidden))
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    for t in range(steps - 1, -1, -1):
        i, f, g, o = cache["gates"][t]
        tc = cache["tanh_c"][t]
        dh = dh_seq[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[t, :, :hidden] = dc * g * i * (1.0 - i)
        dz[t, :, hidden : 2 * hidden] = dc * cache["c_prev"][t] * f * (1.0 - f)
        dz[t, :, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
        dz[t, :, 3 * hidden :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz[t] @ p.R
    flat = dz.reshape(-1, 4 * hidden)
    d_w = flat.T @ cache["x"].reshape(-1, p.D)
    d_r = flat.T @ cache["h_prev"].reshape(-1, hidden)
    d_b = flat.sum(axis=0)
    dx = dz @ p.W
    return d_w, d_r, d_b, dx


def loss_and_gradients(inputs, targets, p: NetworkParams) -> tuple[float, dict]:
    """Batch-mean absolute error in standardized target units and its exact gradient.

    ``inputs`` ``(B, T, 9)`` and ``targets`` ``(B, T, 6)`` are raw (MPa for
    the targets).  The subgradient of ``|r|`` at ``r = 0`` is taken as 0.
    """
    x, _ = _as_batch(inputs)
    y_true, _ = _as_batch(targets)
    xt = np.swapaxes(normalize_apply(x, p.norm), 0, 1)
    yt = np.swapaxes(normalize_apply(y_true, p.target_norm), 0, 1)
    h1, _, cache1 = _layer_forward(xt, p.layer1, keep=True)
    h2, _, cache2 = _layer_forward(h1, p.layer2, keep=True)
    wd = p.arrays["Wd"]
    y = h2 @ wd.T + p.arrays["bd"]
    resid = y - yt
    loss = float(np.mean(np.abs(resid)))
    dy = np.sign(resid) / resid.size
    grads = {
        "Wd": dy.reshape(-1, N_OUTPUTS).T @ h2.reshape(-1, p.hidden),
        "bd": dy.reshape(-1, N_OUTPUTS).sum(axis=0),
    }
    grads["W2"], grads["R2"], grads["b2"], dh1 = _layer_backward(dy @ wd, p.layer2, cache2)
    grads["W1"], grads["R1"], grads["b1"], _ = _layer_backward(dh1, p.layer1, cache1)
    return loss, grads


def gradients(inputs, targets, p: NetworkParams) -> dict:
    return loss_and_gradients(inputs, targets, p)[1]


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    count: int = 0


def adam_update(p: NetworkParams, grads: dict, state: AdamState, lr: float, cfg: TrainConfig) -> NetworkParams:
    """One bias-corrected Adam step; ``state`` is updated in place."""
    state.count += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.count
    c2 = 1.0 - b2**state.count
    new = {}
    for name, value in p.arrays.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return p.with_arrays(new)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Reproducible ``(train, validation)`` index split."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, round(fraction * n)) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _length_groups(seqs, indices) -> dict:
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(len(seqs[i].inputs), []).append(int(i))
    return groups


def _batches(seqs, indices, batch_size: int, rng: np.random.Generator | None):
    """Equal-length batches; shuffled within length groups and in order when ``rng`` is set."""
    out = []
    for length in sorted(_length_groups(seqs, indices)):
        members = np.array(_length_groups(seqs, indices)[length])
        if rng is not None:
            members = rng.permutation(members)
        out.extend(members[k : k + batch_size] for k in range(0, len(members), batch_size))
    if rng is not None:
        out = [out[k] for k in rng.permutation(len(out))]
    return out


def _stack(seqs, ids):
    return np.stack([seqs[i].inputs for i in ids]), np.stack([seqs[i].targets for i in ids])


def predict(seqs, p: NetworkParams, batch_size: int = 256) -> list[np.ndarray]:
    """Predictions for every sequence, batched by length."""
    out: list[np.ndarray | None] = [None] * len(seqs)
    for ids in _batches(seqs, range(len(seqs)), batch_size, None):
        x, _ = _stack(seqs, ids)
        for i, y in zip(ids, forward(x, p)):
            out[i] = y
    return out


def component_mae(seqs, p: NetworkParams) -> np.ndarray:
    """Per-component mean absolute error in MPa over all steps."""
    pred = np.concatenate(predict(seqs, p))
    targ = np.concatenate([s.targets for s in seqs])
    return np.mean(np.abs(pred - targ), axis=0)


def fit(seqs, cfg: TrainConfig, init: NetworkParams | None = None, loss_log=None):
    """Train on a list of ``TrainingSequence``.

    Normalization is fitted on the training split only.  Each epoch
    reshuffles the equal-length batches.  The history records, per epoch,
    the learning rate and the training and validation MAE (MPa, all
    components).  ``loss_log`` optionally names a CSV file for the same rows.

    Returns:
        ``(best_params, history, (train_idx, val_idx))`` where ``best_params``
        has the lowest validation MAE seen.

    Raises:
        TrainingError: on a non-finite loss, naming the epoch and batch.
    """
    if not seqs:
        raise ValueError("fit: empty dataset")
    train_idx, val_idx = split_indices(len(seqs), cfg.validation_fraction, cfg.seed)
    train = [seqs[i] for i in train_idx]
    val = [seqs[i] for i in val_idx]
    p = init.copy() if init is not None else NetworkParams.initialize(cfg.hidden, cfg.seed)
    p.norm = normalize_fit([s.inputs for s in train])
    p.target_norm = normalize_fit([s.targets for s in train])
    rng = np.random.default_rng(cfg.seed + 1)
    adam = AdamState()
    history = []
    best, best_val = p.copy(), math.inf
    writer = None
    handle = None
    if loss_log is not None:
        handle = open(loss_log, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(["epoch", "lr", "train_mae", "val_mae"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.learning_rate(epoch)
            for b, ids in enumerate(_batches(train, range(len(train)), cfg.batch_size, rng)):
                x, y = _stack(train, ids)
                loss, grads = loss_and_gradients(x, y, p)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss}", epoch, b)
                p = adam_update(p, grads, adam, lr, cfg)
            train_mae = float(np.mean(component_mae(train, p)))
            val_mae = float(np.mean(component_mae(val, p))) if val else math.nan
            history.append({"epoch": epoch, "lr": lr, "train_mae": train_mae, "val_mae": val_mae})
            if writer is not None:
                writer.writerow([epoch, lr, repr(train_mae), repr(val_mae)])
                handle.flush()
            log.info("epoch %d lr %.1e train MAE %.4f val MAE %.4f", epoch, lr, train_mae, val_mae)
            score = val_mae if val else train_mae
            if score < best_val:
                best, best_val = p.copy(), score
    finally:
        if handle is not None:
            handle.close()
    return best, history, (train_idx, val_idx)


# ---------------------------------------------------------------------------
# persistence


def _to_doc(p: NetworkParams) -> dict:
    return {
        "version": WEIGHTS_VERSION,
        "gate_order": GATE_ORDER,
        "hidden": p.hidden,
        "inputs": N_INPUTS,
        "outputs": N_OUTPUTS,
        "input_mean": p.norm.mean.tolist(),
        "input_std": p.norm.std.tolist(),
        "target_mean": p.target_norm.mean.tolist(),
        "target_std": p.target_norm.std.tolist(),
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in p.arrays.items()},
    }


def save_weights(p: NetworkParams, location, metadata: dict | None = None) -> None:
    """Write the JSON weight document; ``metadata`` is stored verbatim and ignored on load."""
    doc = _to_doc(p)
    if metadata is not None:
        doc["metadata"] = metadata
    Path(location).write_text(json.dumps(doc))


def load_weights(location, hidden: int | None = None) -> NetworkParams:
    """Load a weight document; ``hidden`` optionally asserts the layer size.

    Raises:
        WeightsFormatError: truncated or malformed document, version or shape mismatch.
    """
    try:
        doc = json.loads(Path(location).read_text())
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(f"unreadable weight file: {exc}") from exc
    try:
        if doc["version"] != WEIGHTS_VERSION or doc["gate_order"] != GATE_ORDER:
            raise WeightsFormatError(f"unsupported weight file version {doc['version']}/{doc['gate_order']}")
        if hidden is not None and doc["hidden"] != hidden:
            raise WeightsFormatError(f"hidden size mismatch: file has {doc['hidden']}, expected {hidden}")
        arrays = {}
        for name in PARAM_NAMES:
            entry = doc["arrays"][name]
            data = np.asarray(entry["data"], dtype=float)
            if data.size != math.prod(entry["shape"]):
                raise WeightsFormatError(f"array {name} has {data.size} values for shape {entry['shape']}")
            arrays[name] = data.reshape(entry["shape"])
        norm = Normalization(np.asarray(doc["input_mean"], float), np.asarray(doc["input_std"], float))
        target = Normalization(np.asarray(doc["target_mean"], float), np.asarray(doc["target_std"], float))
        p = NetworkParams(arrays, norm, target)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, WeightsFormatError):
            raise
        raise WeightsFormatError(f"malformed weight file: {exc}") from exc
    if p.hidden != doc["hidden"]:
        raise WeightsFormatError(f"declared hidden size {doc['hidden']} does not match arrays ({p.hidden})")
    return p


# ---------------------------------------------------------------------------
# material-point use


def input_row(f, dt, env: mat.Environment) -> np.ndarray:
    """Network input row(s) for deformation gradient(s) ``f`` ``(..., 3, 3)``."""
    f = np.asarray(f, dtype=float)
    batch = f.shape[:-2]
    row = np.empty(batch + (N_INPUTS,))
    row[..., :6] = t3.voigt_pack(t3.left_cauchy_green(f))
    row[..., 6] = dt
    row[..., 7] = env.w_w
    row[..., 8] = env.v_np
    return row


@dataclass
class SurrogatePoint:
    """History of one or more material points driven by the network.

    Holds the committed recurrent state, the last committed ``F`` and the
    damage variables.  ``evaluate`` returns the stress for a trial step
    without committing it; ``commit`` accepts the trial.
    """

    params: NetworkParams
    state: NetworkState
    lambda_max: np.ndarray
    d: np.ndarray

    @classmethod
    def virgin(cls, params: NetworkParams, batch: tuple[int, ...] = ()) -> "SurrogatePoint":
        return cls(params, NetworkState.zeros(params.hidden, batch), np.ones(batch), np.zeros(batch))

    def _damage(self, f, mp: mat.MaterialParams):
        j = t3.det(f)
        b_iso = t3.left_cauchy_green(f) / np.cbrt(j)[..., None, None] ** 2
        lam = mat.chain_stretch(b_iso)
        return mat.damage_update(self.d, self.lambda_max, lam, mp)

    def evaluate(self, f, dt, env: mat.Environment, mp: mat.MaterialParams):
        """Undamaged and damaged stress for a trial step; returns ``(sigma, sigma_d, trial)``."""
        y, new_state = step(input_row(f, dt, env), self.state, self.params)
        sigma = t3.voigt_unpack(y)
        d_new, lam_new = self._damage(f, mp)
        return sigma, (1.0 - d_new)[..., None, None] * sigma, (new_state, lam_new, d_new)

    def commit(self, trial) -> None:
        self.state, self.lambda_max, self.d = trial

    def stress_and_tangent(self, f, dt, env: mat.Environment, mp: mat.MaterialParams, alpha: float | None = None):
        """Damaged stress and the perturbation tangent for a trial step.

        Each column compares the network stress for ``F`` and for the
        Jaumann-perturbed ``F + dF_ij`` fed from the same committed state
        (forward difference, ``alpha`` defaults to ``perturb_alpha``).

        Returns:
            ``(sigma_d, tangent (..., 6, 6), trial)``.
        """
        alpha = mp.perturb_alpha if alpha is None else alpha
        f = np.asarray(f, dtype=float)
        _, sigma_d, trial = self.evaluate(f, dt, env, mp)
        j = t3.det(f)
        tau = j[..., None, None] * sigma_d
        cols = []
        for df in np.moveaxis(mat.perturbation_increments(f, alpha), -3, 0):
            fp = f + df
            _, sp, _ = self.evaluate(fp, dt, env, mp)
            dtau = t3.det(fp)[..., None, None] * sp - tau
            cols.append(t3.voigt_pack(t3.sym(dtau)))
        tangent = np.stack(cols, axis=-1) / (alpha * j[..., None, None])
        return sigma_d, tangent, trial


def surrogate_stress_and_tangent(history, p: NetworkParams, mp: mat.MaterialParams, env: mat.Environment | None = None):
    """Damaged stress (Voigt) and tangent after a loading history.

    ``history`` is a ``LoadingPath``-like object with ``F`` ``(n, 3, 3)``,
    ``dt`` and ``env``; the last record is the current step.
    """
    env = history.env if env is None else env
    f = np.asarray(history.F, dtype=float)
    dts = np.asarray(history.dt, dtype=float)
    point = SurrogatePoint.virgin(p)
    for k in range(len(f) - 1):
        _, _, trial = point.evaluate(f[k], dts[k], env, mp)
        point.commit(trial)
    sigma_d, tangent, _ = point.stress_and_tangent(f[-1], dts[-1], env, mp)
    return t3.voigt_pack(sigma_d), tangent
