"""
Recurrent forecaster with a backward projector.

The network maps (x_t, h_{t-1}) to h_t with an Elman, GRU or LSTM cell, reads a
point forecast and a two-part distribution per lead from h_t, and learns a
residual projector g(h) = h + W2 ReLU(W1 h + b1) + b2 that reconstructs h_t
from h_{t+1}. Gradients are computed by hand with backpropagation through time.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .forecast_dist import (
    HALF_LOG_2PI,
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    EmptyBatchError,
    TwoPartDist,
    nll,
)

logger = logging.getLogger(__name__)

CELL_KINDS = ("elman", "gru", "lstm")
GATES = {"gru": ("z", "r", "c"), "lstm": ("i", "f", "o", "g")}
PROJECTOR_PARAMS = ("P_W1", "P_b1", "P_W2", "P_b2")
HEAD_PARAMS = ("Y_W", "Y_b", "D_W1", "D_b1", "D_W2", "D_b2")


class NumericError(Exception):
    """Non-finite values or overflow in a numerical routine."""

    pass


def parameter_shapes(
    cell_kind: str, input_dim: int, hidden_dim: int, n_leads: int, dist_hidden: int
) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes for a model layout."""
    if cell_kind not in CELL_KINDS:
        raise ValueError(f"cell_kind must be one of {CELL_KINDS}, got {cell_kind!r}")
    n, d, L, m = input_dim, hidden_dim, n_leads, dist_hidden
    shapes: Dict[str, Tuple[int, ...]] = {}
    if cell_kind == "elman":
        shapes.update({"W_x": (d, n), "W_h": (d, d), "b_h": (d,)})
    else:
        for gate in GATES[cell_kind]:
            shapes.update({f"W_{gate}": (d, n), f"U_{gate}": (d, d), f"b_{gate}": (d,)})
    shapes.update({"P_W1": (d, d), "P_b1": (d,), "P_W2": (d, d), "P_b2": (d,)})
    shapes.update({"Y_W": (L, d), "Y_b": (L,)})
    shapes.update({"D_W1": (m, d), "D_b1": (m,), "D_W2": (3 * L, m), "D_b2": (3 * L,)})
    return shapes


@dataclass
class RmModel:
    """Cell parameters, backward projector, point head and distribution head."""

    cell_kind: str
    input_dim: int
    hidden_dim: int
    leads: List[int]
    dist_hidden: int
    params: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.input_dim < 1 or self.dist_hidden < 1:
            raise ValueError("model dimensions must be positive")
        if not self.leads or any(lead < 0 for lead in self.leads):
            raise ValueError("leads must be a non-empty list of non-negative steps")
        self.leads = [int(lead) for lead in self.leads]
        expected = parameter_shapes(
            self.cell_kind,
            self.input_dim,
            self.hidden_dim,
            len(self.leads),
            self.dist_hidden,
        )
        if set(expected) != set(self.params):
            raise ValueError(
                f"parameter names {sorted(self.params)} do not match {sorted(expected)}"
            )
        for name, shape in expected.items():
            value = np.asarray(self.params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {value.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(value)):
                raise NumericError(f"parameter {name} is not finite")
            self.params[name] = value

    @property
    def n_leads(self) -> int:
        return len(self.leads)

    @property
    def parameter_names(self) -> List[str]:
        return list(
            parameter_shapes(
                self.cell_kind,
                self.input_dim,
                self.hidden_dim,
                self.n_leads,
                self.dist_hidden,
            )
        )

    def copy(self) -> "RmModel":
        return RmModel(
            cell_kind=self.cell_kind,
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            leads=list(self.leads),
            dist_hidden=self.dist_hidden,
            params={name: value.copy() for name, value in self.params.items()},
        )


def _xavier(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(
    cell_kind: str,
    input_dim: int,
    hidden_dim: int = 32,
    leads: Sequence[int] = (1,),
    dist_hidden: int = 16,
    seed: int = 0,
) -> RmModel:
    """
    Xavier-uniform weights and zero biases.

    The projector starts as the identity (W2 = 0, b2 = 0).
    """
    shapes = parameter_shapes(cell_kind, input_dim, hidden_dim, len(leads), dist_hidden)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1 or name == "P_W2":
            params[name] = np.zeros(shape)
        else:
            params[name] = _xavier(rng, shape)
    return RmModel(cell_kind, input_dim, hidden_dim, list(leads), dist_hidden, params)


def zero_model(
    cell_kind: str,
    input_dim: int,
    hidden_dim: int,
    leads: Sequence[int] = (1,),
    dist_hidden: int = 4,
) -> RmModel:
    shapes = parameter_shapes(cell_kind, input_dim, hidden_dim, len(leads), dist_hidden)
    params = {k: np.zeros(s) for k, s in shapes.items()}
    return RmModel(cell_kind, input_dim, hidden_dim, list(leads), dist_hidden, params)


@dataclass
class HiddenTrajectory:
    """Hidden states h_1..h_T as a T x d array."""

    h: np.ndarray

    def __post_init__(self) -> None:
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.ndim != 2:
            raise ValueError("trajectory must be a T x d array")
        if not np.all(np.isfinite(self.h)):
            raise NumericError("trajectory contains non-finite states")

    @property
    def T(self) -> int:
        return self.h.shape[0]


@dataclass
class ForwardResult:
    """Trajectory and head outputs of a forward pass; ``cache`` feeds backprop."""

    trajectory: HiddenTrajectory
    point: np.ndarray
    raw: np.ndarray
    cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def dist(self) -> TwoPartDist:
        """Per-step, per-lead distributions (arrays of shape T x L)."""
        return TwoPartDist.from_raw(
            self.raw[:, :, 0], self.raw[:, :, 1], self.raw[:, :, 2]
        )


def _run_cell(
    model: RmModel, X: np.ndarray, h0: np.ndarray, c0: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    p = model.params
    T, d = X.shape[0], model.hidden_dim
    H = np.empty((T, d))
    cache: Dict[str, np.ndarray] = {"X": X}

    if model.cell_kind == "elman":
        AX = X @ p["W_x"].T + p["b_h"]
        hp = h0
        for t in range(T):
            hp = np.tanh(AX[t] + p["W_h"] @ hp)
            H[t] = hp
    elif model.cell_kind == "gru":
        AZ = X @ p["W_z"].T + p["b_z"]
        AR = X @ p["W_r"].T + p["b_r"]
        AC = X @ p["W_c"].T + p["b_c"]
        Z, R, C = np.empty((T, d)), np.empty((T, d)), np.empty((T, d))
        hp = h0
        for t in range(T):
            z = special.expit(AZ[t] + p["U_z"] @ hp)
            r = special.expit(AR[t] + p["U_r"] @ hp)
            c = np.tanh(AC[t] + p["U_c"] @ (r * hp))
            hp = (1.0 - z) * hp + z * c
            Z[t], R[t], C[t], H[t] = z, r, c, hp
        cache.update({"Z": Z, "R": R, "C": C})
    else:
        pre = {g: X @ p[f"W_{g}"].T + p[f"b_{g}"] for g in GATES["lstm"]}
        gates = {g: np.empty((T, d)) for g in GATES["lstm"]}
        CS, TC = np.empty((T, d)), np.empty((T, d))
        hp, cp = h0, c0
        for t in range(T):
            i = special.expit(pre["i"][t] + p["U_i"] @ hp)
            f = special.expit(pre["f"][t] + p["U_f"] @ hp)
            o = special.expit(pre["o"][t] + p["U_o"] @ hp)
            g = np.tanh(pre["g"][t] + p["U_g"] @ hp)
            cp = f * cp + i * g
            tc = np.tanh(cp)
            hp = o * tc
            gates["i"][t], gates["f"][t], gates["o"][t], gates["g"][t] = i, f, o, g
            CS[t], TC[t], H[t] = cp, tc, hp
        cache.update({f"G_{g}": v for g, v in gates.items()})
        cache.update({"CS": CS, "TC": TC, "CP": np.vstack([c0[None, :], CS[:-1]])})

    cache["HP"] = np.vstack([h0[None, :], H[:-1]])
    return H, cache


def cell_forward(
    x_t: np.ndarray,
    h_prev: np.ndarray,
    model: RmModel,
    c_prev: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One recurrent step; LSTM cell memory defaults to zero."""
    state = cell_step(x_t, h_prev, model, c_prev)
    return state[0]


def cell_step(
    x_t: np.ndarray,
    h_prev: np.ndarray,
    model: RmModel,
    c_prev: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """One recurrent step returning (h_t, c_t); c_t is None for cells without memory."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape != (model.input_dim,) or h_prev.shape != (model.hidden_dim,):
        raise ValueError("input or state dimension does not match the model")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev))):
        raise NumericError("non-finite input to the recurrent cell")
    if c_prev is None:
        c0 = np.zeros(model.hidden_dim)
    else:
        c0 = np.asarray(c_prev, dtype=np.float64)
    H, cache = _run_cell(model, x_t[None, :], h_prev, c0)
    c_t = cache["CS"][0] if model.cell_kind == "lstm" else None
    return H[0], c_t


def projector_apply(h: np.ndarray, model: RmModel) -> np.ndarray:
    """g(h) = h + W2 ReLU(W1 h + b1) + b2 for a single state or a stack of states."""
    p = model.params
    h = np.asarray(h, dtype=np.float64)
    u = h @ p["P_W1"].T + p["P_b1"]
    return h + np.maximum(u, 0.0) @ p["P_W2"].T + p["P_b2"]


def _heads(model: RmModel, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = model.params
    point = H @ p["Y_W"].T + p["Y_b"]
    A = np.tanh(H @ p["D_W1"].T + p["D_b1"])
    raw = (A @ p["D_W2"].T + p["D_b2"]).reshape(H.shape[0], model.n_leads, 3)
    return point, raw, A


def forward_pass(inputs: np.ndarray, model: RmModel) -> ForwardResult:
    """Run the cell from h_0 = 0 and evaluate both heads at every step."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"inputs must be T x {model.input_dim}")
    if X.shape[0] < 2:
        raise ValueError("forward_pass needs at least two steps")
    if not np.all(np.isfinite(X)):
        raise NumericError("inputs contain non-finite values")

    zeros = np.zeros(model.hidden_dim)
    with np.errstate(over="raise", invalid="raise"):
        try:
            H, cache = _run_cell(model, X, zeros, zeros)
            point, raw, A = _heads(model, H)
        except FloatingPointError as e:
            raise NumericError(f"overflow in forward pass: {e}")
    if not (np.all(np.isfinite(point)) and np.all(np.isfinite(raw))):
        raise NumericError("forward pass produced non-finite head outputs")
    cache["A"] = A
    return ForwardResult(
        trajectory=HiddenTrajectory(H), point=point, raw=raw, cache=cache
    )


def predict(model: RmModel, inputs: np.ndarray) -> Tuple[TwoPartDist, np.ndarray]:
    """Per-step, per-lead forecast distributions and point forecasts (T x L)."""
    result = forward_pass(inputs, model)
    return result.dist, result.point


def _as_states(traj: Union[HiddenTrajectory, np.ndarray]) -> np.ndarray:
    if isinstance(traj, HiddenTrajectory):
        return traj.h
    return np.asarray(traj, dtype=np.float64)


def backward_errors(
    traj: Union[HiddenTrajectory, np.ndarray], model: RmModel
) -> np.ndarray:
    """Rows e_t = h_t - g(h_{t+1}) for t = 1..T-1."""
    h = _as_states(traj)
    if h.shape[0] < 2:
        raise ValueError("at least two hidden states are required")
    return h[:-1] - projector_apply(h[1:], model)


def q_hat(traj: Union[HiddenTrajectory, np.ndarray], model: RmModel) -> float:
    """Aggregate squared backward defect over the trajectory."""
    return float(np.sum(backward_errors(traj, model) ** 2))


def rm_loss(traj: Union[HiddenTrajectory, np.ndarray], model: RmModel) -> float:
    """Mean over consecutive pairs of ||h_t - g(h_{t+1})||^2."""
    errors = backward_errors(traj, model)
    return float(np.mean(np.sum(errors**2, axis=1)))


def rm_loss_windowed(
    buffer: Union[HiddenTrajectory, np.ndarray], model: RmModel
) -> float:
    """RM loss over a buffer of the last W >= 2 hidden states."""
    states = _as_states(buffer)
    if states.ndim != 2 or states.shape[0] < 2:
        raise ValueError("window buffer needs at least two hidden states")
    return rm_loss(states, model)


def task_loss(dist: TwoPartDist, targets: np.ndarray, lead: int) -> float:
    """
    Mean two-part NLL of the forecast issued at t against targets[t + lead].

    Missing targets are skipped.
    """
    targets = np.asarray(targets, dtype=np.float64)
    T = targets.shape[0]
    if lead < 0 or lead >= T:
        raise ValueError("lead must lie in [0, T)")
    aligned = targets[lead:]
    issued = dist[slice(0, T - lead)]
    valid = np.isfinite(aligned)
    if not np.any(valid):
        raise EmptyBatchError("all targets are masked")
    scores = nll(issued[valid], aligned[valid])
    return float(np.mean(scores))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the distribution NLL and the auxiliary point-head squared error."""

    nll: float = 1.0
    aux: float = 0.1


@dataclass
class LossParts:
    total: float
    task: float
    nll: float
    mse: float
    rm: float
    n_pairs: int


def aligned_targets(targets: np.ndarray, leads: Sequence[int]) -> np.ndarray:
    """T x L matrix whose column l holds targets[t + lead_l] (NaN past the end)."""
    targets = np.asarray(targets, dtype=np.float64)
    T = targets.shape[0]
    Y = np.full((T, len(leads)), np.nan)
    for j, lead in enumerate(leads):
        if lead < T:
            Y[: T - lead, j] = targets[lead:]
    return Y


def _cell_backward(
    model: RmModel, cache: Dict[str, np.ndarray], H: np.ndarray, dH: np.ndarray
) -> Dict[str, np.ndarray]:
    p = model.params
    X, HP = cache["X"], cache["HP"]
    T, d = H.shape
    grads: Dict[str, np.ndarray] = {}

    if model.cell_kind == "elman":
        DA = np.empty((T, d))
        dh_next = np.zeros(d)
        W_h_T = p["W_h"].T
        for t in range(T - 1, -1, -1):
            da = (dH[t] + dh_next) * (1.0 - H[t] ** 2)
            DA[t] = da
            dh_next = W_h_T @ da
        grads.update({"W_x": DA.T @ X, "W_h": DA.T @ HP, "b_h": DA.sum(axis=0)})
    elif model.cell_kind == "gru":
        Z, R, C = cache["Z"], cache["R"], cache["C"]
        DZ, DR, DC = np.empty((T, d)), np.empty((T, d)), np.empty((T, d))
        dh_next = np.zeros(d)
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            z, r, c, hp = Z[t], R[t], C[t], HP[t]
            dac = dh * z * (1.0 - c**2)
            drh = p["U_c"].T @ dac
            daz = dh * (c - hp) * z * (1.0 - z)
            dar = drh * hp * r * (1.0 - r)
            dh_next = dh * (1.0 - z) + drh * r + p["U_z"].T @ daz + p["U_r"].T @ dar
            DZ[t], DR[t], DC[t] = daz, dar, dac
        grads.update({"W_z": DZ.T @ X, "U_z": DZ.T @ HP, "b_z": DZ.sum(axis=0)})
        grads.update({"W_r": DR.T @ X, "U_r": DR.T @ HP, "b_r": DR.sum(axis=0)})
        grads.update({"W_c": DC.T @ X, "U_c": DC.T @ (R * HP), "b_c": DC.sum(axis=0)})
    else:
        I, F, O, G = (cache[f"G_{g}"] for g in GATES["lstm"])
        TC, CP = cache["TC"], cache["CP"]
        D = {g: np.empty((T, d)) for g in GATES["lstm"]}
        dh_next, dc_next = np.zeros(d), np.zeros(d)
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            dc = dc_next + dh * O[t] * (1.0 - TC[t] ** 2)
            D["i"][t] = dc * G[t] * I[t] * (1.0 - I[t])
            D["f"][t] = dc * CP[t] * F[t] * (1.0 - F[t])
            D["o"][t] = dh * TC[t] * O[t] * (1.0 - O[t])
            D["g"][t] = dc * I[t] * (1.0 - G[t] ** 2)
            dc_next = dc * F[t]
            dh_next = sum(p[f"U_{g}"].T @ D[g][t] for g in GATES["lstm"])
        for g in GATES["lstm"]:
            grads[f"W_{g}"] = D[g].T @ X
            grads[f"U_{g}"] = D[g].T @ HP
            grads[f"b_{g}"] = D[g].sum(axis=0)
    return grads


def loss_and_gradients(
    model: RmModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    lam: float,
    weights: LossWeights = LossWeights(),
    rm_window: int = 0,
) -> Tuple[LossParts, Dict[str, np.ndarray]]:
    """
    Loss w_nll * NLL + w_aux * MSE + lam * L_RM and its exact gradient.

    NLL and MSE are averaged over every valid (step, lead) pair. With
    ``rm_window`` > 0 the RM term covers only the last ``rm_window`` states;
    ``LossParts.rm`` always reports the full-sequence value.
    """
    result = forward_pass(inputs, model)
    p = model.params
    H = result.trajectory.h
    T = H.shape[0]
    Y = aligned_targets(targets, model.leads)
    valid = np.isfinite(Y)
    n_pairs = int(valid.sum())
    if n_pairs == 0:
        raise EmptyBatchError("sequence has no observed targets")

    grads = {name: np.zeros_like(value) for name, value in p.items()}
    dH = np.zeros_like(H)
    Yz = np.where(valid, Y, 0.0)

    # point head
    err = np.where(valid, result.point - Yz, 0.0)
    mse = float(np.sum(err**2)) / n_pairs
    g_point = weights.aux * 2.0 * err / n_pairs
    grads["Y_W"] = g_point.T @ H
    grads["Y_b"] = g_point.sum(axis=0)
    dH += g_point @ p["Y_W"]

    # distribution head
    s, m, ls = result.raw[:, :, 0], result.raw[:, :, 1], result.raw[:, :, 2]
    pi0 = special.expit(s)
    ls_c = np.clip(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = np.exp(ls_c)
    wet = valid & (Yz > 0.0)
    dry = valid & ~wet
    log_y = np.log(np.where(wet, Yz, 1.0))
    zscore = (log_y - m) / sigma
    nll_terms = np.where(
        dry,
        np.logaddexp(0.0, -s),
        np.where(
            wet,
            np.logaddexp(0.0, s) + log_y + ls_c + HALF_LOG_2PI + 0.5 * zscore**2,
            0.0,
        ),
    )
    nll_value = float(np.sum(nll_terms)) / n_pairs
    scale = weights.nll / n_pairs
    inside = (ls > LOG_SIGMA_MIN) & (ls < LOG_SIGMA_MAX)
    dS = np.where(dry, pi0 - 1.0, np.where(wet, pi0, 0.0)) * scale
    dM = np.where(wet, -zscore / sigma, 0.0) * scale
    dLS = np.where(wet & inside, 1.0 - zscore**2, 0.0) * scale
    dO = np.stack([dS, dM, dLS], axis=2).reshape(T, 3 * model.n_leads)
    A = result.cache["A"]
    grads["D_W2"] = dO.T @ A
    grads["D_b2"] = dO.sum(axis=0)
    dPre = (dO @ p["D_W2"]) * (1.0 - A**2)
    grads["D_W1"] = dPre.T @ H
    grads["D_b1"] = dPre.sum(axis=0)
    dH += dPre @ p["D_W1"]

    # backward-coherence term
    rm_full = rm_loss(H, model)
    rm_used = rm_full
    if lam != 0.0:
        start = 0 if rm_window == 0 else max(0, T - rm_window)
        states = H[start:]
        n_rm = states.shape[0] - 1
        nxt = states[1:]
        U = nxt @ p["P_W1"].T + p["P_b1"]
        V = np.maximum(U, 0.0)
        E = states[:-1] - (nxt + V @ p["P_W2"].T + p["P_b2"])
        rm_used = float(np.sum(E**2)) / n_rm
        dE = lam * 2.0 * E / n_rm
        dG = -dE
        grads["P_W2"] = dG.T @ V
        grads["P_b2"] = dG.sum(axis=0)
        dU = (dG @ p["P_W2"]) * (U > 0.0)
        grads["P_W1"] = dU.T @ nxt
        grads["P_b1"] = dU.sum(axis=0)
        dH[start : T - 1] += dE
        dH[start + 1 :] += dG + dU @ p["P_W1"]

    grads.update(_cell_backward(model, result.cache, H, dH))

    task = weights.nll * nll_value + weights.aux * mse
    parts = LossParts(
        total=task + lam * rm_used,
        task=task,
        nll=nll_value,
        mse=mse,
        rm=rm_full,
        n_pairs=n_pairs,
    )
    return parts, grads


def loss_value(
    model: RmModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    lam: float,
    weights: LossWeights = LossWeights(),
    rm_window: int = 0,
) -> float:
    """Total loss without gradients, evaluated independently of the backward pass."""
    result = forward_pass(inputs, model)
    Y = aligned_targets(targets, model.leads)
    valid = np.isfinite(Y)
    if not np.any(valid):
        raise EmptyBatchError("sequence has no observed targets")
    mse = float(np.mean((result.point[valid] - Y[valid]) ** 2))
    d = result.dist
    nll_value = float(
        np.mean(nll(TwoPartDist(d.pi0[valid], d.mu[valid], d.sigma[valid]), Y[valid]))
    )
    total = weights.nll * nll_value + weights.aux * mse
    if lam != 0.0:
        H = result.trajectory.h
        states = H if rm_window == 0 else H[max(0, H.shape[0] - rm_window) :]
        total += lam * rm_loss_windowed(states, model)
    return total
