"""Three-term training loss, its analytic gradients, and a desk-scale
trainable linear multi-band reconstructor.

The loss for a measured sinogram p_d with ground truth p_0 and per-band
images x_1..x_n (s = sum_k x_k) is

    l = ||p_d - A s||^2                      (data consistency)
      + eta * sum_k mu_k ||F_k A x_k||^2     (band separation)
      + eta_i * ||p_0 - s||^2                (reconstruction quality)

with F_k the strict (self-adjoint) band-reject operators, which gives the
exact gradient

    dl/dx_k = -2 A^T (p_d - A s) + 2 eta mu_k A^T F_k F_k A x_k - 2 eta_i (p_0 - s).

The reconstructor is one dense linear map per band applied to the linear
back-projection image y = A^T p_d, optionally clamped at zero (a ReLU on
each band output); it stands in for a full network while keeping the
optimization verifiable against the closed-form optimum of the quadratic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Image, Sinogram, read_tensor, write_tensor
from .errors import DivergenceError
from .filters import BandFilterBank, band_reject_array
from .forward import SparseOperator, adjoint_apply_flat, forward_apply_flat


@dataclass(frozen=True)
class LossBreakdown:
    """The three loss terms and their sum."""

    data_term: float
    band_term: float
    image_term: float
    total: float


@dataclass
class LinearBandModel:
    """Per-band dense linear maps W_k acting on the flattened back-projection
    image; ``clamp_outputs`` applies an elementwise max(0, .) to each band."""

    weights: np.ndarray  # (n, N, N)
    clamp_outputs: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[0] < 1:
            raise ValueError("weights must be shaped (n, N, N) with n >= 1")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        self.weights = w

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.weights.shape[1]


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), lr=lr, **kw)


def _check_band_inputs(op, bank, pd, p0, xs, mu):
    if len(xs) != bank.n:
        raise ValueError(f"got {len(xs)} band images, bank has {bank.n} bands")
    if len(mu) != bank.n:
        raise ValueError(f"mu has {len(mu)} entries, expected {bank.n}")
    if pd.data.shape != (op.n_d, op.n_t):
        raise ValueError("sinogram shape does not match operator")
    if p0.grid != op.grid:
        raise ValueError("ground-truth grid does not match operator")
    for x in xs:
        if x.grid != op.grid:
            raise ValueError("band image grid does not match operator")


def loss_eval(
    op: SparseOperator,
    bank: BandFilterBank,
    pd: Sinogram,
    p0: Image,
    xs,
    eta: float,
    eta_i: float,
    mu,
) -> LossBreakdown:
    """Evaluate the three loss terms at the given band images."""
    _check_band_inputs(op, bank, pd, p0, xs, mu)
    x = np.stack([img.ravel() for img in xs])
    s = x.sum(axis=0)
    pd_flat = pd.data.ravel()

    r = pd_flat - forward_apply_flat(op, s)
    data_term = float(r @ r)

    band_term = 0.0
    shape = (op.n_d, op.n_t)
    for k in range(1, bank.n + 1):
        w = band_reject_array(bank, k, forward_apply_flat(op, x[k - 1]).reshape(shape), strict=True)
        band_term += mu[k - 1] * float(np.vdot(w, w))
    band_term *= eta

    d = p0.ravel() - s
    image_term = eta_i * float(d @ d)
    return LossBreakdown(
        data_term=data_term,
        band_term=band_term,
        image_term=image_term,
        total=data_term + band_term + image_term,
    )


def loss_grad(
    op: SparseOperator,
    bank: BandFilterBank,
    pd: Sinogram,
    p0: Image,
    xs,
    eta: float,
    eta_i: float,
    mu,
) -> list[Image]:
    """Analytic gradient of the total loss with respect to each band image."""
    _check_band_inputs(op, bank, pd, p0, xs, mu)
    x = np.stack([img.ravel() for img in xs])
    g = _loss_grad_flat(op, bank, pd.data.ravel(), p0.ravel(), x, eta, eta_i, mu)
    return [Image(g[k].reshape(op.grid.shape), op.grid) for k in range(bank.n)]


def _loss_grad_flat(op, bank, pd_flat, p0_flat, x, eta, eta_i, mu) -> np.ndarray:
    n = x.shape[0]
    s = x.sum(axis=0)
    r = pd_flat - forward_apply_flat(op, s)
    common = -2.0 * adjoint_apply_flat(op, r) - 2.0 * eta_i * (p0_flat - s)
    g = np.tile(common, (n, 1))
    if eta > 0:
        shape = (op.n_d, op.n_t)
        for k in range(1, n + 1):
            w = band_reject_array(bank, k, forward_apply_flat(op, x[k - 1]).reshape(shape), strict=True)
            w = band_reject_array(bank, k, w, strict=True)
            g[k - 1] += 2.0 * eta * mu[k - 1] * adjoint_apply_flat(op, w.ravel())
    return g


# ---------------------------------------------------------------------------
# linear multi-band model
# ---------------------------------------------------------------------------

def model_forward(model: LinearBandModel, pd: Sinogram, op: SparseOperator) -> list[Image]:
    """Band images x_k = W_k (A^T p_d), clamped at zero when configured."""
    if model.n_pixels != op.n_cols:
        raise ValueError(
            f"model dimension {model.n_pixels} does not match grid ({op.n_cols} pixels)"
        )
    y = adjoint_apply_flat(op, pd.data.ravel())
    out = []
    for k in range(model.n):
        z = model.weights[k] @ y
        if model.clamp_outputs:
            z = np.maximum(z, 0.0)
        out.append(Image(z.reshape(op.grid.shape), op.grid))
    return out


def model_predict(model: LinearBandModel, pd: Sinogram, op: SparseOperator) -> Image:
    """Total reconstruction: the sum of the band images."""
    parts = model_forward(model, pd, op)
    total = np.zeros(op.grid.shape)
    for img in parts:
        total = total + img.data
    return Image(total, op.grid)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; the state is advanced in place and the
    updated parameter array is returned."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and moments must share one shape")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def init_scaled_identity(
    op: SparseOperator, dataset, n: int, clamp_outputs: bool = False
) -> LinearBandModel:
    """Identity-per-band init, scaled by the least-squares fit of the first
    sample's back-projection image to its ground truth. Keeps early outputs
    near the truth's magnitude so the clamped variant does not start dead."""
    pd0, p0 = dataset[0]
    y = adjoint_apply_flat(op, pd0.data.ravel())
    denom = float(y @ y)
    alpha = float(y @ p0.ravel()) / denom if denom > 0 else 1.0
    n_pix = op.n_cols
    w = np.tile((alpha / n) * np.eye(n_pix), (n, 1, 1))
    return LinearBandModel(weights=w, clamp_outputs=clamp_outputs)


def train_model(
    model: LinearBandModel,
    dataset,
    op: SparseOperator,
    bank: BandFilterBank,
    eta: float,
    eta_i: float,
    mu,
    epochs: int,
    batch: int = 2,
    lr: float = 1e-4,
    seed: int = 0,
    val_dataset=None,
) -> tuple[LinearBandModel, list[dict]]:
    """Minibatch Adam on the mean loss over (sinogram, truth) pairs.

    The weight gradient follows from the image-space gradient by the chain
    rule: dW_k = g_k y^T with g_k masked by the clamp activation when the
    model clamps its outputs (subgradient 0 at exactly zero). Shuffling is
    driven only by ``seed``, so a run is deterministic.

    Returns the trained model and one trace record per epoch with the mean
    training loss (and validation loss when a validation set is given).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    mu = tuple(float(m) for m in mu)
    n = model.n
    rng = np.random.default_rng(seed)
    # the model input is fixed per sample; precompute it
    ys = [adjoint_apply_flat(op, pd.data.ravel()) for pd, _ in dataset]
    truths = [p0.ravel() for _, p0 in dataset]
    pds = [pd.data.ravel() for pd, _ in dataset]

    weights = model.weights.copy()
    state = AdamState.for_params(weights, lr=lr)
    trace: list[dict] = []

    def sample_loss_and_grad(idx, w):
        y = ys[idx]
        z = np.einsum("kij,j->ki", w, y)
        x = np.maximum(z, 0.0) if model.clamp_outputs else z
        g = _loss_grad_flat(op, bank, pds[idx], truths[idx], x, eta, eta_i, mu)
        if model.clamp_outputs:
            g = g * (z > 0.0)
        loss = _loss_total_flat(op, bank, pds[idx], truths[idx], x, eta, eta_i, mu)
        return loss, np.einsum("ki,j->kij", g, y)

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        running = 0.0
        for start in range(0, len(order), batch):
            members = order[start : start + batch]
            grad = np.zeros_like(weights)
            for idx in members:
                loss, g_w = sample_loss_and_grad(int(idx), weights)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"training loss non-finite at epoch {epoch}, sample {int(idx)}"
                    )
                running += loss
                grad += g_w
            grad /= len(members)
            weights = adam_step(weights, grad, state)
        record = {"epoch": epoch, "train_loss": running / len(order)}
        if val_dataset is not None:
            record["val_loss"] = mean_loss(
                LinearBandModel(weights, model.clamp_outputs), val_dataset, op, bank, eta, eta_i, mu
            )
        trace.append(record)
    return LinearBandModel(weights, model.clamp_outputs), trace


def _loss_total_flat(op, bank, pd_flat, p0_flat, x, eta, eta_i, mu) -> float:
    s = x.sum(axis=0)
    r = pd_flat - forward_apply_flat(op, s)
    total = float(r @ r)
    shape = (op.n_d, op.n_t)
    if eta > 0:
        for k in range(1, x.shape[0] + 1):
            w = band_reject_array(bank, k, forward_apply_flat(op, x[k - 1]).reshape(shape), strict=True)
            total += eta * mu[k - 1] * float(np.vdot(w, w))
    d = p0_flat - s
    return total + eta_i * float(d @ d)


def mean_loss(model: LinearBandModel, dataset, op, bank, eta, eta_i, mu) -> float:
    """Mean total loss of the model over a dataset (no gradients)."""
    mu = tuple(float(m) for m in mu)
    total = 0.0
    for pd, p0 in dataset:
        y = adjoint_apply_flat(op, pd.data.ravel())
        z = np.einsum("kij,j->ki", model.weights, y)
        x = np.maximum(z, 0.0) if model.clamp_outputs else z
        total += _loss_total_flat(op, bank, pd.data.ravel(), p0.ravel(), x, eta, eta_i, mu)
    return total / len(dataset)


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(model: LinearBandModel, directory, extra_meta: dict | None = None) -> None:
    """One tensor file per band map plus a JSON metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(model.n):
        write_tensor(directory / f"band_{k + 1}.tensor", model.weights[k])
    meta = {
        "n_bands": model.n,
        "n_pixels": model.n_pixels,
        "clamp_outputs": model.clamp_outputs,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(directory / "model.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_model(directory) -> LinearBandModel:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        meta = json.load(fh)
    weights = np.stack(
        [
            read_tensor(directory / f"band_{k + 1}.tensor").astype(np.float64)
            for k in range(meta["n_bands"])
        ]
    )
    return LinearBandModel(weights=weights, clamp_outputs=bool(meta["clamp_outputs"]))
