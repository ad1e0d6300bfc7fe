"""LSTM + MLP network emitting a per-customer exponential purchase rate.

Everything is plain numpy in float64 with hand-written backpropagation through
time, so the gradients can be checked against finite differences exactly.

Gate layout in the stacked LSTM weights is [input, forget, output, candidate].
Padded steps (mask 0) leave the hidden and cell state untouched.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .survival import ExponentialSurvival, censored_exponential_mle
from .transactions import CustomerSequence, WindowBatch, clamp_zero_gaps, serving_batch, training_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOSS_KINDS = ("censored_nll", "weighted_asymmetric")
TRANSFORMS = ("identity", "log1p")


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "censored_nll"
    learning_rate: float = 0.05
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    gradient_clip: float = 5.0
    input_transform: str = "log1p"
    hidden: int = 16
    mlp_widths: tuple[int, ...] = (16, 1)
    clamp: float = 6.0
    seq_len: int = 7
    eps_gap: float = 0.5
    omega_bins: int = 10

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.input_transform not in TRANSFORMS:
            raise ValueError(f"input_transform must be one of {TRANSFORMS}")
        if not self.mlp_widths or self.mlp_widths[-1] != 1:
            raise ValueError("the last MLP width must be 1")


@dataclass
class NetHyper:
    hidden: int = 16
    mlp_widths: tuple[int, ...] = (16, 1)
    clamp: float = 6.0
    seq_len: int = 7
    input_transform: str = "log1p"
    eps_gap: float = 0.5

    @classmethod
    def from_train_config(cls, cfg: TrainConfig) -> "NetHyper":
        return cls(cfg.hidden, cfg.mlp_widths, cfg.clamp, cfg.seq_len, cfg.input_transform, cfg.eps_gap)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class RecurrentSurvivalNet:
    hyper: NetHyper
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, hyper: NetHyper, rng: np.random.Generator, scale: float = 0.1) -> "RecurrentSurvivalNet":
        H = hyper.hidden
        p = {
            "lstm.Wx": rng.uniform(-scale, scale, (4 * H, 1)),
            "lstm.Wh": rng.uniform(-scale, scale, (4 * H, H)),
            "lstm.b": rng.uniform(-scale, scale, 4 * H),
        }
        p["lstm.b"][H : 2 * H] = 1.0
        fan_in = H
        for k, width in enumerate(hyper.mlp_widths):
            p[f"mlp.{k}.W"] = rng.uniform(-scale, scale, (width, fan_in))
            p[f"mlp.{k}.b"] = rng.uniform(-scale, scale, width)
            fan_in = width
        return cls(hyper, p)

    @classmethod
    def zeros(cls, hyper: NetHyper) -> "RecurrentSurvivalNet":
        net = cls.initialize(hyper, np.random.default_rng(0))
        for v in net.params.values():
            v[...] = 0.0
        return net

    def copy(self) -> "RecurrentSurvivalNet":
        return RecurrentSurvivalNet(self.hyper, {k: v.copy() for k, v in self.params.items()})

    # -- forward / backward -------------------------------------------------

    def transform(self, windows: np.ndarray) -> np.ndarray:
        if self.hyper.input_transform == "log1p":
            return np.log1p(windows)
        return np.asarray(windows, dtype=float)

    def _forward(self, windows, masks):
        windows = np.asarray(windows, dtype=float)
        masks = np.asarray(masks, dtype=float)
        if windows.ndim != 2 or windows.shape[1] != self.hyper.seq_len or masks.shape != windows.shape:
            raise ValueError(
                f"expected windows and masks of shape (batch, {self.hyper.seq_len}), "
                f"got {windows.shape} and {masks.shape}"
            )
        H = self.hyper.hidden
        Wx, Wh, b = self.params["lstm.Wx"][:, 0], self.params["lstm.Wh"], self.params["lstm.b"]
        x = self.transform(windows)
        B, s = x.shape
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        steps = []
        for t in range(s):
            a = x[:, t, None] * Wx + h @ Wh.T + b
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H : 2 * H])
            o = _sigmoid(a[:, 2 * H : 3 * H])
            g = np.tanh(a[:, 3 * H :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            m = masks[:, t, None]
            steps.append((x[:, t], h, c, i, f, o, g, tc, m))
            c = m * c_new + (1 - m) * c
            h = m * (o * tc) + (1 - m) * h

        acts = [h]
        n_layers = len(self.hyper.mlp_widths)
        for k in range(n_layers):
            pre = acts[-1] @ self.params[f"mlp.{k}.W"].T + self.params[f"mlp.{k}.b"]
            acts.append(np.tanh(pre) if k < n_layers - 1 else pre)
        z = acts[-1][:, 0]
        rates = np.exp(np.clip(z, -self.hyper.clamp, self.hyper.clamp))
        return rates, (steps, acts, z)

    def rates(self, windows, masks) -> np.ndarray:
        return self._forward(windows, masks)[0]

    def _backward(self, cache, dz) -> dict[str, np.ndarray]:
        steps, acts, z = cache
        c_bound = self.hyper.clamp
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        d = (dz * ((z > -c_bound) & (z < c_bound)))[:, None]
        n_layers = len(self.hyper.mlp_widths)
        for k in reversed(range(n_layers)):
            grads[f"mlp.{k}.W"] += d.T @ acts[k]
            grads[f"mlp.{k}.b"] += d.sum(axis=0)
            d = d @ self.params[f"mlp.{k}.W"]
            if k > 0:
                d = d * (1 - acts[k] ** 2)

        Wh = self.params["lstm.Wh"]
        dh = d
        dc = np.zeros_like(dh)
        for x_t, h_prev, c_prev, i, f, o, g, tc, m in reversed(steps):
            dh_new = m * dh
            dc_new = m * dc + dh_new * o * (1 - tc**2)
            da = np.concatenate(
                [
                    dc_new * g * i * (1 - i),
                    dc_new * c_prev * f * (1 - f),
                    dh_new * tc * o * (1 - o),
                    dc_new * i * (1 - g**2),
                ],
                axis=1,
            )
            grads["lstm.Wx"][:, 0] += da.T @ x_t
            grads["lstm.Wh"] += da.T @ h_prev
            grads["lstm.b"] += da.sum(axis=0)
            dh = (1 - m) * dh + da @ Wh
            dc = (1 - m) * dc + dc_new * f
        return grads


def forward(net: RecurrentSurvivalNet, example) -> float:
    """Rate for one PaddedExample."""
    return float(net.rates(example.window[None, :], example.mask[None, :])[0])


# ------------------------------------------------------------------- losses


@dataclass
class LossBatch:
    predictions: np.ndarray
    targets: np.ndarray
    observed: np.ndarray
    weights: np.ndarray | None = None
    e_of_t: float | None = None

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
        if not (self.predictions.shape == self.targets.shape == self.observed.shape):
            raise ValueError("predictions, targets and observed must be parallel")


def _check_rates(rates):
    if np.any(~(rates > 0)):
        raise ValueError("predicted rates must be strictly positive")


def censored_nll(batch: LossBatch) -> float:
    """Mean of -[delta * log(rate) - rate * t] over the batch."""
    _check_rates(batch.predictions)
    lam, t, d = batch.predictions, batch.targets, batch.observed
    return float(np.mean(lam * t - d * np.log(lam)))


def _asym_terms(batch: LossBatch):
    if batch.weights is None or batch.e_of_t is None:
        raise ValueError("weighted asymmetric loss needs weights and e_of_t")
    _check_rates(batch.predictions)
    t_hat = 1.0 / batch.predictions
    obs = batch.observed == 1
    cens = ~obs
    coef = np.zeros_like(t_hat)
    ref = np.where(obs, batch.targets, batch.e_of_t)
    if obs.any():
        coef[obs] = batch.weights[obs] / obs.sum()
    if cens.any():
        coef[cens] = (1 - batch.weights[cens]) / cens.sum()
    return t_hat, ref, coef


def weighted_asymmetric_loss(batch: LossBatch) -> float:
    """Weighted squared error on predicted times 1/rate.

    Observed targets are pulled towards their value with weight omega; censored
    ones towards the batch expectation E[t] with weight 1 - omega. Each group is
    averaged over its own size, and an empty group contributes nothing.
    """
    t_hat, ref, coef = _asym_terms(batch)
    return float(np.sum(coef * (t_hat - ref) ** 2))


def _loss_and_dz(kind: str, batch: LossBatch):
    """Loss and its derivative w.r.t. the (unclamped) log-rate of each example."""
    lam = batch.predictions
    if kind == "censored_nll":
        return censored_nll(batch), (lam * batch.targets - batch.observed) / lam.size
    if kind == "weighted_asymmetric":
        t_hat, ref, coef = _asym_terms(batch)
        return float(np.sum(coef * (t_hat - ref) ** 2)), -2 * coef * (t_hat - ref) * t_hat
    raise ValueError(f"unknown loss kind {kind!r}")


def estimate_omega(targets, observed, n_bins: int = 10, min_count: int = 2) -> np.ndarray:
    """P(observed | t) as the observed fraction inside equal-count bins of t.

    Tied values always share a bin. Bins with fewer than `min_count` entries
    use the overall observed fraction.
    """
    t = np.asarray(targets, dtype=float)
    d = np.asarray(observed, dtype=float)
    if t.size == 0:
        raise ValueError("empty batch")
    overall = d.mean()
    sorted_t = np.sort(t)
    rank = np.searchsorted(sorted_t, t, side="left")
    bins = np.minimum(rank * n_bins // t.size, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    hits = np.bincount(bins, weights=d, minlength=n_bins)
    frac = np.where(counts >= min_count, hits / np.maximum(counts, 1), overall)
    return frac[bins]


def batch_expected_time(targets, observed, fallback: float) -> float:
    try:
        return censored_exponential_mle(targets, observed).mean
    except ValueError:
        return fallback


def gradients(net: RecurrentSurvivalNet, batch: WindowBatch, loss_kind: str = "censored_nll",
              omega=None, e_of_t=None):
    """Loss on `batch` and its exact gradient for every weight array."""
    rates, cache = net._forward(batch.windows, batch.masks)
    lb = LossBatch(rates, batch.targets, batch.observed, omega, e_of_t)
    loss, dz = _loss_and_dz(loss_kind, lb)
    return loss, net._backward(cache, dz)


def batch_loss(net, batch: WindowBatch, loss_kind="censored_nll", omega=None, e_of_t=None) -> float:
    rates = net.rates(batch.windows, batch.masks)
    lb = LossBatch(rates, batch.targets, batch.observed, omega, e_of_t)
    return _loss_and_dz(loss_kind, lb)[0]


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    net: RecurrentSurvivalNet
    epoch_losses: list[float]

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for e, loss in enumerate(self.epoch_losses, start=1):
                fh.write(f"{e},{loss!r}\n")


def prepare_sequences(sequences, eps_gap: float) -> list[CustomerSequence]:
    return [clamp_zero_gaps(s, eps_gap) for s in sequences]


def train(sequences: list[CustomerSequence], config: TrainConfig) -> TrainResult:
    """Mini-batch SGD with global gradient-norm clipping.

    The logged loss for each epoch is the full training-set loss measured with
    the weights at the end of that epoch.
    """
    seqs = prepare_sequences(sequences, config.eps_gap)
    data = training_batch(seqs, config.seq_len)
    if len(data) == 0:
        raise TrainingError("no trainable examples: every sequence has a single entry")

    rng = np.random.default_rng(config.seed)
    net = RecurrentSurvivalNet.initialize(NetHyper.from_train_config(config), rng)

    omega = None
    global_e = None
    if config.loss_kind == "weighted_asymmetric":
        omega = estimate_omega(data.targets, data.observed, config.omega_bins)
        global_e = batch_expected_time(data.targets, data.observed, fallback=float(np.mean(data.targets)) or 1.0)

    def full_loss():
        return batch_loss(net, data, config.loss_kind, omega, global_e)

    losses = []
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            mb = data.subset(idx)
            w = e = None
            if omega is not None:
                w = omega[idx]
                e = batch_expected_time(mb.targets, mb.observed, global_e)
            loss, grads = gradients(net, mb, config.loss_kind, w, e)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}; lower learning_rate "
                    f"(currently {config.learning_rate}) or gradient_clip"
                )
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = config.learning_rate
            if config.gradient_clip and norm > config.gradient_clip:
                scale *= config.gradient_clip / norm
            for k, g in grads.items():
                net.params[k] -= scale * g
        epoch_loss = full_loss()
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"non-finite training loss after epoch {epoch + 1}; lower learning_rate "
                f"(currently {config.learning_rate})"
            )
        losses.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch + 1, epoch_loss)
    return TrainResult(net, losses)


def predict_rates(net: RecurrentSurvivalNet, sequences: list[CustomerSequence]) -> dict[str, ExponentialSurvival]:
    seqs = prepare_sequences(sequences, net.hyper.eps_gap)
    batch = serving_batch(seqs, net.hyper.seq_len)
    rates = net.rates(batch.windows, batch.masks) if len(batch) else np.zeros(0)
    return {cid: ExponentialSurvival(float(r)) for cid, r in zip(batch.customer_ids, rates)}


# -------------------------------------------------------------- persistence


def save_model(net: RecurrentSurvivalNet, path: str | Path) -> None:
    hyper = asdict(net.hyper)
    hyper["mlp_widths"] = list(net.hyper.mlp_widths)
    doc = {
        "format_version": FORMAT_VERSION,
        "hyperparams": hyper,
        "weights": {
            name: {"shape": list(w.shape), "data": w.ravel().tolist()} for name, w in sorted(net.params.items())
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path: str | Path) -> RecurrentSurvivalNet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc.msg})") from None
    for key in ("format_version", "hyperparams", "weights"):
        if key not in doc:
            raise ModelFormatError(f"{path}: missing field {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format_version {doc['format_version']} (expected {FORMAT_VERSION})"
        )
    hp = doc["hyperparams"]
    try:
        hyper = NetHyper(
            hidden=int(hp["hidden"]),
            mlp_widths=tuple(int(w) for w in hp["mlp_widths"]),
            clamp=float(hp["clamp"]),
            seq_len=int(hp["seq_len"]),
            input_transform=hp["input_transform"],
            eps_gap=float(hp["eps_gap"]),
        )
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing hyperparameter {exc.args[0]!r}") from None

    expected = RecurrentSurvivalNet.initialize(hyper, np.random.default_rng(0)).params
    params = {}
    for name, ref in expected.items():
        if name not in doc["weights"]:
            raise ModelFormatError(f"{path}: missing weight {name!r}")
        entry = doc["weights"][name]
        arr = np.asarray(entry["data"], dtype=float)
        if tuple(entry["shape"]) != ref.shape or arr.size != ref.size:
            raise ModelFormatError(f"{path}: weight {name!r} has shape {entry['shape']}, expected {list(ref.shape)}")
        params[name] = arr.reshape(ref.shape)
    return RecurrentSurvivalNet(hyper, params)
