"""Sigma-conditioned residual denoiser and its self-supervised training loop.

The network maps ``(y, sigma)`` to an approximation of the score of the
sigma-smoothed pilot density. With ``x = [y, sigma] / s``,

    h1 = x E + b1
    h2 = h1 + tanh(h1 W2 + b2)
    S  = exp(a) * (h2 D + b3 - y / s) / s

where ``s`` is the RMS of the training pilots. The ``-y/s`` skip makes the
network a scaled "denoised minus noisy" residual, matching the form of the
optimal denoising autoencoder, and ``a`` is a learned log-gain.
"""
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream

PARAM_NAMES = ("E", "b1", "W2", "b2", "D", "b3", "a")
_MATRICES = ("E", "W2", "D")
MODEL_MAGIC = b"HMIMOSCR"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<8sII")


class ScoreNetError(ValueError):
    """Invalid network state or training input."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class ScoreNetwork:
    """Parameters of the denoiser plus fixed input scaling.

    Attributes
    ----------
    dim : int
        Measurement dimension ``2N``.
    width : int
        Hidden width ``W``.
    scale : float
        Input normalization ``s``.
    params : dict of ndarray
        ``E (dim+1, W)``, ``b1 (W)``, ``W2 (W, W)``, ``b2 (W)``,
        ``D (W, dim)``, ``b3 (dim)`` and the log-gain ``a (1,)``.
    identity_skip : bool
        Subtract the scaled input inside the residual.
    """

    dim: int
    width: int
    scale: float
    params: dict
    identity_skip: bool = True

    @property
    def widths(self) -> list[int]:
        return [self.dim + 1, self.width, self.width, self.dim]

    @property
    def dtype(self):
        return self.params["E"].dtype

    @classmethod
    def init(
        cls,
        dim: int,
        width: int,
        rng: np.random.Generator,
        scale: float = 1.0,
        dtype=np.float32,
        identity_skip: bool = True,
        readout_gain: float = 0.1,
    ) -> "ScoreNetwork":
        """Random initialization; the residual block starts as the identity."""
        if dim < 1 or width < 1:
            raise ScoreNetError("dimensions must be positive")
        if not scale > 0:
            raise ScoreNetError(f"scale must be positive, got {scale}")
        p = {
            "E": rng.standard_normal((dim + 1, width)) / np.sqrt(dim + 1),
            "b1": np.zeros(width),
            "W2": np.zeros((width, width)),
            "b2": np.zeros(width),
            "D": readout_gain * rng.standard_normal((width, dim)) / np.sqrt(width),
            "b3": np.zeros(dim),
            "a": np.zeros(1),
        }
        p = {k: v.astype(dtype) for k, v in p.items()}
        return cls(dim, width, float(scale), p, identity_skip)

    def copy(self) -> "ScoreNetwork":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ScoreNetwork":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def check_finite(self) -> None:
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(self.params[k])):
                raise ScoreNetError(f"parameter {k} contains non-finite values")


def _as_batch(net: ScoreNetwork, y, sigma):
    y = np.asarray(y)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != net.dim:
        raise ScoreNetError(f"expected inputs of length {net.dim}, got {y.shape[1]}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ScoreNetError("sigma must be finite and nonnegative")
    sigma = np.broadcast_to(sigma.reshape(-1, 1) if sigma.ndim else sigma, (len(y), 1))
    return y, sigma, single


def _forward(net: ScoreNetwork, y: np.ndarray, sigma: np.ndarray):
    p, dt = net.params, net.dtype
    x = np.concatenate([y, sigma], axis=1).astype(dt) / dt.type(net.scale)
    h1 = x @ p["E"] + p["b1"]
    t = np.tanh(h1 @ p["W2"] + p["b2"])
    h2 = h1 + t
    r = h2 @ p["D"] + p["b3"]
    if net.identity_skip:
        r = r - x[:, : net.dim]
    gain = np.exp(p["a"][0])
    return gain * r / dt.type(net.scale), (x, h1, t, h2, r, gain)


def _backward(net: ScoreNetwork, g_out: np.ndarray, cache) -> dict:
    x, h1, t, h2, r, gain = cache
    p = net.params
    g = g_out / net.dtype.type(net.scale)
    grads = {"a": np.array([gain * np.sum(g * r)], dtype=net.dtype)}
    g = g * gain
    grads["D"] = h2.T @ g
    grads["b3"] = g.sum(axis=0)
    gh2 = g @ p["D"].T
    gz = gh2 * (1 - t * t)
    grads["W2"] = h1.T @ gz
    grads["b2"] = gz.sum(axis=0)
    gh1 = gh2 + gz @ p["W2"].T
    grads["E"] = x.T @ gh1
    grads["b1"] = gh1.sum(axis=0)
    return grads


def forward(net: ScoreNetwork, y, sigma) -> np.ndarray:
    """Evaluate ``S(y; sigma)`` for one vector or a batch of rows."""
    net.check_finite()
    yb, sb, single = _as_batch(net, y, sigma)
    out, _ = _forward(net, yb, sb)
    return out[0] if single else out


def score(net: ScoreNetwork, y) -> np.ndarray:
    """Score of the pilot density: the network evaluated at ``sigma = 0``."""
    return forward(net, y, 0.0)


def _loss_and_grad(net, y_clean, u, sigma, weight):
    y = y_clean + sigma * u
    out, cache = _forward(net, y, sigma)
    resid = u + sigma * out
    per_sample = np.sum(resid * resid, axis=1)
    b = len(y)
    loss = float(np.sum(weight[:, 0] * per_sample) / b)
    g_out = (2 * weight * sigma * resid / b).astype(net.dtype)
    return loss, per_sample, _backward(net, g_out, cache)


def dae_loss(net: ScoreNetwork, y_clean, u, sigma) -> tuple[float, dict]:
    """Denoising loss ``mean ||u + sigma S(y_clean + sigma u; sigma)||^2`` and its gradient.

    Parameters
    ----------
    net : ScoreNetwork
    y_clean : ndarray, shape (dim,) or (B, dim)
    u : ndarray, same shape as ``y_clean``
        Standard normal perturbation.
    sigma : float or ndarray of shape (B,)
        Strictly positive noise levels.

    Returns
    -------
    loss : float
        Batch mean of the per-sample loss.
    grads : dict of ndarray
        Exact gradient with respect to every entry of ``net.params``.
    """
    net.check_finite()
    yb, sb, _ = _as_batch(net, y_clean, sigma)
    ub = np.atleast_2d(np.asarray(u))
    if ub.shape != yb.shape:
        raise ScoreNetError("u must match y_clean in shape")
    if np.any(sb <= 0):
        raise ScoreNetError("sigma must be strictly positive when training")
    loss, _, grads = _loss_and_grad(net, yb, ub, sb, np.ones_like(sb))
    return loss, grads


@dataclass
class TrainConfig:
    """Hyperparameters of the annealed denoising training.

    ``schedule='decreasing'`` anneals the noise scale from ``sigma_max`` to
    ``sigma_min``; ``'increasing'`` runs it the other way. ``weighting``
    selects between the plain loss (``'none'``) and per-sample ``1/sigma^2``
    weighting (``'inverse_variance'``), which keeps small-sigma gradients
    from vanishing late in the schedule.
    """

    learning_rate: float = 1e-3
    sigma_min: float = 1e-3
    sigma_max: float = 0.1
    epochs: int = 100
    batch_size: int = 128
    decay_every: int = 25
    decay_factor: float = 0.5
    schedule: str = "decreasing"
    optimizer: str = "adam"
    antithetic: bool = True
    weighting: str = "inverse_variance"
    gain_lr_scale: float = 30.0
    shrinkage: tuple = (0.5, 1.0, 2.0)
    holdout_fraction: float = 0.1
    validation_sigma: float = 0.01
    validation_draws: int = 4
    sigma_floor: float = 1e-5
    width: int = 256
    identity_skip: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shrinkage = tuple(float(c) for c in np.atleast_1d(self.shrinkage))
        if not 0 < self.sigma_min < self.sigma_max:
            raise ScoreNetError("need 0 < sigma_min < sigma_max")
        if self.epochs < 1 or self.batch_size < 1 or self.width < 1:
            raise ScoreNetError("epochs, batch_size and width must be positive")
        if not self.learning_rate > 0:
            raise ScoreNetError("learning rate must be positive")
        if self.schedule not in ("decreasing", "increasing"):
            raise ScoreNetError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ScoreNetError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in ("none", "inverse_variance"):
            raise ScoreNetError(f"unknown weighting {self.weighting!r}")
        if not self.shrinkage or min(self.shrinkage) < 0:
            raise ScoreNetError("shrinkage candidates must be nonnegative")
        if not 0 <= self.holdout_fraction < 1:
            raise ScoreNetError("holdout fraction must lie in [0, 1)")

    def xi(self, epoch: int) -> float:
        """Noise-scale for 1-based ``epoch``."""
        frac = epoch / self.epochs
        if self.schedule == "decreasing":
            return frac * self.sigma_min + (1 - frac) * self.sigma_max
        return (1 - frac) * self.sigma_min + frac * self.sigma_max

    def lr(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** ((epoch - 1) // self.decay_every)


@dataclass
class TrainTrace:
    """Per-epoch records of the selected run plus the shrinkage comparison."""

    records: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    selected_shrinkage: float | None = None
    config: dict = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def validation_loss(net: ScoreNetwork, y_val: np.ndarray, sigma: float, draws: int, seed: int) -> float:
    """Excess denoising loss ``E||u/sigma + S||^2 - dim/sigma^2`` on held-out pilots.

    Antithetic fixed perturbations keep the value comparable across models.
    """
    gen = RngStream(seed, 0x5A11D).generator()
    dt = net.dtype
    sig = np.full((len(y_val), 1), sigma)
    total = 0.0
    for _ in range(draws):
        u = gen.standard_normal(y_val.shape).astype(dt)
        for uu in (u, -u):
            out, _ = _forward(net, y_val + sigma * uu, sig)
            resid = uu.astype(np.float64) / sigma + out.astype(np.float64)
            total += float(np.mean(np.sum(resid**2, axis=1)))
    return total / (2 * draws) - net.dim / sigma**2


def _train_one(y_train, y_val, cfg: TrainConfig, shrinkage: float, trace: TrainTrace, callback=None):
    base = RngStream(cfg.seed, 1)
    scale = float(np.sqrt(np.mean(y_train**2)))
    if not scale > 0:
        raise ScoreNetError("training pilots are identically zero")
    net = ScoreNetwork.init(
        y_train.shape[1], cfg.width, base.child(0).generator(), scale, np.float32, cfg.identity_skip
    )
    gen = base.child(1).generator()
    y_train = y_train.astype(np.float32)
    p = net.params
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(v) for k, v in p.items()}
    step = 0
    records = []
    t0 = time.perf_counter()
    count = len(y_train)
    for epoch in range(1, cfg.epochs + 1):
        xi, lr = cfg.xi(epoch), cfg.lr(epoch)
        order = gen.permutation(count)
        loss_sum = 0.0
        for start in range(0, count, cfg.batch_size):
            y = y_train[order[start : start + cfg.batch_size]]
            b = len(y)
            sig = np.maximum(np.abs(xi * gen.standard_normal((b, 1))), cfg.sigma_floor)
            u = gen.standard_normal(y.shape)
            if cfg.antithetic:
                y, sig, u = np.concatenate([y, y]), np.concatenate([sig, sig]), np.concatenate([u, -u])
            sig = sig.astype(np.float32)
            u = u.astype(np.float32)
            weight = 1 / sig**2 if cfg.weighting == "inverse_variance" else np.ones_like(sig)
            _, per_sample, grads = _loss_and_grad(net, y, u, sig, weight)
            loss_sum += float(per_sample.sum()) / (2 if cfg.antithetic else 1)
            gain = float(np.exp(p["a"][0]))
            step += 1
            for k in PARAM_NAMES:
                g = grads[k]
                if k in _MATRICES and shrinkage:
                    g = g + shrinkage * gain * p[k]
                rate = lr * (cfg.gain_lr_scale if k == "a" else 1.0)
                if cfg.optimizer == "sgd":
                    p[k] -= rate * g
                    continue
                m[k] = 0.9 * m[k] + 0.1 * g
                v[k] = 0.999 * v[k] + 0.001 * g * g
                mhat = m[k] / (1 - 0.9**step)
                vhat = v[k] / (1 - 0.999**step)
                p[k] -= rate * mhat / (np.sqrt(vhat) + 1e-8)
        loss = loss_sum / count
        record = {
            "epoch": epoch,
            "xi": xi,
            "lr": lr,
            "loss": loss,
            "val_loss": None,
            "wall_clock": time.perf_counter() - t0,
        }
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p[k])) for k in PARAM_NAMES):
            records.append(record)
            trace.records = records
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", trace)
        if y_val is not None:
            record["val_loss"] = validation_loss(
                net, y_val, cfg.validation_sigma, cfg.validation_draws, cfg.seed
            )
        records.append(record)
        if callback is not None:
            callback(shrinkage, epoch, net)
    return net, records


def train(
    pilots: np.ndarray, cfg: TrainConfig | None = None, callback=None
) -> tuple[ScoreNetwork, TrainTrace]:
    """Fit a score network from measured pilots alone.

    One network is trained per shrinkage candidate on the same data and
    random stream; the candidate with the lowest held-out validation loss is
    returned. With a single candidate or no holdout the lone run is used.

    Parameters
    ----------
    pilots : ndarray, shape (M, 2N)
        Received pilots only; ground truth is never consulted.
    cfg : TrainConfig
    callback : callable, optional
        Called as ``callback(shrinkage, epoch, net)`` after every epoch.

    Returns
    -------
    net : ScoreNetwork
    trace : TrainTrace
    """
    cfg = cfg or TrainConfig()
    pilots = np.asarray(pilots, dtype=np.float64)
    if pilots.ndim != 2 or len(pilots) == 0:
        raise ScoreNetError("pilots must be a nonempty (M, 2N) array")
    held = int(round(cfg.holdout_fraction * len(pilots)))
    if held and len(pilots) - held < 1:
        raise ScoreNetError("holdout leaves no training pilots")
    split = RngStream(cfg.seed, 2).generator().permutation(len(pilots))
    y_val = pilots[split[:held]].astype(np.float32) if held else None
    y_train = pilots[split[held:]]
    best = None
    trace = TrainTrace(config=asdict(cfg))
    for c in cfg.shrinkage:
        net, records = _train_one(y_train, y_val, cfg, c, trace, callback)
        val = records[-1]["val_loss"]
        trace.candidates.append({"shrinkage": c, "val_loss": val})
        if best is None or (val is not None and val < best[0]):
            best = (val if val is not None else np.inf, c, net, records)
        if y_val is None:
            break
    _, trace.selected_shrinkage, net, trace.records = best
    return net, trace


def save_model(net: ScoreNetwork, path, config: dict | None = None) -> None:
    """Binary model file: magic, version, header length, JSON header, float32 blob."""
    header = {
        "dim": net.dim,
        "width": net.width,
        "widths": net.widths,
        "scale": net.scale,
        "identity_skip": net.identity_skip,
        "conditioning": "sigma-input-feature",
        "params": [[k, list(net.params[k].shape)] for k in PARAM_NAMES],
        "train_config": config or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = np.concatenate([net.params[k].astype("<f4").ravel() for k in PARAM_NAMES])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(raw)))
        fh.write(raw)
        fh.write(blob.astype("<f4").tobytes())


def load_model(path) -> tuple[ScoreNetwork, dict]:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise ScoreNetError(f"{path} is truncated")
    magic, version, hlen = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise ScoreNetError(f"{path} is not a supported model file")
    start = _MODEL_HEADER.size
    try:
        header = json.loads(data[start : start + hlen])
    except json.JSONDecodeError as exc:
        raise ScoreNetError(f"{path} has a malformed header") from exc
    flat = np.frombuffer(data, dtype="<f4", offset=start + hlen)
    params, pos = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        if pos + size > flat.size:
            raise ScoreNetError(f"{path} parameter blob is truncated")
        params[name] = flat[pos : pos + size].reshape(shape).astype(np.float32)
        pos += size
    if pos != flat.size:
        raise ScoreNetError(f"{path} has trailing parameter data")
    net = ScoreNetwork(header["dim"], header["width"], header["scale"], params, header["identity_skip"])
    return net, header
