"""Score priors: noise schedules, analytic GMM scores and a trainable denoiser.

The trainable model is a small fully connected network ``f`` acting on
square patches replicated into ``C`` identical channels. Its score is
``s(x; sigma) = f(x) / sigma``. Images larger than the patch are covered by
overlapping patches whose per-pixel outputs are averaged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import expit, logsumexp

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "EASELCT-SCORE-V1"


class ScoreFunction(Protocol):
    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray: ...


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("schedule needs at least one sigma")
        if np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("sigmas must be positive and strictly decreasing")
        object.__setattr__(self, "sigmas", s)

    @property
    def L(self) -> int:
        return self.sigmas.size

    @property
    def first(self) -> float:
        return float(self.sigmas[0])

    @property
    def last(self) -> float:
        return float(self.sigmas[-1])

    def __len__(self):
        return self.L

    def __iter__(self):
        return iter(self.sigmas.tolist())


def make_schedule(sigma_first: float, sigma_last: float, L: int) -> NoiseSchedule:
    """Geometric ladder of ``L`` noise levels from ``sigma_first`` down to ``sigma_last``."""
    if L < 1 or not sigma_last > 0 or sigma_first < sigma_last:
        raise ValueError(f"invalid schedule ({sigma_first}, {sigma_last}, {L})")
    if L == 1:
        if sigma_first != sigma_last:
            raise ValueError("L = 1 requires sigma_first == sigma_last")
        return NoiseSchedule(np.array([float(sigma_first)]))
    ratio = (sigma_last / sigma_first) ** (1.0 / (L - 1))
    sigmas = sigma_first * ratio ** np.arange(L)
    sigmas[-1] = sigma_last
    return NoiseSchedule(sigmas)


# ---------------------------------------------------------------------------
# analytic Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GmmDensity:
    """Gaussian mixture with isotropic components in ``d`` dimensions."""

    weights: np.ndarray
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if w.ndim != 1 or m.shape[0] != w.size or v.size != w.size:
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator, sigma: float = 0.0) -> np.ndarray:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        std = np.sqrt(self.variances[comp] + sigma**2)
        return self.means[comp] + std[:, None] * rng.standard_normal((n, self.dim))


def _gmm_log_terms(gmm: GmmDensity, x: np.ndarray, sigma: float):
    var = gmm.variances + sigma**2  # (K,)
    diff = gmm.means - x[..., None, :]  # (..., K, d)
    sq = np.sum(diff**2, axis=-1)
    d = gmm.dim
    logk = np.log(gmm.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
    return logk, diff, var


def gmm_log_density(gmm: GmmDensity, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
    logk, _, _ = _gmm_log_terms(gmm, np.asarray(x, dtype=np.float64), sigma)
    return logsumexp(logk, axis=-1)


def analytic_gmm_score(gmm: GmmDensity, x: np.ndarray, sigma: float) -> np.ndarray:
    """Score of the mixture smoothed by ``N(0, sigma^2 I)``, for ``x`` of shape (..., d)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    logk, diff, var = _gmm_log_terms(gmm, np.asarray(x, dtype=np.float64), sigma)
    resp = np.exp(logk - logsumexp(logk, axis=-1, keepdims=True))
    return np.sum((resp / var)[..., None] * diff, axis=-2)


def gmm_score_function(gmm: GmmDensity) -> ScoreFunction:
    def score(x, sigma):
        return analytic_gmm_score(gmm, x, sigma)

    return score


# ---------------------------------------------------------------------------
# fully connected denoiser
# ---------------------------------------------------------------------------


def _silu(z):
    return z * expit(z)


def _silu_grad(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


@dataclass
class DenoiserScoreModel:
    """MLP ``f`` on ``channels`` stacked copies of a ``patch x patch`` window.

    ``theta`` is one flat parameter vector; layer matrices are views into it.
    ``resolution`` records the (ny, nx) size of the training images.
    """

    patch: int
    channels: int
    hidden: tuple[int, ...]
    resolution: tuple[int, int]
    theta: np.ndarray = field(repr=False, default=None)
    activation: str = "silu"
    skip: bool = True
    sigma_first: float = float("nan")
    sigma_last: float = float("nan")
    n_scales: int = 0

    def __post_init__(self):
        if self.activation != "silu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.size != self.n_params:
            raise ValueError(f"theta has {self.theta.size} entries, architecture needs {self.n_params}")

    @property
    def d_in(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.d_in, *self.hidden, self.d_in]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        n = sum(o * i + o for i, o in self.layer_sizes)
        return n + self.d_in**2 if self.skip else n

    def layers(self, theta: np.ndarray | None = None):
        """(W, b) views into ``theta``; W has shape (out, in)."""
        theta = self.theta if theta is None else theta
        out, k = [], 0
        for i, o in self.layer_sizes:
            W = theta[k : k + o * i].reshape(o, i)
            k += o * i
            b = theta[k : k + o]
            k += o
            out.append((W, b))
        return out

    def skip_matrix(self, theta: np.ndarray | None = None) -> np.ndarray | None:
        """Linear input-to-output path (d_in x d_in), stored after the MLP layers."""
        if not self.skip:
            return None
        theta = self.theta if theta is None else theta
        return theta[theta.size - self.d_in**2 :].reshape(self.d_in, self.d_in)

    def init_params(self, rng: np.random.Generator) -> None:
        """Kaiming-normal weights, zero biases and a zero skip path."""
        for W, b in self.layers():
            W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[1])
            b[...] = 0.0
        if self.skip:
            self.skip_matrix()[...] = 0.0

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Network output ``f`` for rows of flattened C-channel patches."""
        h = X
        layers = self.layers()
        for W, b in layers[:-1]:
            h = _silu(h @ W.T + b)
        W, b = layers[-1]
        out = h @ W.T + b
        if self.skip:
            out += X @ self.skip_matrix().T
        return out

    def loss_and_grad(
        self, X: np.ndarray, G: Callable[[np.ndarray], tuple[float, np.ndarray]], replicated: bool = False
    ):
        """Loss ``G(f(X))`` and its gradient with respect to ``theta``.

        ``G`` maps the network output to ``(loss, dloss/doutput)``. With
        ``replicated`` the caller promises that every row of ``X`` is C copies
        of one channel; the input-side products then run on that single
        channel against block-summed weights, and every input block receives
        the same gradient.
        """
        C, d = self.channels, self.patch * self.patch
        replicated = replicated and C > 1
        x1 = X[:, :d] if replicated else X

        def fold_in(W):
            return W.reshape(W.shape[0], C, d).sum(axis=1) if replicated else W

        def tile_in(g):
            return np.tile(g, (1, C)) if replicated else g

        layers = self.layers()
        acts, pre, sigs = [x1], [], []
        h = x1
        for li, (W, b) in enumerate(layers[:-1]):
            z = h @ (fold_in(W) if li == 0 else W).T + b
            sig = expit(z)
            pre.append(z)
            sigs.append(sig)
            h = z * sig
            acts.append(h)
        W, b = layers[-1]
        out = h @ W.T + b
        if self.skip:
            out += x1 @ fold_in(self.skip_matrix()).T
        loss, delta = G(out)

        grad = np.zeros_like(self.theta)
        grads = self.layers(grad)
        if self.skip:
            self.skip_matrix(grad)[...] = tile_in(delta.T @ x1)
        for li in range(len(layers) - 1, -1, -1):
            gW, gb = grads[li]
            gW[...] = tile_in(delta.T @ acts[li]) if li == 0 else delta.T @ acts[li]
            gb[...] = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ layers[li][0]) * _silu_grad(pre[li - 1], sigs[li - 1])
        return loss, grad

    def folded(self) -> "DenoiserScoreModel":
        """Single-channel model equal to channel-copy then channel-mean.

        With identical input channels the first layer (and the skip path) only
        sees the sum of its per-channel column blocks, and averaging the output
        channels averages the last layer's row blocks.
        """
        C, d = self.channels, self.patch * self.patch
        out = DenoiserScoreModel(
            patch=self.patch,
            channels=1,
            hidden=self.hidden,
            resolution=self.resolution,
            activation=self.activation,
            skip=self.skip,
            sigma_first=self.sigma_first,
            sigma_last=self.sigma_last,
            n_scales=self.n_scales,
        )
        src, dst = self.layers(), out.layers()
        for k, ((W, b), (Wf, bf)) in enumerate(zip(src, dst)):
            if k == 0:
                W = W.reshape(W.shape[0], C, d).sum(axis=1)
            if k == len(src) - 1:
                W = W.reshape(C, d, -1).mean(axis=0)
                b = b.reshape(C, d).mean(axis=0)
            Wf[...], bf[...] = W, b
        if self.skip:
            out.skip_matrix()[...] = self.skip_matrix().reshape(C, d, C, d).sum(axis=2).mean(axis=0)
        return out

    # -- image-level evaluation ------------------------------------------

    def _patch_origins(self, n: int, stride: int) -> list[int]:
        if n < self.patch:
            raise ValueError(f"image side {n} smaller than model patch {self.patch}")
        starts = list(range(0, n - self.patch + 1, stride))
        if starts[-1] != n - self.patch:
            starts.append(n - self.patch)
        return starts

    def extract_patches(self, x: np.ndarray, stride: int | None = None):
        stride = stride or max(1, self.patch // 2)
        rows = self._patch_origins(x.shape[0], stride)
        cols = self._patch_origins(x.shape[1], stride)
        p = self.patch
        patches = np.stack([x[r : r + p, c : c + p] for r in rows for c in cols])
        return patches, [(r, c) for r in rows for c in cols]

    def apply_channels(self, stack: np.ndarray, sigma: float, stride: int | None = None) -> np.ndarray:
        """Score for a (C, H, W) channel stack, returned with the same shape."""
        stack = np.asarray(stack, dtype=np.float64)
        C, H, W = stack.shape
        if C != self.channels:
            raise ValueError(f"model expects {self.channels} channels, got {C}")
        p = self.patch
        stride = stride or max(1, p // 2)
        rows = self._patch_origins(H, stride)
        cols = self._patch_origins(W, stride)
        origins = [(r, c) for r in rows for c in cols]
        X = np.stack([stack[:, r : r + p, c : c + p].reshape(-1) for r, c in origins])
        F = self.forward(X).reshape(len(origins), C, p, p)
        acc = np.zeros((C, H, W))
        cnt = np.zeros((H, W))
        for k, (r, c) in enumerate(origins):
            acc[:, r : r + p, c : c + p] += F[k]
            cnt[r : r + p, c : c + p] += 1.0
        return acc / cnt / sigma


def channel_copy_score(model: DenoiserScoreModel, x: np.ndarray, sigma: float, stride: int | None = None) -> np.ndarray:
    """Replicate ``x`` into the model's channels, evaluate, and average back."""
    x = np.asarray(x, dtype=np.float64)
    stack = np.broadcast_to(x, (model.channels, *x.shape))
    out = model.apply_channels(stack, sigma, stride)
    return out.mean(axis=0)


class ChannelCopyScore:
    """ScoreFunction adapter around :func:`channel_copy_score`.

    With ``fold`` (the default) the model is first collapsed to its exact
    single-channel equivalent, which costs one channel's worth of compute.
    """

    def __init__(self, model: DenoiserScoreModel, stride: int | None = None, fold: bool = True):
        self.model = model
        self.stride = stride
        self._eval = model.folded() if fold and model.channels > 1 else model

    def __call__(self, x, sigma):
        return channel_copy_score(self._eval, x, sigma, self.stride)


# ---------------------------------------------------------------------------
# denoising score matching
# ---------------------------------------------------------------------------


def _as_batch(batch, patch: int) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (patch, patch):
        raise ValueError(f"batch images must be {patch}x{patch}, got {arr.shape[1:]}")
    if arr.shape[0] == 0:
        raise ValueError("empty batch")
    return arr


def draw_dsm_noise(rng: np.random.Generator, n: int, L: int, channels: int, patch: int, shared: bool = True) -> np.ndarray:
    """Standard-normal draws of shape (n, L, C, p, p); one draw per (image, scale).

    With ``shared`` the same draw is used for every channel copy.
    """
    if shared:
        z = rng.standard_normal((n, L, 1, patch, patch))
        return np.broadcast_to(z, (n, L, channels, patch, patch))
    return rng.standard_normal((n, L, channels, patch, patch))


def _dsm_rows(model: DenoiserScoreModel, x: np.ndarray, schedule: NoiseSchedule, z: np.ndarray):
    n, L, C, p = x.shape[0], schedule.L, model.channels, model.patch
    sig = schedule.sigmas.reshape(1, L, 1, 1, 1)
    noisy = x[:, None, None] + sig * z
    X = noisy.reshape(n * L, C * p * p)
    Z = np.ascontiguousarray(z).reshape(n * L, C * p * p)
    return X, Z


def dsm_loss(
    model: DenoiserScoreModel,
    batch: Sequence[np.ndarray] | np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> float:
    """Monte-Carlo estimate of the multi-scale denoising score-matching objective.

    For each image and scale one noise draw ``z`` gives ``x~ = x + sigma z`` and
    the summand ``sigma^2 ||s(x~; sigma) - (x - x~)/sigma^2||^2`` with the norm
    averaged over channels. The result is ``1/(2L)`` times the sum over scales
    of the batch mean. Pass ``noise`` to pin the draws explicitly.
    """
    x = _as_batch(batch, model.patch)
    if noise is None:
        noise = draw_dsm_noise(rng, x.shape[0], schedule.L, model.channels, model.patch)
    X, Z = _dsm_rows(model, x, schedule, noise)
    F = model.forward(X)
    per_row = np.sum((F + Z) ** 2, axis=1) / model.channels
    return float(per_row.sum() / (2 * schedule.L * x.shape[0]))


def dsm_loss_and_grad(model, x: np.ndarray, schedule: NoiseSchedule, noise: np.ndarray):
    X, Z = _dsm_rows(model, x, schedule, noise)
    scale = 1.0 / (2 * schedule.L * x.shape[0] * model.channels)

    def G(F):
        R = F + Z
        return float(np.sum(R * R) * scale), 2.0 * scale * R

    # shared channel noise keeps the channel copies identical
    replicated = bool(np.all(noise == noise[:, :, :1]))
    return model.loss_and_grad(X, G, replicated=replicated)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay from lr to lr_final when set
    patch: int | None = None  # None -> whole image
    channels: int = 10
    hidden: tuple[int, ...] | None = None  # None -> (4d, 4d), d = patch pixels
    shared_channel_noise: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_factor: float = 10.0
    divergence_patience: int = 200


@dataclass
class TrainResult:
    model: DenoiserScoreModel
    losses: np.ndarray


def _learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_final is None or config.steps <= 1:
        return config.lr
    frac = step / (config.steps - 1)
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))


def _random_crops(images: np.ndarray, idx: np.ndarray, p: int, rng: np.random.Generator) -> np.ndarray:
    H, W = images.shape[1:]
    if (H, W) == (p, p):
        return images[idx]
    r = rng.integers(0, H - p + 1, size=idx.size)
    c = rng.integers(0, W - p + 1, size=idx.size)
    return np.stack([images[i, rr : rr + p, cc : cc + p] for i, rr, cc in zip(idx, r, c)])


def train_score(
    dataset: Sequence[np.ndarray] | np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Fit a :class:`DenoiserScoreModel` to ``dataset`` with Adam on the DSM loss.

    Each step draws ``batch_size`` images (random ``patch``-sized crops when the
    images are larger) and one noise draw for every (image, scale) pair.
    """
    images = np.asarray(dataset, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("dataset must be a nonempty stack of equally sized 2-D images")
    H, W = images.shape[1:]
    p = config.patch or H
    if p > min(H, W) or (config.patch is None and H != W):
        raise ValueError(f"patch {p} does not fit training images {H}x{W}")
    hidden = config.hidden or (4 * p * p, 4 * p * p)
    model = DenoiserScoreModel(
        patch=p,
        channels=config.channels,
        hidden=hidden,
        resolution=(H, W),
        sigma_first=schedule.first,
        sigma_last=schedule.last,
        n_scales=schedule.L,
    )
    model.init_params(rng)
    m = np.zeros_like(model.theta)
    v = np.zeros_like(model.theta)
    denom = np.empty_like(model.theta)
    losses = np.empty(config.steps)
    initial = None
    above = 0
    for step in range(config.steps):
        idx = rng.integers(0, images.shape[0], size=config.batch_size)
        x = _random_crops(images, idx, p, rng)
        z = draw_dsm_noise(rng, x.shape[0], schedule.L, model.channels, p, config.shared_channel_noise)
        loss, grad = dsm_loss_and_grad(model, x, schedule, z)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite DSM loss at step {step}")
        losses[step] = loss
        if initial is None:
            initial = loss
        above = above + 1 if loss > config.divergence_factor * initial else 0
        if above >= config.divergence_patience:
            raise TrainingDivergedError(
                f"loss above {config.divergence_factor}x initial ({initial:.4g}) "
                f"for {above} consecutive steps at step {step}"
            )
        # Adam, updated in place
        m *= config.beta1
        m += (1 - config.beta1) * grad
        grad *= grad
        v *= config.beta2
        v += (1 - config.beta2) * grad
        np.divide(v, 1 - config.beta2 ** (step + 1), out=denom)
        np.sqrt(denom, out=denom)
        denom += config.adam_eps
        np.divide(m, denom, out=denom)
        denom *= _learning_rate(config, step) / (1 - config.beta1 ** (step + 1))
        model.theta -= denom
        if step % 500 == 0:
            log.debug("dsm step %d loss %.5f", step, loss)
    return TrainResult(model, losses)


def smoothed_losses(losses: np.ndarray, window: int = 50) -> np.ndarray:
    """Means over consecutive non-overlapping windows of the loss trace."""
    n = len(losses) // window
    return np.asarray(losses[: n * window]).reshape(n, window).mean(axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: DenoiserScoreModel, path: str | Path) -> None:
    """Text header line followed by little-endian float64 parameters."""
    header = (
        f"{CHECKPOINT_MAGIC} arch=mlp activation={model.activation} "
        f"hidden={','.join(map(str, model.hidden))} patch={model.patch} channels={model.channels} "
        f"resolution={model.resolution[0]}x{model.resolution[1]} "
        f"sigma_first={model.sigma_first!r} sigma_last={model.sigma_last!r} L={model.n_scales} "
        f"skip={int(model.skip)} n_params={model.n_params}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(model.theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> DenoiserScoreModel:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a score checkpoint")
    try:
        meta = dict(tok.split("=", 1) for tok in header[1:])
        ny, nx = (int(v) for v in meta["resolution"].split("x"))
        model = DenoiserScoreModel(
            patch=int(meta["patch"]),
            channels=int(meta["channels"]),
            hidden=tuple(int(h) for h in meta["hidden"].split(",")),
            resolution=(ny, nx),
            activation=meta["activation"],
            sigma_first=float(meta["sigma_first"]),
            sigma_last=float(meta["sigma_last"]),
            n_scales=int(meta["L"]),
            skip=bool(int(meta.get("skip", "1"))),
        )
        n_params = int(meta["n_params"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header ({exc})") from exc
    if n_params != model.n_params or len(payload) != 8 * n_params:
        raise ValueError(f"{path}: payload size does not match declared architecture")
    model.theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return model
