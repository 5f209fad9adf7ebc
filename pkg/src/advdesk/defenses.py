"""The five defenses under test.

Detector defenses fit multivariate Gaussians to the victim's final
hidden-layer activations on clean data and flag low-likelihood inputs:
one global Gaussian (MGM) or one per prediction class (GMM). Mitigation
defenses change the model or its training: adversarial training, an
embedded denoising autoencoder, RBF kernel layers, and mean-softmax
ensembles (the latter two live in the model zoo; they are trained here).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ArchitectureDescriptor, Model, denoiser_forward, forward
from .tensorfile import read_tensor_file, write_tensor_file
from .training import TrainConfig, train_classifier, train_model

RIDGE_SCALE = 1e-3
RIDGE_FLOOR = 1e-9
DEFAULT_FPR = 0.05


@dataclass
class GaussianDetectorState:
    """Fitted Gaussian over d-dimensional activations plus a decision threshold."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_inverse: np.ndarray
    log_det_sigma: float
    ridge: float
    tau: Optional[float] = None

    @property
    def d(self) -> int:
        return self.mu.shape[0]


@dataclass
class PerClassDetectorState:
    per_class: dict  # class index -> GaussianDetectorState


@dataclass(frozen=True)
class DetectionVerdict:
    score: float
    flagged: bool
    threshold_used: float

    def __post_init__(self):
        if self.flagged != (self.score < self.threshold_used):
            raise ValueError("verdict inconsistent with its threshold rule")


def gaussian_state(mu: np.ndarray, sigma: np.ndarray, ridge: float = 0.0,
                   tau: Optional[float] = None) -> GaussianDetectorState:
    """Build a detector state from an explicit mean and (regularized) covariance."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = mu.shape[0]
    if sigma.shape != (d, d):
        raise ValueError(f"covariance shape {sigma.shape} != ({d}, {d})")
    sigma_reg = sigma + ridge * np.eye(d)
    sign, log_det = np.linalg.slogdet(sigma_reg)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    return GaussianDetectorState(mu=mu, sigma=sigma_reg,
                                 sigma_inverse=np.linalg.inv(sigma_reg),
                                 log_det_sigma=float(log_det), ridge=ridge, tau=tau)


def mgm_log_likelihood(state: GaussianDetectorState, activation: np.ndarray) -> float:
    """Log-density of the fitted multivariate Gaussian at `activation`."""
    x = np.asarray(activation, dtype=np.float64)
    if x.shape != (state.d,):
        raise ValueError(f"activation shape {x.shape} != ({state.d},)")
    v = x - state.mu
    quad = float(v @ state.sigma_inverse @ v)
    return -0.5 * state.d * np.log(2.0 * np.pi) - 0.5 * state.log_det_sigma - 0.5 * quad


def mgm_approx_loss(state: GaussianDetectorState, activation: Tensor) -> Tensor:
    """Squared Euclidean distance to the Gaussian center, differentiable.

    The attacker's simplified stand-in for the full log-likelihood: pulling
    an activation toward the center raises the detector's score without
    touching the numerically delicate covariance terms.
    """
    a = activation if activation.data.ndim == 1 else ad.reshape(activation, (-1,))
    if a.shape != (state.d,):
        raise ValueError(f"activation shape {activation.shape} != ({state.d},)")
    v = ad.add(a, Tensor(-state.mu))
    return ad.tsum(ad.mul(v, v))


def hidden_activations(model: Model, images: np.ndarray) -> np.ndarray:
    return model.hidden(np.asarray(images))


def fit_mgm(model: Model, clean_inputs: np.ndarray) -> GaussianDetectorState:
    """Fit mean and ridge-regularized covariance of clean activations."""
    acts = hidden_activations(model, clean_inputs)
    n, d = acts.shape
    if n < d + 2:
        raise ValueError(f"need at least d+2={d + 2} clean samples, got {n}")
    if not np.isfinite(acts).all():
        raise ValueError("non-finite activations in detector fitting data")
    mu = acts.mean(axis=0)
    centered = acts - mu
    sigma = centered.T @ centered / (n - 1)
    ridge = max(RIDGE_SCALE * float(np.trace(sigma)) / d, RIDGE_FLOOR)
    return gaussian_state(mu, sigma, ridge=ridge)


def calibrate_threshold(scores_on_clean: Sequence[float], target_fpr: float) -> float:
    """Threshold flagging at most target_fpr of the given clean scores.

    Returns the order statistic at index floor(fpr * n): the largest value
    such that strictly-lower clean scores stay within the FPR budget.
    """
    scores = np.asarray(list(scores_on_clean), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not (0.0 < target_fpr < 1.0):
        raise ValueError(f"target_fpr must be in (0, 1), got {target_fpr}")
    ordered = np.sort(scores)
    k = int(np.floor(target_fpr * scores.size))
    return float(ordered[min(k, scores.size - 1)])


def calibrate_mgm(state: GaussianDetectorState, model: Model,
                  calibration_inputs: np.ndarray,
                  target_fpr: float = DEFAULT_FPR) -> GaussianDetectorState:
    acts = hidden_activations(model, calibration_inputs)
    scores = [mgm_log_likelihood(state, a) for a in acts]
    state.tau = calibrate_threshold(scores, target_fpr)
    return state


def fit_gmm(model: Model, clean_inputs: np.ndarray, labels: Sequence[int],
            calibration_inputs: Optional[np.ndarray] = None,
            target_fpr: float = DEFAULT_FPR) -> PerClassDetectorState:
    """One Gaussian per class over that class's clean activations.

    Thresholds are calibrated per class, grouping calibration samples by the
    model's predicted class (the same grouping detection uses). A class the
    model never predicts on the calibration set falls back to its fitting
    scores.
    """
    labels = np.asarray(labels, dtype=np.int64)
    acts = hidden_activations(model, clean_inputs)
    if labels.shape[0] != acts.shape[0]:
        raise ValueError("inputs and labels are misaligned")
    d = acts.shape[1]
    per_class: dict = {}
    classes = sorted(int(c) for c in np.unique(labels))
    for c in classes:
        rows = acts[labels == c]
        if rows.shape[0] < d + 2:
            raise ValueError(f"class {c} has {rows.shape[0]} samples, "
                             f"needs at least d+2={d + 2}")
        mu = rows.mean(axis=0)
        centered = rows - mu
        sigma = centered.T @ centered / (rows.shape[0] - 1)
        ridge = max(RIDGE_SCALE * float(np.trace(sigma)) / d, RIDGE_FLOOR)
        per_class[c] = gaussian_state(mu, sigma, ridge=ridge)

    cal = calibration_inputs if calibration_inputs is not None else clean_inputs
    cal_acts = hidden_activations(model, cal)
    cal_pred = model.predict(cal)
    for c in classes:
        chosen = cal_acts[cal_pred == c]
        if chosen.shape[0] == 0:
            chosen = acts[labels == c]
        scores = [mgm_log_likelihood(per_class[c], a) for a in chosen]
        per_class[c].tau = calibrate_threshold(scores, target_fpr)
    return PerClassDetectorState(per_class=per_class)


def detect(state, model: Model, image: np.ndarray) -> DetectionVerdict:
    """Score one input under the detector; flag scores strictly below tau."""
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    activation = model.hidden(x)[0]
    if isinstance(state, GaussianDetectorState):
        if state.tau is None:
            raise ValueError("detector is not calibrated (tau unset)")
        score = mgm_log_likelihood(state, activation)
        return DetectionVerdict(score=score, flagged=score < state.tau,
                                threshold_used=state.tau)
    if isinstance(state, PerClassDetectorState):
        cls = int(model.predict(x)[0])
        sub = state.per_class.get(cls)
        if sub is None:
            raise ValueError(f"no detector fitted for predicted class {cls}")
        if sub.tau is None:
            raise ValueError(f"class {cls} detector is not calibrated")
        score = mgm_log_likelihood(sub, activation)
        return DetectionVerdict(score=score, flagged=score < sub.tau,
                                threshold_used=sub.tau)
    raise TypeError(f"unknown detector state {type(state)!r}")


def detect_batch(state, model: Model, images: np.ndarray) -> list[DetectionVerdict]:
    return [detect(state, model, img) for img in images]


# ---------------------------------------------------------------------------
# defense training


def adversarial_training(desc: ArchitectureDescriptor, images: np.ndarray,
                         labels: np.ndarray, epsilon: float,
                         config: TrainConfig) -> dict:
    """Classifier training on a 50/50 mix of clean and FGSM-perturbed batches."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    from .attacks import fgsm_batch  # deferred: attacks imports this module

    def hook(params, xb, yb):
        x_adv = fgsm_batch(params, desc, xb, yb, epsilon)
        return np.concatenate([xb, x_adv]), np.concatenate([yb, yb])

    return train_classifier(desc, images, labels, config, batch_hook=hook)


def train_denoiser_classifier(desc: ArchitectureDescriptor, images: np.ndarray,
                              labels: np.ndarray, noise_level: float,
                              config: TrainConfig) -> dict:
    """Joint objective: reconstruct the clean image from a noisy copy (L1)
    while classifying both the clean and the noisy input (cross-entropy)."""
    if desc.kind != "denoiser-classifier":
        raise ValueError(f"expected a denoiser-classifier, got {desc.kind}")
    noise_rng = np.random.default_rng(config.seed + 104729)

    def loss_fn(params, xb, yb):
        eta = noise_rng.uniform(-noise_level, noise_level, size=xb.shape)
        recon, logits_noisy = denoiser_forward(params, Tensor(xb + eta), desc)
        logits_clean = forward(params, Tensor(xb), desc)
        return ad.add(ad.add(ad.l1_loss(recon, xb),
                             ad.cross_entropy(logits_clean, yb)),
                      ad.cross_entropy(logits_noisy, yb))

    return train_model(desc, images, labels, loss_fn, config)


# ---------------------------------------------------------------------------
# detector state serialization: tensor files plus a JSON header


def save_detector(directory, state) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(state, GaussianDetectorState):
        write_tensor_file(directory / "mu.atns", state.mu)
        write_tensor_file(directory / "sigma.atns", state.sigma)
        header = {"kind": "mgm", "d": state.d, "tau": state.tau, "ridge": state.ridge}
        (directory / "header.json").write_text(json.dumps(header, sort_keys=True))
        return
    if isinstance(state, PerClassDetectorState):
        header = {"kind": "gmm", "classes": sorted(state.per_class)}
        (directory / "header.json").write_text(json.dumps(header, sort_keys=True))
        for c, sub in state.per_class.items():
            save_detector(directory / f"class_{c}", sub)
        return
    raise TypeError(f"unknown detector state {type(state)!r}")


def load_detector(directory):
    directory = Path(directory)
    header = json.loads((directory / "header.json").read_text())
    if header["kind"] == "mgm":
        state = gaussian_state(read_tensor_file(directory / "mu.atns"),
                               read_tensor_file(directory / "sigma.atns"),
                               ridge=0.0, tau=header["tau"])
        state.ridge = header["ridge"]  # sigma on disk is already regularized
        return state
    if header["kind"] == "gmm":
        return PerClassDetectorState(per_class={
            int(c): load_detector(directory / f"class_{c}") for c in header["classes"]})
    raise ValueError(f"unknown detector kind '{header['kind']}'")
