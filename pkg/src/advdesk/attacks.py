"""Gradient attacks: FGSM, projected iterative ascent, restarts, sign-average
ensemble attacks, detector-aware composite objectives, surrogate transfer,
and the patient multi-configuration attack for kernel-hardened models.

Every attack perturbs one sample inside an l-infinity ball of radius
epsilon around the original input, clamped to the valid pixel range, and
reports the perturbation plus success verdicts in an AttackResult.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import defenses
from .autodiff import LossSpec, Tensor, compute_loss
from .models import Ensemble, Model, ensemble_predict, forward, forward_with_hidden

CE = LossSpec("cross-entropy")
EPS_SLACK = 1e-9
STALL_WINDOW = 5
STEP_FLOOR_DIV = 1000


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 40
    step_size: Optional[float] = None      # defaults to epsilon / 10
    schedule: str = "fixed"                # "fixed" | "halving-on-stall"
    restarts: int = 0
    random_start_scale: float = 1.0
    targeted: bool = False
    target_class: Optional[int] = None
    detector_weight: float = 1.0
    seed: int = 0
    clip: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.schedule not in ("fixed", "halving-on-stall"):
            raise ValueError(f"unknown schedule '{self.schedule}'")
        if self.restarts < 0:
            raise ValueError("restarts must be nonnegative")
        if self.targeted and self.target_class is None:
            raise ValueError("targeted attack needs a target class")
        step = self.resolved_step()
        if self.schedule == "fixed" and self.epsilon > 0 and not (0 < step <= self.epsilon):
            raise ValueError(f"fixed step size {step} outside (0, epsilon={self.epsilon}]")

    def resolved_step(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    success_fooled_model: bool
    success_evaded_detector: Optional[bool]
    victim_loss_achieved: float
    iterations_used: int


def _clip_pixels(x: np.ndarray, clip: Optional[tuple]) -> np.ndarray:
    return x if clip is None else np.clip(x, clip[0], clip[1])


def _project(x: np.ndarray, center: np.ndarray, epsilon: float,
             clip: Optional[tuple]) -> np.ndarray:
    return _clip_pixels(np.clip(x, center - epsilon, center + epsilon), clip)


def _finish(x_orig: np.ndarray, x_adv: np.ndarray, epsilon: float,
            clip: Optional[tuple], fooled: bool, evaded: Optional[bool],
            loss: float, iterations: int) -> AttackResult:
    delta = x_adv - x_orig
    if np.abs(delta).max(initial=0.0) > epsilon + EPS_SLACK:
        raise ValueError("attack produced a perturbation outside the epsilon ball")
    if clip is not None and (x_adv.min(initial=clip[0]) < clip[0]
                             or x_adv.max(initial=clip[1]) > clip[1]):
        raise ValueError("attack produced pixels outside the valid range")
    return AttackResult(x_adv=x_adv, delta=delta, success_fooled_model=fooled,
                        success_evaded_detector=evaded, victim_loss_achieved=loss,
                        iterations_used=iterations)


def _gradient(objective: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(x, requires_grad=True)
    loss = objective(t)
    ad.backward(loss)
    if t.grad is None or not np.isfinite(t.grad).all():
        raise ad.NumericOverflowError("non-finite attack gradient")
    return t.grad


def _untargeted_objective(model: Model, loss_spec: LossSpec, y):
    def objective(x: Tensor) -> Tensor:
        return compute_loss(loss_spec, forward(model.params, x, model.desc), y)

    return objective


def _is_fooled(model: Model, x_adv: np.ndarray, y) -> bool:
    if not isinstance(y, (int, np.integer)):
        return False
    return int(model.predict(x_adv[None])[0]) != int(y)


# ---------------------------------------------------------------------------
# single-step attacks


def fgsm_batch(params: dict, desc, images: np.ndarray, labels, epsilon: float,
               clip: Optional[tuple] = (0.0, 1.0)) -> np.ndarray:
    """FGSM applied to a whole batch at once (used by adversarial training)."""
    x = Tensor(np.asarray(images), requires_grad=True)
    ad.backward(ad.cross_entropy(forward(params, x, desc), labels))
    return _clip_pixels(images + epsilon * np.sign(x.grad), clip)


def fgsm(model: Model, loss_spec: Optional[LossSpec], x: np.ndarray, y,
         epsilon: float, clip: Optional[tuple] = (0.0, 1.0),
         x_init: Optional[np.ndarray] = None) -> AttackResult:
    """One step of size epsilon along the sign of the input gradient."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    spec = loss_spec or CE
    x = np.asarray(x, dtype=np.float64)
    objective = _untargeted_objective(model, spec, y)
    start = x if x_init is None else _project(x_init, x, epsilon, clip)
    g = _gradient(objective, start)
    x_adv = _project(start + epsilon * np.sign(g), x, epsilon, clip)
    loss = objective(Tensor(x_adv)).item()
    return _finish(x, x_adv, epsilon, clip, _is_fooled(model, x_adv, y), None,
                   loss, 1)


def ensemble_average_attack(models: Sequence[Model], loss_specs, x: np.ndarray, y,
                            epsilon: float,
                            clip: Optional[tuple] = (0.0, 1.0)) -> AttackResult:
    """Average the per-model gradient signs, then take one epsilon step.

    Each component of the averaged direction lies in {-1, ..., 1} in steps
    of 2/N, so the perturbation respects the epsilon bound by construction.
    """
    models = list(models)
    if not models:
        raise ValueError("ensemble attack needs at least one model")
    if isinstance(loss_specs, (LossSpec, type(None))):
        loss_specs = [loss_specs or CE] * len(models)
    x = np.asarray(x, dtype=np.float64)
    signs = []
    for m, spec in zip(models, loss_specs):
        g = _gradient(_untargeted_objective(m, spec or CE, y), x)
        signs.append(np.sign(g))
    avg = np.mean(signs, axis=0)
    x_adv = _clip_pixels(x + epsilon * avg, clip)
    members = Ensemble(tuple((m.desc, m.params) for m in models))
    _, cls = ensemble_predict(members, x_adv)
    fooled = isinstance(y, (int, np.integer)) and cls != int(y)
    losses = [_untargeted_objective(m, spec or CE, y)(Tensor(x_adv)).item()
              for m, spec in zip(models, loss_specs)]
    return _finish(x, x_adv, epsilon, clip, bool(fooled), None,
                   float(np.mean(losses)), 1)


# ---------------------------------------------------------------------------
# iterative core


@dataclass
class _AscendOut:
    best_x: np.ndarray
    best_loss: float
    final_x: np.ndarray
    iterations: int
    eligible_found: bool


def _ascend(objective: Callable[[Tensor], Tensor], x_orig: np.ndarray,
            config: AttackConfig, x_init: Optional[np.ndarray] = None,
            eligible_fn: Optional[Callable[[np.ndarray], bool]] = None,
            stop_fn: Optional[Callable[[np.ndarray, int], bool]] = None) -> _AscendOut:
    """Projected gradient ascent on `objective` inside the epsilon ball.

    Candidate iterates are the post-step points; the start point is not a
    candidate. With `eligible_fn`, the best iterate satisfying it wins;
    otherwise best by loss. `stop_fn(x, step_index)` may end the loop early.
    """
    eps, clip = config.epsilon, config.clip
    step = config.resolved_step()
    floor = eps / STEP_FLOOR_DIV
    x = x_orig if x_init is None else _project(x_init, x_orig, eps, clip)
    best_x, best_loss = None, -np.inf
    best_el_x, best_el_loss = None, -np.inf
    running_best = -np.inf
    stall = 0
    iterations = 0

    def consider(xc: np.ndarray, loss: float) -> None:
        nonlocal best_x, best_loss, best_el_x, best_el_loss
        if loss > best_loss:
            best_x, best_loss = xc.copy(), loss
        if eligible_fn is not None and loss > best_el_loss and eligible_fn(xc):
            best_el_x, best_el_loss = xc.copy(), loss

    for t in range(config.steps):
        xt = Tensor(x, requires_grad=True)
        loss_t = objective(xt)
        ad.backward(loss_t)
        lval = loss_t.item()
        if t > 0:
            consider(x, lval)
        if config.schedule == "halving-on-stall":
            if lval <= running_best:
                stall += 1
                if stall >= STALL_WINDOW:
                    step = max(step / 2.0, floor)
                    stall = 0
            else:
                stall = 0
        running_best = max(running_best, lval)
        if xt.grad is None or not np.isfinite(xt.grad).all():
            raise ad.NumericOverflowError("non-finite attack gradient")
        x = _project(x + step * np.sign(xt.grad), x_orig, eps, clip)
        iterations += 1
        if stop_fn is not None and stop_fn(x, t):
            break
    final_loss = objective(Tensor(x)).item()
    consider(x, final_loss)
    if best_el_x is not None:
        return _AscendOut(best_el_x, best_el_loss, x, iterations, True)
    return _AscendOut(best_x, best_loss, x, iterations, False)


def pgd(model: Model, loss_spec: Optional[LossSpec], x: np.ndarray, y,
        config: AttackConfig, x_init: Optional[np.ndarray] = None) -> AttackResult:
    """Iterative sign ascent with per-step projection onto the epsilon ball.

    Returns the best iterate by achieved loss; the halving-on-stall schedule
    halves the step size after five non-improving steps.
    """
    x = np.asarray(x, dtype=np.float64)
    objective = _untargeted_objective(model, loss_spec or CE, y)
    out = _ascend(objective, x, config, x_init=x_init)
    return _finish(x, out.best_x, config.epsilon, config.clip,
                   _is_fooled(model, out.best_x, y), None, out.best_loss,
                   out.iterations)


def restarted_attack(attack_fn, model, loss_spec, x: np.ndarray, y,
                     config: AttackConfig) -> AttackResult:
    """Run `attack_fn` from independent random starts inside the epsilon
    ball; keep the run with the highest achieved loss (earliest run on ties).

    Run seeds depend only on (config.seed, run index), so run r behaves the
    same under any restart count: more restarts can only add candidates.
    """
    if config.restarts < 1:
        raise ValueError("restarted_attack needs restarts >= 1")
    x = np.asarray(x, dtype=np.float64)
    best: Optional[AttackResult] = None
    total_iters = 0
    for r in range(config.restarts):
        rng = np.random.default_rng((config.seed, r))
        amp = config.epsilon * config.random_start_scale
        x_init = _project(x + rng.uniform(-amp, amp, size=x.shape),
                          x, config.epsilon, config.clip)
        result = attack_fn(model, loss_spec, x, y, config, x_init=x_init) \
            if attack_fn is not fgsm else \
            fgsm(model, loss_spec, x, y, config.epsilon, clip=config.clip, x_init=x_init)
        total_iters += result.iterations_used
        if best is None or result.victim_loss_achieved > best.victim_loss_achieved:
            best = result
    return replace(best, iterations_used=total_iters)


# ---------------------------------------------------------------------------
# defense-aware attacks


def adaptive_mgm_attack(model: Model, mgm_state: defenses.GaussianDetectorState,
                        x: np.ndarray, y, config: AttackConfig) -> AttackResult:
    """Composite ascent: raise the victim loss while pulling the hidden
    activation toward the detector's center (the simplified detector term).
    Evasion is judged by the original detector, never the surrogate term."""
    if mgm_state.tau is None:
        raise ValueError("detector must be calibrated before attacking it")
    x = np.asarray(x, dtype=np.float64)
    w = config.detector_weight

    def objective(xt: Tensor) -> Tensor:
        logits, hidden = forward_with_hidden(model.params, xt, model.desc)
        victim = ad.cross_entropy(logits, y)
        pull = defenses.mgm_approx_loss(mgm_state, ad.reshape(hidden, (-1,)))
        return ad.add(victim, ad.mul(Tensor(-w), pull))

    if config.restarts >= 1:
        def runner(_model, _spec, xx, yy, cfg, x_init=None):
            out = _ascend(objective, xx, cfg, x_init=x_init)
            return _finish(xx, out.best_x, cfg.epsilon, cfg.clip,
                           _is_fooled(model, out.best_x, yy), None,
                           out.best_loss, out.iterations)

        base = restarted_attack(runner, model, None, x, y, config)
        best_x, best_loss, iters = base.x_adv, base.victim_loss_achieved, base.iterations_used
    else:
        out = _ascend(objective, x, config)
        best_x, best_loss, iters = out.best_x, out.best_loss, out.iterations
    verdict = defenses.detect(mgm_state, model, best_x)
    return _finish(x, best_x, config.epsilon, config.clip,
                   _is_fooled(model, best_x, y), not verdict.flagged,
                   best_loss, iters)


def two_stage_gmm_attack(model: Model, gmm_state: defenses.PerClassDetectorState,
                         x: np.ndarray, y_true: int,
                         config: AttackConfig) -> AttackResult:
    """Stage 1 raises the true-label loss until the prediction flips (plus
    three confirmation steps) to find the nearest class; stage 2 pushes the
    prediction and the hidden activation toward that class's Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    y_true = int(y_true)

    pred0 = int(model.predict(x[None])[0])
    verdict0 = defenses.detect(gmm_state, model, x)
    if pred0 != y_true and not verdict0.flagged:
        loss0 = ad.cross_entropy(Tensor(model.logits(x[None])), [y_true]).item()
        return _finish(x, x.copy(), config.epsilon, config.clip, True, True, loss0, 0)

    # stage 1: escape the true class
    flip_state = {"flipped_at": None, "flip_class": None}

    def stop_fn(xc: np.ndarray, t: int) -> bool:
        pred = int(model.predict(xc[None])[0])
        if flip_state["flipped_at"] is None:
            if pred != y_true:
                flip_state["flipped_at"] = t
                flip_state["flip_class"] = pred
            return False
        return t - flip_state["flipped_at"] >= 3

    objective1 = _untargeted_objective(model, CE, y_true)
    out1 = _ascend(objective1, x, config, stop_fn=stop_fn)
    stage1_x, iters1 = out1.final_x, out1.iterations
    pred1 = int(model.predict(stage1_x[None])[0])
    if pred1 == y_true and flip_state["flip_class"] is None:
        verdict = defenses.detect(gmm_state, model, stage1_x)
        loss1 = objective1(Tensor(stage1_x)).item()
        return _finish(x, stage1_x, config.epsilon, config.clip, False,
                       not verdict.flagged, loss1, iters1)
    target = pred1 if pred1 != y_true else flip_state["flip_class"]
    target_state = gmm_state.per_class[target]
    w = config.detector_weight

    # stage 2: look like the target class to both the model and its Gaussian
    def objective2(xt: Tensor) -> Tensor:
        logits, hidden = forward_with_hidden(model.params, xt, model.desc)
        toward = ad.cross_entropy(logits, [target])
        pull = defenses.mgm_approx_loss(target_state, ad.reshape(hidden, (-1,)))
        return ad.mul(Tensor(-1.0), ad.add(toward, ad.mul(Tensor(w), pull)))

    def eligible(xc: np.ndarray) -> bool:
        if int(model.predict(xc[None])[0]) != target:
            return False
        return not defenses.detect(gmm_state, model, xc).flagged

    out2 = _ascend(objective2, x, config, x_init=stage1_x, eligible_fn=eligible)
    best_x = out2.best_x
    pred = int(model.predict(best_x[None])[0])
    verdict = defenses.detect(gmm_state, model, best_x)
    return _finish(x, best_x, config.epsilon, config.clip, pred != y_true,
                   not verdict.flagged, out2.best_loss, iters1 + out2.iterations)


def surrogate_transfer_attack(surrogates: Sequence[Model], victim: Model,
                              x: np.ndarray, y,
                              config: AttackConfig) -> AttackResult:
    """Craft candidates on attacker-trained surrogates only, pick the one
    with the highest mean surrogate loss, and score it on the victim. The
    victim is never queried for gradients."""
    surrogates = list(surrogates)
    if not surrogates:
        raise ValueError("surrogate transfer needs at least one surrogate")
    x = np.asarray(x, dtype=np.float64)
    candidates = [ensemble_average_attack(surrogates, None, x, y, config.epsilon,
                                          clip=config.clip)]
    for s in surrogates:
        candidates.append(pgd(s, None, x, y, config))
    iters = sum(c.iterations_used for c in candidates)

    def mean_surrogate_loss(x_adv: np.ndarray) -> float:
        vals = [_untargeted_objective(s, CE, y)(Tensor(x_adv)).item()
                for s in surrogates]
        return float(np.mean(vals))

    scores = [mean_surrogate_loss(c.x_adv) for c in candidates]
    chosen = candidates[int(np.argmax(scores))]  # argmax takes the first max
    victim_loss = _untargeted_objective(victim, CE, y)(Tensor(chosen.x_adv)).item()
    return _finish(x, chosen.x_adv, config.epsilon, config.clip,
                   _is_fooled(victim, chosen.x_adv, y), None, victim_loss, iters)


def rbf_patient_attack(model: Model, x: np.ndarray, y,
                       config_set: Sequence[AttackConfig]) -> AttackResult:
    """Patience and diversity: several slow, long attack schedules; keep the
    strongest result."""
    configs = list(config_set)
    if not configs:
        raise ValueError("patient attack needs at least one configuration")
    for cfg in configs:
        if cfg.steps < 200:
            raise ValueError(f"patient attack configs need steps >= 200, got {cfg.steps}")
        if cfg.resolved_step() > cfg.epsilon / 50.0 + 1e-15:
            raise ValueError("patient attack configs need step_size <= epsilon / 50")
    best: Optional[AttackResult] = None
    for cfg in configs:
        if cfg.restarts >= 1:
            result = restarted_attack(pgd, model, None, x, y, cfg)
        else:
            result = pgd(model, None, x, y, cfg)
        if best is None or result.victim_loss_achieved > best.victim_loss_achieved:
            best = result
    return best
