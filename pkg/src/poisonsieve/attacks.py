"""Clean-label poison crafting under an l-infinity pixel budget.

Three attacks share one projected signed-gradient descent engine:

- feature collision: drag each base image's feature vector onto the target's,
  with a pixel-space proximity penalty;
- bullseye polytope: jointly steer the mean of the poisons' activations onto
  the target's at each tap layer (the final feature vector by default),
  every tap normalized by the target's activation norm;
- gradient matching: align the summed parameter gradient of the poisons with
  the target's gradient taken at the base label, by minimizing one minus
  their cosine similarity.

The gradient-matching objective needs the derivative of a parameter gradient
with respect to the input; this engine is first-order, so that term is
evaluated with a central finite difference along the parameter direction
(a Hessian-vector product in disguise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng, tensor as T
from .datasets import PoisonTask
from .errors import ConfigError, CraftingError, DimensionError, NumericOverflowError
from .layers import DownstreamHead, FeatureExtractor
from .tensor import Tensor
from .training import predict_label


@dataclass
class CraftConfig:
    epsilon: float
    iterations: int = 300
    step_size: float | None = None  # None -> epsilon / 30
    fc_beta: float = 0.05
    restarts: int = 1
    seed: int = 0
    backtrack: bool = True
    bp_taps: str = "final"  # "final" or "bn+final"
    gm_theta: str = "head"  # "head" (victim-trainable params) or "full"
    gm_second_order: str = "fd"  # finite-difference HVP; only supported mode
    fd_h: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.restarts < 1:
            raise ConfigError("restarts must be at least 1")
        if self.bp_taps not in ("final", "bn+final"):
            raise ConfigError(f"bp_taps must be 'final' or 'bn+final', got {self.bp_taps!r}")
        if self.gm_theta not in ("full", "head"):
            raise ConfigError(f"gm_theta must be 'full' or 'head', got {self.gm_theta!r}")
        if self.gm_second_order != "fd":
            raise ConfigError("only the finite-difference second-order mode is supported")

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 30.0 if self.epsilon > 0 else 0.0


@dataclass
class PoisonSet:
    entries: list[tuple[int, np.ndarray]]  # (base id, poisoned image)
    loss_trace: list[float] = field(default_factory=list)

    def images(self) -> np.ndarray:
        return np.stack([img for _, img in self.entries])

    def as_mapping(self) -> dict[int, np.ndarray]:
        return {pid: img for pid, img in self.entries}

    def validate_against(self, bases: np.ndarray, epsilon: float, tol: float = 1e-12) -> None:
        imgs = self.images()
        if imgs.shape != bases.shape:
            raise DimensionError(f"poison shape {imgs.shape} != base shape {bases.shape}")
        if imgs.min() < -tol or imgs.max() > 1.0 + tol:
            raise CraftingError("poison pixels escaped [0, 1]")
        if np.abs(imgs - bases).max() > epsilon + tol:
            raise CraftingError("poison escaped the l-infinity ball")


def project_linf(x, x0, eps: float):
    """Clamp x into the eps-ball around x0, then into [0, 1]."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    x0_arr = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    if x_arr.shape != x0_arr.shape:
        raise DimensionError(f"project_linf: shapes {x_arr.shape} and {x0_arr.shape} differ")
    out = np.clip(np.clip(x_arr, x0_arr - eps, x0_arr + eps), 0.0, 1.0)
    return Tensor(out) if isinstance(x, Tensor) else out


def _signed_pgd(bases: np.ndarray, cfg: CraftConfig, loss_and_grad, loss_only,
                stream_tag: str) -> tuple[np.ndarray, list[float]]:
    """Minimize an objective over images in the eps-ball via signed steps.

    With backtracking the step halves until the candidate does not increase
    the objective, so the accepted-loss trace is non-increasing.
    """
    eps = cfg.epsilon
    gen = rng.stream(cfg.seed, "craft", stream_tag)
    best_x = None
    best_trace: list[float] = []
    for restart in range(cfg.restarts):
        if restart == 0:
            x = bases.copy()
        else:
            x = project_linf(bases + gen.uniform(-eps, eps, size=bases.shape), bases, eps)
        step0 = cfg.effective_step
        step = step0
        trace: list[float] = []
        for it in range(cfg.iterations):
            try:
                loss, grad = loss_and_grad(x)
            except NumericOverflowError as exc:
                raise CraftingError(f"non-finite crafting loss: {exc}", iteration=it) from exc
            if not np.isfinite(loss):
                raise CraftingError("non-finite crafting loss", iteration=it)
            if not trace:
                trace.append(loss)
            if step <= 0:
                trace.append(loss)
                continue
            cand = project_linf(x - step * np.sign(grad), bases, eps)
            if cfg.backtrack:
                cand_loss = loss_only(cand)
                while cand_loss > loss and step > 1e-12:
                    step *= 0.5
                    cand = project_linf(x - step * np.sign(grad), bases, eps)
                    cand_loss = loss_only(cand)
                if cand_loss <= loss:
                    x = cand
                    trace.append(cand_loss)
                    # recover from transient halvings so later iterations keep moving
                    step = min(step * 1.5, step0)
                else:
                    trace.append(loss)
            else:
                x = cand
                trace.append(loss_only(cand))
        if best_x is None or (trace and best_trace and trace[-1] < best_trace[-1]):
            best_x, best_trace = x, trace
    return best_x, best_trace


def _base_ids(bases: np.ndarray, base_ids) -> list[int]:
    if base_ids is None:
        return list(range(len(bases)))
    if len(base_ids) != len(bases):
        raise DimensionError("base_ids length does not match bases")
    return list(base_ids)


def craft_fc(model: FeatureExtractor, bases: np.ndarray, target: np.ndarray,
             cfg: CraftConfig, base_ids=None) -> PoisonSet:
    """Feature collision: per-base feature match to the target plus pixel penalty."""
    ids = _base_ids(bases, base_ids)
    with T.no_grad():
        target_feat = model.forward(Tensor(target[None])).data[0]
    tf = Tensor(target_feat)
    base_const = Tensor(bases)
    beta = cfg.fc_beta

    def objective(x: Tensor) -> Tensor:
        feats = model.forward(x)
        fdiff = T.sub(feats, tf)
        floss = T.sum_all(T.mul(fdiff, fdiff))
        pdiff = T.sub(x, base_const)
        ploss = T.sum_all(T.mul(pdiff, pdiff))
        return T.add(floss, T.mul(ploss, Tensor(beta)))

    def loss_and_grad(x: np.ndarray):
        xt = Tensor(x, requires_grad=True)
        loss = objective(xt)
        T.backward(loss)
        return loss.item(), xt.grad

    def loss_only(x: np.ndarray) -> float:
        with T.no_grad():
            return objective(Tensor(x)).item()

    final, trace = _signed_pgd(bases, cfg, loss_and_grad, loss_only, "fc")
    poisons = PoisonSet(entries=list(zip(ids, final)), loss_trace=trace)
    poisons.validate_against(bases, cfg.epsilon)
    return poisons


def _squeeze_batch(arr: np.ndarray) -> np.ndarray:
    return arr[0] if arr.ndim >= 1 and arr.shape[0] == 1 else arr


def craft_bp(model: FeatureExtractor, bases: np.ndarray, target: np.ndarray,
             cfg: CraftConfig, base_ids=None) -> PoisonSet:
    """Bullseye polytope: steer the poisons' mean activation onto the target's
    at every tap, each tap normalized by the target's activation norm.

    The default tap set is the final feature vector alone; "bn+final" adds
    every BN-layer input. The early taps spend most of the pixel budget on
    low-level mimicry, which at this scale destroys both the attack's potency
    and its clean-label appearance, so they are opt-in.
    """
    ids = _base_ids(bases, base_ids)
    use_bn_taps = cfg.bp_taps == "bn+final"

    def tap_tensors(feats, caps):
        return (caps + [feats]) if use_bn_taps else [feats]

    with T.no_grad():
        t_feats, t_caps = model.forward(Tensor(target[None]), capture="input")
    target_taps = [_squeeze_batch(t.data) for t in tap_tensors(t_feats, t_caps)]
    tap_norms = [max(float(np.linalg.norm(a.reshape(-1))), 1e-12) for a in target_taps]
    m = len(target_taps)

    def objective(x: Tensor) -> Tensor:
        feats, caps = model.forward(x, capture="input")
        loss = None
        for tap_t, t_arr, t_norm in zip(tap_tensors(feats, caps), target_taps, tap_norms):
            mean_tap = T.mean_axis0(tap_t)
            diff = T.sub(mean_tap, Tensor(t_arr))
            term = T.mul(T.sum_all(T.mul(diff, diff)), Tensor(1.0 / (2.0 * m * t_norm)))
            loss = term if loss is None else T.add(loss, term)
        return loss

    def loss_and_grad(x: np.ndarray):
        xt = Tensor(x, requires_grad=True)
        loss = objective(xt)
        T.backward(loss)
        return loss.item(), xt.grad

    def loss_only(x: np.ndarray) -> float:
        with T.no_grad():
            return objective(Tensor(x)).item()

    final, trace = _signed_pgd(bases, cfg, loss_and_grad, loss_only, "bp")
    poisons = PoisonSet(entries=list(zip(ids, final)), loss_trace=trace)
    poisons.validate_against(bases, cfg.epsilon)
    return poisons


def _flat_grads(params: list[Tensor]) -> np.ndarray:
    parts = []
    for p in params:
        parts.append((p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1))
    return np.concatenate(parts)


def gm_objective(target_grad: np.ndarray, poison_grad: np.ndarray) -> float:
    """One minus cosine similarity between the two flattened gradients."""
    tn = np.linalg.norm(target_grad)
    pn = np.linalg.norm(poison_grad)
    if tn == 0.0 or pn == 0.0:
        raise CraftingError("gradient matching: zero-norm gradient, cosine undefined")
    return float(1.0 - target_grad @ poison_grad / (tn * pn))


def craft_gm(model: FeatureExtractor, head: DownstreamHead, bases: np.ndarray,
             base_labels: np.ndarray, target: np.ndarray, cfg: CraftConfig,
             base_ids=None) -> PoisonSet:
    """Gradient matching against a victim proxy (frozen extractor + head).

    The target's parameter gradient is taken once at the base label and
    cached; each iteration aligns the poisons' summed parameter gradient
    with it. The input-space gradient of the alignment objective is the
    finite-difference Hessian-vector product described in the module docs.
    """
    ids = _base_ids(bases, base_ids)
    base_labels = np.asarray(base_labels, dtype=np.int64)
    if cfg.gm_theta == "head":
        params = [p for _, p in head.parameters()]
    else:
        params = [p for _, p in model.parameters()] + [p for _, p in head.parameters()]
    needs_grad_snapshot = [(p, p.requires_grad) for p in params]
    for p in params:
        p.requires_grad = True
        p._needs_grad = True

    def param_grads(images: np.ndarray, labels: np.ndarray, want_input_grad: bool):
        # passes that only need the input gradient skip the parameter VJPs
        for p in params:
            p.grad = None
            p._needs_grad = not want_input_grad
        xt = Tensor(images, requires_grad=want_input_grad)
        feats = model.forward(xt)
        logits = head.forward(feats)
        loss = T.softmax_cross_entropy(logits, labels, reduction="sum")
        T.backward(loss)
        for p in params:
            p._needs_grad = True
        return _flat_grads(params), (xt.grad if want_input_grad else None)

    try:
        target_grad, _ = param_grads(target[None], np.array([base_labels[0]]), False)
        tn = np.linalg.norm(target_grad)
        if tn == 0.0:
            raise CraftingError("gradient matching: target gradient is zero")

        theta_flat = np.concatenate([p.data.reshape(-1) for p in params])
        shapes = [p.data.shape for p in params]
        sizes = [p.data.size for p in params]

        def write_params(flat: np.ndarray) -> None:
            offset = 0
            for p, shape, size in zip(params, shapes, sizes):
                p.data = flat[offset:offset + size].reshape(shape).copy()
                offset += size

        def loss_only(x: np.ndarray) -> float:
            gp, _ = param_grads(x, base_labels, False)
            return gm_objective(target_grad, gp)

        def loss_and_grad(x: np.ndarray):
            gp, _ = param_grads(x, base_labels, False)
            pn = np.linalg.norm(gp)
            if pn == 0.0:
                raise CraftingError("gradient matching: poison gradient is zero")
            cos = float(target_grad @ gp / (tn * pn))
            loss = 1.0 - cos
            # dB/dg_p for B = 1 - cos(g_t, g_p)
            v = -(target_grad / tn - cos * gp / pn) / pn
            vn = np.linalg.norm(v)
            if vn == 0.0:
                return loss, np.zeros_like(x)
            delta = cfg.fd_h / vn
            write_params(theta_flat + delta * v)
            _, g_plus = param_grads(x, base_labels, True)
            write_params(theta_flat - delta * v)
            _, g_minus = param_grads(x, base_labels, True)
            write_params(theta_flat)
            return loss, (g_plus - g_minus) / (2.0 * delta)

        final, trace = _signed_pgd(bases, cfg, loss_and_grad, loss_only, "gm")
    finally:
        for p, flag in needs_grad_snapshot:
            p.requires_grad = flag
            p._needs_grad = flag
            p.grad = None

    poisons = PoisonSet(entries=list(zip(ids, final)), loss_trace=trace)
    poisons.validate_against(bases, cfg.epsilon)
    return poisons


def attack_success(model: FeatureExtractor, head: DownstreamHead, task: PoisonTask) -> bool:
    """True iff the fine-tuned model classifies the target as the base class."""
    return predict_label(model, head, task.target_image) == task.base_class
