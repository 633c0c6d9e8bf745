"""Single-step sign-gradient adversarial perturbation of training frames.

The training step runs one probe forward pass to get the gradient of the
plain reconstruction MSE w.r.t. the current frame, perturbs the frame by
``epsilon * sign(grad)``, then runs the actual ensemble-aware training pass
on the perturbed sample. The quantization-noise generator state is restored
between the two passes so both see the same noise draws; with epsilon 0 the
step is bitwise identical to a plain one.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import Tensor

from .losses import LossReport


@dataclasses.dataclass
class FgsmConfig:
    epsilon: float = 4.0 / 255.0
    enabled: bool = True
    scope: str = "both"  # perturb the frame as {both: input and target, input_only: input}

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.scope not in ("both", "input_only"):
            raise ValueError("scope must be 'both' or 'input_only'")


def fgsm_perturb(x: Tensor, grad_x: Tensor, epsilon: float) -> Tensor:
    """``x + epsilon * sign(grad_x)``, clamped back to the valid image range."""
    if x.shape != grad_x.shape:
        raise ValueError("frame and gradient shapes differ")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return (x + epsilon * torch.sign(grad_x)).clamp(0.0, 1.0)


def fgsm_training_step(
    x_ref: Tensor,
    x: Tensor,
    model,
    loss_fn,
    cfg: FgsmConfig,
    generator: torch.Generator | None = None,
) -> LossReport:
    """Evaluate one training loss, adversarially perturbing the current frame.

    ``loss_fn(model, x_ref, x_input, x_target, generator)`` must return a
    ``LossReport`` whose ``total`` is the differentiable training objective.
    The probe pass is skipped when disabled or when epsilon is 0 (the
    perturbation would be identically zero).
    """
    x_input = x_target = x
    if cfg.enabled and cfg.epsilon > 0:
        state = generator.get_state() if generator is not None else None
        probe = x.detach().clone().requires_grad_(True)
        result = model(probe, x_ref, mode="train", generator=generator)
        recon_members = result.refined_mc.members + result.res_ensemble.members
        probe_mse = torch.mean((recon_members - probe.unsqueeze(0)) ** 2)
        (grad_x,) = torch.autograd.grad(probe_mse, probe)
        if not torch.isfinite(grad_x).all():
            raise FloatingPointError("non-finite frame gradient in adversarial probe")
        x_adv = fgsm_perturb(x, grad_x, cfg.epsilon)
        x_input = x_adv
        x_target = x_adv if cfg.scope == "both" else x
        if generator is not None and state is not None:
            generator.set_state(state)
    return loss_fn(model, x_ref, x_input, x_target, generator)
