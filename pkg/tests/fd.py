"""Central finite-difference gradient check for every parameter of a float64 model."""
import numpy as np
import torch

from asem.model import compute_losses


def total_loss(model, batch):
    return compute_losses(model(batch), batch, model.config).total


# Key-projection biases have an exactly zero gradient (softmax is shift invariant);
# both sides are then rounding noise, so the denominator gets an absolute floor.
# Non-vanishing gradient norms in the tiny config are >= ~2e-5; central-difference
# roundoff at STEP is ~1e-11, so 1e-7 separates the two regimes with wide margins.
NORM_FLOOR = 1e-7
STEP = 1e-3


def gradient_errors(model, batch, step=STEP):
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, NORM_FLOOR) per tensor.

    Also returns the largest elementwise error normalized the same way.
    """
    model.zero_grad()
    total_loss(model, batch).backward()
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1).numpy()
            flat = p.view(-1)
            numeric = np.empty_like(analytic)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(total_loss(model, batch))
                flat[i] = orig - step
                down = float(total_loss(model, batch))
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
            rel = np.linalg.norm(analytic - numeric) / scale
            worst = np.abs(analytic - numeric).max() / max(np.abs(analytic).max(), NORM_FLOOR)
            out[name] = (float(rel), float(worst))
    return out
