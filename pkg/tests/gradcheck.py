"""Central finite-difference gradient oracle, independent of autograd."""

import numpy as np
import torch


def finite_difference_check(loss_fn, parameters, *, num_samples=100,
                            step=1e-5, seed=0, floor=1e-3):
    """Compare analytic gradients against central finite differences.

    Samples ``num_samples`` scalar parameters uniformly from
    ``parameters``, perturbs each by +/-step, and returns the worst
    relative error ``|fd - g| / max(|fd|, |g|, floor)``.  The floor absorbs
    float64 finite-difference roundoff on near-zero gradients.
    """
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to check")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]

    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(num_samples, len(flat)), replace=False)

    worst = 0.0
    with torch.no_grad():
        for k in picks:
            i, j = flat[int(k)]
            view = params[i].view(-1)
            orig = float(view[j])
            view[j] = orig + step
            loss_plus = float(loss_fn())
            view[j] = orig - step
            loss_minus = float(loss_fn())
            view[j] = orig
            fd = (loss_plus - loss_minus) / (2.0 * step)
            g = float(grads[i].view(-1)[j])
            err = abs(fd - g) / max(abs(fd), abs(g), floor)
            worst = max(worst, err)
    return worst
