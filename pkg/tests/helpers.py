"""Finite-difference gradient checking shared by the gradient tests.

Central differences in float64 with step 1e-5.  The check is the usual
``|fd - autograd| <= atol + rtol * scale`` form: rtol is the 1e-4 relative
tolerance and atol is the cancellation noise floor of the difference
quotient, eps * |loss| / (2 * step) times a small safety factor.  Entries
whose gradient exceeds atol / rtol are therefore held to the full relative
tolerance; entries below it are exactly the ones central differences cannot
resolve that finely, and only the absolute bound applies.
"""

import numpy as np
import torch

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_NOISE_SAFETY = 8.0


def central_difference_check(
    objective,
    parameters,
    step=FD_STEP,
    rel_tol=FD_REL_TOL,
    max_entries=16,
    seed=0,
):
    """Compare autograd gradients of ``objective()`` against central differences.

    ``objective`` must rebuild the scalar loss on every call (parameters are
    perturbed in place between calls).  For parameters with more entries
    than ``max_entries``, a seeded random subset is probed.  Returns the
    worst relative error observed among resolvable entries; raises
    AssertionError on violation.
    """
    parameters = [p for p in parameters if p.requires_grad]
    assert parameters, "nothing to check"
    loss = objective()
    f0 = float(loss.detach())
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    eps64 = torch.finfo(torch.float64).eps
    abs_tol = FD_NOISE_SAFETY * eps64 * max(1.0, abs(f0)) / (2.0 * step)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(parameters, grads):
        assert grad is not None, f"parameter {tuple(param.shape)} is unused"
        flat = param.detach().reshape(-1)
        grad_flat = grad.reshape(-1)
        n = flat.numel()
        if n <= max_entries:
            entries = range(n)
        else:
            entries = rng.choice(n, size=max_entries, replace=False)
        for idx in entries:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                f_plus = float(objective())
                flat[idx] = orig - step
                f_minus = float(objective())
                flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(grad_flat[idx])
            scale = max(abs(fd), abs(an))
            diff = abs(fd - an)
            assert diff <= abs_tol + rel_tol * scale, (
                f"gradient mismatch: fd={fd!r} autograd={an!r} diff={diff:.3e} "
                f"bound={abs_tol + rel_tol * scale:.3e} "
                f"(param shape {tuple(param.shape)}, entry {idx})"
            )
            if scale > abs_tol / rel_tol:
                worst = max(worst, diff / scale)
    return worst
