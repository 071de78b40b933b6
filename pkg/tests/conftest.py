"""Shared helpers: parameter-space gradient checks and small model factories."""

import numpy as np

from streamedit import autodiff as ad


def param_gradient_check(run, param, eps=1e-3, rtol=1e-3, atol=1e-5, max_coords=None,
                         seed=0):
    """Reverse-mode vs central-difference gradient of ``run()`` wrt ``param``.

    ``run`` must be a pure closure over the model (fresh state per call). The
    finite-difference side substitutes float64 copies of the parameter so the
    perturbed forward runs in double precision. ``max_coords`` samples a subset
    of coordinates for large parameters.
    """
    with ad.tape():
        loss = run()
        g_ad = ad.backward(loss, params=[param])[param].data
    base = param.data.astype(np.float64)
    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)
    old = param.data
    g_fd = np.zeros(flat.size)
    try:
        for i in coords:
            v = flat.copy()
            v[i] += eps
            param.data = v.reshape(base.shape)
            fp = run().item()
            v[i] -= 2 * eps
            param.data = v.reshape(base.shape)
            fm = run().item()
            g_fd[i] = (fp - fm) / (2 * eps)
    finally:
        param.data = old
    ad_sel = g_ad.reshape(-1)[coords]
    fd_sel = g_fd[coords]
    err = np.abs(ad_sel - fd_sel)
    ok = bool(np.all(err <= atol + rtol * np.abs(fd_sel)))
    worst = float(np.max(err / np.maximum(np.abs(fd_sel), atol)))
    return ok, worst


def randomize_parameters(named_params, rng, std=0.05, only_prefix=None):
    """Overwrite parameters with small gaussians (e.g. to unzero residual outs)."""
    for name, p in named_params.items():
        if only_prefix is not None and not name.startswith(only_prefix):
            continue
        p.data = rng.normal(0.0, std, size=p.data.shape).astype(np.float32)
