"""Finite-difference oracles shared by the unit and acceptance tests."""

import numpy as np

from equisplat.camera import project_equirect
from equisplat.gradients import backward
from equisplat.rasterizer import render
from equisplat.scene import GaussianCloud
from equisplat.trainer import loss


def l1_loss(image, gt):
    return loss(image, gt, lambda_ssim=0.0)


def fd_param_grads(cloud, pose, cam, gt, h=1e-6, loss_fn=l1_loss):
    """Central differences of ``loss_fn(render(cloud), gt)`` for every raw parameter."""
    work = cloud.copy()
    grads = {}
    for name in GaussianCloud.PARAMS:
        arr = getattr(work, name)
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn(render(work, pose, cam).image, gt)[0]
            flat[i] = old - h
            lm = loss_fn(render(work, pose, cam).image, gt)[0]
            flat[i] = old
            g[i] = (lp - lm) / (2 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def analytic_param_grads(cloud, pose, cam, gt, loss_fn=l1_loss):
    out = render(cloud, pose, cam)
    _, d_image = loss_fn(out.image, gt)
    return backward(out, d_image, cloud, pose, cam).param_grads()


def gradient_mismatches(analytic, numeric, rtol=1e-3, atol=1e-7):
    """Entries failing |a - n| <= atol + rtol * max(|a|, |n|), keyed by parameter."""
    bad = {}
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n)
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        idx = np.argwhere(err > tol)
        if len(idx):
            bad[name] = [(tuple(i), float(a[tuple(i)]), float(n[tuple(i)])) for i in idx]
    return bad


def fd_jacobian(t, cam, h=1e-6):
    J = np.zeros(t.shape[:-1] + (2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        pp, _, _ = project_equirect(t + e, cam)
        pm, _, _ = project_equirect(t - e, cam)
        J[..., k] = (pp - pm) / (2 * h)
    return J


def _param_loss(cloud, pose, cam, gt, name, index, delta, loss_fn):
    work = cloud.copy()
    getattr(work, name)[index] += delta
    return loss_fn(render(work, pose, cam).image, gt)[0]


def resolve_one_sided(cloud, pose, cam, gt, bad, h=1e-7, rtol=1e-3, atol=1e-7, loss_fn=l1_loss):
    """Re-check central-difference mismatches with one-sided differences.

    The loss is piecewise smooth: a pixel whose alpha crosses the 1/255
    skip threshold makes it jump. When a jump falls inside the central
    stencil, one side of it is still smooth, so an entry is accepted if the
    forward or the backward difference agrees. A wrong analytic gradient
    disagrees with both. Returns (remaining mismatches, number resolved).
    """
    remaining = {}
    resolved = 0
    for name, entries in bad.items():
        for index, a, _ in entries:
            f0 = _param_loss(cloud, pose, cam, gt, name, index, 0.0, loss_fn)
            fwd = (_param_loss(cloud, pose, cam, gt, name, index, h, loss_fn) - f0) / h
            bwd = (f0 - _param_loss(cloud, pose, cam, gt, name, index, -h, loss_fn)) / h
            if any(abs(a - s) <= atol + rtol * max(abs(a), abs(s)) for s in (fwd, bwd)):
                resolved += 1
            else:
                remaining.setdefault(name, []).append((index, a, fwd, bwd))
    return remaining, resolved
