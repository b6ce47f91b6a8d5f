"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import GradCheckError
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare the reverse-mode gradient of ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place, so ``f`` may also close over it (e.g. when ``x``
    is a model parameter). The relative error of each coordinate uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.

    Args:
        f: Scalar-valued function of ``x``.
        x: Point of evaluation; should be float64.
        h: Finite-difference step.
        indices: Flat indices to check. Defaults to every coordinate.

    Returns:
        The maximum relative error over the checked coordinates.
    """
    if x.dtype != np.float64:
        raise GradCheckError(f"grad_check needs a float64 tensor, got {x.dtype}")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError("function value is not finite at the evaluation point")
        out.backward()
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    finally:
        x.requires_grad = was
        x.grad = None

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.sum())
            flat[i] = orig - h
            fm = float(f(x).data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"function value is not finite when perturbing coordinate {i}")
            numeric = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _bias_shift(values: np.ndarray, min_single: float = 0.1) -> tuple[float, float]:
    # (shift to subtract, resulting distance to zero)
    v = np.sort(values.reshape(-1))
    if v.size == 1:
        target = v[0] if abs(v[0]) >= min_single else np.copysign(min_single, v[0])
        return float(v[0] - target), float(abs(target))
    gaps = np.diff(v)
    k = int(gaps.argmax())
    return float((v[k] + v[k + 1]) / 2), float(gaps[k] / 2)


class _Recorder:
    def __init__(self, conv, sink: list):
        self.conv, self.sink = conv, sink

    def __call__(self, inp, padding=None):
        out = self.conv(inp, padding)
        self.sink.append(out.data)
        return out


def smooth_point(model, x: Tensor) -> float:
    """Shift conv biases so no ReLU input of ``model`` at ``x`` lies near zero.

    A ReLU network is only piecewise smooth; a finite-difference step that
    crosses a kink measures a different slope than the one backprop returns.
    For each ReLU-feeding conv, in forward order, the bias of every output
    channel is moved so that zero falls in the middle of the widest gap of
    that channel's pre-activations, keeping a mix of active and inactive
    positions. Returns the smallest resulting distance to a kink.
    """
    from .unet import forward

    slots = []
    for name in model.convs:
        if name.startswith("dec") and model.cfm is not None and not any(s[1].startswith("left") for s in slots):
            slots += [(model.cfm, "left_a"), (model.cfm, "right_a")]
        if name != "head":
            slots.append((model.convs, name))

    def get(owner, key):
        return owner[key] if isinstance(owner, dict) else getattr(owner, key)

    def put(owner, key, value):
        if isinstance(owner, dict):
            owner[key] = value
        else:
            setattr(owner, key, value)

    margin = np.inf
    with no_grad():
        for owner, key in slots:
            conv, sink = get(owner, key), []
            put(owner, key, _Recorder(conv, sink))
            try:
                forward(model, x)
            finally:
                put(owner, key, conv)
            z = sink[0]
            for c in range(z.shape[1]):
                shift, dist = _bias_shift(z[:, c])
                conv.bias.data[c] -= shift
                margin = min(margin, dist)
    return margin


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _relative_checkable(named: dict[str, Tensor]) -> list[Tensor]:
    # Softmax ignores a constant shift of its logits, so the attention bias has
    # an identically zero gradient; a relative error there only measures roundoff.
    return [p for n, p in named.items() if not n.endswith("ctx_proj.bias")]


def _abs_grad(f: Callable[[Tensor], Tensor], p: Tensor) -> float:
    """Largest |gradient| of ``f`` with respect to ``p``, analytic or numeric."""
    was, p.requires_grad, p.grad = p.requires_grad, True, None
    f(p).backward()
    worst = float(np.abs(p.grad).max()) if p.grad is not None else 0.0
    p.requires_grad, p.grad = was, None
    flat = p.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            o = flat[i]
            flat[i] = o + 1e-4
            fp = float(f(p).data.sum())
            flat[i] = o - 1e-4
            fm = float(f(p).data.sum())
            flat[i] = o
            worst = max(worst, abs(fp - fm) / 2e-4)
    return worst


def run_suite(seed: int = 0, h: float = 1e-4, depth: int = 2, base_channels: int = 4, size: int = 16) -> dict[str, float]:
    """Max relative gradient error for every differentiable op and a tiny U-Net-CF.

    Everything runs in float64. Inputs to kinked ops (ReLU, max-pool) are drawn
    away from their kinks; the U-Net is moved to a smooth point with
    :func:`smooth_point` before every parameter and input coordinate is checked.

    Entries ending in ``(abs)`` are absolute gradient magnitudes of the CFM
    attention bias, whose exact gradient is zero.
    """
    from . import tensor as T
    from .cfm import CFMWeights, cfm_forward, context_modeling
    from .train import bce_loss, mse_loss
    from .unet import UNetConfig, build, forward

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    with T.precision(np.float64):

        def weights(shape):
            return Tensor(rng.standard_normal(shape))

        def check(name, f, *tensors):
            results[name] = max(results.get(name, 0.0), *(grad_check(f, t, h) for t in tensors))

        for stride, padding, k in ((1, 1, 3), (2, 0, 3), (1, 0, 1), (2, 2, 5)):
            x = Tensor(rng.standard_normal((2, 3, 7, 7)))
            kern = Tensor(rng.standard_normal((4, 3, k, k)))
            bias = Tensor(rng.standard_normal(4))
            probe = weights(T.conv2d(x, kern, bias, stride, padding).shape)
            f = lambda _: (T.conv2d(x, kern, bias, stride, padding) * probe).sum()
            check("conv2d", f, x, kern, bias)

        x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
        probe = weights(x.shape)
        check("relu", lambda t: (T.relu(t) * probe).sum(), x)

        x = Tensor(rng.standard_normal((2, 3, 4, 4)) * 3)
        check("sigmoid", lambda t: (T.sigmoid(t) * probe).sum(), x)

        x = Tensor(rng.standard_normal((2, 1, 3, 3)))
        probe1 = weights(x.shape)
        check("softmax_spatial", lambda t: (T.softmax_spatial(t) * probe1).sum(), x)

        # distinct, well separated values: no near-ties inside a pooling window
        x = Tensor(rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1)
        probe2 = weights((2, 3, 2, 2))
        check("maxpool2", lambda t: (T.maxpool2(t) * probe2).sum(), x)

        x = Tensor(rng.standard_normal((2, 3, 2, 2)))
        probe3 = weights((2, 3, 4, 4))
        check("upsample2", lambda t: (T.upsample2(t) * probe3).sum(), x)

        a = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(rng.standard_normal((2, 3, 3, 3)))
        probe4 = weights((2, 5, 3, 3))
        check("concat_channels", lambda _: (T.concat_channels(a, b) * probe4).sum(), a, b)

        pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))
        target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        check("bce_loss", lambda p: bce_loss(p, target), pred)
        check("mse_loss", lambda p: mse_loss(p, target), pred)

        w = CFMWeights.init(8, reduction=4, seed=seed)
        x = Tensor(rng.standard_normal((1, 8, 4, 4)))
        with T.no_grad():
            g = T.reshape(context_modeling(x, w), (1, 8, 1, 1))
            for conv in (w.left_a, w.right_a):
                # hidden pre-activations land at +-[0.2, 1], clear of the ReLU kink
                pre = T.conv2d(g, conv.weight).data.reshape(-1)
                conv.bias.data[:] = _away_from_zero(rng, pre.shape, 0.2) - pre
        probe5 = weights(x.shape)
        f = lambda _: (cfm_forward(x, w) * probe5).sum()
        check("cfm", f, x, *_relative_checkable(w.named_parameters()))
        results["cfm.ctx_proj.bias (abs)"] = _abs_grad(f, w.ctx_proj.bias)

        model = build(UNetConfig(depth=depth, base_channels=base_channels), seed=seed)
        x = Tensor(rng.random((1, 1, size, size)))
        smooth_point(model, x)
        target = Tensor((rng.random((1, 1, size, size)) > 0.7).astype(np.float64))
        f = lambda _: bce_loss(forward(model, x), target)
        check("unet_cf", f, x, *_relative_checkable(model.named_parameters()))
        if model.cfm is not None:
            results["unet_cf.ctx_proj.bias (abs)"] = _abs_grad(f, model.cfm.ctx_proj.bias)
    return results
