"""Finite-difference checks of every loss composed with the network forward pass."""
import numpy as np

from mtdistill import losses as L
from mtdistill.model import ModelOutput, NetConfig, backward, forward, init
from mtdistill.numerics import grad_check

TOLERANCE = 1e-5
# Small enough that central differences over every parameter stay cheap.
CHECK_CONFIG = NetConfig(input_dim=5, hidden_dims=(6, 5))


def random_batch(rng, n=(2, 2, 2), input_dim=CHECK_CONFIG.input_dim):
    n1, n2, n3 = n
    return L.Batch(
        au_x=rng.normal(size=(n1, input_dim)),
        au_y=(rng.random((n1, 8)) < 0.4).astype(float),
        expr_x=rng.normal(size=(n2, input_dim)),
        expr_y=rng.integers(0, 7, size=n2),
        va_x=rng.normal(size=(n3, input_dim)),
        va_y=rng.uniform(-0.95, 0.95, size=(n3, 2)),
    )


def _head_loss(head, fn):
    """Wrap a per-head loss ``fn(logits) -> (value, grad)`` as a full-network objective."""

    def objective(net, x):
        out, cache = forward(net, x)
        value, g = fn(out[head])
        grads = ModelOutput.zeros_like(out)
        grads[head][...] = g
        backward(net, cache, grads)
        return value

    return objective


def _cases(rng):
    teacher = init(NetConfig(input_dim=CHECK_CONFIG.input_dim, hidden_dims=CHECK_CONFIG.hidden_dims,
                             seed=int(rng.integers(1 << 31))))
    x = rng.normal(size=(4, CHECK_CONFIG.input_dim))
    t_out, _ = forward(teacher, x)
    au_y = (rng.random((4, 8)) < 0.4).astype(float)
    expr_y = rng.integers(0, 7, size=4)
    va_y = rng.uniform(-0.95, 0.95, size=(4, 2))
    temperature = 1.5
    batch = random_batch(rng)
    cfg = L.DistillConfig()
    return {
        "loss_au": (x, _head_loss(0, lambda z: L.loss_au(au_y, z))),
        "loss_expr": (x, _head_loss(1, lambda z: L.loss_expr(expr_y, z))),
        "loss_va_class": (x, _head_loss(2, lambda z: L.loss_va_class(va_y, z))),
        "loss_va": (x, _head_loss(2, lambda z: L.loss_va(va_y, z))),
        "distill_au": (x, _head_loss(0, lambda z: L.distill_au(t_out.au, z))),
        "distill_expr": (x, _head_loss(1, lambda z: L.distill_expr(t_out.expr, z, temperature))),
        "distill_va": (x, _head_loss(2, lambda z: L.distill_va(t_out.va, z, temperature))),
        "teacher_batch_loss": (batch, lambda net, b: L.teacher_batch_loss(b, net)[0]),
        "student_batch_loss": (batch, lambda net, b: L.student_batch_loss(b, teacher, net, cfg)[0]),
    }


def check_objective(net, objective, inputs, h=1e-5):
    net.zero_grad()
    objective(net, inputs)
    analytic = net.grads.copy()
    theta0 = net.params.copy()

    def f(theta):
        net.params[:] = theta
        return objective(net, inputs)

    try:
        return grad_check(f, analytic, theta0, h)
    finally:
        net.params[:] = theta0
        net.zero_grad()


def run_gradient_checks(draws=5, seed=0):
    """Max relative error per loss over ``draws`` random (net, input) configurations."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(draws):
        net = init(NetConfig(input_dim=CHECK_CONFIG.input_dim, hidden_dims=CHECK_CONFIG.hidden_dims,
                             seed=int(rng.integers(1 << 31))))
        for name, (inputs, objective) in _cases(rng).items():
            err = check_objective(net, objective, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
