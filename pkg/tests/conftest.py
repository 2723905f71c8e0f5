import math

import numpy as np
import pytest

from ofdmce import autodiff as ad


def bessel_j0(x: float, terms: int = 40) -> float:
    """Power series of J0, independent of scipy."""
    total, term = 0.0, 1.0
    half_sq = (x / 2.0) ** 2
    for k in range(terms):
        if k:
            term *= -half_sq / (k * k)
        total += term
    return total


def numeric_grad(f, arrays, which, h=1e-5, entries=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[which]``.

    ``entries`` restricts the evaluation to a list of flat indices.
    """
    a = arrays[which]
    flat = a.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(*arrays)
        flat[i] = old - h
        fm = f(*arrays)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(a.shape)


def rel_error(analytic, numeric) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_primitive(op, arrays, rng, h=1e-5):
    """Max relative error between tape gradients and central differences of
    ``sum(op(*inputs) * R)`` for a fixed random projection ``R``."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = op(*tensors)
        proj = rng.standard_normal(out.shape)
        loss = ad.sum_all(ad.mul(out, ad.Tensor(proj)))
    grads = ad.backward(tape, loss)

    def f(*arrs):
        return float(np.sum(op(*[ad.Tensor(x) for x in arrs]).data * proj))

    worst = 0.0
    work = [a.copy() for a in arrays]
    for i, t in enumerate(tensors):
        num = numeric_grad(f, work, i, h)
        worst = max(worst, rel_error(grads.get(t, np.zeros_like(num)), num))
    return worst


def model_gradient_error(config, seed=2024, batch=2):
    """Worst relative error between tape and central-difference gradients of
    the MSE loss, over a few sampled entries (plus the largest) of every
    parameter. Returns ``(worst, (name, index, analytic, numeric))``."""
    from ofdmce.model import forward_parts, init_model, split_complex

    rng = np.random.default_rng(seed)
    params = init_model(config, seed=1)
    # non-zero biases and perturbed LayerNorm gains, so every path carries signal
    for name, t in params.items():
        if t.ndim == 1:
            t.data[:] = (1.0 if name.endswith("gain") else 0.0) + 0.3 * rng.standard_normal(t.shape)
    g = config.grid
    ls = rng.standard_normal((batch, config.n_pilots)) + 1j * rng.standard_normal((batch, config.n_pilots))
    stats = np.column_stack([rng.uniform(0, 25, batch), rng.uniform(50, 1000, batch),
                             rng.uniform(25, 300, batch)])
    truth = rng.standard_normal((batch, *g.shape)) + 1j * rng.standard_normal((batch, *g.shape))
    x, st2 = split_complex(ls), np.concatenate([stats, stats])
    target = np.concatenate([truth.real, truth.imag])

    def loss_of(p):
        d = ad.sub(forward_parts(ad.Tensor(x), st2, p, config), ad.Tensor(target))
        return ad.mean_all(ad.mul(d, d))

    with ad.Tape() as tape:
        loss = loss_of(params)
    grads = ad.backward(tape, loss)
    names = list(params)
    arrays = [params[n].data for n in names]

    def f(*arrs):
        return float(loss_of({n: ad.Tensor(a) for n, a in zip(names, arrs)}).data)

    worst, where = 0.0, None
    for i, name in enumerate(names):
        gr = grads[params[name]].ravel()
        picks = set(rng.choice(gr.size, size=min(3, gr.size), replace=False).tolist())
        picks.add(int(np.argmax(np.abs(gr))))
        num = numeric_grad(f, arrays, i, h=1e-5, entries=sorted(picks)).ravel()
        for j in picks:
            # absolute floor above the ~1e-11 difference noise; key biases have zero gradient
            err = abs(gr[j] - num[j]) / max(abs(gr[j]), abs(num[j]), 1e-6)
            if err >= worst:
                worst, where = err, (name, j, gr[j], num[j])
    return worst, where


@pytest.fixture
def rng():
    return np.random.default_rng(12345)





# ------------------------------------------------------------------ acceptance report

CRITERIA = {}


def report(criterion: int, label: str, ok: bool, detail: str = "") -> bool:
    """Record one acceptance check; summarized at the end of the run."""
    CRITERIA.setdefault(criterion, []).append((label, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        checks = CRITERIA[n]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = [f"{label} {'ok' if ok else 'FAILED'}" + (f" ({detail})" if detail else "")
                 for label, ok, detail in checks]
        tr.write_line(f"criterion {n:2d}: {status} | " + "; ".join(parts))
