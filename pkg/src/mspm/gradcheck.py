"""Central finite-difference gradient checking.

The checker perturbs float32 entries by +-step and compares the analytic
gradient against (f(x+h) - f(x-h)) / (h+ + h-), with the step measured on
the actually-stored float32 values. Relative error uses a denominator
floored at 1.0, so sub-unit gradients are effectively held to an absolute
tolerance, which is what a float32 forward pass can support.

Entries whose +-step evaluations land on different sides of a relu kink are
detected via sign-pattern digests and resampled: central differences say
nothing about the gradient there.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor


@dataclass
class InputReport:
    index: int
    n_checked: int = 0
    n_kinks_skipped: int = 0
    n_nonfinite: int = 0
    max_rel_err: float = 0.0


@dataclass
class GradCheckReport:
    tol: float
    step: float
    inputs: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    @property
    def n_kinks_skipped(self):
        return sum(r.n_kinks_skipped for r in self.inputs)

    @property
    def passed(self):
        ok = all(r.n_nonfinite == 0 for r in self.inputs)
        return ok and self.max_rel_err < self.tol

    def __str__(self):
        lines = [f"grad_check: max_rel_err={self.max_rel_err:.3e} "
                 f"tol={self.tol:.1e} passed={self.passed}"]
        for r in self.inputs:
            lines.append(f"  input[{r.index}]: max_rel_err={r.max_rel_err:.3e} "
                         f"checked={r.n_checked} kinks_skipped={r.n_kinks_skipped} "
                         f"nonfinite={r.n_nonfinite}")
        return "\n".join(lines)


def _eval_scalar(f, inputs):
    """Evaluate f without a tape, logging relu sign patterns."""
    log = []
    autodiff._KINK_LOG = log
    try:
        out = f(*inputs)
    finally:
        autodiff._KINK_LOG = None
    return float(out.data.reshape(())), tuple(log)


def grad_check(f, inputs, step=1e-3, tol=1e-3, max_entries_per_input=None, rng=None):
    """Compare analytic gradients of scalar-valued f against central differences.

    f is called as f(*inputs) and must return a scalar Tensor built from
    autodiff ops. Each input is checked at every entry, or at
    max_entries_per_input sampled entries when given.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")
    rng = rng or np.random.default_rng(0)

    with autodiff.Tape():
        loss = f(*inputs)
        if loss.size != 1:
            raise ValueError("grad_check target must return a scalar")
        autodiff.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    report = GradCheckReport(tol=tol, step=step)
    for idx, t in enumerate(inputs):
        rep = InputReport(index=idx)
        nentries = t.size
        if max_entries_per_input is None or nentries <= max_entries_per_input:
            candidates = list(range(nentries))
        else:
            candidates = list(rng.permutation(nentries))
        wanted = nentries if max_entries_per_input is None else max_entries_per_input
        flat = t.data.reshape(-1)
        pos = 0
        while rep.n_checked < wanted and pos < len(candidates):
            j = candidates[pos]
            pos += 1
            orig = flat[j]
            flat[j] = np.float32(orig + step)
            hi = float(flat[j])
            f_hi, sig_hi = _eval_scalar(f, inputs)
            flat[j] = np.float32(orig - step)
            lo = float(flat[j])
            f_lo, sig_lo = _eval_scalar(f, inputs)
            flat[j] = orig
            if sig_hi != sig_lo:
                rep.n_kinks_skipped += 1
                continue
            fd = (f_hi - f_lo) / (hi - lo)
            a = float(analytic[idx].reshape(-1)[j])
            if not (np.isfinite(fd) and np.isfinite(a)):
                rep.n_nonfinite += 1
                rep.n_checked += 1
                continue
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            rep.max_rel_err = max(rep.max_rel_err, rel)
            rep.n_checked += 1
        report.inputs.append(rep)
    return report
