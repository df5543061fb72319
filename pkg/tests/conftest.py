import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference_check(loss_fn, params, n_checks=5, step=1e-3, rtol=1e-3, seed=0):
    """Compare autograd against central differences on ``n_checks`` random
    scalar entries drawn from ``params`` (float64 tensors)."""
    gen = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    results = []
    candidates = [(i, p) for i, p in enumerate(params) if grads[i] is not None]
    for _ in range(n_checks):
        i, p = candidates[gen.integers(len(candidates))]
        flat = p.data.view(-1)
        j = int(gen.integers(flat.numel()))
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + step
            up = loss_fn().item()
            flat[j] = old - step
            down = loss_fn().item()
            flat[j] = old
        numeric = (up - down) / (2 * step)
        analytic = grads[i].reshape(-1)[j].item()
        results.append((analytic, numeric))
    for analytic, numeric in results:
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < rtol or abs(analytic - numeric) < 1e-7, (
            analytic, numeric)
    return results


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            number, _, label = name.partition("_")
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((int(number), f"criterion {number} ({label.replace('_', ' ')}): {verdict}"
                                       f" [{rep.duration:.1f}s]"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
