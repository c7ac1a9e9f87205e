import numpy as np
import pytest
import torch


def central_fd(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            hi = float(fn(x))
            flat[k] = orig - step
            lo = float(fn(x))
            flat[k] = orig
            gflat[k] = (hi - lo) / (2 * step)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def grad_rel_error(fn, x: torch.Tensor, step: float = 1e-4) -> float:
    """``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-6)``."""
    ga = autograd_grad(fn, x)
    gf = central_fd(fn, x, step)
    denom = max(ga.norm().item(), gf.norm().item(), 1e-6)
    return (ga - gf).norm().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance bookkeeping: tests marked ``acceptance(n, title)`` are folded into
# one PASS/FAIL line per criterion (a criterion passes only if all its tests pass)
_ACCEPT = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    n, title = m.args
    entry = _ACCEPT.setdefault(n, {"title": title, "status": [], "detail": []})
    entry["status"].append("FAIL" if rep.failed else "SKIP" if rep.skipped else "PASS")
    entry["detail"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPT):
        e = _ACCEPT[n]
        st = "FAIL" if "FAIL" in e["status"] else "SKIP" if "SKIP" in e["status"] else "PASS"
        line = f"criterion {n} [{st}] {e['title']}"
        if e["detail"]:
            line += ": " + "; ".join(dict.fromkeys(e["detail"]))
        terminalreporter.write_line(line)
