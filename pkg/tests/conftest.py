import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-6))


ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording one PASS/FAIL line for the acceptance summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number}: {status} - {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f" ({str(exc).splitlines()[0][:160] if str(exc) else exc_type.__name__})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
