import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Tag an acceptance test; the terminal summary prints one line per tag."""

    def tag(number: int, title: str, detail: str = "") -> None:
        request.node.user_properties.append(("criterion", (number, title, detail)))

    return tag


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call" and not (key == "error"):
                continue
            for name, value in getattr(rep, "user_properties", []):
                if name == "criterion":
                    number, title, detail = value
                    status = "PASS" if rep.passed else "FAIL"
                    lines.append((number, f"[{status}] criterion {number:2d}: {title}" + (f"  ({detail})" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
