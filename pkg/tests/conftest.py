from __future__ import annotations

import io

import pytest
from PIL import Image

from chartattrib.backends import scripted_mock
from chartattrib.core import DataTable
from chartattrib.gateway import Gateway


def png(color=(255, 255, 255), size=(32, 24)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def mock_gateway(script, vision=True, repeat=False, **kwargs) -> Gateway:
    """Single-threaded gateway over a scripted mock so call order is deterministic."""
    kwargs.setdefault("parallelism", 1)
    return Gateway(scripted_mock(script, vision=vision, repeat=repeat), **kwargs)


@pytest.fixture
def table_2x2() -> DataTable:
    return DataTable.from_rows(["2020", "2021"], {"A": [10, 20], "B": [30, 40]})


@pytest.fixture
def blank_png() -> bytes:
    return png()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool | None, detail: str) -> None:
    """Print and collect one acceptance line; ``ok=None`` marks a skipped criterion."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"{status}  criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
