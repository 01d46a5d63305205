from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mtlforge import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _mnist_dir() -> Path | None:
    d = data.resolve_data_dir()
    return d if (d / data.IDX_FILES["train"][0]).exists() else None


@pytest.fixture(scope="session")
def mnist_dir():
    d = _mnist_dir()
    if d is None:
        pytest.skip(data.missing_idx_message(data.resolve_data_dir()))
    return d


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return data.load_mnist(mnist_dir)


@pytest.fixture
def tiny_idx(tmp_path, rng):
    """A 12-image IDX pair in a directory laid out like the real distribution."""
    imgs = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = np.arange(12) % 10
    d = tmp_path / "idx"
    d.mkdir()
    for split in ("train", "test"):
        i, lab = data.IDX_FILES[split]
        data.write_idx(d / i, d / lab, imgs, labels)
    return d, imgs, labels


@pytest.fixture
def cohorts_clean(mnist):
    return data.build_cohorts(mnist, data.split_cohorts(64), 32, data.NoiseSpec.parse("Inf"))


def small_cohorts(n=16, size=32, snr="Inf", seed=0):
    """Cohorts built from random strokes, for tests that must not need MNIST."""
    r = np.random.default_rng(seed)
    raw = (r.random((n, 28, 28)) < 0.3).astype(np.uint8) * 255
    labels = r.integers(0, 10, size=n)
    spec = data.NoiseSpec.parse(snr, seed)
    idx = np.arange(n)
    tr = data.build_cohort("train", raw, labels, idx, size, spec)
    return {"train": tr, "val": data.build_cohort("val", raw, labels, idx[: n // 2], size, spec),
            "test": data.build_cohort("test", raw, labels, idx[n // 2 :], size, spec, data.TEST_STREAM_OFFSET)}


@pytest.fixture
def make_cohorts():
    return small_cohorts


@pytest.fixture
def fake_data(monkeypatch):
    """Route sweep/CLI cohort generation to ``small_cohorts`` so no MNIST is needed."""
    from mtlforge import sweep

    def gen(cfg, snr, train_n):
        return small_cohorts(n=train_n, size=cfg.size, snr=snr, seed=cfg.noise_seed)

    monkeypatch.setattr(sweep, "generate_cohorts", gen)
    monkeypatch.setattr(sweep, "_COHORTS", {})
    return gen


# acceptance summary ----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}
DETAILS: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num = int(report.nodeid.split("test_criterion_")[1][:2])
        _CRITERIA[num] = (report.outcome, report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcome, name = _CRITERIA[num]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        detail = DETAILS.get(num, "")
        terminalreporter.write_line(f"criterion {num:>2}: {status}  {name}" + (f"  [{detail}]" if detail else ""))
