"""Shared fixtures: synthetic corpora and acceptance-report plumbing."""

import numpy as np
import pytest

from mimsieve.imaging import Image, bilinear_resize


def synthetic_image(seed: int, size: int = 48, channels: int = 1) -> Image:
    """Structured synthetic sample: a smooth random field plus a rectangle.

    Low-frequency content standardizes to predictable patch patterns, which
    gives a pre-training objective something learnable.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, channels))
    field = bilinear_resize(coarse, size, size)
    y0, x0 = rng.integers(0, size // 2, size=2)
    h, w = rng.integers(size // 8, size // 2, size=2)
    level = rng.uniform(0.0, 1.0)
    field[y0 : y0 + h, x0 : x0 + w, :] = level
    lo, hi = 20.0, 235.0
    field = lo + (field - field.min()) / max(field.max() - field.min(), 1e-9) * (hi - lo)
    return Image(np.clip(np.rint(field), 0, 255).astype(np.uint8))


def synthetic_corpus(n: int, seed: int = 0, size: int = 48, channels: int = 1) -> list[Image]:
    return [synthetic_image(seed * 100_000 + i, size=size, channels=channels) for i in range(n)]


def write_corpus_dir(path, images: list[Image]) -> list[str]:
    """Materialize images as PGM/PPM files; returns the file paths."""
    from mimsieve.imaging import encode_pnm

    out = []
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        ext = "pgm" if img.channels == 1 else "ppm"
        p = path / f"img_{i:05d}.{ext}"
        p.write_bytes(encode_pnm(img))
        out.append(str(p))
    return out


_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_criterion(name: str, outcome: str) -> None:
    _ACCEPTANCE_RESULTS[name] = outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and "test_acceptance" in str(item.fspath):
        name = item.name
        _ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{_ACCEPTANCE_RESULTS[name]}  {name}")
