from __future__ import annotations

import numpy as np
import pytest

from msclip import _accel
from msclip import model as M
from msclip.data import RGB_BANDS, SynthConfig, generate_synthetic
from msclip.tokenizer import build_vocab

TINY = M.ModelConfig(image_size=16, patch_size=8, in_channels=3, vision_dim=16, vision_depth=2,
                     vision_heads=2, text_dim=16, text_depth=2, text_heads=2, vocab_size=40,
                     context_length=12, proj_dim=8, band_names=tuple(b.value for b in RGB_BANDS))


KERNELS = ("resize_stack", "layer_norm_forward", "layer_norm_backward", "gelu_forward",
           "gelu_backward", "softmax_rows", "ap_from_relevance")


@pytest.fixture(params=["numpy", "numba"])
def backend(request, monkeypatch):
    """Run a test once with every kernel on the numpy path and once on the numba path."""
    prefix = "np_" if request.param == "numpy" else "nb_"
    for name in KERNELS:
        monkeypatch.setattr(_accel, name, getattr(_accel, prefix + name))
    return request.param


@pytest.fixture
def tiny_config() -> M.ModelConfig:
    return TINY


@pytest.fixture
def tiny_params() -> M.ModelParameters:
    return M.init_model(TINY, seed=0)


@pytest.fixture(scope="session")
def small_synth() -> SynthConfig:
    return SynthConfig(seed=5, num_classes=4, per_class_count={"train": 12, "val": 4, "test": 6},
                       image_size=16, spectral_only_classes=(2, 3))


@pytest.fixture(scope="session")
def small_records(small_synth):
    return generate_synthetic(small_synth)


@pytest.fixture(scope="session")
def small_vocab(small_records):
    return build_vocab([r.caption for r in small_records if r.split == "train"], max_size=200)


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
