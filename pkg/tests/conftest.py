import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.config import ExperimentConfig


def tiny_config(**kw) -> ExperimentConfig:
    """Small dims so a forward/backward pass takes milliseconds."""
    base = dict(vfm_width=16, vfm_depth=4, vlm_width=12, vlm_depth=4, text_width=16, n_prompts=2,
                image_size=32, patch_size=8, d_low=4, d_state=3, scan_block=4, t_v=8, decoder_stages=1,
                decoder_heads=2, iters=6, warmup=2, eval_every=3, train_images=8, eval_images=4)
    base.update(kw)
    return ExperimentConfig(**base)


def randomize(module, rng, scale=0.3):
    """Give every trainable tensor (including zero-initialized ones) random values."""
    for p in module.parameters():
        p.data = p.data + scale * rng.normal(size=p.shape)


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Remember one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
