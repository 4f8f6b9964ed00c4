from __future__ import annotations

import numpy as np
import pytest
import torch

from priordistill.datasets import PreprocConfig, load_splits
from priordistill.decoder import DecoderSpec
from priordistill.distiller import DistillConfig, distill
from priordistill.experts import NO_AUG, train_experts
from priordistill.nets import StudentArch
from priordistill.objectives import MTTConfig

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY_SPEC = DecoderSpec(8, 8, (8, 8), (16, 16, 1))


@pytest.fixture(scope="session")
def digits16():
    return load_splits("digits", None, PreprocConfig(image_size=16))


@pytest.fixture(scope="session")
def tiny_arch(digits16):
    train, _ = digits16
    return StudentArch.for_image(train.class_count, train.image_shape, width=16, block_count=2)


@pytest.fixture(scope="session")
def tiny_experts(digits16, tiny_arch):
    train, _ = digits16
    return train_experts(train, tiny_arch, 2, 3, 1, NO_AUG, 0, lr=0.01, batch_size=128)


def tiny_distill_config(**kw) -> DistillConfig:
    base = dict(steps=3, decoder=TINY_SPEC, mtt=MTTConfig(N=2, M=1, max_start=1), batch_per_class=4)
    base.update(kw)
    return DistillConfig(**base)


@pytest.fixture(scope="session")
def tiny_bundle(digits16, tiny_experts):
    train, _ = digits16
    return distill(train, tiny_experts, tiny_distill_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
