import struct

import numpy as np
import pytest

from stagedetect.config import RunConfig
from stagedetect.dataset import SyntheticConfig, generate_synthetic
from stagedetect.training import train_bundle

# filled by test_acceptance; printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_config() -> RunConfig:
    cfg = RunConfig()
    cfg.synthetic.n_benign = 150
    cfg.synthetic.n_malicious = 150
    cfg.forest.tree_count = 25
    cfg.sequence.epochs = 12
    cfg.meta.rounds = 40
    cfg.k_folds = 3
    return cfg


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticConfig(n_benign=150, n_malicious=150, seed=5))


@pytest.fixture(scope="session")
def small_bundle(small_dataset, small_cfg):
    return train_bundle(small_dataset, small_cfg, seed=3)


def hand_pe() -> bytes:
    """Two-section PE laid out byte by byte (independent of ``build_pe``).

    0x00  'MZ', e_lfanew=0x40 at 0x3C
    0x40  'PE\\0\\0'
    0x44  COFF: machine 0x8664, 2 sections, stamp 0x12345678, opt header 0
    0x58  section table (2 x 40 bytes)
    0xA8  .text body: 64 bytes cycling 0..63
    0xE8  .data body: 32 bytes of 0x00
    """
    buf = bytearray(0xE8 + 32)
    buf[0:2] = b"MZ"
    struct.pack_into("<I", buf, 0x3C, 0x40)
    buf[0x40:0x44] = b"PE\0\0"
    struct.pack_into("<HHIIIHH", buf, 0x44, 0x8664, 2, 0x12345678, 0, 0, 0, 0x22)
    struct.pack_into("<8sIIIIIIHHI", buf, 0x58, b".text", 64, 0x1000, 64, 0xA8, 0, 0, 0, 0, 0x60000020)
    struct.pack_into("<8sIIIIIIHHI", buf, 0x80, b".data", 32, 0x2000, 32, 0xE8, 0, 0, 0, 0, 0xC0000040)
    buf[0xA8:0xE8] = bytes(range(64))
    return bytes(buf)


@pytest.fixture
def pe_bytes():
    return hand_pe()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
