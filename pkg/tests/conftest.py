import pytest
import torch

from tokmem.memory import create_bank
from tokmem.model import ModelConfig, init_backbone

V_SMALL = 40


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=V_SMALL, d_model=32, n_layers=2, n_heads=2, max_seq_len=32, seed=3)


@pytest.fixture
def small_backbone(small_cfg):
    return init_backbone(small_cfg).freeze()


@pytest.fixture
def small_bank(small_backbone):
    return create_bank(32, 4, small_backbone, seed=1, labels=["a", "b", "c", "d"])


def random_ids(n, T, high, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(4, high, (n, T), generator=g)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_ac():
    """Record one acceptance verdict; the verdicts are printed at the end of the session."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split("-")[1])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
