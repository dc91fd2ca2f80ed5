import numpy as np
import pytest

from stripecs.config import RunConfig, resolve
from stripecs.hsi_data import make_dataset

# small enough to train for a few epochs inside a unit test
TINY = {
    "B": "16", "H": "16", "W": "8", "K": "3", "n_train": "4", "n_val": "1", "n_test": "2",
    "s_r": "0.0625", "n_f": "1", "N_base": "8", "c_s": "4", "frdb_width": "8", "frdb_growth": "2",
    "c_g": "2", "epochs": "3", "batch_size": "2", "val_every": "1", "checkpoint_every": "2",
    "qat_epochs": "1",
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    return resolve(overrides=TINY)


@pytest.fixture(scope="session")
def tiny_args():
    """The tiny configuration as repeated ``--set`` CLI flags."""
    out = []
    for k, v in TINY.items():
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny_data")
    c = tiny_cfg
    make_dataset(root, c.K, c.B, c.H, c.W, c.n_train, c.n_val, c.n_test, c.seed, c.native_scale)
    return root


# --- acceptance reporting ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
