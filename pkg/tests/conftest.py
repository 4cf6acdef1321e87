import pytest

from glare import config
from glare.data import gen_dataset


def tiny_config(out_dir, data_root) -> config.TrainConfig:
    cfg = config.loads(
        """
        model.base_channels = 4
        model.res_blocks = 1
        model.attention = false
        model.num_codes = 16
        model.cond_channels = 4
        model.couplings = 2
        model.coupling_hidden = 8
        train.batch_size = 2
        train.val_every = 3
        stage1.iterations = 6
        stage2.iterations = 6
        stage3.iterations = 6
        """
    )
    cfg.train.out_dir = str(out_dir)
    cfg.data.root = str(data_root)
    return cfg


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    return gen_dataset(tmp_path_factory.mktemp("tiny"), count=8, size=32, seed=1)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
