import time

import pytest
import torch

from ccenternet.data.split import split_dataset
from ccenternet.data.synth import SynthConfig, synth_generate


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Five images per class at a reduced resolution, split 6:2:2 (15/5/5)."""
    root = tmp_path_factory.mktemp("synth_small")
    m = synth_generate(SynthConfig(per_class=5, width=300, height=64), root, seed=7)
    m = split_dataset(m, (0.6, 0.2, 0.2), seed=0)
    m.save()
    return m


OVERFIT_EPOCHS = 200


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Eight synthetic images trained to memorisation at 256x256; returns (result, manifest, cfg, seconds)."""
    from ccenternet.core import ModelConfig
    from ccenternet.data.manifest import DatasetManifest
    from ccenternet.trainer import TrainConfig, train

    root = tmp_path_factory.mktemp("overfit")
    m = synth_generate(SynthConfig(per_class=2), root / "data", seed=3)
    records = m.records[:8]  # two each of dotted, folded, malposed, normal
    for r in records:
        r.split = "train"
    m = DatasetManifest(records, m.root, m.seed)
    m.save()
    cfg = ModelConfig(input_size=(256, 256), base_width=16, fpn_channels=64, head_channels=64)
    tc = TrainConfig(total_epochs=OVERFIT_EPOCHS, freeze_epochs=0, batch_thawed=2, lr_thawed=1e-3, augment=(),
                     seed=0, checkpoint_dir=str(root / "run"))
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    res = train(tc, cfg, m)
    return res, m, cfg, time.perf_counter() - t0


# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
