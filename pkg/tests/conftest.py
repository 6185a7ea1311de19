import sys
from pathlib import Path

import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")
torch.use_deterministic_algorithms(True)

import pytest

from vlp3d.config import TrainConfig
from vlp3d.data import Dataset, synth_dataset

TINY = dict(
    phantom_shape=(32, 32, 32), n_train=6, n_val=4, n_test=4, input_size=(16, 16, 16), patch_size=8,
    vision_dim=24, vision_depth=1, vision_heads=2, vision_pool_heads=4, text_dim=16, text_depth=1, text_heads=2,
    text_pool_heads=4, joint_dim=16, text_max_len=48, rrg_dim=16, rrg_depth=1, rrg_heads=2,
    mask_tokens_per_section=4, mae_decoder_dim=24, mae_decoder_depth=1, mae_decoder_heads=2,
    total_steps=20, warmup_steps=2, batch_size=4, probe_steps=20, probe_batch_size=4, zeroshot_refs=3,
)


def tiny_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    synth_dataset(root, tiny_config(n_unpaired=2))
    return Dataset(root)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}: {title}" + (f" ({detail})" if detail else ""))
