import numpy as np
import pytest

from irfuse.dataset import DatasetVariant, ImageSample, load_dataset, make_folds, read_split, split_variants
from irfuse.synthetic import write_synthetic_dataset


def fake_generated(samples):
    """Stand-in generated variants derived directly from IR samples."""
    ir = DatasetVariant("IR", samples)
    ir_l = DatasetVariant("IR_L", [ImageSample(f"ir_l/{s.id}", s.image * 0.9, s.mask) for s in samples],
                          {f"ir_l/{s.id}": s.id for s in samples})
    rgb_ir = DatasetVariant("RGB_IR", [ImageSample(f"rgb_ir/{s.id}", np.repeat(s.image, 3, 0), s.mask)
                                       for s in samples], {f"rgb_ir/{s.id}": s.id for s in samples})
    rgb_l = DatasetVariant("RGB_L", [ImageSample(f"rgb_l/{s.id}", np.repeat(s.image, 3, 0), s.mask)
                                     for s in samples], {f"rgb_l/{s.id}": f"ir_l/{s.id}" for s in samples})
    return {"IR": ir, "IR_L": ir_l, "RGB_IR": rgb_ir, "RGB_L": rgb_l}


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("synthetic"), n=96, size=64, seed=0)


@pytest.fixture(scope="session")
def synthetic_split(synthetic_root):
    """``(train_variants, val_variants, class_names, folds)`` with stand-in generated data."""
    samples, names = load_dataset(synthetic_root, "synthetic")
    variants = fake_generated(samples)
    train = split_variants(variants, read_split(synthetic_root, "train"))
    val = split_variants(variants, read_split(synthetic_root, "val"))
    return train, val, names, make_folds(names[1:], 4)


_CRITERIA = []


def record_criterion(criterion, ok, detail):
    line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
