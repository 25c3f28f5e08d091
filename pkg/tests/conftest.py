import json

import numpy as np
import pytest

from switchkd.data import DatasetSpec, Task, collate, generate
from switchkd.model import ModelConfig, ToyVLM

TINY_TEACHER = ModelConfig(vision_dim=8, lm_dim=16, lm_layers=2, lm_heads=2)
TINY_STUDENT = ModelConfig(vision_dim=8, lm_dim=8, lm_layers=1, lm_heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return generate(DatasetSpec(task=Task.MAJORITY_COLOR, n_train=64, n_val=32, seed=3))


@pytest.fixture
def batch(small_data):
    return collate(small_data[0][:4])


@pytest.fixture
def pair():
    teacher = ToyVLM(TINY_TEACHER, seed=11)
    teacher.freeze()
    return teacher, ToyVLM(TINY_STUDENT, seed=12)


def tiny_run_config(out_dir, **overrides) -> dict:
    """A run document small enough for a full pipeline in a few seconds."""
    doc = {
        "dataset": {"task": "majority-color", "n_train": 48, "n_val": 24, "seed": 0},
        "teacher_dataset": None,
        "teacher": TINY_TEACHER.model_dump(mode="json"),
        "student": TINY_STUDENT.model_dump(mode="json"),
        "teacher_training": {"seed": 1, "pt": {"learning_rate": 1e-3, "batch_size": 16},
                             "sft": {"learning_rate": 3e-3, "batch_size": 16, "epochs": 2}},
        "distill": {"pt": {"learning_rate": 1e-3, "batch_size": 16},
                    "ft": {"learning_rate": 3e-3, "batch_size": 16}},
        "out_dir": str(out_dir),
        "seeds": [0, 1, 2],
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a tiny JSON run config whose out_dir lives under tmp_path."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_run_config(tmp_path / "run")))
    return path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for the acceptance report printed at the end of the run."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"C{number:<2} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
