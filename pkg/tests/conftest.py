import pytest

from dfka.config import ExperimentConfig

TINY = {
    "task": {"n_classes": 4, "vocab_size": 40, "min_len": 6, "max_len": 10, "dominant_per_class": 4,
             "n_train": 40, "n_valid": 10, "n_test": 20},
    "lm": {"n_layers": 1, "d_model": 16, "n_heads": 2, "corpus_size": 200,
           "train": {"epochs": 1, "lr": 3e-3, "warmup_epochs": 0.0}},
    "teachers": {"depths": [2, 2], "dims": [16, 16], "n_heads": 2, "min_accuracy": 0.0,
                 "train": {"epochs": 2, "lr": 3e-3, "warmup_epochs": 0.0}},
    "student": {"n_layers": 2, "d_model": 16, "n_heads": 2,
                "train": {"epochs": 1, "lr": 3e-3, "warmup_epochs": 0.0}},
    "steer": {"max_len": 10, "min_len": 4, "n_samples": 6, "m": 6, "k": 3},
}


def tiny_config(**changes) -> ExperimentConfig:
    return ExperimentConfig.from_dict(TINY).replace(**changes)


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
