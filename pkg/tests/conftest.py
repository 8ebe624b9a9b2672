import pytest

from encodenet.config import load_config

# Desk config shrunk to seconds: 6 train / 3 test images per class, 2 epochs per stage.
TINY = [
    "data.train_per_class=6",
    "data.test_per_class=3",
    "train.baseline.epochs=2",
    "train.cae.epochs=2",
    "train.head.epochs=2",
    "pipeline.seeds=[0]",
]


def tiny_config(*extra):
    return load_config("desk", TINY + list(extra))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One full tiny ablation shared by the read-only pipeline/report/CLI tests."""
    from encodenet.pipeline import run_ablation

    run_dir = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    table = run_ablation(cfg, run_dir)
    return cfg, run_dir, table


# -- acceptance summary --------------------------------------------------------------------

# (criterion number, "PASS"/"FAIL", detail) rows appended by tests/test_acceptance.py.
ACCEPTANCE = []


def record_criterion(number, ok, detail):
    ACCEPTANCE.append((number, "PASS" if ok else "FAIL", detail))
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
