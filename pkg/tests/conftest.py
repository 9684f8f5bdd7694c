from pathlib import Path

import pytest

from deeptok.pipeline import cli


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory) -> Path:
    """Corpus, tokenizer and AR runs at the tiny budget, shared across tests."""
    root = tmp_path_factory.mktemp("tiny")
    common = ["--budget", "tiny", "--set", "preset=tiny"]
    assert cli.main(["gen-data", *common, "--out", str(root / "data")]) == 0
    assert cli.main(["train-tokenizer", *common, "--data", str(root / "data"), "--out", str(root / "tokenizer")]) == 0
    assert cli.main(["train-ar", *common, "--data", str(root / "data"), "--tokenizer", str(root / "tokenizer"),
                     "--out", str(root / "ar")]) == 0
    return root


ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> None:
    """Store one acceptance line; the summary prints them all at the end of the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][2:])):
            terminalreporter.write_line(ACCEPTANCE[key])
