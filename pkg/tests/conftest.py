import dataclasses
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: dict[int, str] = {}

SEEDS = range(5)
VARIANTS = {"A": {}, "B": {"contextualize": False}, "C": {"scorer": "li_context"}}


def record(number: int, passed: bool, detail: str, status: str | None = None) -> None:
    line = f"criterion {number:>2}: {status or ('PASS' if passed else 'FAIL')}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@dataclasses.dataclass
class SeedRun:
    seed: int
    dataset: object
    params: dict
    configs: dict
    seconds_a: float  # generate + train for the main variant


@pytest.fixture(scope="session")
def seed_runs():
    """Variants A/B/C trained once per seed on the default synthetic corpus."""
    from mmlate.experiment import train_on
    from mmlate.synthgen import SynthConfig, generate
    from mmlate.trainer import TrainConfig

    runs = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        ds = generate(SynthConfig(seed=seed))
        params, configs = {}, {}
        seconds_a = 0.0
        for name, kw in VARIANTS.items():
            cfg = TrainConfig(seed=seed, **kw)
            params[name], _ = train_on(ds, cfg)
            configs[name] = cfg
            if name == "A":
                seconds_a = time.perf_counter() - t0
        runs.append(SeedRun(seed, ds, params, configs, seconds_a))
    return runs
