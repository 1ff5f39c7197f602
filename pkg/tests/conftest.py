import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskclip.config import TrainConfig

settings.register_profile(
    "repo",
    derandomize=True,
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


def small_config(objective="maskclip", **kw) -> TrainConfig:
    """Desk geometry with shallow encoders; fast enough for unit tests."""
    d = TrainConfig().to_dict()
    d.update(objective=objective)
    d["model"]["vision"].update(depth=1, width=16, heads=2, mlp_ratio=2)
    d["model"]["text"].update(depth=1, width=16, heads=2, mlp_ratio=2)
    d["model"]["embed_dim"] = 8
    model = kw.pop("model", None)
    d.update(kw)
    if model:
        for k, v in model.items():
            d["model"][k].update(v) if isinstance(v, dict) else d["model"].__setitem__(k, v)
    return TrainConfig.from_dict(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title}"
    if detail:
        line += f" | {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
