import numpy as np
import pytest

from lst.config import TrainConfig
from lst.core import MetaState
from lst.episodes import DatasetSpec, build_dataset
from lst.model import pretrain_backbone


def small_config(**kw) -> TrainConfig:
    """A shrunken configuration that keeps every code path but runs in milliseconds."""
    base = dict(
        n_classes=30, splits=(14, 8, 8), samples_per_class=130, pool_size=100,
        inner_steps=10, retrain_steps=3, stages=3, pretrain_epochs=3,
        meta_iterations=2, eval_interval=1, val_episodes=2, test_episodes=3,
        sweep_distractors=(0, 1, 3), sweep_retrain=(0, 3, 10),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def dataset(cfg):
    return build_dataset(DatasetSpec.from_config(cfg), cfg.seed)


@pytest.fixture(scope="session")
def backbone(cfg, dataset):
    return pretrain_backbone(dataset, cfg, seed=0)


@pytest.fixture
def state(backbone, cfg):
    return MetaState.initial(backbone, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance verdicts: one line per criterion in the terminal summary

_VERDICTS: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        status = "xfail" if hasattr(rep, "wasxfail") else rep.outcome
        if status == "failed" and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1][:200]
        _VERDICTS.setdefault(marker.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        ok = all(s == "passed" for _, s, _ in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for name, status, detail in parts:
            terminalreporter.write_line(f"    {status:7s} {name}: {detail}")
