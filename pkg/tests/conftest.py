import pytest

from weighted_experts.config import RunConfig, ScenarioConfig, SiteSpec, TrainConfig
from weighted_experts.pipeline import run_incremental_pipeline


def tiny_config(seed: int = 11) -> RunConfig:
    """Four internal sites and one external site, a few epochs each."""
    names = ["a", "b", "c", "d", "e", "f"]
    sites = [
        SiteSpec("s0", ["a", "b", "c"], role="base", patients=6, samples_per_patient=4),
        SiteSpec("s1", ["a", "b"], patients=5, samples_per_patient=4, gain=0.7, bias=0.2),
        SiteSpec("s2", ["b", "c", "d"], patients=5, samples_per_patient=4, gain=1.3, bias=-0.1),
        SiteSpec("s3", ["e", "f"], patients=5, samples_per_patient=4),
        SiteSpec("x0", names, role="external", patients=3, samples_per_patient=4),
    ]
    return RunConfig(
        scenario=ScenarioConfig(class_names=names, sites=sites, seed=seed),
        train=TrainConfig(epochs=3, finetune_epochs=3, fusion_epochs=2, batch_size=16, seed=seed),
    )


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    return run_incremental_pipeline(out, tiny_config())


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
