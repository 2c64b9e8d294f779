import numpy as np
import pytest

from krls_lab.corpus import CorpusSpec, generate_corpus
from krls_lab.model import ModelConfig, PolicyModel

# criterion number -> (title, outcome, detail)
ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = ACCEPTANCE.setdefault(number, [title, None, ""])
    if report.when == "setup" and report.failed:
        entry[1] = "FAIL"
    elif report.when == "call":
        entry[1] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = getattr(item, "_acceptance_detail", None)
    if detail:
        entry[2] = detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, result, detail = ACCEPTANCE[number]
        line = f"criterion {number:>2} {result or 'NOT RUN':<4} {title}"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Attach a measured-value summary to the acceptance line of this test."""
    def _set(text: str):
        request.node._acceptance_detail = text
    return _set


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusSpec(n_train=64, n_valid=16, n_test=16, seed=3))


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(CorpusSpec())


def tiny_model(vocab_size=12, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=32, seed=0,
               vocab_hash=None) -> PolicyModel:
    cfg = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                      d_ff=d_ff, max_sequence_length=max_len, seed=seed)
    m = PolicyModel(cfg) if vocab_hash is None else PolicyModel(cfg, vocab_hash)
    # larger init so finite differences see non-trivial curvature
    rng = np.random.default_rng(seed + 1000)
    for name, t in m.params.items():
        if not name.endswith(".g"):
            t.data = rng.normal(0.0, 0.5, size=t.shape)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
