import numpy as np
import pytest

from selfdistill import encoder as enc
from selfdistill.corpus import Corpus, synth_corpus


def tiny_config(**kw):
    """The smallest encoder that still exercises every block."""
    base = dict(depth=2, emb_dim=8, ffn_dim=16, attn_heads=2, proj_dim=4, n_labels=4, cnn_channels=4,
                pos_conv_kernel=4, pos_conv_groups=2)
    base.update(kw)
    return enc.EncoderConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    manifest, audio = synth_corpus(3, 32, 1.0, 4, n_tokens=16)
    return Corpus(manifest, audio)


_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or number not in _criteria:
        _criteria[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
