import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_TRAIN = dict(
    sample_rate=8000, win_len=128, hop_len=32, fft_size=128, chunk_s=0.5, chunk_hop_s=0.25,
    sep_channels=(4, 8), embed_dim=16, embed_hidden=8, batch_size=8,
)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Four files per class, 0.75 s at 8 kHz, split 2/1/1."""
    from compspoof.forge import ForgeConfig, build_corpus, stratified_split, write_manifest
    from compspoof.toy import make_toy_pools

    base = tmp_path_factory.mktemp("toy")
    pools = make_toy_pools(base / "pools", n=4, sample_rate=8000, duration=0.75, seed=0)
    root = base / "corpus"
    cfg = ForgeConfig(sample_rate=8000, min_duration=0.5, max_duration=2.0)
    entries = stratified_split(build_corpus(pools, 4, 0, root, cfg), (0.5, 0.25, 0.25), seed=0)
    write_manifest(root / "manifest.jsonl", entries)
    return entries, root


# -- acceptance report -----------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        detail = detail or str(rep.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
