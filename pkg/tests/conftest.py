import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from snforge import Supernet, SupernetConfig, tokenize_bytes  # noqa: E402
from snforge.data import synthetic_text  # noqa: E402

# Every search run in the session is audited: each candidate a bin ever
# admitted must lie inside that bin.
BIN_AUDIT = {"runs": 0, "candidates": 0, "violations": []}
ACCEPTANCE: dict[int, str] = {}


def _audit_search_bin(original):
    def audited(b, bin, *args, **kwargs):
        st, best = original(b, bin, *args, **kwargs)
        BIN_AUDIT["runs"] += 1
        seen = list(st.cache.values()) + [best]
        for cand in seen:
            BIN_AUDIT["candidates"] += 1
            if cand.params not in bin:
                BIN_AUDIT["violations"].append((b, cand.cid, cand.params, bin.lower, bin.upper))
        for row in st.history:
            if row[3] not in bin:
                BIN_AUDIT["violations"].append((b, row[2], row[3], bin.lower, bin.upper))
        return st, best

    return audited


def bin_audit_line() -> tuple[bool, str]:
    ok = not BIN_AUDIT["violations"] and BIN_AUDIT["runs"] > 0
    detail = (f"{BIN_AUDIT['runs']} bin searches, {BIN_AUDIT['candidates']} candidates, "
              f"{len(BIN_AUDIT['violations'])} outside their bin")
    return ok, detail


def pytest_configure(config):
    from snforge import evolution
    if not getattr(evolution._search_bin, "_audited", False):
        evolution._search_bin = _audit_search_bin(evolution._search_bin)
        evolution._search_bin._audited = True


def pytest_sessionfinish(session, exitstatus):
    if BIN_AUDIT["violations"]:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not BIN_AUDIT["runs"]:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    if not BIN_AUDIT["runs"]:
        terminalreporter.write_line("n/a   [5*] bin constraint over the whole session: no search ran")
        return
    ok, detail = bin_audit_line()
    terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [5*] bin constraint over the whole session: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_sup():
    return SupernetConfig(n_layer=4, n_embd=32, n_head=4, head_size=8, intermediate_size=64,
                          vocab_size=256, max_seq=32)


@pytest.fixture(scope="session")
def gqa_sup():
    return SupernetConfig(n_layer=3, n_embd=16, n_head=4, head_size=4, intermediate_size=24,
                          n_query_groups=2, vocab_size=64, max_seq=16)


@pytest.fixture(scope="session")
def toy_net(toy_sup):
    return Supernet(toy_sup, seed=7)


@pytest.fixture(scope="session")
def small_corpus():
    return tokenize_bytes(synthetic_text(40_000, seed=3))


def perturbed(net: Supernet, seed: int = 0, std: float = 0.3) -> Supernet:
    """A supernet whose biases and gains are non-trivial (init makes them 0/1)."""
    r = np.random.default_rng(seed)
    state = {k: (v + r.normal(0, std, v.shape)).astype(v.dtype) for k, v in net.state_dict().items()}
    return Supernet(net.config, state)
