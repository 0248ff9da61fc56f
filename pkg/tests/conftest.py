import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from asr_engine.archive_io import AlignmentSeq, save_alignment_ark, save_matrix_ark  # noqa: E402
from asr_engine.synthetic import generate_utterances, make_synthetic_corpus  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60-utterance synthetic corpus, 10-dim mfcc, 8 cd states."""
    return make_synthetic_corpus(tmp_path_factory.mktemp("corpus"), n_utts=60, dims={"mfcc": 10},
                                 n_states=8, seed=3)


def write_minimal_corpus(root: Path, dim: int = 10, n_utts: int = 12, seed: int = 0):
    """Archives at the paths the shipped minimal.cfg points at."""
    feats, labels, _ = generate_utterances(n_utts, {"mfcc": dim}, 8, seed, min_len=8, max_len=30)
    ids = sorted(labels)
    corpus = root / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    for split, part in (("train", ids[:8]), ("valid", ids[8:])):
        save_matrix_ark(corpus / f"{split}_feats.ark", {u: feats["mfcc"][u] for u in part})
        save_alignment_ark(corpus / f"{split}_cd.ark", {u: AlignmentSeq(labels[u], 8) for u in part})
    shutil.copy(FIXTURES / "minimal.cfg", root / "minimal.cfg")
    return root / "minimal.cfg"


@pytest.fixture
def minimal_experiment(tmp_path):
    return write_minimal_corpus(tmp_path)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The standard corpus: 200 utterances, 50-dim features, 8 states."""
    return make_synthetic_corpus(tmp_path_factory.mktemp("default_corpus"))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, one line per criterion."""
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
