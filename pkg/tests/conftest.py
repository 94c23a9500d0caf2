import logging

import numpy as np
import pytest
import torch

from gaitfusion.data import synth_generate
from gaitfusion.preprocess import preprocess_tree

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _quiet_and_seeded():
    torch.manual_seed(0)
    logging.getLogger("gaitfusion").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 subjects x 4 sequences x 6 frames, already preprocessed."""
    base = tmp_path_factory.mktemp("tiny")
    synth_generate(base / "raw", ids=4, seqs_per_id=4, frames=6, seed=3)
    preprocess_tree(base / "raw", base / "data")
    return base / "data"


TINY_CONFIG = """\
[data]
root = {root}
p = 2
k = 2
clip_len = 4
[head]
parts = 4
embed_dim = 8
[train]
total_steps = {steps}
checkpoint_every = 2
"""


@pytest.fixture
def tiny_config_text(tiny_dataset):
    def make(steps=3, **extra):
        text = TINY_CONFIG.format(root=tiny_dataset, steps=steps)
        return text + "".join(f"{k} = {v}\n" for k, v in extra.items())
    return make


def rng(seed=0):
    return np.random.default_rng(seed)


# -- stage unification is asserted on every dual-branch forward in the suite ---------

UNIFICATION_CHECKS = {"traces": 0, "stages": 0}


def bit_identical(a: torch.Tensor, b: torch.Tensor) -> bool:
    """Equality of the raw bits, so NaN inputs of a diverging run still compare equal."""
    if a.dtype != b.dtype or a.shape != b.shape:
        return False
    ints = {torch.float64: torch.int64, torch.float32: torch.int32, torch.float16: torch.int16}
    if a.dtype not in ints:
        return torch.equal(a, b)
    return torch.equal(a.contiguous().view(ints[a.dtype]), b.contiguous().view(ints[b.dtype]))


def _assert_unified(traces):
    fused_seen = False
    for tr in traces:
        if fused_seen and tr["D_in"] is not None:
            assert bit_identical(tr["S_in"], tr["D_in"]), f"stage {tr['stage']} inputs differ"
            UNIFICATION_CHECKS["stages"] += 1
        fused_seen = fused_seen or tr["fused"]
    UNIFICATION_CHECKS["traces"] += 1


@pytest.fixture(scope="session", autouse=True)
def _unification_hook():
    import gaitfusion.model as model_mod

    original = model_mod.forward_dual

    def checked(*args, **kwargs):
        out = original(*args, **kwargs)
        _assert_unified(out[1])
        return out

    model_mod.forward_dual = checked
    yield UNIFICATION_CHECKS
    model_mod.forward_dual = original


# -- acceptance lines -------------------------------------------------------------------

def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             if getattr(rep, "when", None) == "call"
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
