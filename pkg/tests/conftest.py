import re

import numpy as np
import pytest

from ecglang.data import make_corpus
from ecglang.data.synth import synth_ecg, synth_report
from ecglang.model import ModelConfig
from ecglang.tensor import Tensor, default_dtype


def tiny_config(**kw) -> ModelConfig:
    base = dict(dim=16, heads=2, ecg_layers=1, text_enc_layers=1, text_dec_layers=1, beat_tokens=2,
                caption_queries=2, conv_norm_groups=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def p64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape).astype(np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(80, seed=3)


@pytest.fixture(scope="session")
def tiny_batch():
    codes = [("AFIB",), ("STE",), ("LBBB",)]
    recs = [synth_ecg(c, i, duration_s=2.0) for i, c in enumerate(codes)]
    reps = [synth_report(c, i) for i, c in enumerate(codes)]
    return recs, reps


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], f"{status}  {props['criterion']}  {props.get('measured', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        order = lambda x: (int(re.match(r"A(\d+)", x[0]).group(1)), x[0])
        for _, line in sorted(lines, key=order):
            terminalreporter.write_line(line.rstrip())
