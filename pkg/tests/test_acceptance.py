"""Acceptance suite: property checks 1-7 and the desk-scale experiment 8-13.

The desk-scale artifacts (data, three trained models, evaluations) are
cached under ``$MRSSM_CACHE`` (default ``<repo>/.cache``); the first run
trains everything, later runs reuse it.
"""

import os
from pathlib import Path

import pytest

from mrssm import selftest
from mrssm.experiment import desk_config, run_desk

CACHE = Path(os.environ.get("MRSSM_CACHE", Path(__file__).resolve().parents[1] / ".cache"))


def report(number: int, result, capsys):
    with capsys.disabled():
        print(f"\ncriterion {number:2d} {'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")


@pytest.fixture(scope="module")
def desk():
    return run_desk(CACHE, desk_config())


PROPERTY = {
    1: lambda: selftest.check_poe(trials=40),
    2: lambda: selftest.check_kl(pairs=50, samples=1_000_000),
    3: lambda: selftest.check_gradients(),
    4: lambda: selftest.check_fullset_equivalence(),
    5: lambda: selftest.check_contraction(steps=1000),
    6: lambda: selftest.check_pose_integration(),
}


@pytest.mark.parametrize("number", sorted(PROPERTY))
def test_property_criterion(number, capsys):
    result = PROPERTY[number]()
    report(number, result, capsys)
    assert result.passed, result.detail


def test_criterion_7_missing_modalities_on_trained_checkpoint(desk, capsys):
    _, _, ckpt = desk
    result = selftest.check_missing_modalities(ckpt)
    report(7, result, capsys)
    assert result.passed, result.detail


@pytest.mark.parametrize("number", range(8, 14))
def test_desk_criterion(number, desk, capsys):
    checks, _, _ = desk
    result = checks[number - 8]
    report(number, result, capsys)
    assert result.passed, result.detail
