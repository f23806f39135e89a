import numpy as np
import pytest

from trunet import checks


def test_registry_covers_required_blocks():
    for name in ("conv3d", "softmax", "group_norm", "bottleneck", "vit_layer", "decoder_stage", "dice_ce_loss"):
        assert name in checks.REGISTRY


def test_all_registered_checks_pass():
    results = checks.run_all(seed=0)
    assert {r.name for r in results} == set(checks.REGISTRY)
    failed = [(r.name, r.target, r.report.max_rel_err) for r in results if not r.passed]
    assert not failed
    assert all(np.isfinite(r.report.max_rel_err) for r in results)


def test_single_check_and_table():
    results = checks.run_check("matmul", seed=1)
    assert all(r.passed and r.report.max_rel_err <= checks.DEFAULT_TOL for r in results)
    table = checks.format_table(results)
    assert "matmul" in table and "max_rel_err" in table


def test_unknown_check():
    with pytest.raises(KeyError):
        checks.run_check("nope")
