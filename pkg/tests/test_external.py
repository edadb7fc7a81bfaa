from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import small_dataset
from turbench.evalproto import (
    ExternalExitError,
    ExternalMissingOutput,
    ExternalTimeout,
    binary_available,
    run_external_restorer,
)
from turbench.imgcore import load_image


@pytest.fixture
def seq_dir(tmp_path):
    m = small_dataset(tmp_path, frames=2)
    return m.root / m.entries[0].path


def test_pass_through(seq_dir, tmp_path):
    out = run_external_restorer(seq_dir, "cp {in}/frame_000.png {out}", tmp_path / "w")
    assert np.array_equal(out.data, load_image(seq_dir / "frame_000.png").data)
    assert (tmp_path / "w" / "restorer.log").exists()


def test_nonzero_exit(seq_dir, tmp_path):
    with pytest.raises(ExternalExitError) as err:
        run_external_restorer(seq_dir, "echo oops >&2; exit 3; : {in} {out}", tmp_path / "w")
    assert err.value.returncode == 3 and err.value.status == "error"
    assert "oops" in (tmp_path / "w" / "restorer.log").read_text()


def test_missing_output(seq_dir, tmp_path):
    with pytest.raises(ExternalMissingOutput) as err:
        run_external_restorer(seq_dir, "true {in} {out}", tmp_path / "w")
    assert err.value.status == "missing_output"


def test_unreadable_output(seq_dir, tmp_path):
    with pytest.raises(ExternalMissingOutput):
        run_external_restorer(seq_dir, "echo garbage > {out}; : {in}", tmp_path / "w")


def test_timeout_kills_the_process_group(seq_dir, tmp_path):
    start = time.monotonic()
    with pytest.raises(ExternalTimeout) as err:
        run_external_restorer(seq_dir, "sh -c 'sleep 30' ; : {in} {out}", tmp_path / "w", timeout=0.5)
    assert err.value.status == "timeout"
    assert time.monotonic() - start < 10


def test_paths_with_spaces(tmp_path):
    m = small_dataset(tmp_path / "has space", frames=2)
    seq = m.root / m.entries[0].path
    out = run_external_restorer(seq, "cp {in}/frame_001.png {out}", tmp_path / "w dir")
    assert out.shape == (48, 48)


def test_template_checks():
    with pytest.raises(ValueError):
        run_external_restorer(".", "cp a {out}", ".")
    assert binary_available("cp {in} {out}")
    assert not binary_available("definitely-not-a-real-binary-xyz {in} {out}")
