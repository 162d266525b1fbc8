"""Regenerate the golden regression files under tests/golden.

Run only after the oracle tests pass; the goldens pin current behaviour, they do not validate it.
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import test_cli  # noqa: E402
import test_model  # noqa: E402

test_model.write_golden()
test_cli.write_super_resolve_golden(Path(tempfile.mkdtemp()))
print("wrote", test_model.GOLDEN, "and", test_cli.GOLDEN_SR)
