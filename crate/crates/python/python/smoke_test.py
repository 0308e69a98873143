"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation crates/python
Then run:                 python crates/python/python/smoke_test.py   (or pytest)
"""

import tempfile
from pathlib import Path

import kgtransfer_py as kg

CONFIG = """
version = 1
setting = "pr4lp"
seed = 0
output = "out"
[data]
train = "data/train.tsv"
valid = "data/valid.tsv"
test = "data/test.tsv"
background = "data/background.tsv"
alignment = "data/alignment.tsv"
[train]
epochs = 2
[encoder]
kind = "rsn"
dim = 8
[subgraph]
budget = 300
[teacher.train]
epochs = 2
"""


def test_scenario_to_metrics():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        audit = kg.generate_scenario(str(tmp / "data"), seed=1, entities=60)
        assert audit["test"] > 0 and audit["leaked"] == 0

        config = tmp / "run.toml"
        config.write_text(CONFIG)
        assert kg.validate_config(str(config)) == []

        result = kg.run(str(config), "all", seed=3)
        m = result["metrics"]
        assert m["setting"] == "PR4LP"
        assert 0.0 < m["mrr"] <= 1.0
        assert len(m["ranks"]) == m["queries"]
        assert any(line.startswith("stage=eval ") for line in result["log"])


def test_bad_config_is_reported():
    with tempfile.TemporaryDirectory() as tmp:
        config = Path(tmp) / "bad.toml"
        config.write_text("version = 1\nbogus = 3\n")
        issues = kg.validate_config(str(config))
        assert issues and "bogus" in issues[0]
        try:
            kg.run(str(config))
        except ValueError:
            pass
        else:
            raise AssertionError("invalid configuration accepted")


if __name__ == "__main__":
    test_scenario_to_metrics()
    test_bad_config_is_reported()
    print("python smoke test passed")
