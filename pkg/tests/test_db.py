import pandas as pd
import pytest

from utils.db import list_runs, load_results, record_results, resolve_url
from utils.errors import ConfigError


@pytest.fixture
def url(tmp_path):
    return f"sqlite:///{tmp_path / 'ledger.db'}"


def test_record_and_load_a_result_table(url):
    table = pd.DataFrame({
        "seed": [0, 1],
        "arm": ["loreft", "loreft"],
        "split": ["sbm-covariate"] * 2,
        "accuracy_frozen": [0.5, 0.6],
        "accuracy_adapted": [0.55, float("nan")],
    })
    run_id = record_results(table, "ablate", config={"ssl": {"epochs": 3}}, summary={"arms": 1}, url=url)
    loaded = load_results(run_id, url=url)
    assert list(loaded["seed"]) == [0, 1]
    assert loaded.loc[0, "accuracy_adapted"] == 0.55
    assert pd.isna(loaded.loc[1, "accuracy_adapted"])
    assert [r["command"] for r in list_runs(url)] == ["ablate"]


def test_unknown_run_loads_empty(url):
    record_results(pd.DataFrame({"seed": [0]}), "eval", url=url)
    assert load_results(99, url=url).empty


def test_url_resolution(monkeypatch):
    monkeypatch.setenv("DATABASE_URL", "postgres://user@host/db")
    assert resolve_url() == "postgresql://user@host/db"
    assert resolve_url("sqlite:///x.db") == "sqlite:///x.db"
    monkeypatch.delenv("DATABASE_URL")
    with pytest.raises(ConfigError):
        resolve_url()
