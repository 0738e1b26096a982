from __future__ import annotations

import pytest

from lsqtomo.config import ExperimentConfig, config_hash
from lsqtomo.database import Database
from lsqtomo.errors import StorageError


@pytest.fixture
async def db(tmp_path):
    database = Database(ExperimentConfig(ledger_path=str(tmp_path / "ledger" / "runs.db"), seed=3))
    await database.initialize()
    yield database
    await database.close()


async def test_runs_are_recorded(db):
    run_id = await db.start_run("simulate")
    assert run_id == 1
    (row,) = await db.get_runs()
    assert row["command"] == "simulate"
    assert row["status"] == "running"
    assert row["seed"] == 3
    assert row["config_hash"] == config_hash(db.config)

    await db.finish_run(run_id, "ok")
    assert (await db.get_runs(command="simulate"))[0]["status"] == "ok"
    assert await db.get_runs(command="kernels") == []


async def test_newest_runs_come_first(db):
    for command in ("simulate", "reconstruct", "pipeline"):
        await db.start_run(command)
    runs = await db.get_runs(limit=2)
    assert [r["command"] for r in runs] == ["pipeline", "reconstruct"]


async def test_metrics_roundtrip_and_update(db):
    run_id = await db.start_run("pipeline")
    await db.save_metrics(run_id, {"trace": 1.0, "max_std": 0.02})
    assert await db.get_metrics(run_id) == {"max_std": 0.02, "trace": 1.0}
    await db.save_metrics(run_id, {"trace": 0.99})
    assert (await db.get_metrics(run_id))["trace"] == pytest.approx(0.99)
    assert await db.get_metrics(run_id + 1) == {}


async def test_unwritable_ledger_location(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    database = Database(ExperimentConfig(ledger_path=str(blocker / "runs.db")))
    with pytest.raises(StorageError):
        await database.initialize()
    await database.close()
