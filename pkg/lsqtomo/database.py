"""SQLite run ledger: one row per command run, plus the scalar metrics it reported."""

from __future__ import annotations

import logging
from datetime import datetime, timezone
from pathlib import Path

import aiosqlite

from lsqtomo.config import ExperimentConfig, config_hash
from lsqtomo.errors import StorageError

log = logging.getLogger(__name__)

SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    command TEXT NOT NULL,
    config_hash TEXT,
    seed INTEGER,
    output_dir TEXT,
    status TEXT,
    created_at TEXT
);

CREATE TABLE IF NOT EXISTS metrics (
    run_id INTEGER NOT NULL REFERENCES runs(id),
    name TEXT NOT NULL,
    value REAL,
    UNIQUE(run_id, name)
);
"""


class Database:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.path = Path(config.ledger_path)
        self.db: aiosqlite.Connection | None = None

    async def initialize(self):
        """Create database and tables."""
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.db = await aiosqlite.connect(self.path)
        except (OSError, aiosqlite.Error) as e:
            raise StorageError(f"cannot open run ledger {self.path}: {e}") from e
        self.db.row_factory = aiosqlite.Row
        await self.db.executescript(SCHEMA)
        await self.db.commit()
        log.info("Run ledger at %s", self.path)

    async def close(self):
        if self.db:
            await self.db.close()
            self.db = None

    # --- Runs ---

    async def start_run(self, command: str) -> int:
        async with self.db.execute(
            "INSERT INTO runs (command, config_hash, seed, output_dir, status, created_at) "
            "VALUES (?, ?, ?, ?, ?, ?)",
            (command, config_hash(self.config), self.config.seed, self.config.output_dir,
             "running", datetime.now(timezone.utc).isoformat()),
        ) as cursor:
            run_id = cursor.lastrowid
        await self.db.commit()
        return run_id

    async def finish_run(self, run_id: int, status: str = "ok"):
        await self.db.execute("UPDATE runs SET status = ? WHERE id = ?", (status, run_id))
        await self.db.commit()

    async def get_runs(self, command: str | None = None, limit: int = 20) -> list[dict]:
        query = "SELECT * FROM runs"
        params = []
        if command:
            query += " WHERE command = ?"
            params = [command]
        query += " ORDER BY id DESC LIMIT ?"
        params.append(limit)
        async with self.db.execute(query, params) as cursor:
            rows = await cursor.fetchall()
            return [dict(r) for r in rows]

    # --- Metrics ---

    async def save_metrics(self, run_id: int, metrics: dict[str, float]):
        await self.db.executemany(
            "INSERT INTO metrics (run_id, name, value) VALUES (?, ?, ?) "
            "ON CONFLICT(run_id, name) DO UPDATE SET value=excluded.value",
            [(run_id, name, float(value)) for name, value in metrics.items()],
        )
        await self.db.commit()

    async def get_metrics(self, run_id: int) -> dict[str, float]:
        async with self.db.execute(
            "SELECT name, value FROM metrics WHERE run_id = ? ORDER BY name", (run_id,)
        ) as cursor:
            rows = await cursor.fetchall()
            return {r["name"]: r["value"] for r in rows}
