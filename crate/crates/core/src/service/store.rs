//! SQLite persistence for runs and triage records.

use std::path::Path;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row};

use super::{Disposition, ReviewStatus, RunDescriptor, ServiceError, TriageRecord};
use crate::domain::Label;
use crate::routing::Route;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS runs (
    run_id     TEXT PRIMARY KEY,
    descriptor TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS records (
    run_id         TEXT NOT NULL REFERENCES runs(run_id),
    sample_id      TEXT NOT NULL,
    seq            INTEGER NOT NULL,
    sample         TEXT NOT NULL,
    classification TEXT,
    routing        TEXT NOT NULL,
    route          TEXT NOT NULL,
    confidence     REAL,
    error          TEXT,
    status         TEXT NOT NULL DEFAULT 'pending',
    verdict        TEXT,
    analyst        TEXT,
    reviewed_at    TEXT,
    PRIMARY KEY (run_id, sample_id)
);
CREATE INDEX IF NOT EXISTS records_queue
    ON records (run_id, route, status, confidence, sample_id);
";

const COLUMNS: &str = "run_id, sample, classification, routing, route, error, status, verdict, analyst, reviewed_at";

pub struct Store {
    conn: Mutex<Connection>,
}

fn corrupt(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Corrupt(e.to_string())
}

fn row_to_record(row: &Row<'_>) -> rusqlite::Result<RawRow> {
    Ok(RawRow {
        run_id: row.get(0)?,
        sample: row.get(1)?,
        classification: row.get(2)?,
        routing: row.get(3)?,
        route: row.get(4)?,
        error: row.get(5)?,
        status: row.get(6)?,
        verdict: row.get(7)?,
        analyst: row.get(8)?,
        reviewed_at: row.get(9)?,
    })
}

struct RawRow {
    run_id: String,
    sample: String,
    classification: Option<String>,
    routing: String,
    route: String,
    error: Option<String>,
    status: String,
    verdict: Option<String>,
    analyst: Option<String>,
    reviewed_at: Option<String>,
}

impl RawRow {
    fn decode(self) -> Result<TriageRecord, ServiceError> {
        let route: Route = self.route.parse().map_err(corrupt)?;
        let status = match self.status.as_str() {
            "pending" => ReviewStatus::Pending,
            "reviewed" => ReviewStatus::Reviewed {
                verdict: self
                    .verdict
                    .as_deref()
                    .ok_or_else(|| corrupt("reviewed row without verdict"))?
                    .parse::<Label>()
                    .map_err(corrupt)?,
                analyst: self.analyst.unwrap_or_default(),
                at: self.reviewed_at.unwrap_or_default(),
            },
            other => return Err(corrupt(format!("unknown status {other:?}"))),
        };
        Ok(TriageRecord {
            run_id: self.run_id,
            sample: serde_json::from_str(&self.sample).map_err(corrupt)?,
            classification: self
                .classification
                .map(|c| serde_json::from_str(&c))
                .transpose()
                .map_err(corrupt)?,
            routing: serde_json::from_str(&self.routing).map_err(corrupt)?,
            disposition: Disposition::derive(route, &status),
            status,
            error: self.error,
        })
    }
}

impl Store {
    /// Opens or creates a database in write-ahead-log mode with full fsync
    /// on commit.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self, ServiceError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, ServiceError> {
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn: Mutex::new(conn) })
    }

    /// Inserts a run and all its records in one transaction. Returns false
    /// when the run already exists.
    pub fn insert_run(&self, desc: &RunDescriptor, records: &[TriageRecord]) -> Result<bool, ServiceError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO runs (run_id, descriptor) VALUES (?1, ?2)",
            params![desc.run_id, serde_json::to_string(desc).map_err(corrupt)?],
        )?;
        if inserted == 0 {
            return Ok(false);
        }
        {
            let mut stmt = tx.prepare(
                "INSERT INTO records (run_id, sample_id, seq, sample, classification, routing, route, confidence, error)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            )?;
            for (seq, r) in records.iter().enumerate() {
                let classification = r
                    .classification
                    .as_ref()
                    .map(serde_json::to_string)
                    .transpose()
                    .map_err(corrupt)?;
                stmt.execute(params![
                    r.run_id,
                    r.sample.id(),
                    seq as i64,
                    serde_json::to_string(&r.sample).map_err(corrupt)?,
                    classification,
                    serde_json::to_string(&r.routing).map_err(corrupt)?,
                    r.routing.route.as_str(),
                    r.confidence(),
                    r.error,
                ])?;
            }
        }
        tx.commit()?;
        Ok(true)
    }

    pub fn run(&self, run_id: &str) -> Result<Option<RunDescriptor>, ServiceError> {
        let conn = self.conn.lock();
        let text: Option<String> = conn
            .query_row("SELECT descriptor FROM runs WHERE run_id = ?1", [run_id], |r| r.get(0))
            .optional()?;
        text.map(|t| serde_json::from_str(&t).map_err(corrupt)).transpose()
    }

    pub fn record(&self, run_id: &str, sample_id: &str) -> Result<Option<TriageRecord>, ServiceError> {
        let conn = self.conn.lock();
        Self::record_locked(&conn, run_id, sample_id)
    }

    fn record_locked(conn: &Connection, run_id: &str, sample_id: &str) -> Result<Option<TriageRecord>, ServiceError> {
        conn.query_row(
            &format!("SELECT {COLUMNS} FROM records WHERE run_id = ?1 AND sample_id = ?2"),
            [run_id, sample_id],
            row_to_record,
        )
        .optional()?
        .map(RawRow::decode)
        .transpose()
    }

    fn query(&self, sql: &str, params: impl rusqlite::Params) -> Result<Vec<TriageRecord>, ServiceError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(sql)?;
        let rows = stmt.query_map(params, row_to_record)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?.decode()?);
        }
        Ok(out)
    }

    /// All records of a run in creation order.
    pub fn records(&self, run_id: &str) -> Result<Vec<TriageRecord>, ServiceError> {
        self.query(
            &format!("SELECT {COLUMNS} FROM records WHERE run_id = ?1 ORDER BY seq"),
            [run_id],
        )
    }

    pub fn pending(&self, run_id: &str, limit: usize) -> Result<Vec<TriageRecord>, ServiceError> {
        self.query(
            &format!(
                "SELECT {COLUMNS} FROM records
                 WHERE run_id = ?1 AND route = 'human_review' AND status = 'pending'
                 ORDER BY confidence IS NOT NULL, confidence ASC, sample_id ASC
                 LIMIT ?2"
            ),
            params![run_id, limit.min(i64::MAX as usize) as i64],
        )
    }

    /// Records an analyst verdict. The update only applies to a pending
    /// record, so of two racing reviews exactly one succeeds.
    pub fn review(
        &self,
        run_id: &str,
        sample_id: &str,
        verdict: Label,
        analyst: &str,
        at: &str,
    ) -> Result<TriageRecord, ServiceError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let route: Option<String> = tx
            .query_row(
                "SELECT route FROM records WHERE run_id = ?1 AND sample_id = ?2",
                [run_id, sample_id],
                |r| r.get(0),
            )
            .optional()?;
        let Some(route) = route else {
            return Err(ServiceError::UnknownSample {
                run_id: run_id.to_string(),
                sample_id: sample_id.to_string(),
            });
        };
        if route != Route::HumanReview.as_str() {
            return Err(ServiceError::NotRoutedForReview(sample_id.to_string()));
        }
        let changed = tx.execute(
            "UPDATE records SET status = 'reviewed', verdict = ?3, analyst = ?4, reviewed_at = ?5
             WHERE run_id = ?1 AND sample_id = ?2 AND status = 'pending'",
            params![run_id, sample_id, verdict.as_str(), analyst, at],
        )?;
        let record =
            Self::record_locked(&tx, run_id, sample_id)?.ok_or_else(|| corrupt("record vanished during review"))?;
        tx.commit()?;
        if changed == 0 {
            return Err(ServiceError::AlreadyReviewed(Box::new(record)));
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Result<(), ServiceError> {
        let conn = self.conn.lock();
        conn.query_row("PRAGMA wal_checkpoint(TRUNCATE)", [], |_| Ok(()))?;
        Ok(())
    }
}
