//! CSV ingestion, chronological splitting, and batching.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One user-item interaction. `user` and `item` are dense indices assigned in
/// order of first appearance in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: f64,
    pub edge_features: Vec<f64>,
}

/// Dense-index to original-ID maps, shared across splits.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Events sorted by nondecreasing timestamp; ties keep input order.
#[derive(Debug, Clone)]
pub struct EventLog {
    pub events: Vec<InteractionEvent>,
    pub num_users: usize,
    pub num_items: usize,
    /// Edge-feature dimensionality; 0 when the input has no feature columns.
    pub d_e: usize,
    pub ids: Arc<IdMaps>,
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Users and items share one node index space: items follow users.
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }
}

/// Which CSV columns hold features.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureCols {
    /// Use consecutive columns named `f0, f1, ...` if present.
    Auto,
    /// Ignore any extra columns.
    None,
    /// Exactly these named columns, in order.
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub user_col: String,
    pub item_col: String,
    pub time_col: String,
    pub feature_cols: FeatureCols,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            user_col: "user_id".to_string(),
            item_col: "item_id".to_string(),
            time_col: "timestamp".to_string(),
            feature_cols: FeatureCols::Auto,
        }
    }
}

/// Parse an interaction CSV with a header row. Lines starting with `#` are
/// skipped, so generated files may carry a metadata comment up top.
pub fn parse_events(path: &Path, schema: &CsvSchema) -> Result<EventLog> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    parse_events_reader(file, schema)
}

pub fn parse_events_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<EventLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("cannot read CSV header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing column {name:?} in CSV header")))
    };
    let user_col = col(&schema.user_col)?;
    let item_col = col(&schema.item_col)?;
    let time_col = col(&schema.time_col)?;
    let feature_idx: Vec<(String, usize)> = match &schema.feature_cols {
        FeatureCols::None => Vec::new(),
        FeatureCols::Named(names) => names
            .iter()
            .map(|n| col(n).map(|i| (n.clone(), i)))
            .collect::<Result<_>>()?,
        FeatureCols::Auto => {
            let mut found = Vec::new();
            for k in 0.. {
                let name = format!("f{k}");
                match headers.iter().position(|h| h == name) {
                    Some(i) => found.push((name, i)),
                    None => break,
                }
            }
            found
        }
    };
    let d_e = feature_idx.len();

    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut ids = IdMaps::default();
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::data(format!("malformed CSV row: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, what: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                Error::data(format!("line {line}: row has no {what} field (too few columns)"))
            })
        };
        let user_raw = field(user_col, "user")?;
        let item_raw = field(item_col, "item")?;
        let time_raw = field(time_col, "timestamp")?;
        let timestamp: f64 = time_raw.parse().map_err(|_| {
            Error::data(format!("line {line}: non-numeric timestamp {time_raw:?}"))
        })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::data(format!(
                "line {line}: timestamp must be finite and nonnegative, got {time_raw}"
            )));
        }
        let mut edge_features = Vec::with_capacity(d_e);
        for (name, idx) in &feature_idx {
            let raw = field(*idx, name)?;
            let v: f64 = raw.parse().map_err(|_| {
                Error::data(format!("line {line}: non-numeric feature {name}={raw:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {line}: non-finite feature {name}")));
            }
            edge_features.push(v);
        }
        let next_user = user_ids.len();
        let user = *user_ids.entry(user_raw.to_string()).or_insert_with(|| {
            ids.users.push(user_raw.to_string());
            next_user
        });
        let next_item = item_ids.len();
        let item = *item_ids.entry(item_raw.to_string()).or_insert_with(|| {
            ids.items.push(item_raw.to_string());
            next_item
        });
        events.push(InteractionEvent { user, item, timestamp, edge_features });
    }
    if events.is_empty() {
        return Err(Error::data("no events: input contains a header but no data rows"));
    }
    // Stable sort: equal timestamps keep their input order.
    events.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).expect("finite timestamps"));
    Ok(EventLog {
        events,
        num_users: ids.users.len(),
        num_items: ids.items.len(),
        d_e,
        ids: Arc::new(ids),
    })
}

/// Split a log into train/validation/test prefixes of `floor(r*N)` /
/// `floor(r*N)` / remainder events. All three share the parent's ID maps.
pub fn chronological_split(
    log: &EventLog,
    ratios: (f64, f64, f64),
) -> Result<(EventLog, EventLog, EventLog)> {
    let (r_train, r_val, r_test) = ratios;
    if !(r_train > 0.0 && r_val > 0.0 && r_test > 0.0) {
        return Err(Error::config(format!(
            "split ratios must all be positive, got {r_train}/{r_val}/{r_test}"
        )));
    }
    if ((r_train + r_val + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_val + r_test
        )));
    }
    let n = log.len();
    let n_train = (r_train * n as f64).floor() as usize;
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::data(format!(
            "split of {n} events leaves an empty part (train {n_train}, val {n_val}, test {n_test})"
        )));
    }
    let part = |range: std::ops::Range<usize>| EventLog {
        events: log.events[range].to_vec(),
        num_users: log.num_users,
        num_items: log.num_items,
        d_e: log.d_e,
        ids: Arc::clone(&log.ids),
    };
    Ok((part(0..n_train), part(n_train..n_train + n_val), part(n_train + n_val..n)))
}

/// Contiguous run of events processed under one gradient step.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub events: &'a [InteractionEvent],
    pub index: usize,
}

/// Chop events into `ceil(N / batch_size)` order-preserving batches; the last
/// one may be short.
pub fn make_batches(events: &[InteractionEvent], batch_size: usize) -> Vec<Batch<'_>> {
    assert!(batch_size > 0, "batch_size validated by config");
    events
        .chunks(batch_size)
        .enumerate()
        .map(|(index, chunk)| Batch { events: chunk, index })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(csv: &str, schema: &CsvSchema) -> Result<EventLog> {
        parse_events_reader(csv.as_bytes(), schema)
    }

    fn synthetic_log(n: usize) -> EventLog {
        let events = (0..n)
            .map(|k| InteractionEvent {
                user: k % 3,
                item: k % 5,
                timestamp: k as f64,
                edge_features: vec![],
            })
            .collect();
        EventLog {
            events,
            num_users: 3,
            num_items: 5,
            d_e: 0,
            ids: Arc::new(IdMaps::default()),
        }
    }

    #[test]
    fn parses_and_densifies_by_first_appearance() {
        let csv = "user_id,item_id,timestamp\nu9,iA,5.0\nu2,iB,3.0\nu9,iA,4.0\n";
        let log = parse_str(csv, &CsvSchema::default()).unwrap();
        assert_eq!(log.num_users, 2);
        assert_eq!(log.num_items, 2);
        assert_eq!(log.d_e, 0);
        // u9 appeared first in the file, so it gets dense index 0.
        assert_eq!(log.ids.users, ["u9", "u2"]);
        assert_eq!(log.ids.items, ["iA", "iB"]);
        // Sorted by timestamp: 3.0, 4.0, 5.0.
        let ts: Vec<f64> = log.events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, [3.0, 4.0, 5.0]);
        assert_eq!(log.events[0].user, 1);
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let csv = "user_id,item_id,timestamp\na,x,1.0\nb,y,1.0\nc,z,1.0\n";
        let log = parse_str(csv, &CsvSchema::default()).unwrap();
        let users: Vec<usize> = log.events.iter().map(|e| e.user).collect();
        assert_eq!(users, [0, 1, 2]);
    }

    #[test]
    fn auto_detects_feature_columns() {
        let csv = "user_id,item_id,timestamp,f0,f1\nu,i,1.0,0.5,-2.5\n";
        let log = parse_str(csv, &CsvSchema::default()).unwrap();
        assert_eq!(log.d_e, 2);
        assert_eq!(log.events[0].edge_features, [0.5, -2.5]);

        let schema = CsvSchema { feature_cols: FeatureCols::None, ..CsvSchema::default() };
        let log = parse_str(csv, &schema).unwrap();
        assert_eq!(log.d_e, 0);
    }

    #[test]
    fn named_feature_column_must_exist() {
        let csv = "user_id,item_id,timestamp\nu,i,1.0\n";
        let schema = CsvSchema {
            feature_cols: FeatureCols::Named(vec!["price".to_string()]),
            ..CsvSchema::default()
        };
        let err = parse_str(csv, &schema).unwrap_err();
        assert!(err.to_string().contains("price"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let csv = "user_id,item_id,timestamp\nu,i,1.0\nu,i,oops\n";
        let err = parse_str(csv, &CsvSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("oops"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        // Rows with the wrong field count are caught by the reader itself;
        // its message also carries the line number.
        let csv = "user_id,item_id,timestamp\nu,i,1.0\nu,i\n";
        let err = parse_str(csv, &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("line: 3"), "{err}");
    }

    #[test]
    fn negative_or_non_finite_timestamps_rejected() {
        let csv = "user_id,item_id,timestamp\nu,i,-1.0\n";
        assert!(parse_str(csv, &CsvSchema::default()).is_err());
        let csv = "user_id,item_id,timestamp\nu,i,inf\n";
        assert!(parse_str(csv, &CsvSchema::default()).is_err());
    }

    #[test]
    fn empty_input_is_an_error() {
        let csv = "user_id,item_id,timestamp\n";
        let err = parse_str(csv, &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("no events"), "{err}");
    }

    #[test]
    fn missing_required_column_is_an_error() {
        let csv = "user,item_id,timestamp\nu,i,1.0\n";
        let err = parse_str(csv, &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("user_id"), "{err}");
    }

    #[test]
    fn comment_lines_are_skipped() {
        let csv = "# generated with seed=7\nuser_id,item_id,timestamp\nu,i,1.0\n";
        let log = parse_str(csv, &CsvSchema::default()).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn split_sizes_use_floor_and_remainder() {
        let log = synthetic_log(1003);
        let (train, val, test) = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (802, 100, 101));
        // Boundaries are chronological: last train event precedes first val event.
        assert!(train.events.last().unwrap().timestamp <= val.events[0].timestamp);
        assert!(Arc::ptr_eq(&train.ids, &log.ids));
    }

    #[test]
    fn split_rejects_empty_parts_and_bad_ratios() {
        let log = synthetic_log(9);
        let err = chronological_split(&log, (0.8, 0.1, 0.1)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("empty"), "{err}");

        let log = synthetic_log(100);
        let err = chronological_split(&log, (0.8, 0.1, 0.2)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn batches_cover_events_in_order() {
        let log = synthetic_log(1003);
        let batches = make_batches(&log.events, 100);
        assert_eq!(batches.len(), 11);
        assert_eq!(batches[0].events.len(), 100);
        assert_eq!(batches[10].events.len(), 3);
        assert_eq!(batches[10].index, 10);
        let total: usize = batches.iter().map(|b| b.events.len()).sum();
        assert_eq!(total, 1003);
        assert_eq!(batches[3].events[0].timestamp, 300.0);
    }
}
