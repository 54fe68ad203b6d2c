//! Scenario CSV files: one row per vehicle, grouped by `scenario_id`.
//!
//! ```text
//! scenario_id,vehicle_id,x_m,y_m,v_mps,theta_rad,is_av
//! s1,ego,1.750000,10.000000,22.000000,0.000000,1
//! s1,car7,5.250000,40.000000,25.000000,0.000000,0
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sdm_core::scenario::{Scenario, ScenarioError};
use sdm_core::sim::{SimConfig, VehicleState};
use thiserror::Error;

pub const HEADER: [&str; 7] = ["scenario_id", "vehicle_id", "x_m", "y_m", "v_mps", "theta_rad", "is_av"];

#[derive(Debug, Error)]
pub enum ScenarioFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("scenario `{scenario_id}`: {source}")]
    Validation { scenario_id: String, source: ScenarioError },
    #[error("scenario `{scenario_id}`: {message}")]
    AvCount { scenario_id: String, message: String },
}

/// Scenarios with the vehicle ids they were read with (AV first).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub vehicle_ids: Vec<Vec<String>>,
}

struct Pending {
    id: String,
    rows: Vec<(String, VehicleState, bool, u64)>,
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64, ScenarioFileError> {
    let v: f64 = field.trim().parse().map_err(|_| ScenarioFileError::Parse {
        line,
        message: format!("`{name}` is not a decimal number: `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(ScenarioFileError::Parse { line, message: format!("`{name}` must be finite") });
    }
    Ok(v)
}

/// Parses and validates scenarios; the AV is moved to index 0, BV order is kept.
pub fn read_scenarios<R: Read>(input: R, cfg: &SimConfig) -> Result<ScenarioSet, ScenarioFileError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(|e| ScenarioFileError::Parse { line: 1, message: e.to_string() })?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(ScenarioFileError::Parse { line: 1, message: format!("header must be `{}`", HEADER.join(",")) });
    }
    let mut groups: Vec<Pending> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScenarioFileError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != HEADER.len() {
            return Err(ScenarioFileError::Parse { line, message: format!("expected 7 fields, found {}", rec.len()) });
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(ScenarioFileError::Parse { line, message: "empty scenario_id".into() });
        }
        let state = VehicleState {
            x: parse_f64(&rec[2], "x_m", line)?,
            y: parse_f64(&rec[3], "y_m", line)?,
            v: parse_f64(&rec[4], "v_mps", line)?,
            theta: parse_f64(&rec[5], "theta_rad", line)?,
        };
        let is_av = match &rec[6] {
            "1" => true,
            "0" => false,
            other => return Err(ScenarioFileError::Parse { line, message: format!("`is_av` must be 0 or 1, found `{other}`") }),
        };
        let row = (rec[1].to_string(), state, is_av, line);
        match groups.iter_mut().find(|g| g.id == id) {
            Some(g) => g.rows.push(row),
            None => groups.push(Pending { id, rows: vec![row] }),
        }
    }
    let mut set = ScenarioSet { scenarios: Vec::new(), vehicle_ids: Vec::new() };
    for g in groups {
        let avs: Vec<_> = g.rows.iter().filter(|r| r.2).map(|r| r.3).collect();
        if avs.len() != 1 {
            let message = match avs.len() {
                0 => "no row has is_av=1".to_string(),
                _ => format!("is_av=1 on several rows (lines {avs:?})"),
            };
            return Err(ScenarioFileError::AvCount { scenario_id: g.id, message });
        }
        let mut rows = g.rows;
        let av_pos = rows.iter().position(|r| r.2).expect("one AV row");
        let av = rows.remove(av_pos);
        rows.insert(0, av);
        let scenario = Scenario { id: g.id.clone(), initial_states: rows.iter().map(|r| r.1).collect() };
        scenario.validate(cfg).map_err(|source| ScenarioFileError::Validation { scenario_id: g.id.clone(), source })?;
        set.vehicle_ids.push(rows.into_iter().map(|r| r.0).collect());
        set.scenarios.push(scenario);
    }
    Ok(set)
}

pub fn load_scenarios(path: &Path, cfg: &SimConfig) -> Result<ScenarioSet, ScenarioFileError> {
    let f = std::fs::File::open(path).map_err(|source| ScenarioFileError::Io { path: path.display().to_string(), source })?;
    read_scenarios(std::io::BufReader::new(f), cfg)
}

/// Canonical output: AV row first, six decimals. Missing ids become `av`, `bv1`, `bv2`, ...
pub fn write_scenarios<W: Write>(out: W, scenarios: &[Scenario], vehicle_ids: Option<&[Vec<String>]>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for (k, s) in scenarios.iter().enumerate() {
        for (i, v) in s.initial_states.iter().enumerate() {
            let vid = vehicle_ids
                .and_then(|ids| ids.get(k))
                .and_then(|ids| ids.get(i))
                .cloned()
                .unwrap_or_else(|| if i == 0 { "av".to_string() } else { format!("bv{i}") });
            w.write_record([
                s.id.clone(),
                vid,
                format!("{:.6}", v.x),
                format!("{:.6}", v.y),
                format!("{:.6}", v.v),
                format!("{:.6}", v.theta),
                if i == 0 { "1" } else { "0" }.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<ScenarioSet, ScenarioFileError> {
        read_scenarios(text.as_bytes(), &SimConfig::default())
    }

    const HEAD: &str = "scenario_id,vehicle_id,x_m,y_m,v_mps,theta_rad,is_av\n";

    #[test]
    fn two_rows_make_one_scenario() {
        let set = read(&format!("{HEAD}a,0,1.75,10,20,0,1\na,1,5.25,30,22,0,0\n")).unwrap();
        assert_eq!(set.scenarios.len(), 1);
        assert_eq!(set.scenarios[0].vehicle_count(), 2);
    }

    #[test]
    fn identical_positions_fail_validation() {
        let err = read(&format!("{HEAD}dup,0,1.75,10,20,0,1\ndup,1,1.75,10,22,0,0\n")).unwrap_err();
        assert!(matches!(err, ScenarioFileError::Validation { ref scenario_id, .. } if scenario_id == "dup"), "{err}");
    }

    #[test]
    fn av_is_moved_first_and_bv_order_kept() {
        let mut text = HEAD.to_string();
        for s in ["p", "q"] {
            for i in 0..6 {
                let lane = [1.75, 5.25, 8.75][i % 3];
                let y = 20.0 + 30.0 * i as f64;
                let av = (i == 3) as u8;
                text.push_str(&format!("{s},v{i},{lane},{y},20,0,{av}\n"));
            }
        }
        let set = read(&text).unwrap();
        assert_eq!(set.scenarios.len(), 2);
        for (sc, ids) in set.scenarios.iter().zip(&set.vehicle_ids) {
            assert_eq!(ids, &["v3", "v0", "v1", "v2", "v4", "v5"]);
            assert_eq!(sc.initial_states[0].y, 110.0);
            assert_eq!(sc.initial_states[1].y, 20.0);
        }
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let err = read(&format!("{HEAD}a,0,1.75,10,20,0,1\na,1,abc,30,22,0,0\n")).unwrap_err();
        match err {
            ScenarioFileError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("x_m"));
            }
            e => panic!("{e}"),
        }
        let err = read(&format!("{HEAD}a,0,1.75,10,20,0,1\na,1,5.25,30\n")).unwrap_err();
        assert!(matches!(err, ScenarioFileError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn av_count_and_header_are_checked() {
        assert!(matches!(read(&format!("{HEAD}a,0,1.75,10,20,0,0\na,1,5.25,30,22,0,0\n")), Err(ScenarioFileError::AvCount { .. })));
        assert!(matches!(read(&format!("{HEAD}a,0,1.75,10,20,0,1\na,1,5.25,30,22,0,1\n")), Err(ScenarioFileError::AvCount { .. })));
        assert!(matches!(read("id,x\n"), Err(ScenarioFileError::Parse { line: 1, .. })));
        assert!(matches!(read(&format!("{HEAD}a,0,1.75,10,20,0,yes\n")), Err(ScenarioFileError::Parse { line: 2, .. })));
    }

    #[test]
    fn canonical_file_round_trips_bytewise() {
        let text = format!(
            "{HEAD}s1,ego,1.750000,10.000000,22.000000,0.000000,1\ns1,car7,5.250000,40.000000,25.000000,0.010000,0\n\
             s2,a,8.750000,5.500000,15.000000,0.000000,1\ns2,b,1.750000,60.000000,30.000000,-0.020000,0\n"
        );
        let set = read(&text).unwrap();
        let mut out = Vec::new();
        write_scenarios(&mut out, &set.scenarios, Some(&set.vehicle_ids)).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
