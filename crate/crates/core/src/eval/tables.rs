use std::collections::HashMap;
use std::io::Read;

use super::EvalError;

const SCORE_HEADER: [&str; 4] = ["listener", "item", "system", "score"];
const PREFERENCE_HEADER: [&str; 5] = ["listener", "item", "system_a", "system_b", "choice"];

fn records<R: Read>(input: R, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let found = rdr.headers().map_err(|e| EvalError::Table { line: 1, detail: e.to_string() })?;
    if found.iter().ne(header.iter().copied()) {
        return Err(EvalError::Table { line: 1, detail: format!("expected header `{}`", header.join(",")) });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EvalError::Table { line: e.position().map_or(0, |p| p.line()), detail: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().any(str::is_empty) {
            return Err(EvalError::Table { line, detail: "empty field".into() });
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Listener scores: one row per `(listener, item)`, one column per system.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub systems: Vec<String>,
    /// `(listener, item)` per row, in order of first appearance.
    pub rows: Vec<(String, String)>,
    /// `cells[row][system]`, scores in `[0, 100]`.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ScoreTable {
    /// Reads `listener,item,system,score` CSV.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, EvalError> {
        let mut t = ScoreTable::default();
        let mut row_index: HashMap<(String, String), usize> = HashMap::new();
        for (line, rec) in records(input, &SCORE_HEADER)? {
            let score: f64 = rec[3].parse().map_err(|_| EvalError::Table { line, detail: format!("score `{}` is not a number", &rec[3]) })?;
            if !(0.0..=100.0).contains(&score) {
                return Err(EvalError::Table { line, detail: format!("score {score} outside [0, 100]") });
            }
            let sys = match t.systems.iter().position(|s| s == &rec[2]) {
                Some(i) => i,
                None => {
                    t.systems.push(rec[2].to_string());
                    t.cells.iter_mut().for_each(|r| r.push(None));
                    t.systems.len() - 1
                }
            };
            let key = (rec[0].to_string(), rec[1].to_string());
            let row = *row_index.entry(key.clone()).or_insert_with(|| {
                t.rows.push(key);
                t.cells.push(vec![None; t.systems.len()]);
                t.rows.len() - 1
            });
            if t.cells[row][sys].replace(score).is_some() {
                return Err(EvalError::Table { line, detail: format!("second score for {}/{} on {}", &rec[0], &rec[1], &rec[2]) });
            }
        }
        Ok(t)
    }

    pub fn system(&self, name: &str) -> Result<usize, EvalError> {
        self.systems.iter().position(|s| s == name).ok_or_else(|| EvalError::Invalid(format!("unknown system `{name}`")))
    }

    /// `score(a) − score(b)` for every row; every row must score both.
    pub fn paired_differences(&self, a: &str, b: &str) -> Result<Vec<f64>, EvalError> {
        let (ia, ib) = (self.system(a)?, self.system(b)?);
        self.rows
            .iter()
            .zip(&self.cells)
            .map(|((listener, item), cells)| {
                let missing = |system: &str| EvalError::MissingCell { listener: listener.clone(), item: item.clone(), system: system.to_string() };
                Ok(cells[ia].ok_or_else(|| missing(a))? - cells[ib].ok_or_else(|| missing(b))?)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceTrial {
    pub listener: String,
    pub item: String,
    pub system_a: String,
    pub system_b: String,
    pub choice: Choice,
}

/// Forced-choice trials; each names exactly one of its two systems.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceTable {
    pub trials: Vec<PreferenceTrial>,
}

impl PreferenceTable {
    /// Reads `listener,item,system_a,system_b,choice` CSV. `choice` is `A`,
    /// `B`, or the name of one of the row's two systems.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, EvalError> {
        let mut trials = Vec::new();
        for (line, rec) in records(input, &PREFERENCE_HEADER)? {
            if rec[2] == rec[3] {
                return Err(EvalError::Table { line, detail: format!("system `{}` compared with itself", &rec[2]) });
            }
            let choice = match &rec[4] {
                c if c.eq_ignore_ascii_case("a") || c == &rec[2] => Choice::A,
                c if c.eq_ignore_ascii_case("b") || c == &rec[3] => Choice::B,
                c => return Err(EvalError::Table { line, detail: format!("choice `{c}` is neither A nor B") }),
            };
            trials.push(PreferenceTrial { listener: rec[0].into(), item: rec[1].into(), system_a: rec[2].into(), system_b: rec[3].into(), choice });
        }
        Ok(PreferenceTable { trials })
    }

    /// Trials comparing `a` with `b`, oriented so that `A` means `a`.
    pub fn for_pair(&self, a: &str, b: &str) -> PreferenceTable {
        let trials = self
            .trials
            .iter()
            .filter_map(|t| {
                if t.system_a == a && t.system_b == b {
                    Some(t.clone())
                } else if t.system_a == b && t.system_b == a {
                    let choice = if t.choice == Choice::A { Choice::B } else { Choice::A };
                    Some(PreferenceTrial { system_a: a.into(), system_b: b.into(), choice, ..t.clone() })
                } else {
                    None
                }
            })
            .collect();
        PreferenceTable { trials }
    }

    /// Distinct system pairs, in order of first appearance.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for t in &self.trials {
            let seen = out.iter().any(|(a, b)| (a == &t.system_a && b == &t.system_b) || (a == &t.system_b && b == &t.system_a));
            if !seen {
                out.push((t.system_a.clone(), t.system_b.clone()));
            }
        }
        out
    }
}
