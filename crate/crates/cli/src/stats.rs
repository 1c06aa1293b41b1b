use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use ctts_core::eval::{binomial_test, bonferroni_adjust, preference_tally, wilcoxon_signed_rank, PreferenceTable, ScoreTable};
use serde_json::{json, Value};

use crate::common::{emit_json, usage};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(subcommand)]
    pub test: Test,
    /// Also write the result to `DIR/stats.json`
    #[arg(long, value_name = "DIR", global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Test {
    /// Wilcoxon signed-rank test on paired scores (`listener,item,system,score`)
    Wilcoxon {
        /// Score table CSV
        file: PathBuf,
        /// Two systems to compare, `a,b`; repeat for several comparisons
        #[arg(long, value_name = "A,B", required = true)]
        systems: Vec<String>,
        /// Family-wise significance level for the Bonferroni correction
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Two-sided exact binomial test
    Binomial {
        /// Successes
        #[arg(long)]
        k: u64,
        /// Trials
        #[arg(long)]
        n: u64,
        /// Success probability under the null
        #[arg(long, default_value_t = 0.5)]
        p0: f64,
    },
    /// Forced-choice preference counts with binomial tests
    /// (`listener,item,system_a,system_b,choice`)
    Preference {
        /// Preference table CSV
        file: PathBuf,
        /// Restrict to pairs `a,b`; repeatable; defaults to every pair in the table
        #[arg(long, value_name = "A,B")]
        systems: Vec<String>,
        /// Family-wise significance level for the Bonferroni correction
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Bonferroni correction of a list of p-values
    Bonferroni {
        /// Comma-separated p-values
        #[arg(long, value_name = "P,P,...", value_delimiter = ',', required = true)]
        p: Vec<f64>,
        /// Family-wise significance level
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn system_pair(s: &str) -> Result<(String, String)> {
    match s.split(',').map(str::trim).collect::<Vec<_>>()[..] {
        [a, b] if !a.is_empty() && !b.is_empty() && a != b => Ok((a.to_string(), b.to_string())),
        _ => Err(usage(format!("--systems expects two distinct names `a,b`, got `{s}`"))),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

/// A single result as an object; several as an array, each with its
/// Bonferroni-adjusted p-value.
fn family(mut results: Vec<Value>, alpha: f64) -> Value {
    if results.len() == 1 {
        return results.pop().expect("one result");
    }
    let ps: Vec<f64> = results.iter().map(|r| r["p"].as_f64().expect("p is numeric")).collect();
    for (r, adj) in results.iter_mut().zip(bonferroni_adjust(&ps, alpha)) {
        r["p_adj"] = json!(adj.p_adj);
        r["significant"] = json!(adj.significant);
    }
    Value::Array(results)
}

pub fn run(args: &Args, out: &mut dyn Write, _err: &mut dyn Write) -> Result<()> {
    let value = match &args.test {
        Test::Wilcoxon { file, systems, alpha } => {
            check_alpha(*alpha)?;
            let pairs = systems.iter().map(|s| system_pair(s)).collect::<Result<Vec<_>>>()?;
            let table = ScoreTable::from_csv(open(file)?).with_context(|| file.display().to_string())?;
            let mut results = Vec::new();
            for (a, b) in pairs {
                let w = wilcoxon_signed_rank(&table.paired_differences(&a, &b)?).with_context(|| format!("{a} vs {b}"))?;
                let mut v = serde_json::to_value(w)?;
                v["system_a"] = json!(a);
                v["system_b"] = json!(b);
                results.push(v);
            }
            family(results, *alpha)
        }
        Test::Binomial { k, n, p0 } => {
            let p = binomial_test(*k, *n, *p0).map_err(|e| usage(e.to_string()))?;
            json!({ "k": k, "n": n, "p0": p0, "p": p })
        }
        Test::Preference { file, systems, alpha } => {
            check_alpha(*alpha)?;
            let table = PreferenceTable::from_csv(open(file)?).with_context(|| file.display().to_string())?;
            let pairs = if systems.is_empty() { table.pairs() } else { systems.iter().map(|s| system_pair(s)).collect::<Result<Vec<_>>>()? };
            let mut results = Vec::new();
            for (a, b) in pairs {
                let t = preference_tally(&table.for_pair(&a, &b)).with_context(|| format!("{a} vs {b}"))?;
                let mut v = serde_json::to_value(t)?;
                v["system_a"] = json!(a);
                v["system_b"] = json!(b);
                results.push(v);
            }
            if results.is_empty() {
                anyhow::bail!("{} has no trials", file.display());
            }
            family(results, *alpha)
        }
        Test::Bonferroni { p, alpha } => {
            check_alpha(*alpha)?;
            if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(usage(format!("p-values must lie in [0, 1], got {bad}")));
            }
            serde_json::to_value(bonferroni_adjust(p, *alpha))?
        }
    };
    emit_json(out, args.out.as_deref(), "stats.json", &value)
}
