use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentKind;
use crate::error::Result;
use crate::retrieval::EvalResult;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub granularity: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub curve: String,
    pub x: f64,
    pub y: f64,
}

/// Outcome of one experiment run, tagged with the config hash and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    /// Canonical listing of the settings the run used.
    pub config_echo: String,
    pub rows: Vec<MetricRow>,
    pub curves: Vec<CurvePoint>,
    /// Word-specific mAP per word.
    pub per_word: BTreeMap<String, f64>,
    /// Mean AP of the same word instances in the all-words run.
    pub per_word_baseline: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    /// Evaluation behind the headline `mAP` row, when there is a single one.
    pub eval: Option<EvalResult>,
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

impl ExperimentReport {
    pub fn new(kind: ExperimentKind, config_hash: String, seed: u64, config_echo: String) -> Self {
        Self {
            kind,
            config_hash,
            seed,
            config_echo,
            rows: Vec::new(),
            curves: Vec::new(),
            per_word: BTreeMap::new(),
            per_word_baseline: BTreeMap::new(),
            notes: Vec::new(),
            eval: None,
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, granularity: impl Into<String>, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            granularity: granularity.into(),
            value,
        });
    }

    pub fn point(&mut self, curve: impl Into<String>, x: f64, y: f64) {
        self.curves.push(CurvePoint {
            curve: curve.into(),
            x,
            y,
        });
    }

    /// First row with this metric name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == name).map(|r| r.value)
    }

    pub fn curve(&self, name: &str) -> Vec<(f64, f64)> {
        self.curves.iter().filter(|c| c.curve == name).map(|c| (c.x, c.y)).collect()
    }

    /// `metric,granularity,config-hash,value` rows; the seed is its own row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,granularity,config-hash,value")?;
        let gran = self.rows.first().map_or(String::new(), |r| csv_field(&r.granularity));
        writeln!(w, "seed,{gran},{},{}", self.config_hash, self.seed)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", csv_field(&r.metric), csv_field(&r.granularity), self.config_hash, r.value)?;
        }
        for (word, v) in &self.per_word {
            writeln!(w, "mAP[{}],word,{},{}", csv_field(word), self.config_hash, v)?;
        }
        for (word, v) in &self.per_word_baseline {
            writeln!(w, "mAP_all_words[{}],word,{},{}", csv_field(word), self.config_hash, v)?;
        }
        Ok(())
    }

    /// `curve,x,y` rows after a comment line carrying hash and seed.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# config-hash {} seed {}", self.config_hash, self.seed)?;
        writeln!(w, "curve,x,y")?;
        for c in &self.curves {
            writeln!(w, "{},{},{}", csv_field(&c.curve), c.x, c.y)?;
        }
        Ok(())
    }

    /// Human-readable table of all rows, in percent where the value is a rate.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment {}  config-hash {}  seed {}", self.kind, self.config_hash, self.seed);
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(s, "{:<width$}  {:<12}  {:>10}", "metric", "granularity", "value");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:<12}  {:>10}", r.metric, r.granularity, format_value(&r.metric, r.value));
        }
        if !self.per_word.is_empty() {
            let _ = writeln!(s, "\n{:<16}  {:>10}  {:>10}", "word", "specific", "all-words");
            for (word, v) in &self.per_word {
                let base = self.per_word_baseline.get(word).map_or("-".into(), |b| format!("{:.1}", b * 100.0));
                let _ = writeln!(s, "{:<16}  {:>10.1}  {:>10}", word, v * 100.0, base);
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// Writes `<kind>.csv`, `<kind>.plot.csv`, `<kind>.summary.txt` and
    /// `<kind>.config.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let base = self.kind.to_string();
        let paths = [
            dir.join(format!("{base}.csv")),
            dir.join(format!("{base}.plot.csv")),
            dir.join(format!("{base}.summary.txt")),
            dir.join(format!("{base}.config.txt")),
        ];
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(&paths[0], &buf)?;
        buf.clear();
        self.write_plot_data(&mut buf)?;
        std::fs::write(&paths[1], &buf)?;
        std::fs::write(&paths[2], self.summary())?;
        std::fs::write(
            &paths[3],
            format!("# config-hash {} seed {}\n{}", self.config_hash, self.seed, self.config_echo),
        )?;
        Ok(paths.to_vec())
    }
}

fn format_value(metric: &str, v: f64) -> String {
    let rate = metric.starts_with("mAP") || metric.starts_with("top-");
    if rate {
        format!("{:.2}", v * 100.0)
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = ExperimentReport::new(ExperimentKind::Page, "abcd".into(), 7, String::new());
        r.push("mAP", "page", 0.5);
        r.point("sweep", 10.0, 0.25);
        r.per_word.insert("a,b".into(), 1.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,granularity,config-hash,value\nseed,page,abcd,7\nmAP,page,abcd,0.5\nmAP[a;b],word,abcd,1\n"
        );
        let mut buf = Vec::new();
        r.write_plot_data(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# config-hash abcd seed 7\ncurve,x,y\nsweep,10,0.25\n");
        assert_eq!(r.metric("mAP"), Some(0.5));
        assert!(r.summary().contains("50.00"));
    }
}
