//! Reports written twice: a JSON record and an aligned text rendering.
//! Both start with the command name and the seed, and hold no timings, so
//! reruns with the same config are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_err, Result};

/// A text table with right-aligned columns.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (k, c) in cells.iter().enumerate().take(cols) {
                if k > 0 {
                    s.push_str("  ");
                }
                let pad = width[k] - c.chars().count();
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            writeln!(out, "{}", self.title).unwrap();
        }
        writeln!(out, "{}", line(&self.headers)).unwrap();
        let rule: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        writeln!(out, "{}", "-".repeat(rule)).unwrap();
        for r in &self.rows {
            writeln!(out, "{}", line(r)).unwrap();
        }
        out
    }
}

/// Key/value pairs rendered as a two-column table.
pub fn fields(title: &str, pairs: &[(&str, String)]) -> Table {
    let mut t = Table::new(title, &["field", "value"]);
    for (k, v) in pairs {
        t.row(vec![k.to_string(), v.clone()]);
    }
    t
}

pub fn f(x: f64) -> String {
    format!("{x:.4}")
}

pub fn pct(x: f64) -> String {
    format!("{x:.2}")
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.txt`; returns both paths.
pub fn write_report<T: Serialize>(
    dir: &Path,
    name: &str,
    command: &str,
    seed: u64,
    body: &T,
    tables: &[Table],
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let json_path = dir.join(format!("{name}.json"));
    let text_path = dir.join(format!("{name}.txt"));
    let env = Envelope {
        command,
        seed,
        body,
    };
    let json = serde_json::to_string_pretty(&env)?;
    std::fs::write(&json_path, json + "\n")
        .map_err(io_err(format!("writing {}", json_path.display())))?;
    let mut text = format!("command: {command}\nseed: {seed}\n");
    for t in tables {
        text.push('\n');
        text.push_str(&t.render());
    }
    std::fs::write(&text_path, text).map_err(io_err(format!("writing {}", text_path.display())))?;
    Ok((json_path, text_path))
}
