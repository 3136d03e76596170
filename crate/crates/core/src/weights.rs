//! The `mlre-w-1` weights format: a kind tag, an integer manifest and named
//! row-major blocks printed with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{MlreError, Result};

pub const WEIGHTS_FORMAT: &str = "mlre-w-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub kind: String,
    pub manifest: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl WeightsFile {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| MlreError::parse("weights file", format!("missing block `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "format {WEIGHTS_FORMAT}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        let manifest: Vec<String> = self.manifest.iter().map(|m| m.to_string()).collect();
        writeln!(out, "manifest {}", manifest.join(" ")).unwrap();
        for b in &self.blocks {
            writeln!(out, "block {} {} {}", b.name, b.rows, b.cols).unwrap();
            for row in b.data.chunks(b.cols.max(1)) {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
                writeln!(out, "{}", cells.join(" ")).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| MlreError::parse(format!("weights line {}", line + 1), reason);
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| MlreError::parse("weights file", format!("unexpected end, expected {what}")))
        };
        let (i, l) = next("format")?;
        if l.trim() != format!("format {WEIGHTS_FORMAT}") {
            return Err(bad(i, format!("expected `format {WEIGHTS_FORMAT}`")));
        }
        let (i, l) = next("kind")?;
        let kind = l
            .strip_prefix("kind ")
            .ok_or_else(|| bad(i, "expected kind".into()))?
            .trim()
            .to_string();
        let (i, l) = next("manifest")?;
        let manifest = l
            .strip_prefix("manifest")
            .ok_or_else(|| bad(i, "expected manifest".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(i, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::new();
        loop {
            let (i, l) = next("block or end")?;
            if l.trim() == "end" {
                break;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "block" {
                return Err(bad(i, "expected `block <name> <rows> <cols>`".into()));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad(i, "bad row count".into()))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(i, "bad column count".into()))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (j, l) = next("block row")?;
                let row = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| bad(j, e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != cols {
                    return Err(bad(j, format!("expected {cols} values, found {}", row.len())));
                }
                data.extend(row);
            }
            blocks.push(Block {
                name: parts[1].to_string(),
                rows,
                cols,
                data,
            });
        }
        Ok(WeightsFile { kind, manifest, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_to_string(path)?)
    }
}
