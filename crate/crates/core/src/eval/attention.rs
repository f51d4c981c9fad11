use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoding::StepAttention;
use crate::error::{Error, Result};

/// A weight matrix with labelled rows (output tokens) and columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub values: Vec<Vec<f32>>,
}

impl Heatmap {
    /// TSV with a header row and one labelled row per output token. Nine
    /// significant digits reproduce every `f32` exactly.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.rows.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                write!(out, "\t{v:.8e}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty heatmap".into()))?;
        let columns: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split('\t');
            rows.push(cells.next().unwrap_or_default().to_string());
            let row = cells
                .map(|c| c.parse::<f32>().map_err(|e| Error::Format(format!("heatmap row {}: {c:?}: {e}", i + 1))))
                .collect::<Result<Vec<f32>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Format(format!(
                    "heatmap row {} has {} values for {} columns",
                    i + 1,
                    row.len(),
                    columns.len()
                )));
            }
            values.push(row);
        }
        Ok(Heatmap { columns, rows, values })
    }
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    Heatmap::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `<index>.src.tsv` (weights over source tokens) and `<index>.ctx.tsv`
/// (weights over rows of the target-context matrix) for one decoded sentence.
///
/// `output` labels the rows and must have one entry per traced step, the
/// final EOS included when one was emitted.
pub fn write_heatmaps(
    dir: impl AsRef<Path>,
    index: usize,
    source: &[String],
    output: &[String],
    trace: &[StepAttention],
) -> Result<(PathBuf, PathBuf)> {
    if output.len() != trace.len() {
        return Err(Error::dim("attention trace", &[output.len()], &[trace.len()]));
    }
    let t = trace.first().map_or(0, |s| s.context.len());
    let src = Heatmap {
        columns: source.to_vec(),
        rows: output.to_vec(),
        values: trace.iter().map(|s| s.source.clone()).collect(),
    };
    let ctx = Heatmap {
        columns: (0..t).map(|i| i.to_string()).collect(),
        rows: output.to_vec(),
        values: trace.iter().map(|s| s.context.clone()).collect(),
    };
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = (dir.join(format!("{index}.src.tsv")), dir.join(format!("{index}.ctx.tsv")));
    fs::write(&paths.0, src.to_tsv()).map_err(|e| Error::io(&paths.0, e))?;
    fs::write(&paths.1, ctx.to_tsv()).map_err(|e| Error::io(&paths.1, e))?;
    Ok(paths)
}
