//! Cell-by-gene count tables as delimited text: header `cell_id,<gene>...`,
//! one row per cell, non-negative integer counts.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{io_err, DataError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GeneCounts {
    pub cell_ids: Vec<String>,
    pub genes: Vec<String>,
    /// `[cells, genes]` counts, integral and non-negative.
    pub counts: Tensor,
}

impl GeneCounts {
    /// Count rows gathered in the order of `cell_ids`.
    pub fn aligned(&self, cell_ids: &[String]) -> Result<Tensor> {
        let index: HashMap<&str, usize> = self
            .cell_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let g = self.genes.len();
        let data = self.counts.data();
        let mut out = Vec::with_capacity(cell_ids.len() * g);
        for id in cell_ids {
            let &i = index.get(id.as_str()).ok_or_else(|| {
                DataError::Genes(format!("cell `{id}` not present in the count table"))
            })?;
            out.extend_from_slice(&data[i * g..(i + 1) * g]);
        }
        Ok(Tensor::from_vec(&[cell_ids.len(), g], out).expect("consistent by construction"))
    }
}

pub fn load_gene_counts(path: &Path) -> Result<GeneCounts> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_gene_counts(&text)
}

pub(crate) fn parse_gene_counts(text: &str) -> Result<GeneCounts> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Genes(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.first().map(String::as_str) != Some("cell_id") || headers.len() < 2 {
        return Err(DataError::Genes(
            "header must be `cell_id` followed by at least one gene name".into(),
        ));
    }
    let genes: Vec<String> = headers[1..].to_vec();
    let mut seen = HashMap::new();
    for g in &genes {
        if g.is_empty() {
            return Err(DataError::Genes("empty gene name".into()));
        }
        if seen.insert(g.as_str(), ()).is_some() {
            return Err(DataError::Genes(format!("duplicate gene `{g}`")));
        }
    }

    let g = genes.len();
    let mut cell_ids = Vec::new();
    let mut ids_seen = HashMap::new();
    let mut counts = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let row_no = row + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            row: row_no,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != g + 1 {
            return Err(DataError::Parse {
                row: row_no,
                col: rec.len(),
                msg: format!("{} fields, expected {}", rec.len(), g + 1),
            });
        }
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DataError::Parse {
                row: row_no,
                col: 1,
                msg: "empty cell_id".into(),
            });
        }
        if ids_seen.insert(id.clone(), ()).is_some() {
            return Err(DataError::Genes(format!("duplicate cell `{id}`")));
        }
        for (j, raw) in rec.iter().skip(1).enumerate() {
            let v: i64 = raw.parse().map_err(|_| DataError::Parse {
                row: row_no,
                col: j + 2,
                msg: format!("`{raw}` is not an integer count"),
            })?;
            if v < 0 {
                return Err(DataError::Parse {
                    row: row_no,
                    col: j + 2,
                    msg: format!("negative count {v}"),
                });
            }
            counts.push(v as f64);
        }
        cell_ids.push(id);
    }
    if cell_ids.is_empty() {
        return Err(DataError::Genes("no data rows".into()));
    }
    let counts = Tensor::from_vec(&[cell_ids.len(), g], counts)
        .expect("consistent by construction");
    Ok(GeneCounts {
        cell_ids,
        genes,
        counts,
    })
}

/// Writes a table loadable by [`load_gene_counts`]. Counts must be
/// non-negative integers (stored as floats).
pub fn write_gene_counts(path: &Path, table: &GeneCounts) -> Result<()> {
    let g = table.genes.len();
    let n = table.cell_ids.len();
    if table.counts.shape() != [n, g] || g == 0 || n == 0 {
        return Err(DataError::Genes(format!(
            "counts are {:?}, expected [{n}, {g}]",
            table.counts.shape()
        )));
    }
    if let Some(bad) = table
        .counts
        .data()
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || v.fract() != 0.0)
    {
        return Err(DataError::Genes(format!(
            "count {bad} is not a non-negative integer"
        )));
    }

    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| io_err(path, e);
    writeln!(w, "cell_id,{}", table.genes.join(",")).map_err(io)?;
    let data = table.counts.data();
    for (i, id) in table.cell_ids.iter().enumerate() {
        write!(w, "{id}").map_err(io)?;
        for j in 0..g {
            write!(w, ",{}", data[i * g + j] as i64).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_table_parses_exactly() {
        let table = parse_gene_counts(
            "# comment\ncell_id,ACTB,CD3\nc1,5,0\nc2,12,3\n",
        )
        .unwrap();
        assert_eq!(table.cell_ids, vec!["c1", "c2"]);
        assert_eq!(table.genes, vec!["ACTB", "CD3"]);
        assert_eq!(table.counts.shape(), &[2, 2]);
        assert_eq!(table.counts.data(), &[5.0, 0.0, 12.0, 3.0]);
    }

    #[test]
    fn missing_gene_header_is_rejected() {
        assert!(matches!(
            parse_gene_counts("c1,5,0\nc2,12,3\n").unwrap_err(),
            DataError::Genes(_)
        ));
        assert!(parse_gene_counts("cell_id\nc1\n").is_err());
    }

    #[test]
    fn bad_entries_are_located_by_row_and_column() {
        match parse_gene_counts("cell_id,A,B\nc1,5,0\nc2,1,-3\n").unwrap_err() {
            DataError::Parse { row, col, msg } => {
                assert_eq!((row, col), (3, 3));
                assert!(msg.contains("negative"));
            }
            other => panic!("unexpected error {other:?}"),
        }
        match parse_gene_counts("cell_id,A,B\nc1,five,0\n").unwrap_err() {
            DataError::Parse { row, col, .. } => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected error {other:?}"),
        }
        match parse_gene_counts("cell_id,A,B\nc1,2.5,0\n").unwrap_err() {
            DataError::Parse { row, col, .. } => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(matches!(
            parse_gene_counts("cell_id,A,A\nc1,1,2\n").unwrap_err(),
            DataError::Genes(msg) if msg.contains("duplicate gene")
        ));
        assert!(matches!(
            parse_gene_counts("cell_id,A,B\nc1,1,2\nc1,3,4\n").unwrap_err(),
            DataError::Genes(msg) if msg.contains("duplicate cell")
        ));
    }

    #[test]
    fn write_then_load_is_the_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let table = GeneCounts {
            cell_ids: vec!["a".into(), "b".into(), "c".into()],
            genes: vec!["G1".into(), "G2".into()],
            counts: Tensor::from_vec(&[3, 2], vec![0.0, 7.0, 3.0, 1.0, 42.0, 0.0]).unwrap(),
        };
        write_gene_counts(&path, &table).unwrap();
        let back = load_gene_counts(&path).unwrap();
        assert_eq!(back.cell_ids, table.cell_ids);
        assert_eq!(back.genes, table.genes);
        assert_eq!(back.counts.data(), table.counts.data());

        let bad = GeneCounts {
            counts: Tensor::from_vec(&[3, 2], vec![0.0, 7.5, 3.0, 1.0, 42.0, 0.0]).unwrap(),
            ..table
        };
        assert!(write_gene_counts(&path, &bad).is_err());
    }

    #[test]
    fn alignment_gathers_rows_by_id() {
        let table = parse_gene_counts("cell_id,A,B\nc1,1,2\nc2,3,4\nc3,5,6\n").unwrap();
        let picked = table
            .aligned(&["c3".to_string(), "c1".to_string()])
            .unwrap();
        assert_eq!(picked.shape(), &[2, 2]);
        assert_eq!(picked.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(table.aligned(&["cx".to_string()]).is_err());
    }
}
