//! Tab-separated spot tables.
//!
//! ```text
//! spot_id<TAB>x<TAB>y<TAB>marker
//! s1<TAB>12.5<TAB>40<TAB>3
//! s2<TAB>80.25<TAB>17.125<TAB>
//! ```
//!
//! The header names `spot_id`, `x` and `y` are required and may appear in any
//! order; `marker` (or `marker_index`) is optional. Any other column is kept
//! verbatim as metadata and written back unchanged. Lines starting with `#`
//! and blank lines are ignored. An empty marker cell means a nonmarker. K is
//! the largest marker index present.
//!
//! Exports from spot-detection software usually carry one row per spot with
//! centroid columns under other names; renaming those columns to `x` and `y`
//! and the identifier column to `spot_id` is enough, and the rest (pI, mass,
//! intensity) rides along as metadata.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::Configuration;

const ID: &str = "spot_id";
const X: &str = "x";
const Y: &str = "y";
const MARKER: &str = "marker";
const MARKER_ALIAS: &str = "marker_index";

#[derive(Debug, Clone, PartialEq)]
pub struct SpotTable {
    pub ids: Vec<String>,
    pub configuration: Configuration,
    /// Names of the pass-through columns, in file order.
    pub extra_columns: Vec<String>,
    /// One row of pass-through cells per spot.
    pub metadata: Vec<Vec<String>>,
}

impl SpotTable {
    /// Table with no pass-through columns.
    pub fn new(ids: Vec<String>, configuration: Configuration) -> Result<Self> {
        let n = configuration.len();
        Self::with_metadata(ids, configuration, Vec::new(), vec![Vec::new(); n])
    }

    pub fn with_metadata(
        ids: Vec<String>,
        configuration: Configuration,
        extra_columns: Vec<String>,
        metadata: Vec<Vec<String>>,
    ) -> Result<Self> {
        if configuration.dim() != 2 {
            return Err(Error::InvalidInput("spot tables are two-dimensional".into()));
        }
        if ids.len() != configuration.len() || metadata.len() != ids.len() {
            return Err(Error::ShapeMismatch("ids, points and metadata differ in length".into()));
        }
        if metadata.iter().any(|r| r.len() != extra_columns.len()) {
            return Err(Error::ShapeMismatch("metadata row width differs from header".into()));
        }
        let mut seen = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains(['\t', '\n', '\r']) || id.starts_with('#') {
                return Err(Error::InvalidInput(format!("spot id {id:?} cannot be written")));
            }
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate spot id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            configuration,
            extra_columns,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// Same spots, different marker labels.
    pub fn with_configuration(&self, configuration: Configuration) -> Result<Self> {
        if configuration.points() != self.configuration.points() {
            return Err(Error::ShapeMismatch("replacement configuration moves points".into()));
        }
        Ok(Self {
            configuration,
            ..self.clone()
        })
    }

    pub fn to_tsv(&self) -> String {
        let c = &self.configuration;
        let mut out = String::new();
        out.push_str(&[ID, X, Y, MARKER].join("\t"));
        for name in &self.extra_columns {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            let p = c.point(i);
            let _ = write!(out, "{id}\t{}\t{}\t", p[0], p[1]);
            if let Some(k) = c.marker_of_point(i) {
                let _ = write!(out, "{}", k + 1);
            }
            for cell in &self.metadata[i] {
                out.push('\t');
                out.push_str(cell);
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the text of a spot file; `origin` names it in error messages.
pub fn parse_spot_str(text: &str, origin: &str) -> Result<SpotTable> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let (header_line, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |want: &[&str]| -> Result<Option<usize>> {
        let hits: Vec<usize> = (0..names.len()).filter(|&i| want.contains(&names[i])).collect();
        match hits.len() {
            0 => Ok(None),
            1 => Ok(Some(hits[0])),
            _ => Err(err(header_line, format!("column {} appears more than once", want[0]))),
        }
    };
    let need = |want: &str| -> Result<usize> {
        find(&[want])?.ok_or_else(|| err(header_line, format!("header lacks a {want} column")))
    };
    let (ci, cx, cy) = (need(ID)?, need(X)?, need(Y)?);
    let cm = find(&[MARKER, MARKER_ALIAS])?;
    let extra: Vec<usize> = (0..names.len())
        .filter(|i| ![Some(ci), Some(cx), Some(cy), cm].contains(&Some(*i)))
        .collect();

    let mut ids = Vec::new();
    let mut points = Vec::new();
    let mut markers: Vec<(usize, usize)> = Vec::new();
    let mut metadata = Vec::new();
    let mut id_line: HashMap<String, usize> = HashMap::new();
    let mut marker_line: HashMap<usize, usize> = HashMap::new();

    for (ln, line) in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != names.len() {
            return Err(err(
                ln,
                format!("expected {} fields, found {}", names.len(), cells.len()),
            ));
        }
        let id = cells[ci].trim();
        if id.is_empty() {
            return Err(err(ln, "empty spot_id".into()));
        }
        if let Some(first) = id_line.insert(id.to_string(), ln) {
            return Err(err(ln, format!("duplicate spot_id {id:?} (first on line {first})")));
        }
        let coord = |col: usize| -> Result<f64> {
            let s = cells[col].trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(ln, format!("{} value {s:?} is not a finite number", names[col])))
        };
        let p = DVector::from_vec(vec![coord(cx)?, coord(cy)?]);
        if let Some(cm) = cm {
            let s = cells[cm].trim();
            if !s.is_empty() {
                let k: usize = s
                    .parse()
                    .ok()
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| err(ln, format!("marker {s:?} is not a positive integer")))?;
                if let Some(first) = marker_line.insert(k, ln) {
                    return Err(err(ln, format!("duplicate marker {k} (first on line {first})")));
                }
                markers.push((k, points.len()));
            }
        }
        ids.push(id.to_string());
        points.push(p);
        metadata.push(extra.iter().map(|&c| cells[c].to_string()).collect());
    }

    let k = markers.iter().map(|m| m.0).max().unwrap_or(0);
    let mut slots = vec![None; k];
    for (label, idx) in markers {
        slots[label - 1] = Some(idx);
    }
    let configuration = Configuration::new(2, points, slots).map_err(|e| err(header_line, e.to_string()))?;
    SpotTable::with_metadata(
        ids,
        configuration,
        extra.iter().map(|&c| names[c].to_string()).collect(),
        metadata,
    )
    .map_err(|e| err(header_line, e.to_string()))
}

pub fn read_spot_file(path: &Path) -> Result<SpotTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_spot_str(&text, &path.display().to_string())
}

pub fn parse_spot_file(path: &Path) -> Result<Configuration> {
    read_spot_file(path).map(|t| t.configuration)
}

pub fn write_spot_file(path: &Path, table: &SpotTable) -> Result<()> {
    super::write_atomic(path, table.to_tsv().as_bytes())
}
