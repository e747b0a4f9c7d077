//! CSV readers and writers for panels, adjacency lists, feature tables and labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use panelkit::panel::Record;
use panelkit::weights::{normalize_fips, ParsedAdjacency};
use panelkit::{AdjacencyGraph, PanelDataset};

use crate::error::{CliError, Result};

/// Feature columns used for the county typology, in file order.
pub const FEATURE_COLUMNS: [&str; 6] =
    ["rural_urban", "population", "edu_attain", "median_earnings", "female_lfp", "diversity_index"];

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "." | "null")
}

fn parse_cell(path: &Path, line: usize, column: &str, raw: &str) -> Result<f64> {
    if is_missing(raw) {
        return Ok(f64::NAN);
    }
    raw.trim()
        .parse::<f64>()
        .map_err(|_| CliError::parse(path, format!("line {line}, column `{column}`: not a number: {raw:?}")))
}

fn parse_fips(path: &Path, line: usize, raw: &str) -> Result<String> {
    normalize_fips(raw).ok_or_else(|| CliError::parse(path, format!("line {line}: malformed FIPS {raw:?}")))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn headers(path: &Path, rdr: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    Ok(rdr.headers().map_err(|e| CliError::parse(path, e))?.iter().map(|h| h.to_string()).collect())
}

fn require_prefix(path: &Path, header: &[String], expected: &[&str]) -> Result<()> {
    for (i, col) in expected.iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*col) {
            return Err(CliError::MissingColumn { path: path.into(), column: (*col).into() });
        }
    }
    Ok(())
}

/// Two-column `from,to` FIPS remap. Entities mapped to the same target are summed.
pub fn read_remap(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_prefix(path, &header, &["from", "to"])?;
    let mut map = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(path, e))?;
        let line = i + 2;
        map.insert(parse_fips(path, line, &rec[0])?, parse_fips(path, line, &rec[1])?);
    }
    Ok(map)
}

pub fn write_remap(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    let mut s = csv_line(&["from", "to"]);
    for (from, to) in map {
        s += &csv_line(&[from, to]);
    }
    write_text(path, &s)
}

/// Carry `fips,type` labels from source FIPS onto consolidated codes. A consolidated
/// code without its own label takes the label its constituents share; codes whose
/// constituents disagree stay unlabelled and are returned.
pub fn remap_labels(labels: &mut BTreeMap<String, String>, remap: &BTreeMap<String, String>) -> Vec<String> {
    let mut parts: BTreeMap<&String, BTreeSet<String>> = BTreeMap::new();
    for (from, to) in remap {
        if let Some(l) = labels.get(from) {
            parts.entry(to).or_default().insert(l.clone());
        }
    }
    let mut conflicts = Vec::new();
    for (to, set) in parts {
        if labels.contains_key(to) {
            continue;
        }
        if set.len() == 1 {
            labels.insert(to.clone(), set.into_iter().next().unwrap());
        } else {
            conflicts.push(to.clone());
        }
    }
    conflicts
}

/// Read a `fips,year,<vars>` panel. Empty, `NA`, `NaN` and `.` cells are missing.
pub fn read_panel(path: &Path, remap: Option<&BTreeMap<String, String>>) -> Result<PanelDataset> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_prefix(path, &header, &["fips", "year"])?;
    let vars = &header[2..];
    if vars.is_empty() {
        return Err(CliError::parse(path, "no variable columns after `fips,year`"));
    }
    let mut cells: BTreeMap<(String, i32, usize), (f64, bool)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(path, e))?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(CliError::parse(path, format!("line {line}: expected {} fields", header.len())));
        }
        let raw_fips = parse_fips(path, line, &rec[0])?;
        let remapped = remap.and_then(|m| m.get(&raw_fips)).is_some();
        let fips = remap.and_then(|m| m.get(&raw_fips)).cloned().unwrap_or(raw_fips);
        let year: i32 = rec[1]
            .parse()
            .map_err(|_| CliError::parse(path, format!("line {line}, column `year`: not an integer")))?;
        for (j, name) in vars.iter().enumerate() {
            let v = parse_cell(path, line, name, &rec[j + 2])?;
            match cells.get_mut(&(fips.clone(), year, j)) {
                Some(slot) if remapped || slot.1 => {
                    slot.1 = true;
                    if v.is_finite() {
                        slot.0 = if slot.0.is_finite() { slot.0 + v } else { v };
                    }
                }
                Some(_) => {
                    return Err(CliError::Validation(panelkit::Error::DuplicateRecord {
                        entity: fips,
                        year,
                        name: name.clone(),
                    }))
                }
                None => {
                    cells.insert((fips.clone(), year, j), (v, remapped));
                }
            }
        }
    }
    let mut records: Vec<Record> = Vec::with_capacity(cells.len());
    for j in 0..vars.len() {
        records.extend(
            cells.iter().filter(|((_, _, c), _)| *c == j).map(|((e, y, _), (v, _))| Record::new(e.clone(), *y, vars[j].clone(), *v)),
        );
    }
    PanelDataset::from_records(&records).map_err(CliError::Validation)
}

/// Write a panel as `fips,year,<vars>` in entity-major order.
pub fn write_panel(path: &Path, panel: &PanelDataset) -> Result<()> {
    let names: Vec<&str> = panel.column_names().collect();
    let mut out = String::from("fips,year");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let cols: Vec<_> = names.iter().map(|n| panel.column(n).expect("listed column")).collect();
    for (i, e) in panel.entities().iter().enumerate() {
        for (t, y) in panel.years().iter().enumerate() {
            out.push_str(&format!("{e},{y}"));
            for c in &cols {
                out.push(',');
                out.push_str(&c.get(panel.index(i, t)).map(fmt_num).unwrap_or_default());
            }
            out.push('\n');
        }
    }
    write_text(path, &out)
}

pub fn read_adjacency(path: &Path, universe: Option<&BTreeSet<String>>) -> Result<ParsedAdjacency> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    AdjacencyGraph::parse(text.lines(), universe).map_err(CliError::Validation)
}

pub fn write_adjacency(path: &Path, graph: &AdjacencyGraph) -> Result<()> {
    let mut out = String::from("fips_a,fips_b\n");
    for (a, b) in graph.edges() {
        out.push_str(&format!("{a},{b}\n"));
    }
    write_text(path, &out)
}

/// Feature rows keyed by FIPS: the six typology columns followed by any extra
/// descriptor columns. Missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub ids: Vec<String>,
    pub features: Vec<[f64; 6]>,
    pub descriptor_names: Vec<String>,
    pub descriptors: Vec<Vec<f64>>,
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    let mut expected = vec!["fips"];
    expected.extend(FEATURE_COLUMNS);
    require_prefix(path, &header, &expected)?;
    let descriptor_names: Vec<String> = header[7..].to_vec();
    let mut rows: BTreeMap<String, ([f64; 6], Vec<f64>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(path, e))?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(CliError::parse(path, format!("line {line}: expected {} fields", header.len())));
        }
        let fips = parse_fips(path, line, &rec[0])?;
        let mut f = [0.0; 6];
        for (j, slot) in f.iter_mut().enumerate() {
            *slot = parse_cell(path, line, FEATURE_COLUMNS[j], &rec[j + 1])?;
        }
        let d = (7..header.len()).map(|j| parse_cell(path, line, &header[j], &rec[j])).collect::<Result<_>>()?;
        if rows.insert(fips.clone(), (f, d)).is_some() {
            return Err(CliError::parse(path, format!("line {line}: duplicate FIPS {fips}")));
        }
    }
    let mut out = FeatureFile { ids: Vec::new(), features: Vec::new(), descriptor_names, descriptors: Vec::new() };
    for (id, (f, d)) in rows {
        out.ids.push(id);
        out.features.push(f);
        out.descriptors.push(d);
    }
    Ok(out)
}

pub fn write_features(path: &Path, file: &FeatureFile) -> Result<()> {
    let mut out = String::from("fips");
    for c in FEATURE_COLUMNS.iter().copied().chain(file.descriptor_names.iter().map(String::as_str)) {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for ((id, f), d) in file.ids.iter().zip(&file.features).zip(&file.descriptors) {
        out.push_str(id);
        for v in f.iter().chain(d) {
            out.push(',');
            out.push_str(&fmt_num(*v));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// `fips,type` labels.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_prefix(path, &header, &["fips", "type"])?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(path, e))?;
        out.insert(parse_fips(path, i + 2, &rec[0])?, rec[1].to_string());
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Quote a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Join fields into one CSV line (with trailing newline).
pub fn csv_line<S: AsRef<str>>(fields: &[S]) -> String {
    let mut s = fields.iter().map(|f| csv_field(f.as_ref())).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}
