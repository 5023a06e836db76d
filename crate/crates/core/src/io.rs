//! File formats: point and outcome CSVs, block GeoJSON, target and sample
//! tables, and binary matrix blobs.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, JsonValue, Value};
use nalgebra::DMatrix;

use crate::covariance::{InstantPoint, Interval, SpaceTimeBlock, SpaceTimePoint};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polygon};

pub const POINTS_HEADER: [&str; 6] = ["site_id", "x", "y", "t_start", "t_end", "value"];
pub const INSTANTS_HEADER: [&str; 4] = ["target_id", "x", "y", "t"];
pub const OUTCOME_KEYS: [&str; 4] = ["block_id", "t_start", "t_end", "y"];
const BLOB_MAGIC: &[u8; 4] = b"STSM";

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("row {row}, column '{column}': cannot parse '{cell}' as a number")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("row {row}, column '{column}': value '{cell}' is not finite")));
    }
    Ok(v)
}

fn check_header(found: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<&str> = found.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Data(format!(
            "{what} header must start with '{}', got '{}'",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Monthly (or other interval-averaged) site observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub site_ids: Vec<String>,
    pub coords: Vec<SpaceTimePoint>,
    pub values: Vec<f64>,
    /// Rows skipped because a cell was empty, `NA` or `NaN`.
    pub dropped: usize,
}

/// Reads a points CSV whose header is exactly [`POINTS_HEADER`].
pub fn read_points<R: Read>(r: R) -> Result<PointTable> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != POINTS_HEADER {
        return Err(Error::Data(format!(
            "points header must be exactly '{}', got '{}'",
            POINTS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut t = PointTable { site_ids: Vec::new(), coords: Vec::new(), values: Vec::new(), dropped: 0 };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        if rec.iter().skip(1).any(is_missing) || rec.get(0).is_none_or(is_missing) {
            t.dropped += 1;
            continue;
        }
        let num = |c: usize| parse_cell(&rec[c], row, POINTS_HEADER[c]);
        let interval = Interval::new(num(3)?, num(4)?).map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        t.site_ids.push(rec[0].trim().to_string());
        t.coords.push(SpaceTimePoint { s: Point2::new(num(1)?, num(2)?), interval });
        t.values.push(num(5)?);
    }
    if t.dropped > 0 {
        log::info!("dropped {} point rows with missing values", t.dropped);
    }
    if t.values.is_empty() {
        return Err(Error::Data("no complete point rows".into()));
    }
    Ok(t)
}

pub fn write_points<W: Write>(w: W, site_ids: &[String], coords: &[SpaceTimePoint], values: &[f64]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(POINTS_HEADER)?;
    for ((id, c), v) in site_ids.iter().zip(coords).zip(values) {
        wr.write_record([
            id.clone(),
            c.s.x.to_string(),
            c.s.y.to_string(),
            c.interval.start.to_string(),
            c.interval.end.to_string(),
            v.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstantTable {
    pub ids: Vec<String>,
    pub points: Vec<InstantPoint>,
}

pub fn read_instants<R: Read>(r: R) -> Result<InstantTable> {
    let mut rd = csv::Reader::from_reader(r);
    check_header(rd.headers()?, &INSTANTS_HEADER, "instants")?;
    let mut t = InstantTable { ids: Vec::new(), points: Vec::new() };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |c: usize| parse_cell(&rec[c], row, INSTANTS_HEADER[c]);
        t.ids.push(rec[0].trim().to_string());
        t.points.push(InstantPoint { s: Point2::new(num(1)?, num(2)?), t: num(3)? });
    }
    if t.ids.is_empty() {
        return Err(Error::Data("no target rows".into()));
    }
    Ok(t)
}

pub fn write_instants<W: Write>(w: W, ids: &[String], points: &[InstantPoint]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(INSTANTS_HEADER)?;
    for (id, p) in ids.iter().zip(points) {
        wr.write_record([id.clone(), p.s.x.to_string(), p.s.y.to_string(), p.t.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTable {
    pub ids: Vec<String>,
    pub blocks: Vec<SpaceTimeBlock>,
}

fn property_number(props: &JsonObject, key: &str, idx: usize) -> Result<f64> {
    props
        .get(key)
        .and_then(JsonValue::as_f64)
        .ok_or_else(|| Error::Data(format!("feature {idx}: property '{key}' missing or not a number")))
}

fn property_id(props: &JsonObject, idx: usize) -> Result<String> {
    match props.get("block_id") {
        Some(JsonValue::String(s)) => Ok(s.clone()),
        Some(JsonValue::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Data(format!("feature {idx}: property 'block_id' missing or not a string/number"))),
    }
}

/// Reads a FeatureCollection of simple polygons carrying `block_id`,
/// `t_start` and `t_end` properties.
pub fn read_blocks_geojson(text: &str) -> Result<BlockTable> {
    let gj: GeoJson = text.parse().map_err(|e| Error::Data(format!("invalid GeoJSON: {e}")))?;
    let GeoJson::FeatureCollection(fc) = gj else {
        return Err(Error::Data("blocks GeoJSON must be a FeatureCollection".into()));
    };
    let mut t = BlockTable { ids: Vec::new(), blocks: Vec::new() };
    let mut seen = BTreeSet::new();
    for (idx, f) in fc.features.iter().enumerate() {
        let props = f.properties.as_ref().ok_or_else(|| Error::Data(format!("feature {idx}: no properties")))?;
        let id = property_id(props, idx)?;
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate block_id '{id}'")));
        }
        let interval = Interval::new(property_number(props, "t_start", idx)?, property_number(props, "t_end", idx)?)
            .map_err(|e| Error::Data(format!("feature {idx}: {e}")))?;
        let geom = f.geometry.as_ref().ok_or_else(|| Error::Data(format!("feature {idx}: no geometry")))?;
        let Value::Polygon(rings) = &geom.value else {
            return Err(Error::Data(format!("feature {idx}: geometry must be a Polygon")));
        };
        if rings.len() != 1 {
            return Err(Error::Data(format!("feature {idx}: polygons with holes are not supported")));
        }
        let verts = rings[0]
            .iter()
            .map(|p| match p.as_slice() {
                [x, y, ..] => Ok(Point2::new(*x, *y)),
                _ => Err(Error::Data(format!("feature {idx}: position with fewer than 2 coordinates"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let region = Polygon::new(verts).map_err(|e| Error::Data(format!("feature {idx}: {e}")))?;
        t.ids.push(id);
        t.blocks.push(SpaceTimeBlock { region, interval });
    }
    if t.blocks.is_empty() {
        return Err(Error::Data("blocks GeoJSON has no features".into()));
    }
    Ok(t)
}

pub fn blocks_to_geojson(ids: &[String], blocks: &[SpaceTimeBlock]) -> String {
    let features = ids
        .iter()
        .zip(blocks)
        .map(|(id, b)| {
            let mut ring: Vec<Vec<f64>> = b.region.vertices().iter().map(|p| vec![p.x, p.y]).collect();
            ring.push(ring[0].clone());
            let mut props = JsonObject::new();
            props.insert("block_id".into(), JsonValue::String(id.clone()));
            props.insert("t_start".into(), b.interval.start.into());
            props.insert("t_end".into(), b.interval.end.into());
            Feature {
                bbox: None,
                geometry: Some(Geometry::new(Value::Polygon(vec![ring]))),
                id: None,
                properties: Some(props),
                foreign_members: None,
            }
        })
        .collect();
    GeoJson::FeatureCollection(FeatureCollection { bbox: None, features, foreign_members: None }).to_string()
}

/// Outcome rows before predictor encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTable {
    /// File line of each kept row, for error messages.
    pub lines: Vec<usize>,
    pub block_ids: Vec<String>,
    pub intervals: Vec<Interval>,
    pub y: Vec<f64>,
    /// Raw predictor cells by column name, in file order.
    pub predictors: Vec<(String, Vec<String>)>,
    /// Rows skipped because the outcome was missing.
    pub dropped: usize,
}

pub fn read_outcomes<R: Read>(r: R) -> Result<OutcomeTable> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    check_header(&header, &OUTCOME_KEYS, "outcomes")?;
    let names: Vec<String> = header.iter().skip(OUTCOME_KEYS.len()).map(str::to_string).collect();
    let mut t = OutcomeTable {
        lines: Vec::new(),
        block_ids: Vec::new(),
        intervals: Vec::new(),
        y: Vec::new(),
        predictors: names.iter().map(|n| (n.clone(), Vec::new())).collect(),
        dropped: 0,
    };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row}: {} cells for {} columns", rec.len(), header.len())));
        }
        if is_missing(&rec[3]) {
            t.dropped += 1;
            continue;
        }
        let num = |c: usize| parse_cell(&rec[c], row, OUTCOME_KEYS[c]);
        t.lines.push(row);
        t.block_ids.push(rec[0].trim().to_string());
        t.intervals.push(Interval::new(num(1)?, num(2)?).map_err(|e| Error::Data(format!("row {row}: {e}")))?);
        t.y.push(num(3)?);
        for (j, (name, col)) in t.predictors.iter_mut().enumerate() {
            let cell = rec[OUTCOME_KEYS.len() + j].trim();
            if is_missing(cell) {
                return Err(Error::Data(format!("row {row}, column '{name}': missing predictor value")));
            }
            col.push(cell.to_string());
        }
    }
    if t.dropped > 0 {
        log::info!("dropped {} outcome rows with a missing response", t.dropped);
    }
    if t.y.is_empty() {
        return Err(Error::Data("no outcome rows".into()));
    }
    Ok(t)
}

pub fn write_outcomes<W: Write>(
    w: W,
    block_ids: &[String],
    intervals: &[Interval],
    y: &[f64],
    predictors: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = OUTCOME_KEYS.iter().map(|s| s.to_string()).collect();
    header.extend(predictors.iter().map(|p| p.0.clone()));
    wr.write_record(&header)?;
    for k in 0..y.len() {
        let mut rec =
            vec![block_ids[k].clone(), intervals[k].start.to_string(), intervals[k].end.to_string(), y[k].to_string()];
        rec.extend(predictors.iter().map(|p| p.1[k].to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-target stacked draws with candidate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub ids: Vec<String>,
    /// `targets × B`.
    pub values: DMatrix<f64>,
    pub candidates: Vec<usize>,
}

pub const SAMPLES_HEADER: [&str; 4] = ["target_id", "draw", "candidate", "value"];

/// Long format, one row per (target, draw).
pub fn write_samples<W: Write>(w: W, t: &SampleTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SAMPLES_HEADER)?;
    for (i, id) in t.ids.iter().enumerate() {
        for b in 0..t.values.ncols() {
            wr.write_record([id.clone(), b.to_string(), t.candidates[b].to_string(), t.values[(i, b)].to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<SampleTable> {
    let mut rd = csv::Reader::from_reader(r);
    check_header(rd.headers()?, &SAMPLES_HEADER, "samples")?;
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let id = rec[0].trim().to_string();
        let t = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            ids.len() - 1
        });
        let draw = rec[1].trim().parse::<usize>().map_err(|_| Error::Data(format!("row {row}: bad draw index")))?;
        let cand =
            rec[2].trim().parse::<usize>().map_err(|_| Error::Data(format!("row {row}: bad candidate index")))?;
        cells.push((t, draw, cand, parse_cell(&rec[3], row, "value")?));
    }
    let b = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if ids.is_empty() || cells.len() != ids.len() * b {
        return Err(Error::Data(format!(
            "samples table has {} rows, expected {} targets x {b} draws",
            cells.len(),
            ids.len()
        )));
    }
    let mut values = DMatrix::from_element(ids.len(), b, f64::NAN);
    let mut candidates = vec![usize::MAX; b];
    for (t, d, c, v) in cells {
        values[(t, d)] = v;
        candidates[d] = c;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("samples table has missing (target, draw) cells".into()));
    }
    Ok(SampleTable { ids, values, candidates })
}

/// Numeric CSV with a header row, e.g. a draws × points log-likelihood table.
pub fn read_numeric_matrix<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .zip(header.iter())
            .map(|(cell, name)| parse_cell(cell, i + 2, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() || header.is_empty() {
        return Err(Error::Data("numeric table is empty".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), header.len(), |i, j| rows[i][j]))
}

/// Writes `rows × cols` column-major little-endian `f64` with a small header.
pub fn write_matrix_blob<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_blob<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Data("not a matrix blob".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Data(format!("blob holds {} bytes, expected {}", bytes.len(), rows * cols * 8)));
    }
    let data: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}
