//! CSV recordings, truth sidecars and line-delimited draw files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::circular::DiscreteCircle;
use crate::emission::{Direction, ObservationCell, RecordedDirection};
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, Draw};
use crate::simulate::TruthRecord;

pub const DRAW_FORMAT: &str = "windhmm-draws";
pub const DRAW_FORMAT_VERSION: u32 = 1;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// One row of a recording file, as written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindRecord {
    pub timestamp: String,
    pub speed: String,
    pub direction: String,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_record(rec: &WindRecord, circle: &DiscreteCircle, path: &Path, line: u64) -> Result<ObservationCell> {
    let speed = rec.speed.trim();
    let y_star = if speed.eq_ignore_ascii_case("NA") || speed.is_empty() {
        None
    } else {
        Some(
            speed
                .parse::<u32>()
                .map_err(|_| parse_error(path, line, format!("speed {speed:?} is not a nonnegative integer or NA")))?,
        )
    };
    let dir = rec.direction.trim();
    let x = if dir.eq_ignore_ascii_case("CALM") {
        RecordedDirection::Calm
    } else if dir.eq_ignore_ascii_case("NA") || dir.is_empty() {
        RecordedDirection::Missing
    } else {
        let degrees = dir
            .parse::<i64>()
            .map_err(|_| parse_error(path, line, format!("direction {dir:?} is not integer degrees, CALM or NA")))?;
        let p = circle
            .from_degrees(degrees)
            .map_err(|_| {
                let step = 360.0 / circle.points() as f64;
                parse_error(path, line, format!("direction {degrees} is not a multiple of {step} degrees"))
            })?;
        RecordedDirection::Grid(p)
    };
    ObservationCell::new(y_star, x).map_err(|e| parse_error(path, line, e.to_string()))
}

/// Read a `timestamp,speed,direction` recording in file order.
pub fn ingest_csv(path: impl AsRef<Path>, circle: &DiscreteCircle) -> Result<Vec<ObservationCell>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, path, circle)
}

/// [`ingest_csv`] over any reader; `path` is only used in messages.
pub fn ingest_reader<R: Read>(reader: R, path: &Path, circle: &DiscreteCircle) -> Result<Vec<ObservationCell>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let expected = ["timestamp", "speed", "direction"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(parse_error(path, 1, format!("header must be timestamp,speed,direction, got {headers:?}")));
    }
    let mut out = Vec::new();
    for row in csv.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec: WindRecord = row
            .deserialize(Some(&headers))
            .map_err(|e| parse_error(path, line, e.to_string()))?;
        out.push(parse_record(&rec, circle, path, line)?);
    }
    Ok(out)
}

fn start_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2010, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn direction_text(x: RecordedDirection, circle: &DiscreteCircle) -> String {
    match x {
        RecordedDirection::Grid(p) => format!("{}", circle.degrees(p).round() as i64),
        RecordedDirection::Calm => "CALM".into(),
        RecordedDirection::Missing => "NA".into(),
    }
}

/// Write a recording with hourly timestamps from 2010-01-01T00:00.
pub fn write_observations_csv<W: Write>(writer: W, obs: &[ObservationCell], circle: &DiscreteCircle) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["timestamp", "speed", "direction"])?;
    for (t, o) in obs.iter().enumerate() {
        let ts = (start_time() + Duration::hours(t as i64)).format(TIMESTAMP_FORMAT).to_string();
        let speed = o.y_star.map_or("NA".to_string(), |y| y.to_string());
        csv.write_record([ts, speed, direction_text(o.x, circle)])?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Truth sidecar: one-based regime, true speed, direction and winding.
pub fn write_truth_csv<W: Write>(writer: W, truth: &[TruthRecord], circle: &DiscreteCircle) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["t", "regime", "speed", "direction", "winding"])?;
    for (t, rec) in truth.iter().enumerate() {
        let direction = match rec.cell.x {
            Direction::Grid(p) => format!("{}", circle.degrees(p).round() as i64),
            Direction::Calm => "CALM".into(),
        };
        let winding = rec.cell.k.map_or("NA".to_string(), |k| k.to_string());
        csv.write_record([
            (t + 1).to_string(),
            (rec.state + 1).to_string(),
            rec.cell.y.to_string(),
            direction,
            winding,
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Write `contents` through a sibling temporary file and rename it into place.
pub fn write_atomically<F>(path: &Path, contents: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let tmp = temp_path(path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    let result = contents(&mut writer).and_then(|_| writer.flush().map_err(|e| Error::io(&tmp, e)));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    drop(writer);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// First line of a draw file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawHeader {
    pub format: String,
    pub version: u32,
    pub chain: usize,
    pub n_obs: usize,
    pub config: ChainConfig,
}

impl DrawHeader {
    pub fn new(chain: usize, n_obs: usize, config: &ChainConfig) -> Self {
        Self {
            format: DRAW_FORMAT.into(),
            version: DRAW_FORMAT_VERSION,
            chain,
            n_obs,
            config: config.clone(),
        }
    }
}

/// Streams draws to `<path>.tmp`; [`DrawWriter::finish`] renames it to
/// `path`, and dropping an unfinished writer removes the temporary file.
pub struct DrawWriter {
    path: PathBuf,
    tmp: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl DrawWriter {
    pub fn create(path: impl AsRef<Path>, header: &DrawHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let tmp = temp_path(&path);
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = Self {
            path,
            tmp,
            writer: Some(BufWriter::new(file)),
        };
        w.write_line(header)?;
        Ok(w)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let writer = self.writer.as_mut().expect("writer is open until finish");
        serde_json::to_writer(&mut *writer, value)?;
        writer.write_all(b"\n").map_err(|e| Error::io(&self.tmp, e))
    }

    pub fn write(&mut self, draw: &Draw) -> Result<()> {
        self.write_line(draw)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let mut writer = self.writer.take().unwrap();
        writer.flush().map_err(|e| Error::io(&self.tmp, e))?;
        drop(writer);
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path.clone())
    }
}

impl Drop for DrawWriter {
    fn drop(&mut self) {
        if self.writer.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn read_draw_file(path: impl AsRef<Path>) -> Result<(DrawHeader, Vec<Draw>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "empty draw file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DrawHeader =
        serde_json::from_str(&first).map_err(|e| parse_error(path, 1, format!("bad header: {e}")))?;
    if header.format != DRAW_FORMAT || header.version != DRAW_FORMAT_VERSION {
        return Err(parse_error(
            path,
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut draws = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        draws.push(serde_json::from_str(&line).map_err(|e| parse_error(path, i as u64 + 2, e.to_string()))?);
    }
    Ok((header, draws))
}

/// Expand directories into their `*.jsonl` files, sorted by name.
pub fn collect_draw_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no draw files found".into()));
    }
    Ok(files)
}

/// Read and concatenate draw files. All must share one grid.
pub fn read_draws(inputs: &[PathBuf]) -> Result<(Vec<DrawHeader>, Vec<Draw>)> {
    let mut headers = Vec::new();
    let mut draws = Vec::new();
    for file in collect_draw_files(inputs)? {
        let (h, d) = read_draw_file(&file)?;
        if let Some(first) = headers.first() {
            let first: &DrawHeader = first;
            if first.config.circle != h.config.circle {
                return Err(Error::Config(format!("{} uses a different grid", file.display())));
            }
        }
        headers.push(h);
        draws.extend(d);
    }
    Ok((headers, draws))
}
