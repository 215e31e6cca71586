//! File formats.
//!
//! * Record files: binary (`QTRJREC1` magic, little-endian header, then
//!   currents row-major by trajectory) or text (one `#` header line of
//!   `key=value` pairs, then one comma-separated row per trajectory).
//! * Ensemble files: binary, `QTRJENS1` magic.
//! * Histogram files: `# key=value` header lines, then
//!   `bin_center,density,error` rows.
//! * Fit reports: TOML with one `[[slice]]` table per time slice.
//!
//! Floating-point text uses the shortest representation that round-trips.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayesian::{RecordHeader, RecordSet};
use crate::error::{Error, Result};
use crate::fitting::FitResult;
use crate::state::{Binning, DistributionSnapshot, TrajectoryEnsemble};

pub const RECORD_MAGIC: &[u8; 8] = b"QTRJREC1";
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"QTRJENS1";
pub const FORMAT_VERSION: u32 = 1;

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path.display().to_string(), "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        std::io::Write::write_all(&mut f, bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                format!("byte {}", self.pos),
                format!("file ends inside {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::format(format!("byte {at}"), format!("{what} {v} is too large")))
    }

    fn f64_array(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(format!("byte {}", self.pos), "payload size overflows"))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                format!("byte {}", self.pos),
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let m = self.take(8, "magic")?;
        if m != magic {
            return Err(Error::format("byte 0", format!("expected magic {:?}", String::from_utf8_lossy(magic))));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("byte {at}"), format!("unsupported version {version}")));
        }
        Ok(())
    }
}

pub fn records_to_binary(records: &RecordSet) -> Vec<u8> {
    let h = &records.header;
    let mut out = Vec::with_capacity(84 + 8 * records.currents.len());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.n_traj as u64).to_le_bytes());
    out.extend_from_slice(&(h.n_steps as u64).to_le_bytes());
    for v in [h.dt, h.i0, h.i1, h.sigma, h.t1, h.x0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.master_seed.to_le_bytes());
    for c in &records.currents {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

const RECORD_KEYS: [&str; 9] = ["n_traj", "n_steps", "dt_us", "i0", "i1", "sigma", "t1_us", "x0", "master_seed"];

pub fn records_to_text(records: &RecordSet) -> String {
    let h = &records.header;
    let mut s = format!(
        "# n_traj={},n_steps={},dt_us={},i0={},i1={},sigma={},t1_us={},x0={},master_seed={}\n",
        h.n_traj, h.n_steps, h.dt, h.i0, h.i1, h.sigma, h.t1, h.x0, h.master_seed
    );
    for i in 0..h.n_traj {
        let row = records.record(i);
        for (k, c) in row.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            write!(s, "{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Reads a binary or text record file, telling them apart by the magic.
pub fn parse_records(bytes: &[u8]) -> Result<RecordSet> {
    if bytes.starts_with(RECORD_MAGIC) {
        parse_records_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| {
            Error::format(format!("byte {}", e.valid_up_to()), "neither a binary record file nor UTF-8 text")
        })?;
        parse_records_text(text)
    }
}

fn parse_records_binary(bytes: &[u8]) -> Result<RecordSet> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(RECORD_MAGIC)?;
    let n_traj = r.usize("n_traj")?;
    let n_steps = r.usize("n_steps")?;
    let dt = r.f64("dt_us")?;
    let i0 = r.f64("I0")?;
    let i1 = r.f64("I1")?;
    let sigma = r.f64("sigma")?;
    let t1 = r.f64("T1_us")?;
    let x0 = r.f64("x0")?;
    let master_seed = r.u64("master_seed")?;
    let header = RecordHeader {
        n_traj,
        n_steps,
        dt,
        i0,
        i1,
        sigma,
        t1,
        x0,
        master_seed,
    };
    let start = r.pos;
    let n = n_traj
        .checked_mul(n_steps)
        .ok_or_else(|| Error::format(format!("byte {start}"), "n_traj * n_steps overflows"))?;
    let currents = r.f64_array(n, "currents")?;
    r.finish()?;
    if let Some(k) = currents.iter().position(|c| !c.is_finite()) {
        return Err(Error::format(format!("byte {}", start + 8 * k), "current is not finite"));
    }
    RecordSet::new(header, currents).map_err(|e| Error::format("header", e.to_string()))
}

fn header_map(line: &str, lineno: usize, sep: char) -> Result<Vec<(String, String)>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::format(format!("line {lineno}"), "expected a '#' header line"))?;
    body.split(sep)
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {lineno}"), format!("'{}' is not key=value", pair.trim())))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str, location: impl Into<String>) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(location, format!("{key}: cannot parse '{v}'")))
}

fn parse_records_text(text: &str) -> Result<RecordSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header_line) = lines
        .next()
        .ok_or_else(|| Error::format("line 1", "empty record file"))?;
    let pairs = header_map(header_line, hl + 1, ',')?;
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(format!("line {}", hl + 1), format!("missing key {key}")))
    };
    if let Some((k, _)) = pairs.iter().find(|(k, _)| !RECORD_KEYS.contains(&k.as_str())) {
        return Err(Error::format(format!("line {}", hl + 1), format!("unknown key {k}")));
    }
    let loc = format!("line {}", hl + 1);
    let header = RecordHeader {
        n_traj: parse_num(get("n_traj")?, "n_traj", &loc)?,
        n_steps: parse_num(get("n_steps")?, "n_steps", &loc)?,
        dt: parse_num(get("dt_us")?, "dt_us", &loc)?,
        i0: parse_num(get("i0")?, "i0", &loc)?,
        i1: parse_num(get("i1")?, "i1", &loc)?,
        sigma: parse_num(get("sigma")?, "sigma", &loc)?,
        t1: parse_num(get("t1_us")?, "t1_us", &loc)?,
        x0: parse_num(get("x0")?, "x0", &loc)?,
        master_seed: parse_num(get("master_seed")?, "master_seed", &loc)?,
    };
    let mut currents = Vec::with_capacity(header.n_traj.saturating_mul(header.n_steps).min(1 << 24));
    let mut rows = 0;
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let before = currents.len();
        for field in line.split(',') {
            let v: f64 = parse_num(field.trim(), "current", &loc)?;
            if !v.is_finite() {
                return Err(Error::format(loc, "current is not finite"));
            }
            currents.push(v);
        }
        if currents.len() - before != header.n_steps {
            return Err(Error::format(
                loc,
                format!("expected {} currents, found {}", header.n_steps, currents.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != header.n_traj && header.n_steps > 0 {
        return Err(Error::format(
            format!("line {}", text.lines().count()),
            format!("expected {} trajectories, found {rows}", header.n_traj),
        ));
    }
    RecordSet::new(header, currents).map_err(|e| Error::format(loc, e.to_string()))
}

pub fn ensemble_to_binary(ens: &TrajectoryEnsemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 8 * ens.values.len());
    out.extend_from_slice(ENSEMBLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ens.n_traj as u64).to_le_bytes());
    out.extend_from_slice(&(ens.n_steps as u64).to_le_bytes());
    out.extend_from_slice(&ens.dt.to_le_bytes());
    for v in &ens.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_ensemble(bytes: &[u8]) -> Result<TrajectoryEnsemble> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(ENSEMBLE_MAGIC)?;
    let n_traj = r.usize("n_traj")?;
    let n_steps = r.usize("n_steps")?;
    let dt = r.f64("dt_us")?;
    let start = r.pos;
    let n = n_steps
        .checked_add(1)
        .and_then(|s| s.checked_mul(n_traj))
        .ok_or_else(|| Error::format(format!("byte {start}"), "ensemble size overflows"))?;
    let values = r.f64_array(n, "values")?;
    r.finish()?;
    if let Some(k) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(format!("byte {}", start + 8 * k), "rho00 outside [0, 1]"));
    }
    TrajectoryEnsemble::new(n_traj, n_steps, dt, values).map_err(|e| Error::format("header", e.to_string()))
}

pub fn histogram_to_text(s: &DistributionSnapshot) -> String {
    let mut out = format!("# t_us={}\n# mass0={}\n# mass1={}\n", s.t, s.mass0, s.mass1);
    if let Some([e0, e1]) = s.boundary_errors {
        writeln!(out, "# mass0_err={e0}\n# mass1_err={e1}").unwrap();
    }
    for k in 0..s.n_bins() {
        writeln!(out, "{},{},{}", s.binning.center(k), s.density[k], s.errors[k]).unwrap();
    }
    out
}

/// Reads a histogram file; the bin width is recovered from the first centre
/// and every other centre must sit on the same uniform grid.
pub fn parse_histogram(text: &str) -> Result<DistributionSnapshot> {
    let (mut t, mut mass0, mut mass1, mut e0, mut e1) = (None, None, None, None, None);
    let (mut centers, mut density, mut errors) = (Vec::new(), Vec::new(), Vec::new());
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        let loc = format!("line {}", i + 1);
        last_line = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if !centers.is_empty() {
                return Err(Error::format(loc, "header line after data rows"));
            }
            for (k, v) in header_map(line, i + 1, ',')? {
                let v: f64 = parse_num(&v, &k, &loc)?;
                let slot = match k.as_str() {
                    "t_us" => &mut t,
                    "mass0" => &mut mass0,
                    "mass1" => &mut mass1,
                    "mass0_err" => &mut e0,
                    "mass1_err" => &mut e1,
                    _ => return Err(Error::format(loc, format!("unknown key {k}"))),
                };
                if slot.replace(v).is_some() {
                    return Err(Error::format(loc, format!("duplicate key {k}")));
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(loc, format!("expected 3 columns, found {}", fields.len())));
        }
        centers.push(parse_num::<f64>(fields[0].trim(), "bin_center", &loc)?);
        density.push(parse_num::<f64>(fields[1].trim(), "density", &loc)?);
        errors.push(parse_num::<f64>(fields[2].trim(), "error", &loc)?);
    }
    let missing = |k: &str| Error::format(format!("line {last_line}"), format!("missing header {k}"));
    let t = t.ok_or_else(|| missing("t_us"))?;
    let mass0 = mass0.ok_or_else(|| missing("mass0"))?;
    let mass1 = mass1.ok_or_else(|| missing("mass1"))?;
    let boundary_errors = match (e0, e1) {
        (Some(a), Some(b)) => Some([a, b]),
        (None, None) => None,
        _ => return Err(missing("mass0_err and mass1_err together")),
    };
    if centers.is_empty() {
        return Err(Error::format(format!("line {last_line}"), "no bins"));
    }
    let binning = Binning {
        n_bins: centers.len(),
        bin_width: 2.0 * centers[0],
    };
    for (k, c) in centers.iter().enumerate() {
        if *c != binning.center(k) {
            return Err(Error::format(
                format!("data row {}", k + 1),
                format!("bin centre {c} is not on the grid of width {}", binning.bin_width),
            ));
        }
    }
    binning
        .validate()
        .map_err(|e| Error::format("bins", e.to_string()))?;
    Ok(DistributionSnapshot {
        binning,
        t,
        density,
        errors,
        mass0,
        mass1,
        boundary_errors,
    })
}

/// One `[[slice]]` table of a fit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceReport {
    pub t_us: f64,
    pub tau_best: f64,
    pub chi2_min: f64,
    pub tau_err_dchi2_100: f64,
    pub tau_err_dchi2_1: f64,
    pub n_bins: usize,
    pub min_at_edge: bool,
    pub open_ended_100: bool,
    pub open_ended_1: bool,
}

impl From<&FitResult> for SliceReport {
    fn from(f: &FitResult) -> Self {
        SliceReport {
            t_us: f.t,
            tau_best: f.tau_best,
            chi2_min: f.chi2_min,
            tau_err_dchi2_100: f.tau_err_dchi2_100,
            tau_err_dchi2_1: f.tau_err_dchi2_1,
            n_bins: f.n_bins,
            min_at_edge: f.flags.min_at_edge,
            open_ended_100: f.flags.open_ended_100,
            open_ended_1: f.flags.open_ended_1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub slice: Vec<SliceReport>,
}

impl FitReport {
    pub fn from_results(results: &[FitResult]) -> Self {
        FitReport {
            slice: results.iter().map(SliceReport::from).collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("fit report", e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "fit report".into());
            Error::format(at, e.message().to_string())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_binary_reports_offset() {
        let bytes = b"QTRJREC1\x01\x00\x00\x00\x05";
        let err = parse_records(bytes).unwrap_err().to_string();
        assert!(err.contains("byte 12"), "{err}");
    }

    #[test]
    fn bad_text_row_reports_line() {
        let text = "# n_traj=2,n_steps=2,dt_us=0.5,i0=1,i1=-1,sigma=1,t1_us=inf,x0=0.5,master_seed=3\n1,2\n3,x\n";
        let err = parse_records(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn histogram_requires_headers() {
        let err = parse_histogram("# t_us=1\n0.005,1,0\n").unwrap_err().to_string();
        assert!(err.contains("mass0"), "{err}");
    }
}
